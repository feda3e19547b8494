"""Randomized grouped naming and counting.

Every node estimates the network size, derives the same global schedule from
the estimate, draws an identifier and a group, and waits for its group's
period. Inside a period the group runs DETNAML with a watch season so the
holder of the group's last label can recognise itself; that node then beeps
its label bit by bit to the next group, which adds it to its own labels. In
counting mode the last node of the last group broadcasts the final label to
everyone at a slot all nodes agree on.
"""

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import gammaln

from src.models.detnaml import NamingSession, SeasonLayout
from src.utils.codeword import NodeIdentity, cid_width, decode_label, encode_cid, sample_ids
from src.utils.engine import (
    ApproxMode,
    ChannelOutcome,
    Failure,
    FailurePolicy,
    Intent,
    Protocol,
    SimConfig,
    SlotAction,
    node_rng,
    run,
    run_rng,
)

EMPTY_GROUP = "empty group"

APPROX_STREAM = 0

# floor on the identifier upper bound so code-words have at least five bits
MIN_UPPER_BOUND = 16

APPROX, NAMING, HANDOFF, COUNT = "approx", "naming", "handoff", "count"


@dataclass(frozen=True)
class Approximation:
    u: float

    @property
    def upper_bound(self):
        if isinstance(self.u, int):
            return max((2 * self.u) ** 2, MIN_UPPER_BOUND)
        return max(math.ceil((2 * self.u) ** 2), MIN_UPPER_BOUND)

    @property
    def charge(self):
        """Awake slots every node spends in the approximation phase, ceil(log2 N)."""
        return (self.upper_bound - 1).bit_length()


def approximate_size(n_true, rng, mode=ApproxMode.EXACT):
    """
    Stand-in for a size-approximation protocol: returns u with n/2 <= u <= 2n.

    n_true (int): the real number of nodes
    rng (np.random.Generator): run-level stream, only used in jittered mode
    mode (ApproxMode): exact gives u = n, jittered draws u uniformly
    """
    if n_true < 1:
        raise ValueError(f"Node count must be at least 1, got {n_true}")
    if mode is ApproxMode.EXACT:
        return Approximation(int(n_true))
    return Approximation(float(rng.uniform(n_true / 2, 2 * n_true)))


@dataclass(frozen=True)
class Schedule:
    u: float
    upper_bound: int
    group_count: int
    bit_count: int
    season_length: int
    naming_seasons: int
    watch_seasons: int
    handoff_length: int
    period_length: int
    origin: int
    counting_slot: int

    @property
    def naming_length(self):
        return (self.naming_seasons + self.watch_seasons) * self.season_length

    def period_start(self, period):
        return self.origin + (period - 1) * self.period_length

    def handoff_start(self, period):
        return self.period_start(period) + self.naming_length

    def locate(self, slot):
        """(phase, period, offset within the phase) of an absolute slot."""
        if slot < self.origin:
            return APPROX, 0, slot
        if slot >= self.counting_slot:
            return COUNT, self.group_count, slot - self.counting_slot

        period, offset = divmod(slot - self.origin, self.period_length)
        if offset < self.naming_length:
            return NAMING, period + 1, offset
        return HANDOFF, period + 1, offset - self.naming_length


def build_schedule(approx):
    upper_bound = approx.upper_bound
    two_u = 2 * approx.u
    group_count = max(1, math.ceil(two_u / max(1.0, math.log2(two_u))))

    bit_count = cid_width(upper_bound)
    season_length = 2 * bit_count
    naming_seasons = math.ceil(2 * math.log2(upper_bound))
    watch_seasons = 1
    handoff_length = bit_count
    period_length = (naming_seasons + watch_seasons) * season_length + handoff_length
    origin = approx.charge

    return Schedule(
        u=approx.u,
        upper_bound=upper_bound,
        group_count=group_count,
        bit_count=bit_count,
        season_length=season_length,
        naming_seasons=naming_seasons,
        watch_seasons=watch_seasons,
        handoff_length=handoff_length,
        period_length=period_length,
        origin=origin,
        counting_slot=origin + group_count * period_length,
    )


def assign_nodes(n_true, seed, mode=ApproxMode.EXACT):
    """
    Draws what every node decides before period 1: the shared schedule, an
    identifier and a group per node, each node from its own stream.

    Returns the schedule and one NodeIdentity per node with its group set.
    """
    approx = approximate_size(n_true, run_rng(seed, APPROX_STREAM), mode)
    schedule = build_schedule(approx)

    nodes = []
    for node in range(n_true):
        rng = node_rng(seed, node)
        identity = sample_ids(1, schedule.upper_bound, rng)[0]
        nodes.append(replace(identity, group=int(rng.integers(1, schedule.group_count + 1))))
    return schedule, nodes


def group_occupancy(n_true, seed, mode=ApproxMode.EXACT):
    """Group sizes of one draw, without running the slot loop."""
    schedule, nodes = assign_nodes(n_true, seed, mode)
    sizes = np.bincount([identity.group for identity in nodes], minlength=schedule.group_count + 1)[1:]
    return {
        "group_count": schedule.group_count,
        "max_group_size": int(sizes.max()),
        "empty_groups": int((sizes == 0).sum()),
        "size_limit": 2 * math.log2(schedule.upper_bound),
    }


def _filled_probability(n_true, group_count):
    """Chance that groups 2..group_count all receive a node when n_true nodes pick uniformly."""
    i = np.arange(group_count)
    log_terms = gammaln(group_count) - gammaln(i + 1) - gammaln(group_count - i) + n_true * np.log1p(-i / group_count)
    signs = np.where(i % 2, -1.0, 1.0)
    return float(np.clip(np.sum(signs * np.exp(log_terms)), 0.0, 1.0))


def failure_free_probability(n_true, counting=False):
    """
    Probability that an exact-mode run over n_true nodes reports no empty
    group. Naming only fails when an empty group sits below an occupied one;
    counting also needs the last group occupied. Duplicate identifiers
    inside a group and oversized groups are rare enough to ignore.
    """
    group_count = build_schedule(Approximation(int(n_true))).group_count
    if counting:
        return _filled_probability(n_true, group_count)

    # split on the highest occupied group
    total = 0.0
    for top in range(1, group_count + 1):
        weight = math.exp(n_true * math.log(top / group_count))
        if weight > 0.0:
            total += weight * _filled_probability(n_true, top)
    return min(total, 1.0)


def handoff_bits(label, schedule):
    """Beep pattern of a handoff or count broadcast, most significant bit first."""
    return encode_cid(label, schedule.handoff_length).bits


class RandNamingProtocol(Protocol):
    def __init__(self, n_true, seed=0, mode=ApproxMode.EXACT, counting=False, layout=None):
        if layout is None:
            schedule, nodes = assign_nodes(n_true, seed, mode)
        else:
            schedule, nodes = self._from_layout(n_true, seed, mode, layout)
        self.schedule = schedule
        self.nodes = nodes
        self.ids = [identity.id for identity in nodes]
        self.groups = [identity.group for identity in nodes]
        self.counting = counting
        self.node_count = n_true

        self.members = {k: [] for k in range(1, schedule.group_count + 1)}
        for node, group in enumerate(self.groups):
            self.members[group].append(node)

        self.layout = SeasonLayout(schedule.bit_count)
        self.codewords = {node: identity.codeword for node, identity in enumerate(nodes)}
        self.sessions = {}
        self.offsets = [0] * n_true
        self.last_of_group = {}
        self.counts = {}
        self._window = []

        sizes = [len(m) for m in self.members.values()]
        logging.debug(
            f"n={n_true}: u={schedule.u}, N={schedule.upper_bound}, {schedule.group_count} groups, "
            f"largest {max(sizes)}, {sizes.count(0)} empty"
        )

    @staticmethod
    def _from_layout(n_true, seed, mode, layout):
        if len(layout) != n_true:
            raise ValueError(f"Layout lists {len(layout)} nodes but n is {n_true}")
        schedule = build_schedule(approximate_size(n_true, run_rng(seed, APPROX_STREAM), mode))
        nodes = []
        for identifier, group in layout:
            if not 1 <= identifier <= schedule.upper_bound:
                raise ValueError(f"Identifier {identifier} outside {{1..{schedule.upper_bound}}}")
            if not 1 <= group <= schedule.group_count:
                raise ValueError(f"Group {group} outside {{1..{schedule.group_count}}}")
            codeword = encode_cid(int(identifier), schedule.bit_count)
            nodes.append(NodeIdentity(id=int(identifier), codeword=codeword, group=int(group)))
        return schedule, nodes


    @property
    def total_slots(self):
        return self.schedule.counting_slot + (self.schedule.handoff_length if self.counting else 0)

    def label_of(self, node):
        session = self.sessions.get(self.groups[node])
        if session is None or node not in session.labels:
            return None
        return session.labels[node] + self.offsets[node]

    def _session(self, period):
        if period not in self.sessions and self.members[period]:
            self.sessions[period] = NamingSession(
                self.members[period],
                self.codewords,
                self.layout,
                origin=self.schedule.period_start(period),
                max_seasons=self.schedule.naming_seasons,
                watch=True,
            )
        return self.sessions.get(period)

    def _sender(self, period):
        if period >= self.schedule.group_count:
            return None
        return self.last_of_group.get(period)

    def next_active_slot(self, slot):
        schedule = self.schedule
        while slot < self.total_slots:
            phase, period, _ = schedule.locate(slot)

            if phase == APPROX:
                return slot

            if phase == NAMING:
                session = self._session(period)
                active = session.next_active_slot(slot) if session is not None else None
                if active is not None:
                    return active
                slot = schedule.handoff_start(period)
                continue

            if phase == HANDOFF:
                if period < schedule.group_count and (self._sender(period) is not None or self.members[period + 1]):
                    return slot
                slot = schedule.period_start(period + 1)
                continue

            return slot
        return None

    def intents(self, slot):
        phase, period, offset = self.schedule.locate(slot)

        if phase == APPROX:
            return [Intent(node, SlotAction.LISTEN) for node in range(self.node_count)]

        if phase == NAMING:
            return self.sessions[period].intents(slot)

        if phase == HANDOFF:
            if offset == 0:
                self._window = []
            intents = []
            sender = self._sender(period)
            if sender is not None and handoff_bits(self.label_of(sender), self.schedule)[offset]:
                intents.append(Intent(sender, SlotAction.BEEP))
            intents.extend(Intent(node, SlotAction.LISTEN) for node in self.members[period + 1])
            return intents

        if offset == 0:
            self._window = []
        broadcaster = self.last_of_group.get(self.schedule.group_count)
        intents = []
        for node in range(self.node_count):
            if node != broadcaster:
                intents.append(Intent(node, SlotAction.LISTEN))
            elif handoff_bits(self.label_of(node), self.schedule)[offset]:
                intents.append(Intent(node, SlotAction.BEEP))
        return intents

    def observe(self, slot, outcomes):
        phase, period, offset = self.schedule.locate(slot)

        if phase == APPROX:
            return []

        if phase == NAMING:
            session = self.sessions[period]
            failures = session.observe(slot, outcomes)
            if session.last is not None:
                self.last_of_group[period] = session.last
            return failures

        heard = any(outcome is ChannelOutcome.BEEP_HEARD for outcome in outcomes.values())
        self._window.append(1 if heard else 0)
        if offset < self.schedule.handoff_length - 1:
            return []

        value = decode_label(self._window)
        if phase == HANDOFF:
            return self._receive_handoff(slot, period, value)
        return self._receive_count(slot, value)

    def _receive_handoff(self, slot, period, value):
        receivers = self.members[period + 1]
        for node in receivers:
            self.offsets[node] = value
        if receivers and value == 0 and period >= 2:
            return [Failure(EMPTY_GROUP, slot, receivers[0], f"group {period + 1} decoded 0 from group {period}")]
        return []

    def _receive_count(self, slot, value):
        last_group = self.schedule.group_count
        broadcaster = self.last_of_group.get(last_group)
        for node in range(self.node_count):
            self.counts[node] = self.label_of(node) if node == broadcaster else value
        if broadcaster is None:
            return [Failure(EMPTY_GROUP, slot, None, f"group {last_group} has no member to broadcast the count")]
        return []

    def labels(self):
        labels = {}
        for session in self.sessions.values():
            for node, local in session.labels.items():
                labels[node] = local + self.offsets[node]
        return labels

    def describe(self, slot, node):
        phase, period, _ = self.schedule.locate(slot)
        if phase == NAMING and self.groups[node] == period:
            state = self.sessions[period].describe(slot, node)
            state["period"] = period
            state["label"] = self.label_of(node)
            return state
        return {"period": period if phase in (NAMING, HANDOFF) else None, "label": self.label_of(node)}

    def summary(self):
        schedule = self.schedule
        sizes = [len(self.members[k]) for k in range(1, schedule.group_count + 1)]
        summary = {
            "u": schedule.u,
            "upper_bound": schedule.upper_bound,
            "group_count": schedule.group_count,
            "season_length": schedule.season_length,
            "naming_seasons": schedule.naming_seasons,
            "handoff_length": schedule.handoff_length,
            "period_length": schedule.period_length,
            "approx_charge": schedule.origin,
            "counting_slot": schedule.counting_slot,
            "asymptotic_count_bound": math.ceil(8 * self.node_count * math.log2(schedule.upper_bound)),
            "ids": list(self.ids),
            "groups": list(self.groups),
            "group_sizes": sizes,
            "max_group_size": max(sizes),
            "last_of_group": dict(self.last_of_group),
        }
        if self.counting:
            summary["counts"] = dict(self.counts)
        return summary


def _run_grouped(protocol_name, n_true, seed, mode, trace_path, failure_policy, layout):
    protocol = RandNamingProtocol(n_true, seed, mode, counting=protocol_name == "count", layout=layout)
    config = SimConfig(
        node_count=n_true,
        seed=seed,
        protocol=protocol_name,
        approx_mode=mode,
        trace_path=trace_path,
        failure_policy=failure_policy,
    )
    return run(config, protocol)


def randnaml_run(
    n_true,
    seed=0,
    mode=ApproxMode.EXACT,
    trace_path=None,
    failure_policy=FailurePolicy.RECORD,
    layout=None,
):
    """
    Names n nodes with the randomized grouped algorithm.

    n_true (int): number of nodes
    seed (int): root of every random stream in the run
    mode (ApproxMode): how the size estimate u is produced
    trace_path (str): optional path of the TSV event trace
    failure_policy (FailurePolicy): halt on the first failure or record it
    layout (Sequence[Tuple[int, int]]): optional fixed (id, group) per node
    """
    return _run_grouped("randnaml", n_true, seed, mode, trace_path, failure_policy, layout)


def counting_run(
    n_true,
    seed=0,
    mode=ApproxMode.EXACT,
    trace_path=None,
    failure_policy=FailurePolicy.RECORD,
    layout=None,
):
    """Grouped naming followed by the count broadcast, extras["counts"] holds every node's count."""
    return _run_grouped("count", n_true, seed, mode, trace_path, failure_policy, layout)
