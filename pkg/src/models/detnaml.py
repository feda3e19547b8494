"""Deterministic naming in the beeping model.

A season is one elimination tournament over the code-words of the unlabeled
nodes, one TEST per bit. The node with the largest identifier survives every
TEST and takes the season index as its label. DETNAML lets a node sleep
through most of the tournament: after the first season it only wakes at its
STL (the pair where it was last eliminated) and at its STN slots (the pairs
where it eliminated someone), then keeps testing while it remains a candidate.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Set

from src.utils.codeword import Codeword, cid_width, encode_cid, sample_distinct_ids
from src.utils.engine import (
    ApproxMode,
    ChannelOutcome,
    Charge,
    Failure,
    FailurePolicy,
    Intent,
    Protocol,
    SimConfig,
    SlotAction,
    run,
    run_rng,
)

# out-of-band STL marker set when a node eliminates someone; never equals 2*i
SENTINEL = -2

DUPLICATE_LABEL = "duplicate label"
GROUP_OVERFLOW = "group overflow"

ID_STREAM = 1


def draw_ids(count, upper_bound, seed):
    """Distinct identifiers for a DETNAML run, reproducible from the seed."""
    return [identity.id for identity in sample_distinct_ids(count, upper_bound, run_rng(seed, ID_STREAM))]


class Status(Enum):
    NULL = "NULL"
    CANDIDATE = "CANDIDATE"
    ELIMINATED = "ELIMINATED"
    ELIMINATOR = "ELIMINATOR"


@dataclass
class NamingState:
    codeword: Codeword
    status: Status = Status.NULL
    stl: Optional[int] = None
    stn: Set[int] = field(default_factory=set)
    label: Optional[int] = None
    season: int = 1


@dataclass(frozen=True)
class SeasonLayout:
    bit_count: int

    @classmethod
    def for_bound(cls, upper_bound):
        return cls(cid_width(upper_bound))

    @property
    def season_length(self):
        return 2 * self.bit_count


def test_actions(bit):
    """Actions at (t_2i, t_2i+1) for a node whose code-word bit is bit."""
    if bit == 0:
        return SlotAction.BEEP, SlotAction.LISTEN
    return SlotAction.LISTEN, SlotAction.BEEP


# not a pytest test function
test_actions.__test__ = False


def test(bit, outcomes):
    """
    Result of one TEST from what the node heard across the slot pair.

    bit (int): the node's code-word bit for this pair
    outcomes (tuple): outcome at t_2i and at t_2i+1, None where the node beeped
    """
    if bit == 0:
        heard = outcomes[1]
        return Status.ELIMINATED if heard is ChannelOutcome.BEEP_HEARD else Status.CANDIDATE
    heard = outcomes[0]
    return Status.ELIMINATOR if heard is ChannelOutcome.BEEP_HEARD else Status.CANDIDATE


test.__test__ = False


def wake_charge(state, pair, season):
    """Ledger category of the TEST at pair, or None when the node sleeps through it."""
    if state.label is not None:
        return None
    if state.status is Status.CANDIDATE:
        return Charge.OTHER
    if state.status is not Status.NULL:
        return None

    slot = 2 * pair
    if slot in state.stn:
        return Charge.STN
    if state.stl == slot:
        return Charge.STL
    if season == 1:
        return Charge.OTHER
    return None


def should_wake(state, pair, season):
    return wake_charge(state, pair, season) is not None


def apply(state, pair, result):
    """Bookkeeping after the TEST at pair. Updates state in place and returns it."""
    slot = 2 * pair
    if result is Status.CANDIDATE:
        state.stn.discard(slot)
        if state.codeword[pair] == 0:
            state.stl = None
        state.status = Status.CANDIDATE
    elif result is Status.ELIMINATED:
        state.stl = slot
        state.status = Status.ELIMINATED
    elif result is Status.ELIMINATOR:
        state.stn.add(slot)
        state.stl = SENTINEL
        state.status = Status.CANDIDATE
    else:
        raise ValueError(f"TEST cannot produce status {result}")
    return state


def season_end(states):
    """
    Closes the current season: every unlabeled CANDIDATE takes the season
    index as its label and every other unlabeled node goes back to NULL.

    Returns the positions in states of the nodes labelled this season.
    """
    newly_labeled = []
    for position, state in enumerate(states):
        if state.label is not None:
            continue
        if state.status is Status.CANDIDATE:
            state.label = state.season
            newly_labeled.append(position)
        else:
            state.status = Status.NULL
            state.season += 1
    return newly_labeled


class NamingSession:
    """
    DETNAML for a fixed set of nodes whose seasons start at an absolute slot.

    With watch=True a node labelled in season j listens through all of season
    j+1 and learns it holds the last label if it hears nothing. With
    always_awake=True every unlabeled node tests every pair until it is
    eliminated, which is the energy-inefficient reference behaviour.
    """

    def __init__(self, members, codewords, layout, origin=0, max_seasons=None, watch=False, always_awake=False):
        self.members = list(members)
        self.layout = layout
        self.origin = origin
        self.max_seasons = len(self.members) if max_seasons is None else max_seasons
        self.watch = watch
        self.always_awake = always_awake

        self.states = {node: NamingState(codeword=codewords[node]) for node in self.members}
        self.labels = {}
        self.label_season = {}
        self.dropped = []
        self.last = None
        self.seasons_elapsed = 0

        self._unlabeled = list(self.members)
        self._awake = {}
        self._first_outcome = {}
        self._watchers = {}

    @property
    def season_length(self):
        return self.layout.season_length

    @property
    def end_slot(self):
        seasons = self.max_seasons + (1 if self.watch else 0)
        return self.origin + seasons * self.season_length

    @property
    def done(self):
        return not self._unlabeled and not self._watchers

    def locate(self, slot):
        """(season, pair, phase) of an absolute slot."""
        offset = slot - self.origin
        season = offset // self.season_length + 1
        in_season = offset % self.season_length
        return season, in_season // 2, in_season % 2

    def _charge(self, state, pair, season):
        if self.always_awake:
            return None if state.status is Status.ELIMINATED else Charge.OTHER
        return wake_charge(state, pair, season)

    def next_active_slot(self, slot):
        """
        First slot >= slot in which some member is awake. Pairs where every
        member sleeps are skipped, but the last pair of a season is always
        returned so the season closes.
        """
        if self.done:
            return None
        slot = max(slot, self.origin)
        last_pair = self.layout.bit_count - 1
        while slot < self.end_slot:
            season, pair, phase = self.locate(slot)
            if phase == 1 or self._watchers or pair == last_pair:
                return slot
            if any(self._charge(self.states[node], pair, season) is not None for node in self._unlabeled):
                return slot
            slot += 2
        return None

    def intents(self, slot):
        season, pair, phase = self.locate(slot)

        if phase == 0:
            self._awake = {}
            self._first_outcome = {}
            for node in self._unlabeled:
                charge = self._charge(self.states[node], pair, season)
                if charge is not None:
                    self._awake[node] = charge

        intents = []
        for node, charge in self._awake.items():
            action = test_actions(self.states[node].codeword[pair])[phase]
            intents.append(Intent(node, action, charge))
        for node in self._watchers:
            intents.append(Intent(node, SlotAction.LISTEN, Charge.OTHER))
        return intents

    def observe(self, slot, outcomes):
        season, pair, phase = self.locate(slot)

        for node in self._watchers:
            if outcomes.get(node) is ChannelOutcome.BEEP_HEARD:
                self._watchers[node] = True

        if phase == 0:
            for node in self._awake:
                self._first_outcome[node] = outcomes.get(node)
            return []

        for node in self._awake:
            state = self.states[node]
            result = test(state.codeword[pair], (self._first_outcome.get(node), outcomes.get(node)))
            apply(state, pair, result)

        if pair == self.layout.bit_count - 1:
            return self._close_season(slot, season)
        return []

    def _close_season(self, slot, season):
        failures = []
        self._awake = {}

        for node, heard in self._watchers.items():
            if not heard:
                self.last = node
        self._watchers = {}

        newly = [self._unlabeled[p] for p in season_end([self.states[n] for n in self._unlabeled])]
        for node in newly:
            self.labels[node] = season
            self.label_season[node] = season
        self._unlabeled = [n for n in self._unlabeled if n not in self.labels]
        self.seasons_elapsed = season

        if len(newly) > 1:
            failures.append(
                Failure(DUPLICATE_LABEL, slot, newly[1], f"nodes {newly} all took label {season}")
            )

        if self.watch:
            self._watchers = {node: False for node in newly}
        elif newly and not self._unlabeled:
            self.last = newly[-1]

        if self._unlabeled and season >= self.max_seasons:
            self.dropped = list(self._unlabeled)
            failures.append(
                Failure(
                    GROUP_OVERFLOW,
                    slot + 1,
                    self.dropped[0],
                    f"{len(self.dropped)} nodes still unlabeled after {season} seasons",
                )
            )
            self._unlabeled = []
        return failures

    def describe(self, slot, node):
        state = self.states[node]
        season, _, _ = self.locate(slot)
        return {
            "season": season,
            "status": state.status.value,
            "stl": state.stl,
            "stn": tuple(state.stn),
            "label": state.label,
        }


class DetNamingProtocol(Protocol):
    """One naming session over M nodes starting at slot 0."""

    def __init__(self, ids, upper_bound, always_awake=False, watch=False, max_seasons=None):
        self.layout = SeasonLayout.for_bound(upper_bound)
        self.upper_bound = upper_bound
        self.ids = [int(i) for i in ids]
        for identifier in self.ids:
            if not 1 <= identifier <= upper_bound:
                raise ValueError(f"Identifier {identifier} outside {{1..{upper_bound}}}")

        self.node_count = len(self.ids)
        codewords = {node: encode_cid(i, self.layout.bit_count) for node, i in enumerate(self.ids)}
        self.session = NamingSession(
            range(self.node_count),
            codewords,
            self.layout,
            max_seasons=max_seasons,
            watch=watch,
            always_awake=always_awake,
        )

    @property
    def total_slots(self):
        return self.session.seasons_elapsed * self.layout.season_length

    def next_active_slot(self, slot):
        return self.session.next_active_slot(slot)

    def intents(self, slot):
        return self.session.intents(slot)

    def observe(self, slot, outcomes):
        return self.session.observe(slot, outcomes)

    def labels(self):
        return dict(self.session.labels)

    def describe(self, slot, node):
        return self.session.describe(slot, node)

    def summary(self):
        return {
            "ids": list(self.ids),
            "upper_bound": self.upper_bound,
            "bit_count": self.layout.bit_count,
            "season_length": self.layout.season_length,
            "label_season": dict(self.session.label_season),
            "last": self.session.last,
            "dropped": list(self.session.dropped),
        }


def _run_naming(protocol_name, ids, upper_bound, seed, trace_path, failure_policy, **protocol_kwargs):
    protocol = DetNamingProtocol(ids, upper_bound, **protocol_kwargs)
    config = SimConfig(
        node_count=protocol.node_count,
        seed=seed,
        protocol=protocol_name,
        approx_mode=ApproxMode.EXACT,
        trace_path=trace_path,
        failure_policy=failure_policy,
    )
    report = run(config, protocol)
    logging.debug(f"{protocol_name}: labelled {len(report.labels)} of {protocol.node_count} nodes")
    return report


def detnaml_run(ids, upper_bound, seed=0, trace_path=None, failure_policy=FailurePolicy.RECORD):
    """
    Names M nodes with the energy-efficient deterministic algorithm.

    ids (Sequence[int]): node identifiers in {1..N}, node i holds ids[i]
    upper_bound (int): identifier upper bound N
    seed (int): recorded in the report, the algorithm itself is deterministic
    trace_path (str): optional path of the TSV event trace
    failure_policy (FailurePolicy): halt on the first failure or record it
    """
    return _run_naming("detnaml", ids, upper_bound, seed, trace_path, failure_policy)


def reference_detnaml_run(ids, upper_bound, seed=0, trace_path=None, failure_policy=FailurePolicy.RECORD):
    """Same tournament with every unlabeled node awake until it is eliminated."""
    return _run_naming("reference", ids, upper_bound, seed, trace_path, failure_policy, always_awake=True)


def modified_detnaml(
    ids,
    upper_bound,
    max_seasons=None,
    seed=0,
    trace_path=None,
    failure_policy=FailurePolicy.RECORD,
):
    """
    DETNAML for one group with the last-label watch season. The report's
    extras["last"] is the node that heard silence through its watch season.
    """
    return _run_naming(
        "modified",
        ids,
        upper_bound,
        seed,
        trace_path,
        failure_policy,
        watch=True,
        max_seasons=max_seasons,
    )
