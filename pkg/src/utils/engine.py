"""Synchronous slot loop for single-hop beeping networks.

Protocols plug in through :class:`Protocol`. The engine asks for the next slot
in which anyone is awake, collects one action per awake node, resolves the
OR-channel, charges the energy ledger and hands the outcomes back.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional

import numpy as np


class SlotAction(Enum):
    BEEP = "BEEP"
    LISTEN = "LISTEN"
    SLEEP = "SLEEP"


class ChannelOutcome(Enum):
    BEEP_HEARD = "BEEP_HEARD"
    SILENCE = "SILENCE"


class Charge(Enum):
    """Ledger category an awake slot is billed to."""

    STL = "stl"
    STN = "stn"
    OTHER = "other"


class FailurePolicy(Enum):
    HALT = "halt"
    RECORD = "record-and-continue"


class ApproxMode(Enum):
    EXACT = "exact"
    JITTERED = "jittered"


PROTOCOLS = ("detnaml", "reference", "modified", "randnaml", "count")

# spawn-key roots for the two kinds of random streams
RUN_STREAM = 0
NODE_STREAM = 1


def run_rng(seed, purpose):
    """Run-level stream, e.g. the size approximation or ID sampling for DETNAML."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(RUN_STREAM, purpose)))


def node_rng(seed, node):
    """Per-node stream, independent of the order nodes are visited in."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(NODE_STREAM, node)))


@dataclass(frozen=True)
class SimConfig:
    node_count: int
    seed: int = 0
    protocol: str = "detnaml"
    approx_mode: ApproxMode = ApproxMode.EXACT
    trace_path: Optional[str] = None
    failure_policy: FailurePolicy = FailurePolicy.RECORD

    def __post_init__(self):
        if self.node_count < 0:
            raise ValueError(f"Node count must be nonnegative, got {self.node_count}")
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"Seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"Unknown protocol {self.protocol!r}, expected one of {PROTOCOLS}")


@dataclass(frozen=True)
class Intent:
    node: int
    action: SlotAction
    charge: Charge = Charge.OTHER


@dataclass(frozen=True)
class Failure:
    kind: str
    slot: int
    node: Optional[int] = None
    detail: str = ""

    def __str__(self):
        where = f"slot {self.slot}" if self.node is None else f"slot {self.slot}, node {self.node}"
        return f"{self.kind} at {where}: {self.detail}" if self.detail else f"{self.kind} at {where}"


class ProtocolFailure(RuntimeError):
    def __init__(self, failure):
        super().__init__(str(failure))
        self.failure = failure


def resolve_channel(actions):
    """
    It takes the action of every awake node in one slot and returns what each
    listener hears. Beeping and sleeping nodes receive nothing.

    actions (Mapping[int, SlotAction]): node -> action for this slot
    """
    # a listener is never a beeper, so any beep comes from another node
    heard = ChannelOutcome.BEEP_HEARD if any(a is SlotAction.BEEP for a in actions.values()) else ChannelOutcome.SILENCE
    return {node: heard for node, action in actions.items() if action is SlotAction.LISTEN}


class EnergyLedger:
    """Per-node awake-slot counts, split by wake-up cause."""

    def __init__(self, node_count):
        self.node_count = node_count
        self.beep_count = np.zeros(node_count, dtype=np.int64)
        self.listen_count = np.zeros(node_count, dtype=np.int64)
        self.w_stl = np.zeros(node_count, dtype=np.int64)
        self.w_stn = np.zeros(node_count, dtype=np.int64)
        self.w_other = np.zeros(node_count, dtype=np.int64)
        self.total_slots = 0
        self.max_awake = 0

    @property
    def awake(self):
        return self.beep_count + self.listen_count

    def charge(self, node, action, charge=Charge.OTHER):
        if action is SlotAction.BEEP:
            self.beep_count[node] += 1
        elif action is SlotAction.LISTEN:
            self.listen_count[node] += 1
        else:
            return

        if charge is Charge.STL:
            self.w_stl[node] += 1
        elif charge is Charge.STN:
            self.w_stn[node] += 1
        else:
            self.w_other[node] += 1

    def finalize(self, total_slots):
        self.total_slots = int(total_slots)
        self.max_awake = int(self.awake.max()) if self.node_count else 0

    def breakdown(self):
        if not self.node_count:
            return {"max_w_stl": 0, "max_w_stn": 0, "max_w_other": 0}
        return {
            "max_w_stl": int(self.w_stl.max()),
            "max_w_stn": int(self.w_stn.max()),
            "max_w_other": int(self.w_other.max()),
        }


ABSENT = "-"

TRACE_FIELDS = ("slot", "season", "period", "node", "action", "outcome", "status", "stl", "stn", "label")


def _field(value):
    return ABSENT if value is None else str(value)


@dataclass(frozen=True)
class TraceEvent:
    slot: int
    season: Optional[int]
    period: Optional[int]
    node: int
    action: str
    outcome: Optional[str]
    status: Optional[str]
    stl: Optional[int]
    stn: Optional[tuple]
    label: Optional[int]

    def to_line(self):
        stn = ABSENT if self.stn is None else ",".join(str(s) for s in self.stn)
        parts = [
            str(self.slot),
            _field(self.season),
            _field(self.period),
            str(self.node),
            self.action,
            _field(self.outcome),
            _field(self.status),
            _field(self.stl),
            stn if stn else ABSENT,
            _field(self.label),
        ]
        return "\t".join(parts)

    @classmethod
    def from_line(cls, line):
        parts = line.rstrip("\n").split("\t")
        if len(parts) != len(TRACE_FIELDS):
            raise ValueError(f"Malformed trace line: {line!r}")

        def opt_int(text):
            return None if text == ABSENT else int(text)

        def opt_str(text):
            return None if text == ABSENT else text

        stn = () if parts[8] == ABSENT else tuple(int(s) for s in parts[8].split(","))
        return cls(
            slot=int(parts[0]),
            season=opt_int(parts[1]),
            period=opt_int(parts[2]),
            node=int(parts[3]),
            action=parts[4],
            outcome=opt_str(parts[5]),
            status=opt_str(parts[6]),
            stl=opt_int(parts[7]),
            stn=stn,
            label=opt_int(parts[9]),
        )


class TraceWriter:
    def __init__(self, path):
        self.path = path
        self._handle = None

    def __enter__(self):
        self._handle = open(self.path, "w")
        return self

    def __exit__(self, *exc):
        self._handle.close()

    def write(self, event):
        self._handle.write(event.to_line() + "\n")


def read_trace(path):
    with open(path) as handle:
        return [TraceEvent.from_line(line) for line in handle if line.strip()]


class Protocol:
    """
    A per-node state machine driven by the engine one slot at a time.
    Subclasses set node_count and implement every method that raises here.
    """

    node_count = 0

    @property
    def total_slots(self):
        """Schedule end, read once the slot loop has finished."""
        raise NotImplementedError

    def next_active_slot(self, slot):
        """First slot >= slot that needs the engine, or None once the schedule is over."""
        raise NotImplementedError

    def intents(self, slot):
        """Actions of the awake nodes, every other node sleeps."""
        raise NotImplementedError

    def observe(self, slot, outcomes):
        """Deliver listener outcomes, returning any failure the slot revealed."""
        raise NotImplementedError

    def labels(self):
        raise NotImplementedError

    def describe(self, slot, node):
        """Trace columns after the slot: season, period, status, stl, stn, label."""
        return {}

    def summary(self):
        return {}


@dataclass
class RunReport:
    config: SimConfig
    labels: Dict[int, int]
    ledger: EnergyLedger
    failures: List[Failure] = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    @property
    def total_slots(self):
        return self.ledger.total_slots

    @property
    def max_awake(self):
        return self.ledger.max_awake

    @property
    def failure_free(self):
        return not self.failures

    @property
    def failure_kinds(self):
        return sorted({f.kind for f in self.failures})

    def summary(self):
        row = {
            "protocol": self.config.protocol,
            "nodes": self.config.node_count,
            "seed": self.config.seed,
            "total_slots": self.total_slots,
            "max_awake": self.max_awake,
        }
        row.update(self.ledger.breakdown())
        row["failures"] = ";".join(self.failure_kinds)
        return row


def _trace_event(protocol, slot, intent, outcome):
    state = protocol.describe(slot, intent.node)
    stn = state.get("stn")
    return TraceEvent(
        slot=slot,
        season=state.get("season"),
        period=state.get("period"),
        node=intent.node,
        action=intent.action.value,
        outcome=None if outcome is None else outcome.value,
        status=state.get("status"),
        stl=state.get("stl"),
        stn=None if stn is None else tuple(sorted(stn)),
        label=state.get("label"),
    )


def _step(protocol, slot, ledger):
    intents = protocol.intents(slot)
    actions = {}
    for intent in intents:
        if intent.node in actions:
            raise ValueError(f"Node {intent.node} issued two actions in slot {slot}")
        actions[intent.node] = intent.action

    outcomes = resolve_channel(actions)
    for intent in intents:
        ledger.charge(intent.node, intent.action, intent.charge)

    failures = protocol.observe(slot, outcomes)
    return intents, outcomes, failures


def _loop(config, protocol, ledger, failures, writer):
    slot = protocol.next_active_slot(0)
    while slot is not None:
        intents, outcomes, new_failures = _step(protocol, slot, ledger)

        if writer is not None:
            for intent in intents:
                writer.write(_trace_event(protocol, slot, intent, outcomes.get(intent.node)))

        for failure in new_failures:
            logging.warning(f"Protocol failure: {failure}")
            failures.append(failure)
            if config.failure_policy is FailurePolicy.HALT:
                raise ProtocolFailure(failure)

        slot = protocol.next_active_slot(slot + 1)


def run(config, protocol):
    """
    Drives protocol until its schedule ends and returns the run report.

    config (SimConfig): run configuration
    protocol (Protocol): state machines for every node
    """
    if protocol.node_count != config.node_count:
        raise ValueError(f"Protocol has {protocol.node_count} nodes but the config says {config.node_count}")

    ledger = EnergyLedger(config.node_count)
    failures = []

    if config.trace_path is not None:
        with TraceWriter(config.trace_path) as writer:
            _loop(config, protocol, ledger, failures, writer)
    else:
        _loop(config, protocol, ledger, failures, None)

    ledger.finalize(protocol.total_slots)
    logging.debug(f"{config.protocol}: {ledger.total_slots} slots, max awake {ledger.max_awake}")

    return RunReport(
        config=config,
        labels=protocol.labels(),
        ledger=ledger,
        failures=failures,
        extras=protocol.summary(),
    )
