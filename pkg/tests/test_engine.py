import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from src.models.detnaml import detnaml_run
from src.utils.engine import (
    ChannelOutcome,
    Charge,
    EnergyLedger,
    Failure,
    FailurePolicy,
    Intent,
    Protocol,
    ProtocolFailure,
    SimConfig,
    SlotAction,
    TraceEvent,
    node_rng,
    read_trace,
    resolve_channel,
    run,
    run_rng,
)

BEEP, LISTEN, SLEEP = SlotAction.BEEP, SlotAction.LISTEN, SlotAction.SLEEP


def test_single_beeper_heard():
    assert resolve_channel({"a": BEEP, "b": LISTEN}) == {"b": ChannelOutcome.BEEP_HEARD}


def test_no_transmitter_is_silence():
    assert resolve_channel({"a": LISTEN, "b": LISTEN}) == {
        "a": ChannelOutcome.SILENCE,
        "b": ChannelOutcome.SILENCE,
    }


def test_beepers_and_sleepers_receive_nothing():
    outcomes = resolve_channel({"a": BEEP, "b": BEEP, "c": LISTEN, "d": SLEEP})
    assert outcomes == {"c": ChannelOutcome.BEEP_HEARD}


@given(st.lists(st.sampled_from([BEEP, LISTEN, SLEEP]), max_size=10), st.randoms())
def test_channel_is_order_independent(actions, rnd):
    items = list(enumerate(actions))
    shuffled = items[:]
    rnd.shuffle(shuffled)
    assert resolve_channel(dict(items)) == resolve_channel(dict(shuffled))


def test_ledger_charges_by_category():
    ledger = EnergyLedger(3)
    ledger.charge(0, BEEP, Charge.STL)
    ledger.charge(0, LISTEN, Charge.STL)
    ledger.charge(1, LISTEN, Charge.STN)
    ledger.charge(2, BEEP)
    ledger.charge(2, SLEEP)
    ledger.finalize(10)

    assert ledger.awake.tolist() == [2, 1, 1]
    assert ledger.w_stl.tolist() == [2, 0, 0]
    assert ledger.w_stn.tolist() == [0, 1, 0]
    assert ledger.w_other.tolist() == [0, 0, 1]
    assert ledger.max_awake == 2
    assert ledger.total_slots == 10
    np.testing.assert_array_equal(ledger.awake, ledger.w_stl + ledger.w_stn + ledger.w_other)


def test_empty_ledger():
    ledger = EnergyLedger(0)
    ledger.finalize(0)
    assert ledger.max_awake == 0
    assert ledger.breakdown() == {"max_w_stl": 0, "max_w_stn": 0, "max_w_other": 0}


@pytest.mark.parametrize(
    "kwargs",
    [
        {"node_count": -1},
        {"node_count": 2, "seed": -1},
        {"node_count": 2, "seed": 2**64},
        {"node_count": 2, "protocol": "aloha"},
    ],
)
def test_sim_config_validation(kwargs):
    with pytest.raises(ValueError):
        SimConfig(**kwargs)


def test_trace_line_format():
    event = TraceEvent(12, 2, None, 3, "LISTEN", "SILENCE", "ELIMINATED", 4, (0, 6), None)
    assert event.to_line() == "12\t2\t-\t3\tLISTEN\tSILENCE\tELIMINATED\t4\t0,6\t-"
    assert TraceEvent.from_line(event.to_line()) == event


def test_trace_rejects_malformed_line():
    with pytest.raises(ValueError):
        TraceEvent.from_line("1\t2\t3")


def test_streams_are_reproducible_and_independent():
    assert node_rng(7, 3).integers(1 << 30) == node_rng(7, 3).integers(1 << 30)
    assert node_rng(7, 3).integers(1 << 30) != node_rng(7, 4).integers(1 << 30)
    assert run_rng(7, 0).integers(1 << 30) != node_rng(7, 0).integers(1 << 30)


class Blinker(Protocol):
    """Node 0 beeps in every even slot below 6, node 1 listens in slots 0..3."""

    def __init__(self, fail_at=None):
        self.node_count = 2
        self.heard = {}
        self.fail_at = fail_at

    @property
    def total_slots(self):
        return 6

    def next_active_slot(self, slot):
        for candidate in range(slot, 6):
            if candidate % 2 == 0 or candidate < 4:
                return candidate
        return None

    def intents(self, slot):
        intents = []
        if slot % 2 == 0:
            intents.append(Intent(0, BEEP))
        if slot < 4:
            intents.append(Intent(1, LISTEN, Charge.STN))
        return intents

    def observe(self, slot, outcomes):
        self.heard[slot] = outcomes.get(1)
        if slot == self.fail_at:
            return [Failure("test failure", slot, 1)]
        return []

    def labels(self):
        return {}


def test_run_skips_idle_slots_and_meters_energy():
    protocol = Blinker()
    report = run(SimConfig(node_count=2, protocol="detnaml"), protocol)

    assert sorted(protocol.heard) == [0, 1, 2, 3, 4]
    assert protocol.heard[0] is ChannelOutcome.BEEP_HEARD
    assert protocol.heard[1] is ChannelOutcome.SILENCE
    assert report.ledger.beep_count.tolist() == [3, 0]
    assert report.ledger.listen_count.tolist() == [0, 4]
    assert report.ledger.w_stn.tolist() == [0, 4]
    assert report.total_slots == 6
    assert report.max_awake == 4
    assert report.failure_free


def test_run_records_failures():
    report = run(SimConfig(node_count=2), Blinker(fail_at=2))
    assert [f.slot for f in report.failures] == [2]
    assert report.failure_kinds == ["test failure"]


def test_run_halts_on_failure():
    with pytest.raises(ProtocolFailure) as info:
        run(SimConfig(node_count=2, failure_policy=FailurePolicy.HALT), Blinker(fail_at=3))
    assert info.value.failure.slot == 3


def test_run_rejects_node_count_mismatch():
    with pytest.raises(ValueError):
        run(SimConfig(node_count=3), Blinker())


def test_run_rejects_two_actions_for_one_node():
    class Greedy(Blinker):
        def intents(self, slot):
            return [Intent(0, BEEP), Intent(0, LISTEN)]

    with pytest.raises(ValueError):
        run(SimConfig(node_count=2), Greedy())


def test_single_node_detnaml_takes_one_season():
    report = detnaml_run([3], 4)
    assert report.labels == {0: 1}
    assert report.total_slots == 6


def test_same_config_same_trace(tmp_path):
    ids = [40, 7, 99, 63, 12, 81]
    first, second = tmp_path / "a.tsv", tmp_path / "b.tsv"
    report_a = detnaml_run(ids, 100, trace_path=str(first))
    report_b = detnaml_run(ids, 100, trace_path=str(second))

    assert first.read_bytes() == second.read_bytes()
    assert report_a.labels == report_b.labels
    np.testing.assert_array_equal(report_a.ledger.awake, report_b.ledger.awake)


def test_trace_events_increase_per_node(tmp_path):
    path = tmp_path / "trace.tsv"
    detnaml_run([12, 10, 6, 3], 15, trace_path=str(path))
    events = read_trace(str(path))

    last_slot = {}
    for event in events:
        assert event.slot > last_slot.get(event.node, -1)
        last_slot[event.node] = event.slot


def test_trace_matches_ledger(tmp_path):
    path = tmp_path / "trace.tsv"
    report = detnaml_run([9, 4, 30, 17, 2], 32, trace_path=str(path))
    per_node = np.zeros(5, dtype=int)
    for event in read_trace(str(path)):
        per_node[event.node] += 1
    np.testing.assert_array_equal(per_node, report.ledger.awake)
