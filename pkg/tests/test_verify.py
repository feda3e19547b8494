import pytest

from src.models.detnaml import detnaml_run, modified_detnaml
from src.models.randnaml import counting_run, randnaml_run
from src.utils.engine import EnergyLedger, SimConfig, SlotAction, TraceEvent
from src.utils.verify import (
    BoundConstants,
    CheckReport,
    Counterexample,
    UnverifiableInput,
    binomial_band,
    check_bounds,
    check_count,
    check_energy_identity,
    check_labels,
    check_one_label_per_season,
    check_permutation,
    fig5_bound,
    fig5_tolerance,
    oracle_labels,
    oracle_node_labels,
    report_groups,
    summarize,
)

CONSTANTS = BoundConstants.from_mapping(
    {"w_other_factor": 16, "fig5_factor": 12, "max_awake_ratio": 10, "total_slots_ratio": 48, "min_calibrated_n": 256}
)


def test_oracle_single_group():
    assert oracle_labels([[12, 10, 6, 3]]) == {12: 1, 10: 2, 6: 3, 3: 4}


def test_oracle_groups_offset_labels():
    assert oracle_labels([[5], [8, 2]]) == {5: 1, 8: 2, 2: 3}


def test_oracle_skips_empty_groups():
    assert oracle_labels([[], [9, 4], [], [7]]) == {9: 1, 4: 2, 7: 3}


def test_oracle_by_node():
    assert oracle_node_labels([[(0, 3), (1, 9)], [(2, 9)]]) == {1: 1, 0: 2, 2: 3}


def test_oracle_rejects_duplicates_in_a_group():
    with pytest.raises(UnverifiableInput):
        oracle_node_labels([[(0, 4), (1, 4)]])


def test_oracle_rejects_duplicates_across_groups_by_id():
    with pytest.raises(UnverifiableInput):
        oracle_labels([[4], [4]])


def test_failed_check_needs_counterexample():
    with pytest.raises(ValueError):
        CheckReport("broken", False)


def test_check_report_text():
    assert str(CheckReport("x", True)) == "PASS x"
    failed = CheckReport("x", False, Counterexample(7, None, 1, 2))
    assert str(failed) == "FAIL x: slot 7, node -, expected 1, actual 2"
    assert not failed


@pytest.mark.parametrize(
    "labels, passed",
    [
        ({0: 2, 1: 1, 2: 3}, True),
        ({0: 1, 1: 1, 2: 3}, False),
        ({0: 1, 1: 2}, False),
        ({0: 1, 1: 2, 2: 4}, False),
    ],
)
def test_check_permutation(labels, passed):
    assert check_permutation(labels, 3).passed is passed


def test_check_labels_on_detnaml():
    assert check_labels(detnaml_run([12, 10, 6, 3], 15))


def test_check_labels_catches_wrong_label():
    report = detnaml_run([12, 10, 6, 3], 15)
    report.labels[0], report.labels[1] = report.labels[1], report.labels[0]
    check = check_labels(report)
    assert not check
    assert check.counterexample.node == 0
    assert check.counterexample.expected == 1


def test_report_groups():
    report = randnaml_run(4, layout=[(40, 2), (30, 2), (20, 3), (10, 3)])
    assert report_groups(report) == [[], [(0, 40), (1, 30)], [(2, 20), (3, 10)]]
    assert report_groups(detnaml_run([6, 2], 8)) == [[(0, 6), (1, 2)]]


def test_check_count():
    report = counting_run(4, layout=[(40, 1), (30, 2), (20, 3), (10, 3)])
    assert check_count(report)
    report.extras["counts"][2] = 3
    check = check_count(report)
    assert not check
    assert check.counterexample.node == 2
    assert check.counterexample.actual == 3


def _event(slot, node, season, label, period=None):
    return TraceEvent(slot, season, period, node, "LISTEN", "SILENCE", "CANDIDATE", None, (), label)


def test_one_label_per_season_passes():
    events = [_event(0, 0, 1, None), _event(1, 0, 1, 1), _event(0, 1, 1, None), _event(2, 1, 2, 2)]
    assert check_one_label_per_season(events)


def test_two_labels_in_one_season_fail():
    events = [_event(1, 0, 1, 1), _event(1, 1, 1, 1)]
    check = check_one_label_per_season(events)
    assert not check
    assert check.counterexample.actual == 2
    assert check.detail == "season 1"


def test_season_without_label_fails():
    events = [_event(0, 0, 1, None), _event(3, 0, 2, 1, period=4)]
    check = check_one_label_per_season(events)
    assert not check
    assert check.detail == "season 1"


def test_energy_identity():
    ledger = EnergyLedger(2)
    ledger.charge(0, SlotAction.BEEP)
    ledger.finalize(4)
    assert check_energy_identity(ledger)

    ledger.w_other[1] += 1
    check = check_energy_identity(ledger)
    assert not check
    assert check.counterexample.node == 1


def test_energy_identity_catches_stale_max():
    ledger = EnergyLedger(1)
    ledger.charge(0, SlotAction.LISTEN)
    assert not check_energy_identity(ledger)


def test_fig5_bound():
    # n = 100: N = 10^4, M = 14
    assert fig5_bound(14, 10_000) == 29
    assert fig5_tolerance(14, 10_000, CONSTANTS) == 29 + 12 * 14


def test_naming_bounds_pass():
    assert check_bounds(detnaml_run([12, 10, 6, 3], 15), CONSTANTS)


def test_naming_bounds_catch_wrong_time():
    report = detnaml_run([12, 10, 6, 3], 15)
    report.ledger.total_slots = 41
    check = check_bounds(report, CONSTANTS)
    assert not check
    assert check.counterexample.expected == 40


def test_naming_bounds_catch_w_other():
    report = detnaml_run([12, 10, 6, 3], 15)
    report.ledger.w_other[2] = 16 * 5 + 1
    assert not check_bounds(report, CONSTANTS)


def test_modified_run_counts_the_watch_season():
    report = modified_detnaml([9, 4], 16)
    assert check_bounds(report, CONSTANTS)
    report.ledger.total_slots = 20
    assert not check_bounds(report, CONSTANTS)


def test_grouped_bounds_below_calibrated_range():
    report = randnaml_run(4, layout=[(40, 2), (30, 2), (20, 3), (10, 3)])
    check = check_bounds(report, CONSTANTS)
    assert check
    assert "below calibrated range" in check.detail


def test_grouped_bounds_catch_wrong_time():
    report = randnaml_run(4, layout=[(40, 2), (30, 2), (20, 3), (10, 3)])
    report.ledger.total_slots += 1
    assert not check_bounds(report, CONSTANTS)


def test_binomial_band_contains_p():
    low, high = binomial_band(0.5, 1000)
    assert low < 0.5 < high
    assert high - low < 0.1


def test_summarize():
    text = summarize([CheckReport("a", True), CheckReport("b", False, Counterexample(None, 3, 1, 0))])
    assert text.splitlines() == ["PASS a", "FAIL b: slot -, node 3, expected 1, actual 0"]


def test_bound_constants_from_yml_values():
    assert CONSTANTS.min_calibrated_n == 256
    assert isinstance(CONSTANTS.fig5_factor, float)


def test_sim_config_in_report():
    report = detnaml_run([3], 4, seed=9)
    assert report.config == SimConfig(node_count=1, seed=9, protocol="detnaml")
