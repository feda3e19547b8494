import math
import os

import pandas as pd
import pytest

from main import load_config, load_constants
from src.utils.engine import ApproxMode
from src.utils.verify import fig5_tolerance
from sweeper import FIG5_COLUMNS, GROUPED_COLUMNS, SweepSpec, fig5_point, grouped_point, summarize, sweeper


class RecordingRun:
    def __init__(self):
        self.logged = []

    def log(self, row):
        self.logged.append(row)


def spec(tmp_path, **kwargs):
    values = dict(algorithm="fig5", n_from=10, n_to=1000, points=3, seeds=2, output=str(tmp_path / "sweep.csv"))
    values.update(kwargs)
    return SweepSpec(**values)


def test_geometric_grid(tmp_path):
    assert spec(tmp_path).n_grid() == [10, 100, 1000]
    assert spec(tmp_path, points=1).n_grid() == [10]


def test_grid_deduplicates(tmp_path):
    assert spec(tmp_path, n_from=1, n_to=2, points=5).n_grid() == [1, 2]


def test_explicit_values_override_grid(tmp_path):
    assert spec(tmp_path, n_values=[7, 3]).n_grid() == [7, 3]


def test_tasks_cover_every_seed(tmp_path):
    tasks = spec(tmp_path, first_seed=5).tasks()
    assert len(tasks) == 6
    assert tasks[0] == ("fig5", 10, 5, "exact")
    assert tasks[1] == ("fig5", 10, 6, "exact")


@pytest.mark.parametrize(
    "kwargs",
    [
        {"algorithm": "aloha"},
        {"n_from": 0},
        {"n_from": 100, "n_to": 10},
        {"points": 0},
        {"seeds": 0},
        {"n_values": []},
        {"n_values": [4, 0]},
    ],
)
def test_spec_validation(tmp_path, kwargs):
    with pytest.raises(ValueError):
        spec(tmp_path, **kwargs)


def test_columns(tmp_path):
    assert spec(tmp_path).columns == FIG5_COLUMNS
    assert spec(tmp_path, algorithm="count").columns == GROUPED_COLUMNS


def test_fig5_point():
    row = fig5_point(10, 0)
    assert row["N"] == 100
    assert row["M"] == 7
    assert row["boundValue"] == 15
    assert row["maxAwake"] > 0
    assert list(row) == FIG5_COLUMNS


def test_grouped_point():
    row = grouped_point("count", 24, 1)
    assert list(row) == GROUPED_COLUMNS
    assert row["N"] == 48 * 48
    assert row["verified"] == (row["failures"] == "")


def test_grouped_point_jittered():
    row = grouped_point("randnaml", 24, 1, ApproxMode.JITTERED)
    assert 12 <= row["u"] <= 48


def test_sweep_writes_rows(tmp_path):
    run = RecordingRun()
    frame = sweeper(run=run).sweep(spec(tmp_path))

    assert list(frame.columns) == FIG5_COLUMNS
    assert len(frame) == 6
    assert len(run.logged) == 6
    assert sorted(frame["M"].unique()) == [7, 14, 20]

    slope, _ = sweeper.trend(frame)
    assert slope > 0

    table = summarize(frame)
    assert table.loc[100, "runs"] == 2


def test_sweep_appends_to_existing_csv(tmp_path):
    sweeper().sweep(spec(tmp_path, n_values=[10], seeds=1))
    frame = sweeper().sweep(spec(tmp_path, n_values=[10], seeds=1, first_seed=1))
    assert frame["seed"].tolist() == [0, 1]


def test_trend_needs_two_points():
    slope, pvalue = sweeper.trend(pd.DataFrame({"N": [100, 100], "maxAwake": [3, 4]}))
    assert math.isnan(slope) and math.isnan(pvalue)


def test_failure_rate():
    frame = pd.DataFrame({"failures": ["", "empty group", None, "empty group;group overflow"]})
    assert sweeper.failure_rate(frame) == 0.5


def test_grouped_sweep(tmp_path):
    frame = sweeper().sweep(spec(tmp_path, algorithm="randnaml", n_values=[24], seeds=4))
    assert len(frame) == 4
    clean = frame[frame["failures"].fillna("") == ""]
    assert clean["verified"].astype(bool).all()


def test_calibrate(tmp_path):
    fig5 = spec(tmp_path, n_values=[10, 100], seeds=2)
    grouped = spec(tmp_path, algorithm="randnaml", n_values=[16], seeds=3)
    constants = sweeper().calibrate(fig5, grouped)

    assert set(constants) == {
        "fig5_factor",
        "w_other_factor",
        "max_awake_ratio",
        "total_slots_ratio",
        "min_calibrated_n",
    }
    assert constants["min_calibrated_n"] == 16
    assert constants["w_other_factor"] == 4.4
    assert all(round(value, 2) == value for value in constants.values())


def test_frozen_naming_constants_are_tight(tmp_path):
    # the worst DETNAML ratios of the calibration grid both occur at n=100
    fig5 = spec(tmp_path, n_values=[100, 1000], seeds=20)
    grouped = spec(tmp_path, algorithm="randnaml", n_values=[16], seeds=1)
    constants = sweeper().calibrate(fig5, grouped)

    frozen = load_constants("calibration")
    assert constants["fig5_factor"] == frozen.fig5_factor
    assert constants["w_other_factor"] == frozen.w_other_factor


@pytest.mark.slow
def test_frozen_grouped_constants_are_tight(tmp_path):
    fig5 = spec(tmp_path, n_values=[10], seeds=1)
    grouped = spec(tmp_path, algorithm="randnaml", n_values=[256], seeds=20)
    constants = sweeper(workers=os.cpu_count()).calibrate(fig5, grouped)

    frozen = load_constants("calibration")
    assert constants["max_awake_ratio"] == frozen.max_awake_ratio
    assert constants["total_slots_ratio"] == frozen.total_slots_ratio
    assert constants["min_calibrated_n"] == frozen.min_calibrated_n


def test_energy_study_grid(tmp_path):
    frozen = load_constants("calibration")
    n_values = load_config("default")["calibration_fig5_n"]
    frame = sweeper().sweep(spec(tmp_path, n_values=n_values, seeds=20))

    assert len(frame) == 20 * len(n_values)
    for row in frame.itertuples():
        assert row.maxAwake <= fig5_tolerance(int(row.M), int(row.N), frozen), (row.n, row.seed)

    slope, _ = sweeper.trend(frame)
    assert slope > 0
