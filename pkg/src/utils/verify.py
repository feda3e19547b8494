"""Oracles and invariant checks over run reports and traces."""

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Any, Optional

import numpy as np
from scipy import stats


class UnverifiableInput(ValueError):
    """A group repeats an identifier, so no label order is defined."""


@dataclass(frozen=True)
class Counterexample:
    slot: Optional[int]
    node: Optional[int]
    expected: Any
    actual: Any


@dataclass(frozen=True)
class CheckReport:
    name: str
    passed: bool
    counterexample: Optional[Counterexample] = None
    detail: str = ""

    def __post_init__(self):
        if not self.passed and self.counterexample is None:
            raise ValueError(f"Failing check {self.name} needs a counterexample")

    def __bool__(self):
        return self.passed

    def __str__(self):
        if self.passed:
            return f"PASS {self.name}" + (f" ({self.detail})" if self.detail else "")
        c = self.counterexample
        return (
            f"FAIL {self.name}: slot {c.slot if c.slot is not None else '-'}, "
            f"node {c.node if c.node is not None else '-'}, expected {c.expected}, actual {c.actual}"
            + (f" ({self.detail})" if self.detail else "")
        )


def _fail(name, slot, node, expected, actual, detail=""):
    return CheckReport(name, False, Counterexample(slot, node, expected, actual), detail)


@dataclass(frozen=True)
class BoundConstants:
    """Regression thresholds fixed by the calibration sweep."""

    w_other_factor: float
    fig5_factor: float
    max_awake_ratio: float
    total_slots_ratio: float
    min_calibrated_n: int

    @classmethod
    def from_mapping(cls, values):
        return cls(
            w_other_factor=float(values["w_other_factor"]),
            fig5_factor=float(values["fig5_factor"]),
            max_awake_ratio=float(values["max_awake_ratio"]),
            total_slots_ratio=float(values["total_slots_ratio"]),
            min_calibrated_n=int(values["min_calibrated_n"]),
        )


def oracle_node_labels(groups):
    """
    Expected global labels: inside group k the j-th largest identifier gets
    the sizes of the earlier groups plus j.

    groups (Sequence): groups in period order, each a list of (node, id) pairs
    """
    labels = {}
    offset = 0
    for position, group in enumerate(groups, 1):
        ids = [identifier for _, identifier in group]
        if len(set(ids)) != len(ids):
            raise UnverifiableInput(f"Group {position} repeats an identifier")
        ranked = sorted(group, key=lambda pair: pair[1], reverse=True)
        for rank, (node, _) in enumerate(ranked, 1):
            labels[node] = offset + rank
        offset += len(group)
    return labels


def oracle_labels(groups):
    """Same oracle keyed by identifier, e.g. [[5], [8, 2]] -> {5: 1, 8: 2, 2: 3}."""
    flat = [identifier for group in groups for identifier in group]
    if len(set(flat)) != len(flat):
        raise UnverifiableInput("Identifiers must be unique to key labels by identifier")
    return oracle_node_labels([[(i, i) for i in group] for group in groups])


def report_groups(report):
    """(node, id) pairs per group, in period order, for a naming report."""
    ids = report.extras["ids"]
    if "groups" not in report.extras:
        return [list(enumerate(ids))]
    members = {k: [] for k in range(1, report.extras["group_count"] + 1)}
    for node, group in enumerate(report.extras["groups"]):
        members[group].append((node, ids[node]))
    return [members[k] for k in sorted(members)]


def check_permutation(labels, node_count):
    name = "labels form a permutation"
    for node in range(node_count):
        if node not in labels:
            return _fail(name, None, node, "a label", None)
    seen = {}
    for node in sorted(labels):
        label = labels[node]
        if not 1 <= label <= node_count:
            return _fail(name, None, node, f"label in 1..{node_count}", label)
        if label in seen:
            return _fail(name, None, node, f"label unused by node {seen[label]}", label)
        seen[label] = node
    return CheckReport(name, True)


def check_labels(report):
    """Compares a naming report with the sorted-identifier oracle."""
    name = "labels match oracle"
    try:
        expected = oracle_node_labels(report_groups(report))
    except UnverifiableInput as e:
        return _fail(name, None, None, "distinct identifiers per group", str(e))

    permutation = check_permutation(report.labels, report.config.node_count)
    if not permutation:
        return permutation
    for node in sorted(expected):
        if report.labels.get(node) != expected[node]:
            return _fail(name, None, node, expected[node], report.labels.get(node))
    return CheckReport(name, True)


def check_count(report):
    name = "every node knows n"
    n = report.config.node_count
    counts = report.extras.get("counts", {})
    for node in range(n):
        if counts.get(node) != n:
            return _fail(name, report.total_slots - 1, node, n, counts.get(node))
    return CheckReport(name, True)


def check_one_label_per_season(events):
    """Every season with an unlabeled participant must end with exactly one new label."""
    name = "one label per season"
    seasons = OrderedDict()
    first_labeled = {}

    for event in sorted(events, key=lambda e: (e.slot, e.node)):
        if event.season is None:
            continue
        key = (event.period, event.season)
        seasons.setdefault(key, []).append(event)
        if event.label is not None and event.node not in first_labeled:
            first_labeled[event.node] = key

    for key, season_events in seasons.items():
        newly = sorted(node for node, first in first_labeled.items() if first == key)
        unlabeled = {e.node for e in season_events if e.label is None}
        if (unlabeled or newly) and len(newly) != 1:
            period, season = key
            where = f"season {season}" if period is None else f"season {season} of period {period}"
            return _fail(name, season_events[-1].slot, newly[0] if newly else None, 1, len(newly), where)
    return CheckReport(name, True, detail=f"{len(seasons)} seasons")


def check_energy_identity(ledger):
    name = "awake = wStl + wStn + wOther"
    awake = ledger.beep_count + ledger.listen_count
    split = ledger.w_stl + ledger.w_stn + ledger.w_other

    broken = np.flatnonzero(awake != split)
    if broken.size:
        node = int(broken[0])
        return _fail(name, None, node, int(awake[node]), int(split[node]))

    true_max = int(awake.max()) if ledger.node_count else 0
    if ledger.max_awake != true_max:
        return _fail(name, None, int(np.argmax(awake)), true_max, ledger.max_awake, "maxAwake is not the maximum")
    return CheckReport(name, True)


def fig5_bound(node_count, upper_bound):
    """The comparison curve M + ceil(log2 N) + 1."""
    return node_count + (upper_bound - 1).bit_length() + 1


def fig5_tolerance(node_count, upper_bound, constants):
    return fig5_bound(node_count, upper_bound) + constants.fig5_factor * (upper_bound - 1).bit_length()


def _check_naming_bounds(report, constants):
    name = "naming bounds"
    ledger = report.ledger
    m = report.config.node_count
    bit_count = report.extras["bit_count"]
    season_length = report.extras["season_length"]

    # a watch season follows the last label
    seasons = m + 1 if report.config.protocol == "modified" and m else m
    if report.total_slots != seasons * season_length:
        return _fail(name, report.total_slots, None, seasons * season_length, report.total_slots, "total slots")

    if report.config.protocol != "detnaml" or m == 0:
        return CheckReport(name, True)

    last = report.extras["last"]
    stl_bound = 2 * ((m - 1) + bit_count)
    if last is not None and ledger.w_stl[last] > stl_bound:
        return _fail(name, None, last, f"wStl <= {stl_bound}", int(ledger.w_stl[last]), "last-labelled node")

    # the per-node wOther bound only holds while the group is O(log N) large
    if m <= bit_count:
        limit = constants.w_other_factor * bit_count
        over = np.flatnonzero(ledger.w_other > limit)
        if over.size:
            node = int(over[0])
            return _fail(name, None, node, f"wOther <= {limit:g}", int(ledger.w_other[node]))
    return CheckReport(name, True)


def _check_grouped_bounds(report, constants):
    name = "grouped naming bounds"
    extras = report.extras
    n = report.config.node_count

    expected_total = extras["counting_slot"] + (extras["handoff_length"] if report.config.protocol == "count" else 0)
    if report.total_slots != expected_total:
        return _fail(name, report.total_slots, None, expected_total, report.total_slots, "total slots")

    if n < constants.min_calibrated_n:
        return CheckReport(name, True, detail=f"n below calibrated range {constants.min_calibrated_n}")

    log_n = math.log2(n)
    energy_ratio = report.max_awake / log_n**2
    if energy_ratio > constants.max_awake_ratio:
        return _fail(name, None, None, f"maxAwake/(log2 n)^2 <= {constants.max_awake_ratio}", round(energy_ratio, 3))
    time_ratio = report.total_slots / (n * log_n)
    if time_ratio > constants.total_slots_ratio:
        return _fail(name, None, None, f"totalSlots/(n log2 n) <= {constants.total_slots_ratio}", round(time_ratio, 3))
    return CheckReport(name, True)


def check_bounds(report, constants):
    """
    It takes a failure-free run report and the frozen constants and checks
    the time and energy figures the run should respect.
    """
    if report.config.protocol in ("randnaml", "count"):
        return _check_grouped_bounds(report, constants)
    return _check_naming_bounds(report, constants)


def binomial_band(p, trials, confidence=0.99):
    """Interval of success fractions expected when each trial succeeds with probability p."""
    low, high = stats.binom.interval(confidence, trials, p)
    return low / trials, high / trials


def summarize(checks):
    return "\n".join(str(check) for check in checks)
