"""Per-class F1, group means, harmonic means, and confidence intervals.

Conventions fixed here because 1-shot tasks hit the degenerate cases
often: precision/recall with a zero denominator count as 0, F1 with
P + R = 0 is 0, and the harmonic mean is 0 when either argument is 0.

The reported harmonic mean is the average of per-task harmonic means; it
need not equal the harmonic mean of the reported group averages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._validation import as_labels


def hmean(a: float, b: float) -> float:
    """Harmonic mean 2ab/(a+b); zero when either argument is zero."""
    if a < 0 or b < 0:
        raise ValueError("harmonic mean arguments must be non-negative")
    if a == 0 or b == 0:
        return 0.0
    return 2.0 * a * b / (a + b)


@dataclass(frozen=True)
class TaskScore:
    """One task's per-class one-vs-rest F1 scores and truth counts."""

    class_ids: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    task_index: int = 0

    def __post_init__(self) -> None:
        ids = np.asarray(self.class_ids, dtype=np.int64)
        f1 = np.asarray(self.f1, dtype=np.float64)
        sup = np.asarray(self.support, dtype=np.int64)
        if ids.shape != f1.shape or ids.shape != sup.shape or ids.ndim != 1:
            raise ValueError("class_ids, f1, support must be equal-length vectors")
        if np.any((f1 < 0) | (f1 > 1)):
            raise ValueError("F1 values must lie in [0, 1]")
        if ids.shape[0] > 1 and np.any(np.diff(ids) <= 0):
            raise ValueError("class_ids must be strictly increasing")
        for a in (ids, f1, sup):
            a.setflags(write=False)
        object.__setattr__(self, "class_ids", ids)
        object.__setattr__(self, "f1", f1)
        object.__setattr__(self, "support", sup)

    def f1_of(self, class_id: int) -> float:
        pos = np.searchsorted(self.class_ids, class_id)
        if pos >= self.class_ids.shape[0] or self.class_ids[pos] != class_id:
            raise ValueError(f"class {class_id} not scored in this task")
        return float(self.f1[pos])


def f1_per_class(
    pred: np.ndarray, truth: np.ndarray, classes, task_index: int = 0
) -> TaskScore:
    """One-vs-rest F1 for every id in `classes`.

    Predictions outside `classes` are legal (joint-space classifiers can
    emit them); they only ever count against recall.
    """
    truth = as_labels(truth, n=None, name="truth")
    pred = as_labels(pred, n=truth.shape[0], name="pred")
    ids = np.unique(np.asarray(list(classes), dtype=np.int64))
    if ids.size == 0:
        raise ValueError("classes must be non-empty")
    unknown = np.setdiff1d(np.unique(truth), ids)
    if unknown.size:
        raise ValueError(f"truth contains labels outside classes: {unknown.tolist()}")

    f1 = np.zeros(ids.shape[0])
    support = np.zeros(ids.shape[0], dtype=np.int64)
    for i, c in enumerate(ids):
        tp = int(np.sum((pred == c) & (truth == c)))
        fp = int(np.sum((pred == c) & (truth != c)))
        fn = int(np.sum((pred != c) & (truth == c)))
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1[i] = hmean(precision, recall)
        support[i] = tp + fn
    return TaskScore(class_ids=ids, f1=f1, support=support, task_index=int(task_index))


def group_task_metrics(
    score: TaskScore, group_a, group_b
) -> tuple[float, float, float]:
    """Mean F1 of two class groups plus their harmonic mean."""
    a_ids = np.unique(np.asarray(list(group_a), dtype=np.int64))
    b_ids = np.unique(np.asarray(list(group_b), dtype=np.int64))
    if a_ids.size == 0 or b_ids.size == 0:
        raise ValueError("both groups must be non-empty")
    if np.intersect1d(a_ids, b_ids).size:
        raise ValueError("groups must be disjoint")
    merged = np.union1d(a_ids, b_ids)
    if not np.array_equal(merged, score.class_ids):
        raise ValueError(
            f"groups {merged.tolist()} do not partition scored classes {score.class_ids.tolist()}"
        )
    mean_a = float(np.mean([score.f1_of(c) for c in a_ids]))
    mean_b = float(np.mean([score.f1_of(c) for c in b_ids]))
    return mean_a, mean_b, hmean(mean_a, mean_b)


def gfsl_task_metrics(score: TaskScore, novel_class: int) -> tuple[float, float, float]:
    """(mean F1 of non-novel classes, F1 of the novel class, harmonic mean)."""
    novel_class = int(novel_class)
    if novel_class not in score.class_ids:
        raise ValueError(f"novel class {novel_class} not scored in this task")
    base = [int(c) for c in score.class_ids if c != novel_class]
    if not base:
        raise ValueError("no base classes left after removing the novel class")
    return group_task_metrics(score, base, [novel_class])


def mixture_task_metrics(
    score: TaskScore, middle_ids, out_ids
) -> tuple[float, float, float]:
    """(mean F1 of middle-domain classes, mean of out-domain, harmonic mean)."""
    return group_task_metrics(score, middle_ids, out_ids)


def aggregate(task_values) -> tuple[float, float]:
    """Mean and normal-approximation 95% CI half-width across tasks.

    Half-width = 1.96 * s / sqrt(I) with s the sample standard deviation
    (divisor I - 1). Needs at least two values.
    """
    values = np.asarray(task_values, dtype=np.float64).ravel()
    if values.shape[0] < 2:
        raise ValueError("aggregate needs at least 2 task values")
    if not np.all(np.isfinite(values)):
        raise ValueError("task values must be finite")
    if values.max() == values.min():
        # constant series: exact answer, no accumulated rounding
        return float(values[0]), 0.0
    mean = float(values.mean())
    s = float(values.std(ddof=1))
    return mean, 1.96 * s / math.sqrt(values.shape[0])


@dataclass(frozen=True)
class AggregateReport:
    """Group means with CI half-widths over a series of tasks.

    Group names are ("base", "novel") for joint-space runs and
    ("middle", "out") for the mixture-domain grouping.
    """

    group_a_name: str
    group_b_name: str
    group_a_mean: float
    group_a_ci: float
    group_b_mean: float
    group_b_ci: float
    hmean_mean: float
    hmean_ci: float
    num_tasks: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name in ("group_a_ci", "group_b_ci", "hmean_ci"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.num_tasks < 2:
            raise ValueError("a report needs at least 2 tasks")


#: How CI half-widths are computed; recorded in every report's metadata.
CI_CONVENTION = "normal-approx over pooled per-task values"


def build_report(
    triples, group_a_name: str = "base", group_b_name: str = "novel", metadata: dict | None = None
) -> AggregateReport:
    """Reduce per-task (group_a, group_b, hmean) triples to a report."""
    arr = np.asarray(list(triples), dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError("expected a sequence of (group_a, group_b, hmean) triples")
    a_mean, a_ci = aggregate(arr[:, 0])
    b_mean, b_ci = aggregate(arr[:, 1])
    h_mean, h_ci = aggregate(arr[:, 2])
    meta = {"ci_convention": CI_CONVENTION}
    if metadata:
        meta.update(metadata)
    return AggregateReport(
        group_a_name=group_a_name,
        group_b_name=group_b_name,
        group_a_mean=a_mean,
        group_a_ci=a_ci,
        group_b_mean=b_mean,
        group_b_ci=b_ci,
        hmean_mean=h_mean,
        hmean_ci=h_ci,
        num_tasks=arr.shape[0],
        metadata=meta,
    )


def sig6(x: float) -> float:
    """Round to 6 significant digits, the precision all outputs print at."""
    return float(f"{float(x):.6g}")


REPORT_CSV_COLUMNS = [
    "label",
    "group_a",
    "group_a_mean",
    "group_a_ci",
    "group_b",
    "group_b_mean",
    "group_b_ci",
    "hmean_mean",
    "hmean_ci",
    "num_tasks",
]


def report_csv_row(label: str, report: AggregateReport) -> list[str]:
    """One CSV row (see REPORT_CSV_COLUMNS); floats at 6 significant digits."""
    return [
        label,
        report.group_a_name,
        f"{report.group_a_mean:.6g}",
        f"{report.group_a_ci:.6g}",
        report.group_b_name,
        f"{report.group_b_mean:.6g}",
        f"{report.group_b_ci:.6g}",
        f"{report.hmean_mean:.6g}",
        f"{report.hmean_ci:.6g}",
        str(report.num_tasks),
    ]


def report_to_dict(report: AggregateReport) -> dict:
    """JSON-ready view of a report; floats at 6 significant digits."""
    return {
        "groups": {
            report.group_a_name: {
                "mean": sig6(report.group_a_mean),
                "ci95_halfwidth": sig6(report.group_a_ci),
            },
            report.group_b_name: {
                "mean": sig6(report.group_b_mean),
                "ci95_halfwidth": sig6(report.group_b_ci),
            },
        },
        "hmean": {
            "mean": sig6(report.hmean_mean),
            "ci95_halfwidth": sig6(report.hmean_ci),
        },
        "num_tasks": report.num_tasks,
        "metadata": dict(report.metadata),
    }
