"""N-way K-shot Q-query task sampling under several selection protocols.

A meta-task is one few-shot trial: K support and Q query samples per
class, disjoint. Two label-space modes:

* fsl: n_way classes are drawn from the dataset (novel classes only).
* gfsl: the task spans every class of the (joint) dataset; n_way is the
  full class count.

Three support-selection modes:

* uniform: supports drawn freely within each class.
* hetero_wsi: each class's supports come from pairwise-distinct source
  slides where the pool allows, otherwise maximally distinct.
* homo_wsi: each class's supports come from a single source slide.

Optional support/query WSI pools restrict where supports and queries may
be drawn from (they must be disjoint); this models evaluation against
held-out slides.

Every task is a pure function of (dataset, protocol, task_index): the
RNG stream is derived from the master seed and the task index, so tasks
can be generated in any order, in parallel, with identical results.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from ._seeding import check_seed, derive_rng
from .store import EmbeddingDataset

MODES = ("fsl", "gfsl")
SELECTIONS = ("uniform", "hetero_wsi", "homo_wsi")


@dataclass(frozen=True)
class TaskProtocol:
    """Sampling rules shared by every task in a series."""

    mode: str = "gfsl"
    n_way: int | None = None
    k_shot: int = 5
    q_query: int = 15
    selection: str = "uniform"
    support_pool: frozenset | None = None
    query_pool: frozenset | None = None
    master_seed: int = 66
    num_tasks: int = 1000

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.selection not in SELECTIONS:
            raise ValueError(f"selection must be one of {SELECTIONS}, got {self.selection!r}")
        if self.mode == "fsl" and (self.n_way is None or int(self.n_way) < 1):
            raise ValueError("fsl mode requires a positive n_way")
        if self.n_way is not None and int(self.n_way) < 1:
            raise ValueError("n_way must be positive when given")
        if int(self.k_shot) < 1:
            raise ValueError("k_shot must be at least 1")
        if int(self.q_query) < 1:
            raise ValueError("q_query must be at least 1")
        if int(self.num_tasks) < 1:
            raise ValueError("num_tasks must be at least 1")
        if self.selection == "hetero_wsi" and int(self.k_shot) == 1:
            raise ValueError(
                "hetero_wsi selection with k_shot=1 is undefined: one support "
                "cannot span distinct slides"
            )
        check_seed(self.master_seed, "master_seed")
        for name in ("support_pool", "query_pool"):
            pool = getattr(self, name)
            if pool is not None:
                object.__setattr__(self, name, frozenset(int(w) for w in pool))
        if self.support_pool is not None and self.query_pool is not None:
            overlap = self.support_pool & self.query_pool
            if overlap:
                raise ValueError(f"support and query pools overlap: {sorted(overlap)}")


@dataclass(frozen=True)
class MetaTask:
    """One sampled trial: support/query index sets with resolved labels."""

    support_indices: np.ndarray
    support_labels: np.ndarray
    query_indices: np.ndarray
    query_labels: np.ndarray
    task_classes: np.ndarray
    task_index: int

    def __post_init__(self) -> None:
        for name in (
            "support_indices",
            "support_labels",
            "query_indices",
            "query_labels",
            "task_classes",
        ):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            if arr.ndim != 1:
                raise ValueError(f"{name} must be 1-D")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.support_indices.shape != self.support_labels.shape:
            raise ValueError("support indices and labels must align")
        if self.query_indices.shape != self.query_labels.shape:
            raise ValueError("query indices and labels must align")
        if self.task_classes.size < 1:
            raise ValueError("a task needs at least one class")


def _class_candidates(
    ds: EmbeddingDataset, cls: int, pool: frozenset | None
) -> np.ndarray:
    mask = ds.labels == cls
    if pool is not None:
        mask &= np.isin(ds.wsi_ids, sorted(pool))
    return np.flatnonzero(mask)


def _pick_hetero_supports(
    ds: EmbeddingDataset, candidates: np.ndarray, k: int, rng: np.random.Generator
) -> np.ndarray:
    wsis = np.unique(ds.wsi_ids[candidates])
    order = wsis[rng.permutation(wsis.shape[0])]
    per_wsi = [
        candidates[ds.wsi_ids[candidates] == w][
            rng.permutation(int(np.sum(ds.wsi_ids[candidates] == w)))
        ]
        for w in order
    ]
    chosen: list[int] = []
    round_idx = 0
    while len(chosen) < k:
        took = False
        for stack in per_wsi:
            if round_idx < stack.shape[0]:
                chosen.append(int(stack[round_idx]))
                took = True
                if len(chosen) == k:
                    break
        if not took:
            raise ValueError("not enough candidates for heterogeneous supports")
        round_idx += 1
    return np.asarray(chosen, dtype=np.int64)


def _pick_homo_supports(
    ds: EmbeddingDataset, candidates: np.ndarray, cls: int, k: int, rng: np.random.Generator
) -> np.ndarray:
    wsis = np.unique(ds.wsi_ids[candidates])
    eligible = [w for w in wsis if int(np.sum(ds.wsi_ids[candidates] == w)) >= k]
    if not eligible:
        raise ValueError(
            f"class {cls}: no single WSI holds {k} support samples (homogeneous selection)"
        )
    w = eligible[int(rng.integers(len(eligible)))]
    within = candidates[ds.wsi_ids[candidates] == w]
    return np.sort(rng.choice(within, size=k, replace=False))


def _resolve_task_classes(
    ds: EmbeddingDataset, proto: TaskProtocol, rng: np.random.Generator
) -> np.ndarray:
    labels = ds.distinct_labels()
    if proto.mode == "gfsl":
        if proto.n_way is not None and int(proto.n_way) != labels.shape[0]:
            raise ValueError(
                f"gfsl n_way={proto.n_way} does not match the {labels.shape[0]} dataset classes"
            )
        return labels
    n_way = int(proto.n_way)
    if n_way > labels.shape[0]:
        raise ValueError(f"n_way={n_way} exceeds the {labels.shape[0]} available classes")
    return np.sort(rng.choice(labels, size=n_way, replace=False))


def sample_task(ds: EmbeddingDataset, proto: TaskProtocol, task_index: int) -> MetaTask:
    """Draw one meta-task; deterministic in (ds, proto, task_index)."""
    if ds.labels is None:
        raise ValueError("task sampling requires labels")
    needs_wsi = (
        proto.selection != "uniform"
        or proto.support_pool is not None
        or proto.query_pool is not None
    )
    if needs_wsi and ds.wsi_ids is None:
        raise ValueError(f"{proto.selection} selection requires wsi_ids")
    task_index = int(task_index)
    if task_index < 0:
        raise ValueError("task_index must be non-negative")

    rng = derive_rng(proto.master_seed, task_index)
    classes = _resolve_task_classes(ds, proto, rng)
    k, q = int(proto.k_shot), int(proto.q_query)

    supports: list[np.ndarray] = []
    queries: list[np.ndarray] = []
    for cls in classes:
        cls = int(cls)
        sup_cand = _class_candidates(ds, cls, proto.support_pool)
        if sup_cand.size < k:
            raise ValueError(
                f"class {cls} has {sup_cand.size} support candidates, needs {k}"
            )
        if proto.selection == "hetero_wsi":
            sup = _pick_hetero_supports(ds, sup_cand, k, rng)
        elif proto.selection == "homo_wsi":
            sup = _pick_homo_supports(ds, sup_cand, cls, k, rng)
        else:
            sup = np.sort(rng.choice(sup_cand, size=k, replace=False))

        qry_cand = _class_candidates(ds, cls, proto.query_pool)
        qry_cand = np.setdiff1d(qry_cand, sup)
        if qry_cand.size < q:
            raise ValueError(
                f"class {cls} has {qry_cand.size} query candidates, needs {q}"
            )
        qry = np.sort(rng.choice(qry_cand, size=q, replace=False))
        supports.append(sup)
        queries.append(qry)

    support_indices = np.concatenate(supports)
    query_indices = np.concatenate(queries)
    return MetaTask(
        support_indices=support_indices,
        support_labels=ds.labels[support_indices],
        query_indices=query_indices,
        query_labels=ds.labels[query_indices],
        task_classes=classes,
        task_index=task_index,
    )


def sample_series(ds: EmbeddingDataset, proto: TaskProtocol) -> list[MetaTask]:
    """Tasks 0..num_tasks-1; a pure function of (ds, proto)."""
    return [sample_task(ds, proto, i) for i in range(int(proto.num_tasks))]


def _wsi_goal(ds: EmbeddingDataset, proto: TaskProtocol, cls: int, k: int) -> int:
    candidates = _class_candidates(ds, cls, proto.support_pool)
    return min(k, int(np.unique(ds.wsi_ids[candidates]).shape[0]))


def validate_task(t: MetaTask, ds: EmbeddingDataset, proto: TaskProtocol) -> list[str]:
    """Check every task invariant; returns human-readable violations.

    Reports instead of raising, so series can be linted wholesale.
    """
    violations: list[str] = []
    k, q = int(proto.k_shot), int(proto.q_query)
    n_way = t.task_classes.shape[0]

    overlap = np.intersect1d(t.support_indices, t.query_indices)
    if overlap.size:
        violations.append(f"support/query overlap at indices {overlap.tolist()}")
    if np.unique(t.support_indices).size != t.support_indices.size:
        violations.append("duplicate support indices")
    if np.unique(t.query_indices).size != t.query_indices.size:
        violations.append("duplicate query indices")
    if t.support_indices.size != n_way * k:
        violations.append(
            f"expected {n_way * k} supports, found {t.support_indices.size}"
        )
    if t.query_indices.size != n_way * q:
        violations.append(f"expected {n_way * q} queries, found {t.query_indices.size}")

    if ds.labels is None:
        violations.append("dataset has no labels")
        return violations
    bad = t.support_indices[(t.support_indices < 0) | (t.support_indices >= ds.n_samples)]
    if bad.size:
        violations.append(f"support indices out of range: {bad.tolist()}")
        return violations
    bad = t.query_indices[(t.query_indices < 0) | (t.query_indices >= ds.n_samples)]
    if bad.size:
        violations.append(f"query indices out of range: {bad.tolist()}")
        return violations

    if not np.array_equal(ds.labels[t.support_indices], t.support_labels):
        violations.append("support labels disagree with dataset labels")
    if not np.array_equal(ds.labels[t.query_indices], t.query_labels):
        violations.append("query labels disagree with dataset labels")

    for cls in t.task_classes:
        cls = int(cls)
        n_sup = int(np.sum(t.support_labels == cls))
        n_qry = int(np.sum(t.query_labels == cls))
        if n_sup != k:
            violations.append(f"class {cls} has {n_sup} supports, expected {k}")
        if n_qry != q:
            violations.append(f"class {cls} has {n_qry} queries, expected {q}")

    all_labels = ds.distinct_labels()
    if proto.mode == "gfsl":
        if not np.array_equal(t.task_classes, all_labels):
            violations.append(
                f"gfsl task classes {t.task_classes.tolist()} != dataset classes {all_labels.tolist()}"
            )
    else:
        unknown = np.setdiff1d(t.task_classes, all_labels)
        if unknown.size:
            violations.append(f"fsl task classes outside dataset: {unknown.tolist()}")
        if proto.n_way is not None and n_way != int(proto.n_way):
            violations.append(f"task has {n_way} classes, protocol says {proto.n_way}")

    if proto.support_pool is not None and ds.wsi_ids is not None:
        outside = t.support_indices[
            ~np.isin(ds.wsi_ids[t.support_indices], sorted(proto.support_pool))
        ]
        if outside.size:
            violations.append(f"supports outside support pool: {outside.tolist()}")
    if proto.query_pool is not None and ds.wsi_ids is not None:
        outside = t.query_indices[
            ~np.isin(ds.wsi_ids[t.query_indices], sorted(proto.query_pool))
        ]
        if outside.size:
            violations.append(f"queries outside query pool: {outside.tolist()}")

    if proto.selection in ("hetero_wsi", "homo_wsi"):
        if ds.wsi_ids is None:
            violations.append(f"{proto.selection} requires wsi_ids")
            return violations
        for cls in t.task_classes:
            cls = int(cls)
            sup = t.support_indices[t.support_labels == cls]
            wsis = np.unique(ds.wsi_ids[sup])
            if proto.selection == "homo_wsi" and wsis.size > 1:
                violations.append(
                    f"homogeneous violation for class {cls}: supports span WSIs {wsis.tolist()}"
                )
            if proto.selection == "hetero_wsi":
                goal = _wsi_goal(ds, proto, cls, k)
                if wsis.size < goal:
                    violations.append(
                        f"heterogeneous violation for class {cls}: {wsis.size} distinct WSIs,"
                        f" expected {goal}"
                    )
    return violations


def save_task_series(tasks, path) -> None:
    """Write tasks as JSON lines for audit/replay."""
    with open(path, "w") as fh:
        for t in tasks:
            fh.write(
                json.dumps(
                    {
                        "task_index": t.task_index,
                        "task_classes": t.task_classes.tolist(),
                        "support_indices": t.support_indices.tolist(),
                        "support_labels": t.support_labels.tolist(),
                        "query_indices": t.query_indices.tolist(),
                        "query_labels": t.query_labels.tolist(),
                    },
                    separators=(",", ":"),
                )
            )
            fh.write("\n")


def load_task_series(path) -> list[MetaTask]:
    tasks = []
    with open(path) as fh:
        for line_no, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                raise ValueError(f"line {line_no} is not valid JSON") from None
            try:
                tasks.append(
                    MetaTask(
                        support_indices=np.asarray(rec["support_indices"]),
                        support_labels=np.asarray(rec["support_labels"]),
                        query_indices=np.asarray(rec["query_indices"]),
                        query_labels=np.asarray(rec["query_labels"]),
                        task_classes=np.asarray(rec["task_classes"]),
                        task_index=int(rec["task_index"]),
                    )
                )
            except KeyError as missing:
                raise ValueError(f"line {line_no} is missing field {missing}") from None
    return tasks
