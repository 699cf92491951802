"""Configuration-driven evaluation runs and ablation sweeps.

One JSON-serializable config describes a complete run: where the
embeddings come from, how the variation dictionary is built, how support
samples are augmented, which classifier scores the queries, and the task
protocol. ``run_experiment`` executes the pipeline end to end and, when
an output directory is set, writes a CSV/JSON report plus a replay
manifest. Every random stream derives from the master seed, so identical
configs produce byte-identical artifacts.
"""

from __future__ import annotations

import contextlib
import csv
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from ._parallel import map_chunks
from ._seeding import check_seed, derive_seeds
from ._version import __version__
from .classifiers import (
    fit_logistic,
    fit_nearest_centroid,
    fit_ridge,
    predict_linear,
    predict_nearest_centroid,
)
from .cluster import kmeans_fit
from .dictionary import (
    BaseDictionary,
    ClassStats,
    CovarianceType,
    augment,
    build_dictionary,
    build_supervised_dictionary,
    class_stats,
    distribution_calibration,
    sample_gaussian,
)
from .metatask import TaskProtocol, sample_series
from .metrics import (
    REPORT_CSV_COLUMNS,
    AggregateReport,
    build_report,
    f1_per_class,
    group_task_metrics,
    report_csv_row,
    report_to_dict,
)
from .store import (
    EmbeddingDataset,
    SyntheticSpec,
    concat_datasets,
    generate_synthetic,
    l2_normalize,
    load_embeddings,
)

AUGMENT_METHODS = ("none", "la", "dc")
CLASSIFIER_KINDS = ("centroid", "logistic", "ridge")
SWEEP_AXES = ("prototypes", "cov_type", "aug_count", "seed")

# Stream tag for per-support augmentation draws; task sampling uses the
# bare (master_seed, task_index) path, so the two never collide.
_AUG_STREAM = 1


class ExperimentError(RuntimeError):
    """Pipeline failure annotated with the stage (and task) that raised it."""


@contextlib.contextmanager
def _stage(name: str):
    try:
        yield
    except ExperimentError:
        raise
    except Exception as exc:
        raise ExperimentError(f"[{name}] {exc}") from exc


def _check_keys(section: str, given: dict, allowed) -> None:
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ValueError(f"unknown {section} option(s): {', '.join(unknown)}")


@dataclass(frozen=True)
class DataConfig:
    """Embedding source: a pair of files or one synthetic spec, not both."""

    base_path: str | None = None
    novel_path: str | None = None
    format: str = "binary"
    synthetic: SyntheticSpec | None = None

    def __post_init__(self) -> None:
        if self.format not in ("binary", "csv"):
            raise ValueError(f"format must be 'binary' or 'csv', got {self.format!r}")
        have_files = self.base_path is not None or self.novel_path is not None
        if self.synthetic is not None and have_files:
            raise ValueError("give either embedding files or a synthetic spec, not both")
        if self.synthetic is None:
            if self.base_path is None or self.novel_path is None:
                raise ValueError("file data needs both base_path and novel_path")

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        _check_keys("data", d, ("base_path", "novel_path", "format", "synthetic"))
        spec = d.get("synthetic")
        if spec is not None:
            _check_keys("data.synthetic", spec, [f.name for f in dataclasses.fields(SyntheticSpec)])
            spec = SyntheticSpec(**spec)
        return cls(
            base_path=d.get("base_path"),
            novel_path=d.get("novel_path"),
            format=d.get("format", "binary"),
            synthetic=spec,
        )

    def to_dict(self) -> dict:
        return {
            "base_path": self.base_path,
            "novel_path": self.novel_path,
            "format": self.format,
            "synthetic": None if self.synthetic is None else dataclasses.asdict(self.synthetic),
        }


@dataclass(frozen=True)
class DictionaryConfig:
    """Variation-dictionary settings, including the clustering that feeds it."""

    C: int = 16
    cov_type: str = "full"
    ridge_eps: float = 1e-6
    supervised: bool = False
    kmeans_seed: int = 66
    kmeans_max_iters: int = 100
    kmeans_tol: float = 1e-4

    def __post_init__(self) -> None:
        if int(self.C) < 1:
            raise ValueError("C must be at least 1")
        object.__setattr__(self, "C", int(self.C))
        object.__setattr__(self, "cov_type", CovarianceType.parse(self.cov_type).value)
        if self.ridge_eps < 0:
            raise ValueError("ridge_eps must be non-negative")
        check_seed(self.kmeans_seed, "kmeans_seed")
        if int(self.kmeans_max_iters) < 1:
            raise ValueError("kmeans_max_iters must be at least 1")
        if self.kmeans_tol < 0:
            raise ValueError("kmeans_tol must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "DictionaryConfig":
        _check_keys("dictionary", d, [f.name for f in dataclasses.fields(cls)])
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class AugmentationConfig:
    """How each support embedding is expanded before classifier fitting."""

    method: str = "la"
    T: int = 100
    renormalize: bool = False
    dc_k: int = 1
    dc_alpha: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "method", str(self.method).lower())
        if self.method not in AUGMENT_METHODS:
            raise ValueError(f"method must be one of {AUGMENT_METHODS}, got {self.method!r}")
        if int(self.T) < 1:
            raise ValueError("T must be at least 1 (the original embedding is included)")
        object.__setattr__(self, "T", int(self.T))
        if int(self.dc_k) < 1:
            raise ValueError("dc_k must be at least 1")

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationConfig":
        _check_keys("augmentation", d, [f.name for f in dataclasses.fields(cls)])
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class ClassifierConfig:
    """Which classifier scores the queries, with its hyperparameters."""

    kind: str = "ridge"
    l2: float = 1.0
    alpha: float = 1.0
    max_iters: int = 200
    tol: float = 1e-5

    def __post_init__(self) -> None:
        if self.kind not in CLASSIFIER_KINDS:
            raise ValueError(f"kind must be one of {CLASSIFIER_KINDS}, got {self.kind!r}")
        if self.l2 <= 0 or self.alpha <= 0:
            raise ValueError("l2 and alpha must be positive")
        if int(self.max_iters) < 1:
            raise ValueError("max_iters must be at least 1")

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierConfig":
        _check_keys("classifier", d, [f.name for f in dataclasses.fields(cls)])
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class ProtocolConfig:
    """Task-protocol fields; the master seed is supplied at the top level."""

    mode: str = "gfsl"
    n_way: int | None = None
    k_shot: int = 5
    q_query: int = 15
    selection: str = "uniform"
    support_pool: tuple | None = None
    query_pool: tuple | None = None
    num_tasks: int = 1000

    def __post_init__(self) -> None:
        for name in ("support_pool", "query_pool"):
            pool = getattr(self, name)
            if pool is not None:
                object.__setattr__(self, name, tuple(sorted(int(w) for w in pool)))

    @classmethod
    def from_dict(cls, d: dict) -> "ProtocolConfig":
        _check_keys("protocol", d, [f.name for f in dataclasses.fields(cls)])
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "n_way": self.n_way,
            "k_shot": self.k_shot,
            "q_query": self.q_query,
            "selection": self.selection,
            "support_pool": None if self.support_pool is None else list(self.support_pool),
            "query_pool": None if self.query_pool is None else list(self.query_pool),
            "num_tasks": self.num_tasks,
        }

    def to_protocol(self, master_seed: int) -> TaskProtocol:
        return TaskProtocol(
            mode=self.mode,
            n_way=self.n_way,
            k_shot=self.k_shot,
            q_query=self.q_query,
            selection=self.selection,
            support_pool=None if self.support_pool is None else frozenset(self.support_pool),
            query_pool=None if self.query_pool is None else frozenset(self.query_pool),
            master_seed=master_seed,
            num_tasks=self.num_tasks,
        )


_TOP_KEYS = (
    "data",
    "dictionary",
    "augmentation",
    "classifier",
    "protocol",
    "normalize",
    "master_seed",
    "label",
    "output_dir",
)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one evaluation run depends on, in one hashable value."""

    data: DataConfig
    dictionary: DictionaryConfig = field(default_factory=DictionaryConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    normalize: bool = True
    master_seed: int = 66
    label: str = "run"
    output_dir: str | None = None

    def __post_init__(self) -> None:
        check_seed(self.master_seed, "master_seed")
        if not self.label:
            raise ValueError("label must be non-empty")
        # Fails fast on invalid protocol combinations (wrong mode names,
        # hetero_wsi with k_shot=1, overlapping pools).
        self.protocol.to_protocol(self.master_seed)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        _check_keys("config", d, _TOP_KEYS)
        if "data" not in d:
            raise ValueError("config needs a 'data' section")
        return cls(
            data=DataConfig.from_dict(d["data"]),
            dictionary=DictionaryConfig.from_dict(d.get("dictionary", {})),
            augmentation=AugmentationConfig.from_dict(d.get("augmentation", {})),
            classifier=ClassifierConfig.from_dict(d.get("classifier", {})),
            protocol=ProtocolConfig.from_dict(d.get("protocol", {})),
            normalize=bool(d.get("normalize", True)),
            master_seed=d.get("master_seed", 66),
            label=d.get("label", "run"),
            output_dir=d.get("output_dir"),
        )

    def to_dict(self) -> dict:
        return {
            "data": self.data.to_dict(),
            "dictionary": self.dictionary.to_dict(),
            "augmentation": self.augmentation.to_dict(),
            "classifier": self.classifier.to_dict(),
            "protocol": self.protocol.to_dict(),
            "normalize": self.normalize,
            "master_seed": self.master_seed,
            "label": self.label,
            "output_dir": self.output_dir,
        }


def config_hash(config: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON encoding; stable across processes.

    The output location is excluded: where artifacts land cannot change
    what the run computes, so moving a run does not change its identity.
    """
    d = config.to_dict()
    d.pop("output_dir")
    canon = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class _Prepared:
    """Everything the per-task loop reads; immutable and thread-shared."""

    eval_ds: EmbeddingDataset
    tasks: list
    dictionary: BaseDictionary | None
    stats: ClassStats | None
    novel_ids: frozenset


def _load_pair(cfg: ExperimentConfig) -> tuple[EmbeddingDataset, EmbeddingDataset]:
    dc = cfg.data
    if dc.synthetic is not None:
        base, novel = generate_synthetic(dc.synthetic)
    else:
        base = load_embeddings(dc.base_path, format=dc.format)
        novel = load_embeddings(dc.novel_path, format=dc.format)
    for name, ds in (("base", base), ("novel", novel)):
        if ds.labels is None:
            raise ValueError(f"{name} dataset has no labels; evaluation needs them")
    if cfg.normalize:
        base, novel = l2_normalize(base), l2_normalize(novel)
    return base, novel


def _prepare(cfg: ExperimentConfig) -> _Prepared:
    with _stage("data"):
        base, novel = _load_pair(cfg)

    dictionary = None
    stats = None
    if cfg.augmentation.method == "la":
        dcfg = cfg.dictionary
        if dcfg.supervised:
            with _stage("dictionary"):
                dictionary = build_supervised_dictionary(
                    base, cov_type=dcfg.cov_type, ridge_eps=dcfg.ridge_eps
                )
        else:
            with _stage("cluster"):
                model = kmeans_fit(
                    base,
                    dcfg.C,
                    seed=dcfg.kmeans_seed,
                    max_iters=dcfg.kmeans_max_iters,
                    tol=dcfg.kmeans_tol,
                )
            with _stage("dictionary"):
                dictionary = build_dictionary(
                    base, model.assignments, dcfg.C, cov_type=dcfg.cov_type, ridge_eps=dcfg.ridge_eps
                )
    elif cfg.augmentation.method == "dc":
        with _stage("dictionary"):
            stats = class_stats(base)

    with _stage("tasks"):
        eval_ds = concat_datasets(base, novel) if cfg.protocol.mode == "gfsl" else novel
        proto = cfg.protocol.to_protocol(cfg.master_seed)
        tasks = sample_series(eval_ds, proto)

    return _Prepared(
        eval_ds=eval_ds,
        tasks=tasks,
        dictionary=dictionary,
        stats=stats,
        novel_ids=frozenset(int(c) for c in novel.distinct_labels()),
    )


def _training_rows(
    cfg: ExperimentConfig, prep: _Prepared, Xs: np.ndarray, ys: np.ndarray, task_index: int
) -> tuple[np.ndarray, np.ndarray]:
    """Expand the support set according to the configured augmentation."""
    acfg = cfg.augmentation
    if acfg.method == "none" or acfg.T == 1:
        return Xs, ys
    T = acfg.T
    seeds = derive_seeds(cfg.master_seed, task_index, _AUG_STREAM, count=Xs.shape[0])
    blocks = []
    if acfg.method == "la":
        for j in range(Xs.shape[0]):
            blocks.append(
                augment(
                    prep.dictionary,
                    Xs[j],
                    T=T,
                    rng_seed=int(seeds[j]),
                    renormalize=acfg.renormalize,
                )
            )
    else:
        for j in range(Xs.shape[0]):
            mu, sigma = distribution_calibration(prep.stats, Xs[j], k=acfg.dc_k, alpha=acfg.dc_alpha)
            draws = sample_gaussian(
                mu, sigma, T - 1, int(seeds[j]), ridge_eps=cfg.dictionary.ridge_eps
            )
            blocks.append(np.vstack([Xs[j][None, :], draws]))
    return np.vstack(blocks), np.repeat(ys, T)


def _fit_predict(ccfg: ClassifierConfig, Xtr, ytr, Xq) -> np.ndarray:
    if ccfg.kind == "centroid":
        return predict_nearest_centroid(fit_nearest_centroid(Xtr, ytr), Xq)
    if ccfg.kind == "logistic":
        model = fit_logistic(Xtr, ytr, l2=ccfg.l2, max_iters=ccfg.max_iters, tol=ccfg.tol)
        return predict_linear(model, Xq)
    return predict_linear(fit_ridge(Xtr, ytr, alpha=ccfg.alpha), Xq)


def _evaluate_task(cfg: ExperimentConfig, prep: _Prepared, t) -> tuple[float, float, float]:
    with _stage(f"task {t.task_index}"):
        X = prep.eval_ds.features.astype(np.float64)
        Xs, ys = X[t.support_indices], t.support_labels
        Xq, yq = X[t.query_indices], t.query_labels
        Xtr, ytr = _training_rows(cfg, prep, Xs, ys, t.task_index)
        pred = _fit_predict(cfg.classifier, Xtr, ytr, Xq)
        score = f1_per_class(pred, yq, t.task_classes, task_index=t.task_index)
        if cfg.protocol.mode == "gfsl":
            base_ids = [int(c) for c in t.task_classes if int(c) not in prep.novel_ids]
            novel_ids = [int(c) for c in t.task_classes if int(c) in prep.novel_ids]
            return group_task_metrics(score, base_ids, novel_ids)
        mean_f1 = float(np.mean([score.f1_of(int(c)) for c in t.task_classes]))
        return mean_f1, mean_f1, mean_f1


def _group_names(cfg: ExperimentConfig) -> tuple[str, str]:
    if cfg.protocol.mode == "gfsl":
        return "base", "novel"
    return "all", "all"


def run_experiment(config: ExperimentConfig) -> tuple[AggregateReport, dict]:
    """Execute one configured run; returns (report, paths of written files).

    The paths dict is empty when the config has no output_dir. Task
    evaluation parallelizes over LATENTAUG_THREADS with results collected
    in task order, so thread count never changes the report.
    """
    prep = _prepare(config)
    triples = map_chunks(lambda t: _evaluate_task(config, prep, t), prep.tasks)
    a_name, b_name = _group_names(config)
    with _stage("report"):
        report = build_report(
            triples,
            group_a_name=a_name,
            group_b_name=b_name,
            metadata={
                "label": config.label,
                "config_hash": config_hash(config),
                "version": __version__,
                "mode": config.protocol.mode,
                "method": config.augmentation.method,
                "classifier": config.classifier.kind,
            },
        )
    paths: dict = {}
    if config.output_dir is not None:
        with _stage("artifacts"):
            paths = write_run_artifacts(config, report)
    return report, paths


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")


def _write_csv(path: str, header: list, rows: list) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def replay_manifest(config: ExperimentConfig) -> dict:
    """Everything needed to reproduce a run byte for byte."""
    seeds = {
        "master_seed": config.master_seed,
        "kmeans_seed": config.dictionary.kmeans_seed,
    }
    if config.data.synthetic is not None:
        seeds["data_seed"] = config.data.synthetic.seed
    return {
        "config": config.to_dict(),
        "config_hash": config_hash(config),
        "seeds": seeds,
        "version": __version__,
    }


def write_run_artifacts(config: ExperimentConfig, report: AggregateReport) -> dict:
    """Write report.csv, report.json and manifest.json under output_dir."""
    out = config.output_dir
    os.makedirs(out, exist_ok=True)
    paths = {
        "report_csv": os.path.join(out, "report.csv"),
        "report_json": os.path.join(out, "report.json"),
        "manifest": os.path.join(out, "manifest.json"),
    }
    _write_csv(paths["report_csv"], REPORT_CSV_COLUMNS, [report_csv_row(config.label, report)])
    _write_json(paths["report_json"], report_to_dict(report))
    _write_json(paths["manifest"], replay_manifest(config))
    return paths


def _apply_axis(config: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "prototypes":
        section = dataclasses.replace(config.dictionary, C=int(value))
        return dataclasses.replace(config, dictionary=section)
    if axis == "cov_type":
        section = dataclasses.replace(config.dictionary, cov_type=str(value))
        return dataclasses.replace(config, dictionary=section)
    if axis == "aug_count":
        section = dataclasses.replace(config.augmentation, T=int(value))
        return dataclasses.replace(config, augmentation=section)
    section = dataclasses.replace(config.dictionary, kmeans_seed=int(value))
    return dataclasses.replace(config, dictionary=section)


def run_ablation_sweep(
    config: ExperimentConfig, axis: str, values
) -> tuple[list, dict]:
    """One run per axis value on a shared task series; returns (rows, paths).

    Rows are (value, AggregateReport) pairs in the given value order. The
    task series is identical across values because neither the protocol
    nor the master seed changes, so differences are attributable to the
    axis alone. When output_dir is set, writes sweep.csv (long format, one
    row per value) and sweep.json.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}, got {axis!r}")
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")

    rows = []
    for value in values:
        run_cfg = _apply_axis(config, axis, value)
        # Per-value reports are assembled here; suppress nested writes.
        run_cfg = dataclasses.replace(run_cfg, output_dir=None)
        report, _ = run_experiment(run_cfg)
        rows.append((value, report))

    paths: dict = {}
    if config.output_dir is not None:
        with _stage("artifacts"):
            os.makedirs(config.output_dir, exist_ok=True)
            paths = {
                "sweep_csv": os.path.join(config.output_dir, "sweep.csv"),
                "sweep_json": os.path.join(config.output_dir, "sweep.json"),
            }
            csv_rows = [
                [axis, str(value)] + report_csv_row(f"{config.label}[{axis}={value}]", report)
                for value, report in rows
            ]
            _write_csv(paths["sweep_csv"], ["axis", "value"] + REPORT_CSV_COLUMNS, csv_rows)
            _write_json(
                paths["sweep_json"],
                {
                    "axis": axis,
                    "runs": [
                        {"value": value, "report": report_to_dict(report)}
                        for value, report in rows
                    ],
                    "config_hash": config_hash(config),
                    "version": __version__,
                },
            )
    return rows, paths
