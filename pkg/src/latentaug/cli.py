"""Command-line interface.

Subcommands:
  synth     generate a synthetic (base, novel) embedding pair
  cluster   fit seeded k-means on an embedding file and save the model
  dict      build a variation dictionary and save it
  eval      run one configured evaluation and write reports
  sweep     run an ablation sweep along one axis
  validate  lint datasets and a sampled task series

Run configs are JSON files; any flag given on the command line overrides
the file value, which overrides the built-in default. All numbers print
with 6 significant digits. Exit status: 0 success, 1 failure, 2 usage.
"""

from __future__ import annotations

import argparse
import json
import sys

from ._version import __version__
from .cluster import kmeans_fit, save_cluster_model
from .dictionary import build_dictionary, build_supervised_dictionary, save_dictionary
from .experiment import ExperimentConfig, ExperimentError, run_ablation_sweep, run_experiment
from .metatask import TaskProtocol, sample_series, validate_task
from .store import (
    concat_datasets,
    generate_synthetic,
    l2_normalize,
    load_embeddings,
    save_embeddings,
    save_embeddings_csv,
    SyntheticSpec,
)


def _g(x: float) -> str:
    return f"{float(x):.6g}"


def _save(ds, path: str, fmt: str) -> None:
    if fmt == "csv":
        save_embeddings_csv(ds, path)
    else:
        save_embeddings(ds, path)


def _load_inputs(paths, fmt: str, normalize: bool):
    ds = load_embeddings(paths[0], format=fmt)
    for extra in paths[1:]:
        ds = concat_datasets(ds, load_embeddings(extra, format=fmt))
    return l2_normalize(ds) if normalize else ds


def _add_data_flags(p: argparse.ArgumentParser, many: bool = False) -> None:
    if many:
        p.add_argument("--input", nargs="+", required=True, metavar="PATH",
                       help="embedding file(s); several files are concatenated")
    else:
        p.add_argument("--input", required=True, metavar="PATH", help="embedding file")
    p.add_argument("--format", choices=("binary", "csv"), default="binary")
    p.add_argument("--normalize", action="store_true",
                   help="L2-normalize rows after loading")


def _cmd_synth(args) -> int:
    spec = SyntheticSpec(
        dim=args.dim,
        base_classes=args.base_classes,
        novel_classes=args.novel_classes,
        clusters_per_class=args.clusters_per_class,
        samples_per_class=args.samples_per_class,
        mean_scale=args.mean_scale,
        covariance_scale=args.covariance_scale,
        shared_variation=not args.independent_variation,
        wsi_count=args.wsi_count,
        seed=args.seed,
    )
    base, novel = generate_synthetic(spec)
    if args.normalize:
        base, novel = l2_normalize(base), l2_normalize(novel)
    _save(base, args.out_base, args.format)
    _save(novel, args.out_novel, args.format)
    print(f"wrote {base.n_samples} base rows (dim {base.dim}) to {args.out_base}")
    print(f"wrote {novel.n_samples} novel rows (dim {novel.dim}) to {args.out_novel}")
    return 0


def _cmd_cluster(args) -> int:
    ds = _load_inputs(args.input, args.format, args.normalize)
    model = kmeans_fit(ds, args.C, seed=args.seed, max_iters=args.max_iters, tol=args.tol)
    save_cluster_model(model, args.out)
    print(
        f"k-means: C={model.n_clusters} inertia={_g(model.inertia)} "
        f"iterations={model.iterations_run} converged={model.converged}"
    )
    print(f"wrote {args.out}")
    return 0


def _cmd_dict(args) -> int:
    ds = _load_inputs(args.input, args.format, args.normalize)
    if args.supervised:
        dictionary = build_supervised_dictionary(ds, cov_type=args.cov_type, ridge_eps=args.ridge_eps)
    else:
        model = kmeans_fit(ds, args.C, seed=args.seed, max_iters=args.max_iters, tol=args.tol)
        dictionary = build_dictionary(
            ds, model.assignments, args.C, cov_type=args.cov_type, ridge_eps=args.ridge_eps
        )
    save_dictionary(dictionary, args.out)
    print(
        f"dictionary: {dictionary.n_entries} entries, cov_type={dictionary.covariance_type.value}, "
        f"source={dictionary.source}"
    )
    print(f"wrote {args.out}")
    return 0


# (flag dest, config path) pairs applied on top of the config file.
_OVERRIDES = [
    ("method", ("augmentation", "method")),
    ("aug_count", ("augmentation", "T")),
    ("renormalize", ("augmentation", "renormalize")),
    ("classifier", ("classifier", "kind")),
    ("prototypes", ("dictionary", "C")),
    ("cov_type", ("dictionary", "cov_type")),
    ("kmeans_seed", ("dictionary", "kmeans_seed")),
    ("supervised", ("dictionary", "supervised")),
    ("mode", ("protocol", "mode")),
    ("k_shot", ("protocol", "k_shot")),
    ("q_query", ("protocol", "q_query")),
    ("n_way", ("protocol", "n_way")),
    ("selection", ("protocol", "selection")),
    ("num_tasks", ("protocol", "num_tasks")),
    ("master_seed", ("master_seed",)),
    ("normalize", ("normalize",)),
    ("label", ("label",)),
    ("output_dir", ("output_dir",)),
]


def _set_path(d: dict, path, value) -> None:
    for key in path[:-1]:
        d = d.setdefault(key, {})
        if not isinstance(d, dict):
            raise ValueError(f"config path {'.'.join(path)} crosses a non-section value")
    d[path[-1]] = value


def _load_config_dict(args) -> dict:
    if args.config is None and args.manifest is None:
        raise ValueError("give --config or --manifest")
    path = args.config if args.config is not None else args.manifest
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    if args.manifest is not None:
        if "config" not in payload:
            raise ValueError(f"{path} has no 'config' section; is it a replay manifest?")
        payload = payload["config"]
    return payload


def _build_config(args) -> ExperimentConfig:
    d = _load_config_dict(args)
    for dest, path in _OVERRIDES:
        value = getattr(args, dest, None)
        if value is not None:
            _set_path(d, path, value)
    for expr in args.set or []:
        path, sep, raw = expr.partition("=")
        if not sep or not path:
            raise ValueError(f"--set expects section.key=value, got {expr!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        _set_path(d, path.split("."), value)
    return ExperimentConfig.from_dict(d)


def _print_report(label: str, report) -> None:
    n = report.num_tasks
    if report.group_a_name == report.group_b_name:
        print(
            f"{label}: {report.group_a_name} {_g(report.group_a_mean)} "
            f"±{_g(report.group_a_ci)} ({n} tasks)"
        )
        return
    print(
        f"{label}: {report.group_a_name} {_g(report.group_a_mean)} ±{_g(report.group_a_ci)}  "
        f"{report.group_b_name} {_g(report.group_b_mean)} ±{_g(report.group_b_ci)}  "
        f"hmean {_g(report.hmean_mean)} ±{_g(report.hmean_ci)} ({n} tasks)"
    )


def _cmd_eval(args) -> int:
    config = _build_config(args)
    report, paths = run_experiment(config)
    _print_report(config.label, report)
    for path in paths.values():
        print(f"wrote {path}")
    return 0


def _cmd_sweep(args) -> int:
    config = _build_config(args)
    values = []
    for raw in args.values.split(","):
        raw = raw.strip()
        if not raw:
            continue
        try:
            values.append(int(raw))
        except ValueError:
            values.append(raw)
    rows, paths = run_ablation_sweep(config, args.axis, values)
    for value, report in rows:
        _print_report(f"{args.axis}={value}", report)
    for path in paths.values():
        print(f"wrote {path}")
    return 0


def _pool(raw: str | None):
    if raw is None:
        return None
    return frozenset(int(w) for w in raw.split(",") if w.strip())


def _cmd_validate(args) -> int:
    ds = _load_inputs(args.input, args.format, args.normalize)
    labeled = "yes" if ds.labels is not None else "no"
    wsi = "yes" if ds.wsi_ids is not None else "no"
    print(f"dataset ok: {ds.n_samples} rows, dim {ds.dim}, labels {labeled}, wsi_ids {wsi}")
    if ds.labels is None:
        print("no labels: task lint skipped")
        return 0
    proto = TaskProtocol(
        mode=args.mode,
        n_way=args.n_way,
        k_shot=args.k_shot,
        q_query=args.q_query,
        selection=args.selection,
        support_pool=_pool(args.support_pool),
        query_pool=_pool(args.query_pool),
        master_seed=args.master_seed,
        num_tasks=args.num_tasks,
    )
    tasks = sample_series(ds, proto)
    violations = []
    for t in tasks:
        for msg in validate_task(t, ds, proto):
            violations.append(f"task {t.task_index}: {msg}")
    print(f"validated {len(tasks)} tasks: {len(violations)} violations")
    for line in violations[:10]:
        print(line)
    if len(violations) > 10:
        print(f"... {len(violations) - 10} more")
    return 1 if violations else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentaug",
        description="Few-shot embedding evaluation with latent augmentation.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic (base, novel) embedding pair")
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--base-classes", type=int, default=7)
    p.add_argument("--novel-classes", type=int, default=2)
    p.add_argument("--clusters-per-class", type=int, default=2)
    p.add_argument("--samples-per-class", type=int, default=200)
    p.add_argument("--mean-scale", type=float, default=1.0)
    p.add_argument("--covariance-scale", type=float, default=0.3)
    p.add_argument("--independent-variation", action="store_true",
                   help="draw novel-class covariances independently of base clusters")
    p.add_argument("--wsi-count", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--format", choices=("binary", "csv"), default="binary")
    p.add_argument("--out-base", required=True, metavar="PATH")
    p.add_argument("--out-novel", required=True, metavar="PATH")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("cluster", help="fit seeded k-means and save the model")
    _add_data_flags(p, many=True)
    p.add_argument("--C", type=int, default=16, help="number of prototypes")
    p.add_argument("--seed", type=int, default=66)
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--out", required=True, metavar="PATH")
    p.set_defaults(func=_cmd_cluster)

    p = sub.add_parser("dict", help="build a variation dictionary and save it")
    _add_data_flags(p, many=True)
    p.add_argument("--C", type=int, default=16)
    p.add_argument("--seed", type=int, default=66)
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--cov-type", default="full",
                   choices=("full", "tied", "diag", "spherical", "none"))
    p.add_argument("--ridge-eps", type=float, default=1e-6)
    p.add_argument("--supervised", action="store_true",
                   help="one entry per labeled class instead of k-means clusters")
    p.add_argument("--out", required=True, metavar="PATH")
    p.set_defaults(func=_cmd_dict)

    for name, help_text in (
        ("eval", "run one configured evaluation"),
        ("sweep", "run an ablation sweep along one axis"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", metavar="PATH", help="JSON run config")
        p.add_argument("--manifest", metavar="PATH", help="replay manifest from a previous run")
        p.add_argument("--method", choices=("none", "la", "dc"))
        p.add_argument("--aug-count", type=int, metavar="T")
        p.add_argument("--renormalize", action=argparse.BooleanOptionalAction, default=None)
        p.add_argument("--classifier", choices=("centroid", "logistic", "ridge"))
        p.add_argument("--prototypes", type=int, metavar="C")
        p.add_argument("--cov-type", choices=("full", "tied", "diag", "spherical", "none"))
        p.add_argument("--kmeans-seed", type=int)
        p.add_argument("--supervised", action=argparse.BooleanOptionalAction, default=None)
        p.add_argument("--mode", choices=("fsl", "gfsl"))
        p.add_argument("--k-shot", type=int)
        p.add_argument("--q-query", type=int)
        p.add_argument("--n-way", type=int)
        p.add_argument("--selection", choices=("uniform", "hetero_wsi", "homo_wsi"))
        p.add_argument("--num-tasks", type=int)
        p.add_argument("--master-seed", type=int)
        p.add_argument("--normalize", action=argparse.BooleanOptionalAction, default=None)
        p.add_argument("--label")
        p.add_argument("--output-dir", metavar="DIR")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override any config field (repeatable)")
        if name == "sweep":
            p.add_argument("--axis", required=True,
                           choices=("prototypes", "cov_type", "aug_count", "seed"))
            p.add_argument("--values", required=True,
                           help="comma-separated axis values, e.g. 2,4,8,16")
            p.set_defaults(func=_cmd_sweep)
        else:
            p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("validate", help="lint datasets and a sampled task series")
    _add_data_flags(p, many=True)
    p.add_argument("--mode", choices=("fsl", "gfsl"), default="gfsl")
    p.add_argument("--n-way", type=int)
    p.add_argument("--k-shot", type=int, default=5)
    p.add_argument("--q-query", type=int, default=15)
    p.add_argument("--selection", choices=("uniform", "hetero_wsi", "homo_wsi"), default="uniform")
    p.add_argument("--support-pool", metavar="IDS", help="comma-separated WSI ids")
    p.add_argument("--query-pool", metavar="IDS", help="comma-separated WSI ids")
    p.add_argument("--num-tasks", type=int, default=1000)
    p.add_argument("--master-seed", type=int, default=66)
    p.set_defaults(func=_cmd_validate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, ExperimentError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
