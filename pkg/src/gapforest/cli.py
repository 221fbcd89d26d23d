"""Command-line entry point: ``gapforest {synth,train,explain,verify,eval}``.

Exit codes: 0 success, 1 verification failure, 2 usage or input error.
Every run writes one JSON manifest describing its inputs and outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import data as dio
from . import evaluate as ev
from . import explain as ex
from . import forest as fo
from . import proximity as px

log = logging.getLogger("gapforest")

EXIT_OK, EXIT_VERIFY_FAILED, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Collects manifest fields while a command executes."""

    def __init__(self, args, command):
        self.args = args
        self.command = command
        self.start = time.perf_counter()
        self.inputs = {}
        self.outputs = []

    def input(self, path):
        if path:
            self.inputs[str(path)] = _digest(path)
        return path

    def output(self, path):
        self.outputs.append(str(path))
        return path

    def write_manifest(self, path, extra=None):
        config = {k: v for k, v in vars(self.args).items() if k != "func"}
        manifest = {
            "command": self.command,
            "config": config,
            "seed": getattr(self.args, "seed", None),
            "inputs": self.inputs,
            "outputs": self.outputs,
            "version": __version__,
            "duration_s": time.perf_counter() - self.start,
        }
        if extra:
            manifest.update(extra)
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        ev.write_json(manifest, path)


def _manifest_path(args, fallback):
    if getattr(args, "manifest", None):
        return Path(args.manifest)
    if getattr(args, "out", None) and Path(args.out).suffix == "":
        return Path(args.out) / "manifest.json"
    return Path(fallback)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _max_features(text):
    if text in ("all", "sqrt"):
        return text
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("expected 'all', 'sqrt' or a fraction") from None


def _synthetic_config(args) -> dio.SyntheticConfig:
    if args.synthetic_config:
        return dio.SyntheticConfig.from_file(args.synthetic_config)
    m = {"n_rows": args.rows, "n_numeric": args.numeric, "n_categorical": args.categorical,
         "noise": args.noise, "seed": args.seed}
    if args.noise == "heteroscedastic":
        m.update(sigma_low=args.sigma_low, sigma_high=args.sigma_high)
    else:
        m.update(sigma=args.sigma)
    return dio.SyntheticConfig.from_mapping(m)


def _load_queries(forest, path, target=None):
    target = target or forest.target_name
    return dio.load_csv_with(path, forest.columns, target_column=target,
                             timestamp_column=forest.timestamp_name,
                             target_encoding=forest.target_encoding)


# --- commands --------------------------------------------------------------


def cmd_synth(args) -> int:
    run = Run(args, "synth")
    if args.synthetic_config:
        run.input(args.synthetic_config)
    cfg = _synthetic_config(args)
    ds = dio.generate_synthetic(cfg)
    dio.write_csv(ds, run.output(args.out))
    print(f"wrote {ds.n_rows} rows to {args.out}")
    run.write_manifest(_manifest_path(args, f"{args.out}.manifest.json"),
                       {"synthetic_config": cfg.to_dict()})
    return EXIT_OK


def cmd_train(args) -> int:
    run = Run(args, "train")
    out = _out_dir(args) if args.out else None
    timestamp = args.timestamp
    if args.data:
        if not args.target:
            raise UsageError("--target is required with --data")
        ds = dio.load_csv(run.input(args.data), args.target, args.timestamp)
        if ds.n_dropped:
            log.warning("dropped %d rows with missing values", ds.n_dropped)
    elif args.synthetic_config or args.rows:
        if args.synthetic_config:
            run.input(args.synthetic_config)
        ds = dio.generate_synthetic(_synthetic_config(args))
        timestamp = "timestamp"
    else:
        raise UsageError("one of --data or --synthetic-config/--rows is required")

    train, test = ds, None
    if args.train_fraction:
        train, test = dio.time_split(ds, args.train_fraction)

    params = fo.Hyperparams(
        n_estimators=args.trees, max_depth=args.max_depth, max_features=args.max_features,
        min_samples_leaf=args.min_samples_leaf, bootstrap=not args.no_bootstrap,
    )
    search = None
    if args.search_config:
        conf = json.loads(Path(run.input(args.search_config)).read_text(encoding="utf-8"))
        search = ev.randomized_search(
            train, conf["param_distributions"], int(conf.get("n_samples", 10)),
            n_folds=int(conf.get("n_folds", 5)), seed=args.seed, task=args.task, base=params,
        )
        params = search.best_params
        print(f"search: best candidate {search.best_index} {asdict(params)}")

    forest = fo.fit(train, params, seed=args.seed, task=args.task)
    forest.timestamp_name = timestamp if ds.row_order_key is not None else None
    fo.save(forest, run.output(args.model))

    def point_pred(X):
        p = forest.predict(X)
        return np.argmax(p, axis=1) if forest.task == fo.CLASSIFICATION else p

    preds = {"train": point_pred(train.features)}
    labels = {"train": train.target}
    oob, valid = forest.predict_oob_all()
    if forest.task == fo.REGRESSION and valid.any():
        preds["train_oob"], labels["train_oob"] = oob[valid], train.target[valid]
    if test is not None:
        preds["test"], labels["test"] = point_pred(test.features), test.target
    summary = ev.EvalSummary.build(preds, labels)
    for split, m in summary.model.items():
        print(f"{split}: rmse={m.rmse:.6g} mae={m.mae:.6g}")

    if out is not None:
        ev.write_json({"forest": forest.describe(), "metrics": summary.to_dict()},
                      run.output(out / "metrics.json"))
        if search is not None:
            ev.write_json(search.to_dict(), run.output(out / "search.json"))
            ev.write_table_csv(search.table, run.output(out / "search.csv"))
        if test is not None or not args.data:
            dio.write_csv(train, run.output(out / "train.csv"), timestamp)
        if test is not None:
            dio.write_csv(test, run.output(out / "test.csv"), timestamp)
    run.write_manifest(_manifest_path(args, f"{args.model}.manifest.json"))
    return EXIT_OK


def cmd_explain(args) -> int:
    run = Run(args, "explain")
    forest = fo.load(run.input(args.model))
    qs = _load_queries(forest, run.input(args.data), args.target)
    ids = np.arange(qs.n_rows)
    if args.sample and args.sample < qs.n_rows:
        rng = np.random.default_rng(args.seed)
        ids = np.sort(rng.choice(qs.n_rows, size=args.sample, replace=False))
    X = qs.features[ids]
    labels = None if qs.target is None else qs.target[ids]

    out = _out_dir(args)
    explainer = ex.Explainer(forest)
    reports = explainer.explain(X, labels, args.threshold, ids=[int(i) for i in ids])
    for rep in reports:
        q = rep.query_id
        ev.write_json(rep.to_dict(), run.output(out / f"report_{q}.json"))
        ev.write_table_csv(
            [{"rank": r, "weight": w, "cumulative": c} for r, w, c in rep.curve.to_rows()],
            run.output(out / f"curve_{q}.csv"),
        )
        ev.write_table_csv(_hist_rows(rep.bin_edges, weighted=rep.neighbor_hist_weighted,
                                      count=rep.neighbor_hist_count),
                           run.output(out / f"neighbor_hist_{q}.csv"))
    ev.write_table_csv(_hist_rows(explainer.bin_edges, count=explainer.train_hist),
                       run.output(out / "train_hist.csv"))

    needed = ex.neighbors_needed_from_weights([r.curve.weights for r in reports], forest.n_train)
    ev.write_table_csv(needed.table(), run.output(out / "neighbors_needed.csv"))
    ev.write_table_csv(_mean_curve_rows(needed), run.output(out / "curve_mean.csv"))

    if args.figures:
        from . import plotting

        plotting.cumulative_weight(needed, run.output(out / "curve.png"))
        for rep in reports:
            plotting.neighbor_histogram(rep, run.output(out / f"neighbor_hist_{rep.query_id}.png"))

    for t, m in zip(needed.thresholds, needed.mean):
        print(f"threshold {t:g}: mean neighbors {m:.1f} of {forest.n_train}")
    run.write_manifest(_manifest_path(args, out / "manifest.json"))
    return EXIT_OK


def _hist_rows(edges, **columns):
    rows = []
    for k in range(len(edges) - 1):
        r = {"bin_left": float(edges[k]), "bin_right": float(edges[k + 1])}
        for name, vals in columns.items():
            v = vals[k]
            r[name] = float(v) if name == "weighted" else int(v)
        rows.append(r)
    return rows


def _mean_curve_rows(needed):
    longest = max(len(c.cumulative) for c in needed.curves)
    grid = np.ones((len(needed.curves), longest))
    for k, c in enumerate(needed.curves):
        grid[k, : len(c.cumulative)] = c.cumulative
    return [{"rank": r + 1, "mean_cumulative": float(v)} for r, v in enumerate(grid.mean(axis=0))]


def cmd_verify(args) -> int:
    run = Run(args, "verify")
    forest = fo.load(run.input(args.model))
    qs = _load_queries(forest, run.input(args.data))
    report = px.verify_reconstruction(forest, qs.features, args.tolerance)
    print(f"max |GAP reconstruction - prediction|     = {report.max_abs_gap_error:.3e}")
    print(f"max |Breiman reconstruction - prediction| = {report.max_abs_breiman_error:.3e}")
    print(f"tolerance {args.tolerance:g}: {'exact' if report.exact else 'NOT exact'}")
    if args.out:
        out = _out_dir(args)
        ev.write_json(report.to_dict(), run.output(out / "verify.json"))
    run.write_manifest(_manifest_path(args, f"{args.model}.verify.manifest.json"),
                       {"result": report.to_dict(per_row=False)})
    return EXIT_OK if report.exact else EXIT_VERIFY_FAILED


def cmd_eval(args) -> int:
    run = Run(args, "eval")
    forest = fo.load(run.input(args.model))
    qs = _load_queries(forest, run.input(args.data), args.target)
    if qs.target is None:
        raise UsageError("eval needs labeled test data (target column not found)")
    pred = forest.predict(qs.features)
    point = np.argmax(pred, axis=1) if forest.task == fo.CLASSIFICATION else pred
    baseline = None
    if args.baseline:
        names = [c.name for c in forest.columns]
        if args.baseline not in names:
            raise UsageError(f"baseline column {args.baseline!r} is not a feature column")
        baseline = {"test": qs.features[:, names.index(args.baseline)]}
    summary = ev.EvalSummary.build({"test": point}, {"test": qs.target}, baseline)
    table = ex.confidence_vs_error(forest, qs.features, qs.target, args.deciles)

    out = _out_dir(args)
    result = {**summary.to_dict(), "confidence_vs_error": table.summary()}
    ev.write_json(result, run.output(out / "summary.json"))
    ev.write_table_csv(table.decile_rows(), run.output(out / "decile_table.csv"))
    ev.write_table_csv(
        [{"query_id": k, "weighted_train_mae": float(w), "abs_test_error": float(e),
          "decile": int(d) + 1}
         for k, (w, e, d) in enumerate(zip(table.weighted_mae, table.abs_error, table.decile))],
        run.output(out / "points.csv"),
    )
    if args.figures:
        from . import plotting

        plotting.error_vs_confidence(table, run.output(out / "error_vs_confidence.png"))

    m = summary.model["test"]
    print(f"test: rmse={m.rmse:.6g} mae={m.mae:.6g}")
    if "test" in summary.improvement_pct:
        b = summary.baseline["test"]
        print(f"baseline: rmse={b.rmse:.6g}; improvement {summary.improvement_pct['test']:.2f}%")
    fmt = lambda r: "undefined" if r is None else f"{r:.3f}"
    print(f"pearson per point {fmt(table.pearson_per_point)}, "
          f"decile means {fmt(table.pearson_decile_means)}")
    run.write_manifest(_manifest_path(args, out / "manifest.json"))
    return EXIT_OK


# --- parser ----------------------------------------------------------------


def _add_synth_flags(p):
    p.add_argument("--synthetic-config", help="key=value file describing a synthetic dataset")
    p.add_argument("--rows", type=int, help="synthetic: number of rows")
    p.add_argument("--numeric", type=int, default=4)
    p.add_argument("--categorical", type=int, default=1)
    p.add_argument("--noise", choices=["homoscedastic", "heteroscedastic"], default="homoscedastic")
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--sigma-low", type=float, default=0.1)
    p.add_argument("--sigma-high", type=float, default=2.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gapforest", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--manifest", help="manifest path (default depends on the command)")

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset to CSV")
    _add_synth_flags(p)
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a forest and save it")
    p.add_argument("--data", help="training CSV")
    p.add_argument("--target")
    p.add_argument("--timestamp")
    p.add_argument("--task", choices=[fo.REGRESSION, fo.CLASSIFICATION], default=fo.REGRESSION)
    p.add_argument("--model", required=True, help="where to write the model")
    p.add_argument("--out", help="directory for metrics, splits and manifest")
    p.add_argument("--train-fraction", type=float, help="time-ordered train/test split")
    p.add_argument("--trees", type=int, default=100)
    p.add_argument("--max-depth", type=int)
    p.add_argument("--max-features", type=_max_features, default="all")
    p.add_argument("--min-samples-leaf", type=int, default=1)
    p.add_argument("--no-bootstrap", action="store_true",
                   help="debug: every tree uses every row once")
    p.add_argument("--search-config", help="JSON with param_distributions, n_samples, n_folds")
    _add_synth_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("explain", parents=[common], help="instance-based explanations")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="query CSV")
    p.add_argument("--target", help="label column in the query CSV (default: model target)")
    p.add_argument("--threshold", type=float, default=0.95)
    p.add_argument("--sample", type=int, help="explain a random subset of this many rows")
    p.add_argument("--out", required=True)
    p.add_argument("--figures", action="store_true", help="also render PNG figures")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("verify", parents=[common], help="check exact reconstruction")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--tolerance", type=float, default=1e-9)
    p.add_argument("--out")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("eval", parents=[common], help="metrics and error-vs-confidence table")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="labeled test CSV")
    p.add_argument("--target")
    p.add_argument("--baseline", help="feature column holding a baseline prediction")
    p.add_argument("--deciles", type=int, default=10)
    p.add_argument("--out", required=True)
    p.add_argument("--figures", action="store_true")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, dio.DataError, fo.ForestError, ValueError, KeyError, OSError) as exc:
        print(f"gapforest {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
