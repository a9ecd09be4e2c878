"""``mpgat`` command line: synth | prepare | train | eval | compare | predict | export-plot.

Settings resolve as built-in defaults < ``--config`` file (flat ``key = value``
lines) < explicit flags.  Every command writes the resolved settings to
``<out>/config.txt``; passing that file back with ``--config`` reproduces the
run.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import features as fe
from .graph import GraphLoadError, default_graph, load_graph
from .model import MPGAT, ModelConfig
from .training import (
    STEP_MINUTES,
    RunReport,
    TrainConfig,
    TrainingDivergence,
    compare_reports,
    evaluate,
    evaluate_persistence,
    multi_run,
    predict_raw,
    summarize,
    train,
)

EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_RUNTIME = 4
OUTPUT_ROOT_ENV = "MPGAT_OUTPUT_ROOT"

log = logging.getLogger("mpgat")


class ValidationError(Exception):
    pass


class UsageError(Exception):
    pass


# key -> (type, default); None default means "required where used"
SETTINGS = {
    "data": (str, None),
    "graph": (str, None),
    "out": (str, None),
    "seed": (int, 0),
    "tin": (int, 12),
    "tout": (int, 12),
    "beta": (float, 0.05),
    "blocks": (int, 8),
    "lr": (float, 0.001),
    "runs": (int, 1),
    "alpha": (float, 0.05),
    "features": (int, 4),
    "d_latent": (int, 32),
    "d_residual": (int, 32),
    "d_skip": (int, 64),
    "d_end": (int, 128),
    "prop_steps": (int, 2),
    "batch_size": (int, 64),
    "epochs": (int, 100),
    "patience": (int, 15),
    "grad_clip": (float, 5.0),
    "steps_per_epoch": (int, 0),
    "time_budget": (float, 0.0),
    "loss": (str, "mae"),
    "workers": (int, 1),
    "nodes": (int, 6),
    "days": (int, 14),
    "peak_ratio": (float, 200.0),
    "noise": (float, 0.2),
    "cache_out": (str, None),
    "horizons": (str, "1,3,6,12"),
}


def read_config_file(path):
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in SETTINGS:
            raise ValidationError(f"{path}:{lineno}: unknown setting {key!r}")
        values[key] = val
    return values


def resolve(args):
    """Merge defaults, config file and explicit flags into one dict."""
    conf = {k: d for k, (_, d) in SETTINGS.items()}
    if getattr(args, "config", None):
        for k, v in read_config_file(args.config).items():
            conf[k] = _coerce(k, v)
    for k in SETTINGS:
        v = getattr(args, k, None)
        if v is not None:
            conf[k] = _coerce(k, v)
    if conf["out"] is None:
        conf["out"] = os.environ.get(OUTPUT_ROOT_ENV, "runs")
    return conf


def _coerce(key, value):
    kind = SETTINGS[key][0]
    if value is None or value == "None":
        return None
    try:
        return kind(value)
    except ValueError:
        raise ValidationError(f"setting {key}: cannot read {value!r} as {kind.__name__}") from None


def echo_config(conf, out_dir, command):
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"# mpgat {command}"] + [f"{k} = {conf[k]}" for k in sorted(conf) if conf[k] is not None]
    (out_dir / "config.txt").write_text("\n".join(lines) + "\n")


def _horizons(conf):
    try:
        hs = tuple(int(h) for h in str(conf["horizons"]).split(","))
    except ValueError:
        raise ValidationError(f"bad horizons {conf['horizons']!r}") from None
    if max(hs) > conf["tout"]:
        raise ValidationError(f"--tout {conf['tout']} is shorter than the largest horizon {max(hs)}")
    return hs


def _graph(conf):
    return load_graph(conf["graph"]) if conf["graph"] else default_graph()


def _series(conf, graph):
    if not conf["data"]:
        raise UsageError("--data is required")
    ids = graph.labels or None
    series = fe.ingest_csv(conf["data"], node_ids=ids)
    if series.n_nodes != graph.n:
        raise ValidationError(f"dataset has {series.n_nodes} nodes but the graph has {graph.n}")
    return series


def _prepared(conf, graph):
    path = conf["data"]
    if not path:
        raise UsageError("--data is required")
    if str(path).endswith(".npz"):
        data = fe.PreparedData.load(path)
        if data.t_in != conf["tin"] or data.t_out != conf["tout"]:
            raise ValidationError(
                f"cache was prepared with tin={data.t_in}, tout={data.t_out}; "
                f"requested tin={conf['tin']}, tout={conf['tout']}"
            )
        if data.x.shape[2] != graph.n:
            raise ValidationError(f"cache has {data.x.shape[2]} nodes but the graph has {graph.n}")
        return data
    return fe.prepare(_series(conf, graph), conf["tin"], conf["tout"])


def _model_config(conf, n_nodes):
    return ModelConfig(
        n_nodes=n_nodes, n_features=conf["features"], t_in=conf["tin"], t_out=conf["tout"],
        d_latent=conf["d_latent"], d_residual=conf["d_residual"], d_skip=conf["d_skip"],
        d_end=conf["d_end"], n_blocks=conf["blocks"], beta=conf["beta"], prop_steps=conf["prop_steps"],
    )


def _train_config(conf, seed):
    return TrainConfig(
        lr=conf["lr"], batch_size=conf["batch_size"], max_epochs=conf["epochs"],
        patience=min(conf["patience"], conf["epochs"]), grad_clip_norm=conf["grad_clip"], seed=seed,
        steps_per_epoch=conf["steps_per_epoch"] or None, time_budget=conf["time_budget"] or None,
        loss=conf["loss"],
    )


def _write_jsonl(path, reports):
    with open(path, "w") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_json()) + "\n")


def read_reports(path):
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"{path}: no such report file")
    return [RunReport.from_json(json.loads(line)) for line in path.read_text().splitlines() if line.strip()]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(conf):
    out = Path(conf["out"])
    echo_config(conf, out, "synth")
    series, graph = fe.synth_generate(conf["nodes"], conf["days"], conf["peak_ratio"], conf["noise"], conf["seed"])
    series.write_csv(out / "data.csv")
    graph.save(out / "graph.json")
    manifest = {"seed": conf["seed"], "nodes": conf["nodes"], "days": conf["days"],
                "peak_ratio": conf["peak_ratio"], "noise": conf["noise"], "rows": series.n_steps * series.n_nodes}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {manifest['rows']} rows to {out / 'data.csv'}")


def cmd_prepare(conf):
    graph = _graph(conf)
    data = fe.prepare(_series(conf, graph), conf["tin"], conf["tout"])
    out = Path(conf["out"])
    echo_config(conf, out, "prepare")
    target = Path(conf["cache_out"]) if conf["cache_out"] else out / "prepared.npz"
    data.save(target)
    n_train, n_val, n_test = data.sizes
    print(f"samples {len(data.t0)}: train {n_train} / val {n_val} / test {n_test} -> {target}")


def _train_one(conf, data, graph, seed, horizons, out=None):
    mcfg = _model_config(conf, graph.n)
    model = MPGAT(mcfg, graph, seed=seed)
    model, hist = train(model, data.part("train")[:2], data.part("val")[:2], data.normalizer,
                        _train_config(conf, seed))
    report = evaluate(model, data.part("test")[:2], data.normalizer, horizons, seed)
    report.epochs = len(hist.val_mape)
    report.seconds = hist.seconds
    if out is not None:
        model.save(out / "checkpoint.json", extra=_checkpoint_extra(data))
        (out / "history.json").write_text(json.dumps(hist.to_json(), indent=1) + "\n")
    return report


def _checkpoint_extra(data):
    return {"normalizer": data.normalizer.to_json(), "steps_per_day": data.steps_per_day}


class _Runner:
    """Picklable per-seed job for multi_run workers."""

    def __init__(self, conf, data, graph, horizons, out):
        self.conf, self.data, self.graph, self.horizons, self.out = conf, data, graph, horizons, out

    def __call__(self, seed):
        run_dir = self.out / f"seed{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        return _train_one(self.conf, self.data, self.graph, seed, self.horizons, run_dir)


def cmd_train(conf):
    horizons = _horizons(conf)
    graph = _graph(conf)
    data = _prepared(conf, graph)
    _model_config(conf, graph.n)  # validate before any work
    _train_config(conf, conf["seed"])
    out = Path(conf["out"])
    echo_config(conf, out, "train")

    baseline = evaluate_persistence(data.part("test")[:2], horizons)
    (out / "baseline.json").write_text(json.dumps(baseline.to_json()) + "\n")
    if conf["runs"] > 1:
        reports = multi_run(_Runner(conf, data, graph, horizons, out), conf["runs"], conf["seed"], conf["workers"])
        _write_jsonl(out / "runs.jsonl", reports)
        for k, (m, s) in summarize(reports).items():
            print(f"{k}: {m:.4f}±{s:.4f}")
    else:
        report = _train_one(conf, data, graph, conf["seed"], horizons, out)
        _write_jsonl(out / "runs.jsonl", [report])
        (out / "report.json").write_text(json.dumps(report.to_json(), indent=1) + "\n")
        for k, v in report.mape.items():
            print(f"{k}: model {v:.4f}  persistence {baseline.mape[k]:.4f}")


def _load_checkpoint(path):
    if not path or not Path(path).exists():
        raise ValidationError(f"checkpoint {path!r} not found (pass --checkpoint)")
    model, header = MPGAT.load(path)
    if "normalizer" not in header:
        raise ValidationError(f"{path}: checkpoint carries no normalizer statistics")
    return model, fe.Normalizer.from_json(header["normalizer"]), header


def cmd_eval(conf, checkpoint):
    model, norm, _ = _load_checkpoint(checkpoint)
    conf["tin"], conf["tout"] = model.cfg.t_in, model.cfg.t_out
    horizons = _horizons(conf)
    data = _prepared(conf, model.graph)
    test = data.part("test")[:2]
    report = evaluate(model, test, norm, horizons, conf["seed"])
    base = evaluate_persistence(test, horizons)
    out = Path(conf["out"])
    echo_config(conf, out, "eval")
    _write_jsonl(out / "eval.jsonl", [report, base])
    for k in report.mape:
        print(f"{k}: model {report.mape[k]:.4f}  persistence {base.mape[k]:.4f}")


def cmd_compare(conf, a_path, b_path, label_a, label_b):
    a, b = read_reports(a_path), read_reports(b_path)
    if len(a) < 2 or len(b) < 2:
        raise ValidationError("compare needs at least two reports per side")
    try:
        rows = compare_reports(a, b, conf["alpha"])
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    out = Path(conf["out"])
    echo_config(conf, out, "compare")
    header = f"{'horizon':>8}  {label_a:>16}  {label_b:>16}  {'h':>3}  {'p':>8}"
    lines = [header]
    for r in rows:
        lines.append(f"{r['minutes']:>5}min  {r['proposed']:>16}  {r['reference']:>16}  {r['h']:>3}  {r['p_value']:>8.4g}")
    text = "\n".join(lines)
    print(text)
    (out / "compare.txt").write_text(text + "\n")
    with open(out / "compare.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["horizon_minutes", f"{label_a}_mean_std", f"{label_b}_mean_std", "h", "p_value"])
        for r in rows:
            w.writerow([r["minutes"], r["proposed"], r["reference"], r["h"], f"{r['p_value']:.6g}"])


def cmd_predict(conf, checkpoint, timestamp, clamp_zero):
    model, norm, header = _load_checkpoint(checkpoint)
    series = _series(conf, model.graph)
    t_in, t_out = model.cfg.t_in, model.cfg.t_out
    try:
        t0 = series.index_of(timestamp)
    except (ValueError, fe.DataError) as exc:
        raise ValidationError(str(exc)) from None
    earliest, _ = fe.sample_range(series, t_in, 0)
    if not earliest <= t0 < series.n_steps:
        raise ValidationError(
            f"t0 {timestamp} lacks history: forecasts need t0 between "
            f"{series.timestamp(earliest).isoformat()} and {series.timestamp(series.n_steps - 1).isoformat()}"
        )
    x = features_at(series, t0, t_in)
    pred = predict_raw(model, x[None], norm)[0]
    if clamp_zero:
        pred = np.maximum(pred, 0.0)
    out = Path(conf["out"])
    echo_config(conf, out, "predict")
    path = out / "forecast.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "timestamp", "step", "forecast"])
        for n, node in enumerate(series.node_ids):
            for s in range(t_out):
                w.writerow([node, series.timestamp(t0 + s + 1).isoformat(), s + 1, f"{pred[n, s]:.6f}"])
    print(f"wrote {series.n_nodes * t_out} forecasts to {path}")


def features_at(series, t0, t_in, ma_windows=fe.MA_WINDOWS):
    """Multivariate input (F, N, T_in) ending at t0, same layout as build_samples."""
    window = slice(t0 - t_in + 1, t0 + 1)
    channels = [series.counts[window]]
    channels += [fe.moving_average(series.counts[: t0 + 1], w)[window] for w in ma_windows]
    channels.append(fe.daily_feature(series, t0, t_in))
    return np.stack([c.T for c in channels])


def cmd_export_plot(conf, checkpoint, reports):
    model, norm, _ = _load_checkpoint(checkpoint)
    conf["tin"], conf["tout"] = model.cfg.t_in, model.cfg.t_out
    horizons = _horizons(conf)
    data = _prepared(conf, model.graph)
    x, y, t0 = data.part("test")
    pred = predict_raw(model, x, norm)
    out = Path(conf["out"])
    echo_config(conf, out, "export-plot")

    curves = [("mpgat", evaluate(model, (x, y), norm, horizons).mape),
              ("persistence", evaluate_persistence((x, y), horizons).mape)]
    for item in reports or []:
        label, _, path = item.partition("=")
        if not path:
            raise ValidationError(f"--reports expects label=path, got {item!r}")
        stats = summarize(read_reports(path))
        curves.append((label, {k: m for k, (m, _) in stats.items()}))
    with open(out / "mape_vs_horizon.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "horizon_minutes", "mape"])
        for label, curve in curves:
            for k, v in curve.items():
                w.writerow([label, int(k[1:]) * STEP_MINUTES, f"{v:.6f}"])

    start = data.start
    series_like = fe.RawSeries(np.zeros((1, 1)), data.steps_per_day, start)
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "timestamp", "truth", "prediction"])
        for i in range(len(t0)):
            stamp = series_like.timestamp(int(t0[i]) + 1).isoformat()
            for n, node in enumerate(data.node_ids):
                w.writerow([node, stamp, f"{y[i, n, 0]:.4f}", f"{pred[i, n, 0]:.4f}"])
    print(f"wrote {out / 'mape_vs_horizon.csv'} and {out / 'predictions.csv'}")


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _shared(p):
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--graph")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--tin", type=int)
    p.add_argument("--tout", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--blocks", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--runs", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--horizons")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="mpgat", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic diurnal dataset")
    _shared(p)
    p.add_argument("--nodes", type=int)
    p.add_argument("--days", type=int)
    p.add_argument("--peak-ratio", dest="peak_ratio", type=float)
    p.add_argument("--noise", type=float)

    p = sub.add_parser("prepare", help="window, split and normalise a dataset")
    _shared(p)
    p.add_argument("--cache-out", dest="cache_out")

    p = sub.add_parser("train", help="train (and evaluate) one or more seeds")
    _shared(p)
    p.add_argument("--features", type=int, help="1 = X_q only, 4 = full multivariate input")
    p.add_argument("--d-latent", dest="d_latent", type=int)
    p.add_argument("--d-residual", dest="d_residual", type=int)
    p.add_argument("--d-skip", dest="d_skip", type=int)
    p.add_argument("--d-end", dest="d_end", type=int)
    p.add_argument("--prop-steps", dest="prop_steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--grad-clip", dest="grad_clip", type=float)
    p.add_argument("--steps-per-epoch", dest="steps_per_epoch", type=int)
    p.add_argument("--time-budget", dest="time_budget", type=float)
    p.add_argument("--loss", choices=("mae", "mape"))
    p.add_argument("--workers", type=int)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _shared(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("compare", help="rank-sum comparison of two run-report files")
    _shared(p)
    p.add_argument("--a", required=True, help="reports of the proposed model (JSON lines)")
    p.add_argument("--b", required=True, help="reports of the reference model (JSON lines)")
    p.add_argument("--label-a", default="proposed")
    p.add_argument("--label-b", default="reference")

    p = sub.add_parser("predict", help="forecast T_out steps after a timestamp")
    _shared(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--timestamp", required=True)
    p.add_argument("--clamp-zero", action="store_true")

    p = sub.add_parser("export-plot", help="tidy CSVs for MAPE-vs-horizon and prediction plots")
    _shared(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--reports", nargs="*", help="extra methods as label=runs.jsonl")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        conf = resolve(args)
        cmd = args.command
        if cmd == "synth":
            cmd_synth(conf)
        elif cmd == "prepare":
            cmd_prepare(conf)
        elif cmd == "train":
            cmd_train(conf)
        elif cmd == "eval":
            cmd_eval(conf, args.checkpoint)
        elif cmd == "compare":
            cmd_compare(conf, args.a, args.b, args.label_a, args.label_b)
        elif cmd == "predict":
            cmd_predict(conf, args.checkpoint, args.timestamp, args.clamp_zero)
        elif cmd == "export-plot":
            cmd_export_plot(conf, args.checkpoint, args.reports)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mpgat {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationError, GraphLoadError, fe.DataError, ValueError) as exc:
        print(f"mpgat {args.command}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingDivergence, RuntimeError, OSError) as exc:
        print(f"mpgat {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
