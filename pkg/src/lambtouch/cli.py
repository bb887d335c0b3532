"""``lambtouch`` command line: gen | train | eval | predict | bench | sweep | circle."""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from . import dsp, evalkit, neural, sigsim, store
from .dsp import Domain
from .locmodel import (
    BACKGROUND_CLASS,
    GridSpec,
    NearestNeighbors,
    build_grid_classifier,
    build_keypad_classifier,
    build_regressor,
    class_name,
    keypad_labels,
    zone_labels,
)

log = logging.getLogger("lambtouch")

CONFIG_ENV = "LAMBTOUCH_CONFIG"


def _version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "0+unknown"


class CliError(Exception):
    pass


def _load_config(path):
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return store.Config(), "defaults"
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror}") from exc
    return store.load_config(text), hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _banner(args, config_hash, **seeds):
    seed_text = " ".join(f"{k}={v}" for k, v in seeds.items())
    print(f"lambtouch {_version()} {args.command} {seed_text} config={config_hash}", file=sys.stderr)


def _read_arrays(path):
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CliError(f"cannot read dataset {path}: {exc.strerror}") from exc
    waveforms, labels, _ = store.load_dataset_arrays(buf)
    return waveforms, labels[:, :2]


def _read_model(path):
    try:
        return store.read_checkpoint(path)
    except OSError as exc:
        raise CliError(f"cannot read checkpoint {path}: {exc.strerror}") from exc


def parse_task(text: str):
    """``grid:N`` -> ("grid", N); ``regression`` / ``keypad`` -> (name, None)."""
    if text.startswith("grid:"):
        try:
            n = int(text[5:])
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad grid resolution in {text!r}") from None
        if not 2 <= n <= 10:
            raise argparse.ArgumentTypeError("grid resolution must lie in [2, 10]")
        return ("grid", n)
    if text in ("regression", "keypad"):
        return (text, None)
    raise argparse.ArgumentTypeError(f"unknown task {text!r} (grid:N, regression or keypad)")


def _task_text(task) -> str:
    return f"grid:{task[1]}" if task[0] == "grid" else task[0]


def _prepare(task, domain, positions, cfg):
    """(NetSpec, targets, grid) for a task."""
    kind, n = task
    if kind == "grid":
        grid = GridSpec(n, cfg.plate.width_cm, cfg.plate.height_cm)
        return build_grid_classifier(grid, domain), zone_labels(positions, grid), grid
    if kind == "regression":
        return build_regressor(domain), positions, None
    if domain is not Domain.FREQUENCY:
        raise CliError("the keypad task uses frequency-domain features only")
    return build_keypad_classifier(cfg.keypad), keypad_labels(positions, cfg.keypad), None


def _metrics(model, task, X, P, Y, grid) -> dict:
    if task[0] == "keypad":
        cm = evalkit.confusion_matrix(evalkit.classify(model, X), Y, BACKGROUND_CLASS)
        return {"accuracy": evalkit.accuracy(cm), "key_confusions": evalkit.key_confusions(cm)}
    rep = evalkit.position_report(evalkit.locate(model, X, grid), P)
    out = {"rmse_cm": rep.rmse_cm, "mean_error_cm": rep.mean_error_cm, "stddev_error_cm": rep.stddev_error_cm}
    if task[0] == "grid":
        out["accuracy"] = float(np.mean(evalkit.classify(model, X) == Y))
    return out


def _print_metrics(prefix, metrics):
    print(prefix + " " + " ".join(f"{k}={v!r}" for k, v in metrics.items()))


# ---------------------------------------------------------------- commands


def cmd_gen(args):
    cfg, h = _load_config(args.config)
    _banner(args, h, seed=args.seed)
    if args.count < 0:
        raise CliError("--count must be non-negative")
    records = sigsim.gen_dataset(cfg.plate, cfg.chirp, args.count, args.seed)
    store.write_dataset(args.out, records)
    print(f"records={len(records)} bytes={Path(args.out).stat().st_size}")


def _train_cfg(cfg, args):
    overrides = {"seed": args.seed}
    if getattr(args, "max_epochs", None):
        overrides["max_epochs"] = args.max_epochs
    return neural.TrainConfig(**{**cfg.training.__dict__, **overrides})


def cmd_train(args):
    cfg, h = _load_config(args.config)
    _banner(args, h, seed=args.seed)
    waveforms, P = _read_arrays(args.data)
    domain = Domain.parse(args.domain)
    spec, Y, grid = _prepare(args.task, domain, P, cfg)
    X = dsp.freq_features(waveforms, cfg.chirp) if domain is Domain.FREQUENCY else dsp.time_features(waveforms)
    tcfg = _train_cfg(cfg, args)
    log.info("training %s on %d records", spec.describe(), len(X))
    result = neural.train(spec, X, Y, tcfg)
    model = result.model
    model.train_meta.update({"task": _task_text(args.task), "domain": domain.value, "config": h})
    store.write_checkpoint(args.out, model)
    history = args.history or str(args.out) + ".history.csv"
    evalkit.write_csv(history, result.history)
    for part in ("train", "val", "test"):
        idx = result.split[part]
        if len(idx):
            _print_metrics(part, _metrics(model, args.task, X[idx], P[idx], np.asarray(Y)[idx], grid))
    print(f"architecture {spec.describe()} epochs={model.train_meta['epochs']} best_epoch={model.train_meta['best_epoch']}")


def _model_context(args):
    cfg, h = _load_config(args.config)
    model = _read_model(args.model)
    meta = model.train_meta
    if "task" not in meta:
        raise CliError(f"checkpoint {args.model} carries no task metadata")
    task = parse_task(meta["task"])
    domain = Domain.parse(meta["domain"])
    return cfg, h, model, task, domain


def _features(waveforms, domain, cfg):
    return dsp.freq_features(waveforms, cfg.chirp) if domain is Domain.FREQUENCY else dsp.time_features(waveforms)


def cmd_eval(args):
    if args.compare:
        return _eval_compare(args)
    if not args.model:
        raise CliError("eval needs --model (or --compare)")
    cfg, h, model, task, domain = _model_context(args)
    seed = int(model.train_meta["seed"])
    _banner(args, h, seed=seed)
    waveforms, P = _read_arrays(args.data)
    X = _features(waveforms, domain, cfg)
    _, Y, grid = _prepare(task, domain, P, cfg)
    test = neural.split_indices(len(X), seed)["test"] if not args.all else np.arange(len(X))
    if len(test) == 0:
        raise CliError("evaluation split is empty")
    metrics = _metrics(model, task, X[test], P[test], np.asarray(Y)[test], grid)
    _print_metrics("test", metrics)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if task[0] == "keypad":
        cm = evalkit.confusion_matrix(evalkit.classify(model, X[test]), np.asarray(Y)[test], BACKGROUND_CLASS)
        evalkit.write_csv(out_dir / "confusion.csv", evalkit.confusion_rows(cm))
    else:
        pred = evalkit.locate(model, X[test], grid)
        rows = [{"index": int(i), "x": float(t[0]), "y": float(t[1]), "x_pred": float(p[0]), "y_pred": float(p[1])}
                for i, t, p in zip(test, P[test], pred)]
        evalkit.write_csv(out_dir / "predictions.csv", rows)


def _eval_compare(args):
    cfg, h = _load_config(args.config)
    _banner(args, h, seed=args.seed)
    waveforms, P = _read_arrays(args.data)
    split = evalkit.Split.make(len(P), args.seed)
    tcfg = _train_cfg(cfg, args)
    feats = {d: _features(waveforms, d, cfg) for d in (Domain.TIME, Domain.FREQUENCY)}
    rows = evalkit.grid_comparison(feats, P, split, tcfg)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    evalkit.write_csv(out_dir / "grid_comparison.csv", rows)
    for r in rows:
        print(f"{r['config']},{r['domain']},{r['rmse']!r},{r['mean']!r},{r['stddev']!r}")


def cmd_predict(args):
    cfg, h, model, task, domain = _model_context(args)
    _banner(args, h, seed=model.train_meta["seed"])
    records = store.read_dataset(args.data)
    if not 0 <= args.index < len(records):
        raise CliError(f"--index {args.index} out of range for {len(records)} records")
    x = dsp.extract(records[args.index], domain, cfg.chirp).values
    if task[0] == "keypad":
        print(class_name(int(evalkit.classify(model, x)) + 1))
        return
    grid = GridSpec(task[1], cfg.plate.width_cm, cfg.plate.height_cm) if task[0] == "grid" else None
    xy = evalkit.locate(model, x, grid)
    print(f"{xy[0]!r} {xy[1]!r}")


def cmd_bench(args):
    cfg, h, model, task, domain = _model_context(args)
    _banner(args, h, seed=model.train_meta["seed"])
    waveforms, P = _read_arrays(args.data)
    X = _features(waveforms, domain, cfg)
    parts = neural.split_indices(len(X), int(model.train_meta["seed"]))
    probe = X[parts["test"]] if len(parts["test"]) else X
    rows = []
    med, p95 = evalkit.model_latency(model, probe, args.reps, args.warmup)
    rows.append({"method": "DNN", "reference_size": 0, "latency_median_ms": med, "latency_p95_ms": p95})
    print(f"DNN median_ms={med!r} p95_ms={p95!r}")
    if args.knn:
        _, Y, _ = _prepare(task, domain, P, cfg)
        ref = parts["train"]
        knn = NearestNeighbors(X[ref], np.asarray(Y)[ref], k=1)
        med, p95 = evalkit.knn_latency(knn, probe, args.reps, args.warmup)
        rows.append({"method": "kNN", "reference_size": len(ref), "latency_median_ms": med, "latency_p95_ms": p95})
        print(f"kNN median_ms={med!r} p95_ms={p95!r} reference={len(ref)}")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    evalkit.write_csv(out_dir / "latency.csv", rows)


def cmd_sweep(args):
    cfg, h = _load_config(args.config)
    _banner(args, h, seed=args.seed)
    waveforms, P = _read_arrays(args.data)
    X = dsp.freq_features(waveforms, cfg.chirp)
    Y = keypad_labels(P, cfg.keypad)
    split = evalkit.Split.make(len(X), args.seed)
    rows = evalkit.data_fraction_sweep(X, Y, split, _train_cfg(cfg, args), cfg.keypad,
                                       repetitions=args.reps, warmup=args.warmup)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    evalkit.write_csv(out_dir / "sweep.csv", rows)
    for r in rows:
        print(f"{r['method']},{r['fraction']},{r['accuracy']!r},{r['latency_median_ms']!r}")


def cmd_circle(args):
    cfg, h = _load_config(args.config)
    _banner(args, h, seed=args.seed, trajectory_seed=args.trajectory_seed)
    waveforms, P = _read_arrays(args.data)
    X = dsp.freq_features(waveforms, cfg.chirp)
    split = evalkit.Split.make(len(X), args.seed)
    tcfg = _train_cfg(cfg, args)
    models = []
    for grid in (GridSpec(5), GridSpec(10), None):
        tm = evalkit.train_locator(X, P, split, tcfg, grid, Domain.FREQUENCY)
        robot = evalkit.position_report(evalkit.locate(tm.model, X[split.test], grid), P[split.test])
        print(f"{tm.name} robot_test rmse_cm={robot.rmse_cm!r}")
        models.append(tm)
    traj = sigsim.gen_circle_trajectory(cfg.plate, cfg.chirp, args.center, args.radius, args.count, args.trajectory_seed)
    Xc = dsp.feature_matrix(traj, Domain.FREQUENCY, cfg.chirp)
    Pc = np.array([[r.event.x_cm, r.event.y_cm] for r in traj])
    reports, pairs = evalkit.circle_eval(models, Xc, Pc)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    evalkit.write_csv(out_dir / "circle_pairs.csv", pairs)
    summary = [{"model": name, **rep.summary()} for name, rep in reports.items()]
    evalkit.write_csv(out_dir / "circle.csv", summary)
    for row in summary:
        _print_metrics(row.pop("model") + " circle", row)


# ---------------------------------------------------------------- parser


def _vec2(text):
    try:
        x, y = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'x,y', got {text!r}") from None
    return (x, y)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lambtouch", description="Touch localization on a guided-wave glass plate.")
    p.add_argument("--version", action="version", version=f"%(prog)s {_version()}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help=f"config file (default: ${CONFIG_ENV}, else built-in defaults)")

    g = sub.add_parser("gen", help="synthesize a dataset file")
    common(g)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a grid, regression or keypad model")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--task", type=parse_task, required=True, help="grid:N | regression | keypad")
    t.add_argument("--domain", choices=["time", "freq"], default="freq")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--history", help="loss-history CSV (default: <out>.history.csv)")
    t.add_argument("--max-epochs", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on its test split, or run the grid comparison")
    common(e)
    e.add_argument("--data", required=True)
    e.add_argument("--model")
    e.add_argument("--all", action="store_true", help="score every record rather than the test split")
    e.add_argument("--compare", action="store_true", help="train C-2..C-10 and R in both domains")
    e.add_argument("--seed", type=int, default=0, help="split/training seed for --compare")
    e.add_argument("--max-epochs", type=int)
    e.add_argument("--out-dir", default=".")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="locate one record")
    common(pr)
    pr.add_argument("--data", required=True)
    pr.add_argument("--model", required=True)
    pr.add_argument("--index", type=int, required=True)
    pr.set_defaults(func=cmd_predict)

    b = sub.add_parser("bench", help="single-sample inference latency")
    common(b)
    b.add_argument("--data", required=True)
    b.add_argument("--model", required=True)
    b.add_argument("--knn", action="store_true", help="also time 1-NN over the training split")
    b.add_argument("--reps", type=int, default=1000)
    b.add_argument("--warmup", type=int, default=100)
    b.add_argument("--out-dir", default=".")
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("sweep", help="keypad DNN vs kNN over training-data fractions")
    common(s)
    s.add_argument("--data", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-epochs", type=int)
    s.add_argument("--reps", type=int, default=1000)
    s.add_argument("--warmup", type=int, default=100)
    s.add_argument("--out-dir", default=".")
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("circle", help="human-finger circle trajectory evaluation")
    common(c)
    c.add_argument("--data", required=True)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--trajectory-seed", type=int, default=1_000_003)
    c.add_argument("--center", type=_vec2, default=(10.0, 10.0))
    c.add_argument("--radius", type=float, default=6.0)
    c.add_argument("--count", type=int, default=100)
    c.add_argument("--max-epochs", type=int)
    c.add_argument("--out-dir", default=".")
    c.set_defaults(func=cmd_circle)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CliError, store.FormatError, store.ConfigError, neural.TrainingDiverged, ValueError) as exc:
        print(f"lambtouch {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"lambtouch {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
