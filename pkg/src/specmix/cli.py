"""Command-line entry point: train, eval, spectrogram, benchmark, pca.

Every artifact-producing run appends a record to ``manifest.json`` in its
output directory (command, resolved configuration, seed, dataset
fingerprint, code version, timestamps, output paths). All files are written
atomically. Runs are deterministic given ``--seed``; timing fields are the
only exception.
"""

import argparse
import concurrent.futures
import hashlib
import json
import os
import sys
from dataclasses import asdict
from datetime import datetime, timezone

import numpy as np

from . import __version__, data as data_mod, snapshot, svgp
from .errors import (MissingColumn, ParseError, SnapshotMismatch, SpecmixError,
                     WrongKernel)
from .ioutil import atomic_write_text
from .kernels import GSMKernel, spectrogram
from .latent import constant_function_from_sm
from .training import (KERNEL_CHOICES, TrainConfig, build_model, grid_search,
                       train)

USAGE_ERRORS = (ValueError, FileNotFoundError, MissingColumn, ParseError,
                SnapshotMismatch, WrongKernel)


def _utc_now():
    return datetime.now(timezone.utc).isoformat()


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _append_manifest(out_dir, record):
    path = os.path.join(out_dir, "manifest.json")
    records = []
    if os.path.exists(path):
        with open(path, encoding="utf-8") as fh:
            records = json.load(fh)
    records.append(record)
    atomic_write_text(path, json.dumps(records, sort_keys=True, indent=1))


def _resolve_dataset(path, args):
    """Load a prepared cache if one is referenced, else prepare a raw CSV."""
    if os.path.isdir(path):
        base = os.path.join(path, "dataset")
        if os.path.exists(base + ".json"):
            return data_mod.load_prepared(base), base + ".csv"
        raise FileNotFoundError(f"no prepared dataset under {path}")
    if path.endswith(".json"):
        base = path[: -len(".json")]
        return data_mod.load_prepared(base), base + ".csv"
    sidecar = path[: -len(".csv")] + ".json" if path.endswith(".csv") else None
    if sidecar and os.path.exists(sidecar):
        with open(sidecar, encoding="utf-8") as fh:
            if "split" in json.load(fh):
                return data_mod.load_prepared(path[: -len(".csv")]), path
    raw = data_mod.load_csv(path, target_column=args.target,
                            has_header=not args.no_header)
    fractions = (1.0 - args.val_frac - args.test_frac, args.val_frac,
                 args.test_frac)
    return data_mod.prepare(raw, fractions, seed=args.seed), path


def _config_from_args(args):
    return TrainConfig(
        q=args.q, m_inducing=args.m, learning_rate=args.learning_rate,
        batch_size=args.batch_size, max_iters=args.max_iters,
        restarts=args.restarts, seed=args.seed, l2_coeff=args.l2_coeff,
    )


def _add_train_flags(p):
    p.add_argument("--q", type=int, default=2, help="mixture components")
    p.add_argument("--m", type=int, default=100, help="inducing point count")
    p.add_argument("--lr", "--learning-rate", dest="learning_rate", type=float,
                   default=0.01)
    p.add_argument("--batch", "--batch-size", dest="batch_size", type=int,
                   default=128)
    p.add_argument("--iters", "--max-iters", dest="max_iters", type=int,
                   default=17500)
    p.add_argument("--restarts", type=int, default=8)
    p.add_argument("--l2-coeff", dest="l2_coeff", type=float, default=1e-4)


def _add_data_flags(p):
    p.add_argument("--target", default=None,
                   help="target column name (default: last column)")
    p.add_argument("--no-header", action="store_true")
    p.add_argument("--val-frac", type=float, default=0.0)
    p.add_argument("--test-frac", type=float, default=0.2)


def _apply_config_file(parser, argv):
    """Set parser defaults from a key=value file; CLI flags still win."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config", default=None)
    known, _ = probe.parse_known_args(argv)
    if not known.config:
        return
    overrides = {}
    with open(known.config, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"config line is not key=value: {line!r}")
            key, value = line.split("=", 1)
            overrides[key.strip().replace("-", "_")] = value.strip()
    for action in parser._actions:
        if action.dest in overrides:
            rawv = overrides.pop(action.dest)
            overrides_type = action.type or str
            if isinstance(action.const, bool) or isinstance(action.default, bool):
                parser.set_defaults(**{action.dest: rawv.lower() in ("1", "true", "yes")})
            else:
                parser.set_defaults(**{action.dest: overrides_type(rawv)})
    if overrides:
        raise ValueError(f"unknown config keys: {sorted(overrides)}")


def cmd_train(args, argv):
    os.makedirs(args.out, exist_ok=True)
    started = _utc_now()
    ds, data_path = _resolve_dataset(args.data, args)
    cfg = _config_from_args(args)
    cfg.validate(ds.train_y().shape[0])
    model = build_model(args.kernel, ds, cfg)
    trace = train(model, ds, cfg)

    model_path = os.path.join(args.out, "model.json")
    trace_path = os.path.join(args.out, "trace.csv")
    snapshot.save_model(model, model_path)
    trace.to_csv(trace_path)
    data_mod.save_prepared(ds, os.path.join(args.out, "dataset"))
    _append_manifest(args.out, {
        "command": "train",
        "argv": argv,
        "config": asdict(cfg),
        "kernel": args.kernel,
        "seed": args.seed,
        "dataset": {"path": os.path.abspath(args.data),
                    "sha256": _sha256(data_path)},
        "version": __version__,
        "started": started,
        "finished": _utc_now(),
        "outputs": [model_path, trace_path,
                    os.path.join(args.out, "dataset.csv"),
                    os.path.join(args.out, "dataset.json")],
        "restart_scores": trace.restart_scores,
        "selected_restart": trace.selected_restart,
    })
    print(f"trained {args.kernel} for {trace.iterations[-1]} iterations; "
          f"final minibatch ELBO {trace.elbos[-1]:.4f}")
    return 0


def cmd_eval(args, argv):
    model = snapshot.load_model(args.model)
    ds, _ = _resolve_dataset(args.data, args)
    if model.input_dim != ds.input_dim:
        raise SnapshotMismatch(
            f"model expects {model.input_dim}-d inputs, dataset has {ds.input_dim}")
    pred = model.predict(ds.test_x(), include_noise=True)
    m = svgp.metrics(pred, ds.test_y())
    report = dict(m.as_dict(), n_test=int(ds.test_y().shape[0]),
                  convention="per-point log density, noise-inclusive")
    text = json.dumps(report, sort_keys=True, indent=1)
    print(text)
    if args.out:
        out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
        os.makedirs(out_dir, exist_ok=True)
        atomic_write_text(args.out, text + "\n")
        _append_manifest(out_dir, {
            "command": "eval", "argv": argv, "seed": args.seed,
            "model": os.path.abspath(args.model),
            "dataset": {"path": os.path.abspath(args.data)},
            "version": __version__, "started": _utc_now(),
            "finished": _utc_now(), "outputs": [args.out],
        })
    return 0


def cmd_spectrogram(args, argv):
    model = snapshot.load_model(args.model)
    kernel = model.kernel
    if kernel.name == "sm":
        kernel = GSMKernel(constant_function_from_sm(kernel))  # constant columns
    if not isinstance(kernel, GSMKernel):
        raise WrongKernel(
            f"spectrogram needs a GSM-family (or SM) snapshot, got {kernel.name!r}")
    z = model.z.value
    lo, hi = float(z[:, 0].min()), float(z[:, 0].max())
    if args.x_min is not None:
        lo = args.x_min
    if args.x_max is not None:
        hi = args.x_max
    x_grid = np.linspace(lo, hi, args.sx)
    f_n = float(kernel.nyquist[0])
    s_grid = np.linspace(f_n / args.ss, f_n, args.ss)
    grid = spectrogram(kernel, x_grid, s_grid)
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    grid.to_csv(args.out)
    _append_manifest(out_dir, {
        "command": "spectrogram", "argv": argv, "seed": args.seed,
        "model": os.path.abspath(args.model), "version": __version__,
        "started": _utc_now(), "finished": _utc_now(), "outputs": [args.out],
    })
    print(f"wrote {args.ss}x{args.sx} spectrogram to {args.out}")
    return 0


def cmd_benchmark(args, argv):
    os.makedirs(args.out, exist_ok=True)
    started = _utc_now()
    tasks = [(path, kernel, base_seed)
             for path in args.data
             for kernel in args.kernels.split(",")
             for base_seed in range(args.seed, args.seed + args.seeds)]
    for _, kernel, _ in tasks:
        if kernel not in KERNEL_CHOICES:
            raise ValueError(
                f"unknown kernel {kernel!r}; valid kernels: {', '.join(KERNEL_CHOICES)}")

    workers = int(os.environ.get("SPECMIX_THREADS", os.cpu_count() or 1))

    def run(task):
        path, kernel, seed = task
        ds, _ = _resolve_dataset(path, args)
        cfg = TrainConfig(m_inducing=args.m, max_iters=args.max_iters,
                          restarts=args.restarts, seed=seed,
                          l2_coeff=args.l2_coeff)
        result = grid_search(ds, kernel, cfg, qs=args.qs, lrs=args.lrs,
                             batch_sizes=args.batches)
        pred = result.best_model.predict(ds.test_x(), include_noise=True)
        m = svgp.metrics(pred, ds.test_y())
        # retrain the winning cell once to time it cleanly
        timed = build_model(kernel, ds, result.best_config)
        trace = train(timed, ds, result.best_config)
        return m, trace.mean_wall_ms

    results = {}
    errors = {}
    if workers > 1 and len(tasks) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(run, t): t for t in tasks}
            for fut, task in futures.items():
                try:
                    results[task] = fut.result()
                except Exception as err:  # noqa: BLE001 - record and continue
                    errors[task] = str(err)
    else:
        for task in tasks:
            try:
                results[task] = run(task)
            except Exception as err:  # noqa: BLE001
                errors[task] = str(err)

    rows = []
    for path in args.data:
        name = os.path.splitext(os.path.basename(path))[0]
        for kernel in args.kernels.split(","):
            cells = [results.get((path, kernel, s))
                     for s in range(args.seed, args.seed + args.seeds)]
            ok = [c for c in cells if c is not None]
            if not ok:
                rows.append({"dataset": name, "kernel": kernel, "error": "all seeds failed"})
                continue
            lds = [c[0].log_density for c in ok]
            maes = [c[0].mae for c in ok]
            mses = [c[0].mse for c in ok]
            ms = [c[1] for c in ok]
            rows.append({
                "dataset": name, "kernel": kernel, "n_seeds": len(ok),
                "log_density_mean": float(np.mean(lds)),
                "log_density_std": float(np.std(lds)),
                "mae_mean": float(np.mean(maes)), "mae_std": float(np.std(maes)),
                "mse_mean": float(np.mean(mses)), "mse_std": float(np.std(mses)),
                "wall_ms_per_iter": float(np.mean(ms)),
            })

    csv_path = os.path.join(args.out, "benchmark.csv")
    header = ["dataset", "kernel", "n_seeds", "log_density_mean",
              "log_density_std", "mae_mean", "mae_std", "mse_mean", "mse_std",
              "wall_ms_per_iter", "error"]
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join(str(r.get(k, "")) for k in header))
    atomic_write_text(csv_path, "\n".join(lines) + "\n")

    txt_path = os.path.join(args.out, "benchmark.txt")
    atomic_write_text(txt_path, _format_table(rows) + "\n")
    print(_format_table(rows))
    _append_manifest(args.out, {
        "command": "benchmark", "argv": argv, "seed": args.seed,
        "datasets": [os.path.abspath(p) for p in args.data],
        "kernels": args.kernels, "version": __version__,
        "started": started, "finished": _utc_now(),
        "outputs": [csv_path, txt_path],
        "failed_cells": {f"{t[0]}|{t[1]}|{t[2]}": e for t, e in errors.items()},
    })
    return 0


def _format_table(rows):
    def fmt(r):
        if "error" in r and r.get("error"):
            return [r["dataset"], r["kernel"], r["error"], "", ""]
        return [
            r["dataset"], r["kernel"],
            f"{r['log_density_mean']:.4f} ± {r['log_density_std']:.4f}",
            f"{r['mae_mean']:.4f} ± {r['mae_std']:.4f}",
            f"{r['mse_mean']:.4f} ± {r['mse_std']:.4f}",
            f"{r['wall_ms_per_iter']:.2f}",
        ]

    table = [["dataset", "kernel", "log p(y)", "MAE", "MSE", "ms/iter"]]
    table += [fmt(r) for r in rows]
    widths = [max(len(str(row[i])) for row in table if i < len(row))
              for i in range(6)]
    out = []
    for row in table:
        out.append("  ".join(str(c).ljust(w) for c, w in zip(row, widths)).rstrip())
    return "\n".join(out)


def cmd_pca(args, argv):
    ds = data_mod.load_csv(args.data, target_column=None,
                           has_header=not args.no_header)
    sensors = np.column_stack([ds.x, ds.y.reshape(-1, 1)])  # all columns
    scores, _ = data_mod.pca_first_component(sensors)
    lines = ["x,y"]
    for i, v in enumerate(scores):
        t = i / args.rate if args.rate else float(i)
        lines.append(f"{t!r},{float(v)!r}")
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    atomic_write_text(args.out, "\n".join(lines) + "\n")
    _append_manifest(out_dir, {
        "command": "pca", "argv": argv, "seed": args.seed,
        "dataset": {"path": os.path.abspath(args.data),
                    "sha256": _sha256(args.data)},
        "version": __version__, "started": _utc_now(),
        "finished": _utc_now(), "outputs": [args.out],
    })
    print(f"wrote first principal component series ({len(scores)} rows) to {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="specmix",
        description="Spectral mixture GP regression: train, evaluate, export.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="fit a model and write artifacts")
    p_train.add_argument("--data", required=True)
    p_train.add_argument("--kernel", required=True, choices=KERNEL_CHOICES)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--config", default=None,
                         help="key=value file; CLI flags override it")
    _add_train_flags(p_train)
    _add_data_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="test-split metrics for a snapshot")
    p_eval.add_argument("--model", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--out", default=None)
    p_eval.add_argument("--seed", type=int, default=0)
    _add_data_flags(p_eval)
    p_eval.set_defaults(func=cmd_eval)

    p_spec = sub.add_parser("spectrogram", help="export S(s, x) as CSV")
    p_spec.add_argument("--model", required=True)
    p_spec.add_argument("--out", required=True)
    p_spec.add_argument("--sx", type=int, default=200, help="x grid points")
    p_spec.add_argument("--ss", type=int, default=200, help="s grid points")
    p_spec.add_argument("--x-min", type=float, default=None)
    p_spec.add_argument("--x-max", type=float, default=None)
    p_spec.add_argument("--seed", type=int, default=0)
    p_spec.set_defaults(func=cmd_spectrogram)

    p_bench = sub.add_parser("benchmark", help="grid-search kernels across datasets")
    p_bench.add_argument("--data", action="append", required=True)
    p_bench.add_argument("--kernels", default="rbf,sm,gp-gsm,neural-gsm")
    p_bench.add_argument("--out", required=True)
    p_bench.add_argument("--qs", type=lambda s: tuple(int(v) for v in s.split(",")),
                         default=(1, 2, 3))
    p_bench.add_argument("--lrs", type=lambda s: tuple(float(v) for v in s.split(",")),
                         default=(0.01, 0.001))
    p_bench.add_argument("--batches", type=lambda s: tuple(int(v) for v in s.split(",")),
                         default=(64, 128))
    p_bench.add_argument("--seeds", type=int, default=3,
                         help="number of repeated seeds per cell")
    p_bench.add_argument("--m", type=int, default=100)
    p_bench.add_argument("--iters", "--max-iters", dest="max_iters", type=int,
                         default=17500)
    p_bench.add_argument("--restarts", type=int, default=8)
    p_bench.add_argument("--l2-coeff", dest="l2_coeff", type=float, default=1e-4)
    p_bench.add_argument("--seed", type=int, default=0)
    _add_data_flags(p_bench)
    p_bench.set_defaults(func=cmd_benchmark)

    p_pca = sub.add_parser("pca", help="first principal component of sensor CSV")
    p_pca.add_argument("--data", required=True)
    p_pca.add_argument("--out", required=True)
    p_pca.add_argument("--rate", type=float, default=None,
                       help="sample rate; x becomes index/rate")
    p_pca.add_argument("--no-header", action="store_true")
    p_pca.add_argument("--seed", type=int, default=0)
    p_pca.set_defaults(func=cmd_pca)
    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        return args.func(args, argv)
    except USAGE_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except SpecmixError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
