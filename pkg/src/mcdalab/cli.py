"""Command-line entry point: ``mcdalab {generate,train,sweep-gamma,probe,bound,plot}``.

Every command writes into an output root chosen by ``--out``, then the
config's ``[output] dir``, then ``$BTDA_OUT``, then ``./runs``. Outputs are
a deterministic function of (config, seeds); wall-clock details go to
``*.meta.json`` sidecars only.

Exit codes: 0 success, 2 configuration error, 3 numeric error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, _kernels
from .baselines import METHOD_OVERRIDES, PRESETS, run_one
from .config import (
    ConfigError,
    RawConfig,
    build_dataset,
    build_train_config,
    parse_bool,
    parse_floats,
    parse_ints,
    parse_names,
    read_config,
)
from .datagen import Dataset, label_distribution, load_dataset, save_dataset
from .errors import LabError, StorageError
from .mcda import TrainLog
from .metrics import bound_check, knn_same_class_rate
from .nnet import forward, load_checkpoint, save_checkpoint

DEFAULT_GAMMAS = (0.01, 0.03, 0.05, 0.07, 0.09)


def _write(path: Path, data: bytes | str) -> None:
    _mkdir(path.parent)
    try:
        if isinstance(data, str):
            data = data.encode()
        path.write_bytes(data)
    except OSError as exc:
        raise StorageError("E_IO", f"cannot write {path}: {exc}") from exc


def _mkdir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError("E_IO", f"cannot create {path}: {exc}") from exc
    return path


def _write_meta(path: Path, started: float, args: argparse.Namespace) -> None:
    meta = {"started_unix": started, "finished_unix": time.time(), "argv": sys.argv[1:],
            "command": args.command, "version": __version__, "backend": _kernels.BACKEND,
            "python": platform.python_version(), "numpy": np.__version__}
    _write(path, json.dumps(meta, indent=2) + "\n")


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _out_root(args: argparse.Namespace, cfg: RawConfig) -> Path:
    if args.out:
        return Path(args.out)
    configured = cfg.get("output", "dir")
    if configured:
        return Path(configured)
    return Path(os.environ.get("BTDA_OUT") or "runs")


def _dataset(args: argparse.Namespace, cfg: RawConfig) -> Dataset:
    if getattr(args, "dataset", None):
        return load_dataset(args.dataset)
    return build_dataset(cfg)


def _seeds(args: argparse.Namespace, cfg: RawConfig) -> list[int]:
    seeds = args.seed or list(cfg.get("train", "seeds", parse_ints, (0,)))
    if not seeds:
        raise ConfigError("seeds must not be empty", cfg.section("train")["seeds"][1])
    return seeds


def _methods(args: argparse.Namespace, cfg: RawConfig) -> list[str]:
    if args.method:
        return [args.method]
    methods = list(cfg.get("train", "methods", parse_names, ("mcda",)))
    if not methods:
        raise ConfigError("methods must not be empty", cfg.section("train")["methods"][1])
    return methods


def _train_config(args: argparse.Namespace, cfg: RawConfig, method: str):
    config = build_train_config(cfg, PRESETS, method, METHOD_OVERRIDES)
    gammas = getattr(args, "gamma", None)
    if gammas and args.command == "train":
        if len(gammas) > 1:
            raise ConfigError("train takes a single --gamma")
        config = dataclasses.replace(config, gamma=gammas[0])
    return config


def _print_epoch(rec) -> None:
    pl = "-" if rec.pl_acc is None else f"{rec.pl_acc:.3f}"
    print(f"  epoch {rec.epoch:3d}  src {rec.acc_src:.3f}  tgt {rec.acc_tgt_mean:.3f}  "
          f"gated {rec.gated_frac:.3f}  pl {pl}  lr {rec.lr:.5f}  grl {rec.grl:.3f}", flush=True)


# commands ------------------------------------------------------------------------

def cmd_generate(args, cfg: RawConfig) -> int:
    started = time.time()
    ds = build_dataset(cfg)
    root = _mkdir(_out_root(args, cfg))
    path = root / "dataset.btda"
    save_dataset(ds, path)
    _write_meta(root / "dataset.meta.json", started, args)
    print(f"wrote {path}  ({ds.n} samples, k={ds.k}, {ds.n_domains} domains)")
    for d in range(ds.n_domains):
        dist = " ".join(f"{p:.3f}" for p in label_distribution(ds, d))
        print(f"  domain {d}: n={len(ds.rows_of(d))}  P(Y) = {dist}")
    return 0


def run_dir(root: Path, method: str, seed: int) -> Path:
    return root / method / f"seed{seed}"


def cmd_train(args, cfg: RawConfig) -> int:
    ds = _dataset(args, cfg)
    root = _out_root(args, cfg)
    plot = cfg.get("output", "plot", parse_bool, False)
    runs = [(m, seed) for m in _methods(args, cfg) for seed in _seeds(args, cfg)]
    for method, seed in runs:
        started = time.time()
        config = dataclasses.replace(_train_config(args, cfg, method), seed=seed)
        print(f"train {config.method} seed={seed}", flush=True)
        res = run_one(ds, config, progress=_print_epoch)
        out = run_dir(root, config.method, seed)
        summary = res.log.summary()
        summary["config"] = dataclasses.asdict(config)
        summary["bound"] = dataclasses.asdict(res.bound)
        _write(out / "log.jsonl", res.log.to_jsonl())
        _write(out / "summary.json", _dumps(summary))
        save_checkpoint(res.bundle, out / "model.ckpt")
        if plot:
            plot_run(out)
        _write_meta(out / "run.meta.json", started, args)
        print(f"  -> {out}  acc_tgt_mean={summary['acc_tgt_mean']:.4f}", flush=True)
    return 0


def cmd_sweep_gamma(args, cfg: RawConfig) -> int:
    started = time.time()
    ds = _dataset(args, cfg)
    methods = _methods(args, cfg)
    if len(methods) > 1:
        raise ConfigError("sweep-gamma runs one method; pass --method")
    base = _train_config(args, cfg, methods[0])
    gammas = args.gamma or list(cfg.get("sweep", "gammas", parse_floats, DEFAULT_GAMMAS))
    seeds = _seeds(args, cfg)
    rows, medians = [], []
    for g in gammas:
        accs = []
        for seed in seeds:
            config = dataclasses.replace(base, gamma=g, seed=seed)
            print(f"sweep gamma={g} seed={seed}", flush=True)
            res = run_one(ds, config)
            accs.append(res.acc_tgt_mean)
            rows.append((g, seed, res.acc_tgt_mean))
        medians.append(float(np.median(accs)))
    means = [float(np.mean([r[2] for r in rows if r[0] == g])) for g in gammas]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["gamma", "seed", "acc_tgt_mean"])
    for g, seed, acc in rows:
        w.writerow([repr(float(g)), seed, repr(acc)])
    w.writerow(["fluctuation", "mean", repr(max(means) - min(means))])
    w.writerow(["fluctuation", "median", repr(max(medians) - min(medians))])
    root = _out_root(args, cfg)
    _write(root / "sweep_gamma.csv", buf.getvalue())
    _write_meta(root / "sweep_gamma.meta.json", started, args)
    print(f"wrote {root / 'sweep_gamma.csv'}  fluctuation(mean)={max(means) - min(means):.4f}")
    return 0


def _probe_rows(ds: Dataset, domains: str) -> np.ndarray:
    if domains == "source":
        return ds.rows_of(0)
    if domains == "targets":
        return np.flatnonzero(ds.domain_ids > 0)
    if domains == "all":
        return np.arange(ds.n)
    raise ConfigError(f"probe.domains must be source, targets or all, got {domains!r}")


def cmd_probe(args, cfg: RawConfig) -> int:
    started = time.time()
    ds = _dataset(args, cfg)
    rows = _probe_rows(ds, cfg.get("probe", "domains", str, "targets"))
    k_neighbors = cfg.get("probe", "k_neighbors", int, 50)
    if args.checkpoint:
        feats = forward(load_checkpoint(args.checkpoint), ds.inputs(rows)).z
        source = "model"
    else:
        feats = ds.data[rows].astype(np.float64)
        source = "pixels"
    rates, mean = knn_same_class_rate(feats, ds.class_labels[rows], k_neighbors)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class_id", "rate"])
    for c, r in enumerate(rates):
        w.writerow([c, "" if np.isnan(r) else repr(float(r))])
    w.writerow(["mean", repr(mean)])
    root = _out_root(args, cfg)
    _write(root / "probe.csv", buf.getvalue())
    _write_meta(root / "probe.meta.json", started, args)
    print(f"probe on {source} features: mean same-class rate {mean:.4f}")
    return 0


def cmd_bound(args, cfg: RawConfig) -> int:
    started = time.time()
    if not args.checkpoint:
        raise ConfigError("bound needs --checkpoint")
    ds = _dataset(args, cfg)
    bundle = load_checkpoint(args.checkpoint)
    preds = forward(bundle, ds.inputs()).probs.argmax(axis=1)
    report = bound_check(preds, ds)
    root = _out_root(args, cfg)
    _write(root / "bound.json", report.to_json() + "\n")
    _write_meta(root / "bound.meta.json", started, args)
    print(f"lhs={report.lhs:.4f}  rhs={report.rhs:.4f}  tol={report.tol:.4f}  holds={report.holds}")
    return 0


def plot_run(run: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    try:
        log = TrainLog.from_jsonl((run / "log.jsonl").read_text())
    except OSError as exc:
        raise StorageError("E_IO", f"cannot read {run / 'log.jsonl'}: {exc}") from exc
    if not log.records:
        raise StorageError("E_IO", f"{run / 'log.jsonl'} has no records")
    epochs = log.column("epoch")
    written = []
    for name, label in (("gated_frac", "fraction below threshold"),
                        ("pl_acc", "gated pseudo-label accuracy"),
                        ("acc_tgt_mean", "mean target accuracy")):
        values = [np.nan if v is None else v for v in log.column(name)]
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        ax.plot(epochs, values, marker="o")
        ax.set_xlabel("epoch")
        ax.set_ylabel(label)
        ax.set_ylim(0, 1.02)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        path = run / f"{name}.png"
        try:
            fig.savefig(path, dpi=100, metadata={"Software": None})
        except OSError as exc:
            raise StorageError("E_IO", f"cannot write {path}: {exc}") from exc
        finally:
            plt.close(fig)
        written.append(path)
    return written


def cmd_plot(args, cfg: RawConfig) -> int:
    if not args.run_dir:
        raise ConfigError("plot needs a run directory")
    for path in plot_run(Path(args.run_dir)):
        print(f"wrote {path}")
    return 0


# argument handling -----------------------------------------------------------------

COMMANDS = {"generate": cmd_generate, "train": cmd_train, "sweep-gamma": cmd_sweep_gamma,
            "probe": cmd_probe, "bound": cmd_bound, "plot": cmd_plot}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcdalab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="experiment config file")
        p.add_argument("--out", help="output root directory")
        if name in ("train", "sweep-gamma", "probe", "bound"):
            p.add_argument("--dataset", help="dataset file; overrides [data] in the config")
        if name in ("train", "sweep-gamma"):
            p.add_argument("--seed", type=int, action="append", help="seed (repeatable)")
            p.add_argument("--method", help="training method")
            p.add_argument("--gamma", type=float, action="append", help="uncertainty threshold")
        if name in ("probe", "bound"):
            p.add_argument("--checkpoint", help="model checkpoint")
        if name == "plot":
            p.add_argument("run_dir", nargs="?", help="run directory holding log.jsonl")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = read_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except LabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
