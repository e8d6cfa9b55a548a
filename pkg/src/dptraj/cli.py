"""Command-line front end: preprocess, train, generate, evaluate, accountant.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import glob
import json
import logging
import platform
import sys
import warnings
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .accountant import PrivacyLedger, epsilon_for_delta, training_ledger
from .config import RunConfig, load_config
from .errors import ConfigError, DataError, NumericError
from .generate import TraceGenerator
from .grid import OccupiedCellIndex
from .metrics import evaluate, format_report
from .preprocess import (atomic_write_text, dataset_stats, preprocess_files, read_dataset, read_header,
                         transition_set, write_dataset)
from .ti import TrajectoryInitializer
from .tpg import TransitionModel

log = logging.getLogger("dptraj")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _path(cfg: RunConfig, out: Path, name: str) -> Path:
    p = Path(getattr(cfg, name))
    return p if p.is_absolute() else out / p


def write_manifest(out: Path, command: str, cfg: RunConfig, extra: dict | None = None) -> None:
    """Record config hash, seeds and library versions next to the outputs."""
    manifest = {
        "command": command, "config_sha256": cfg.digest(), "config": cfg.as_dict(),
        "seeds": {"global": cfg.seed, "ti": cfg.ti.seed, "tpg": cfg.tpg.seed},
        "versions": {"dptraj": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
    }
    manifest.update(extra or {})
    atomic_write_text(out / f"{command}.manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n"


def cmd_preprocess(cfg: RunConfig, out: Path, args) -> int:
    raw = args.input or [str(_path(cfg, out, "raw"))]
    files = []
    for item in raw:
        p = Path(item)
        if p.is_dir():
            files += sorted(str(f) for f in p.iterdir() if f.is_file() and f.suffix == ".txt")
        elif p.is_file():
            files.append(str(p))
        else:
            files += sorted(glob.glob(item))
    grid = cfg.grid()
    dataset, reasons = preprocess_files(files, grid, cfg.preprocess_settings(), cfg.workers)
    if len(dataset) == 0:
        raise DataError("preprocessing produced no trajectories")
    target = _path(cfg, out, "dataset")
    write_dataset(target, dataset)
    stats = dataset_stats(dataset)
    stats.update({"grid_rows": grid.n_rows, "grid_cols": grid.n_cols, "universe_size": grid.universe_size,
                  "input_files": len(files), "reasons": dict(sorted(reasons.items()))})
    atomic_write_text(out / "stats.json", _json(stats))
    write_manifest(out, "preprocess", cfg, {"outputs": [str(target)]})
    print(f"trajectories={stats['n_trajectories']} occupied_cells={stats['n_occupied_cells']} "
          f"max_len={stats['max_length']} avg_len={stats['avg_length']:.2f} std_len={stats['std_length']:.2f}")
    return EXIT_OK


def _ledger_report(ledger: PrivacyLedger, delta: float, parts: dict) -> dict:
    spend = epsilon_for_delta(ledger, delta)
    report = {"delta": delta, "epsilon": spend.epsilon if spend.private else "inf",
              "lambda": spend.order, "private": spend.private, "steps": ledger.steps,
              "alpha": {int(l): float(a) for l, a in zip(ledger.lambdas, ledger.alpha)}, "models": parts}
    if not spend.private:
        report["flag"] = "NON-PRIVATE"
    return report


def cmd_train(cfg: RunConfig, out: Path, args) -> int:
    grid = cfg.grid()
    dataset = read_dataset(_path(cfg, out, "dataset"), grid)
    if len(dataset) == 0:
        raise DataError("dataset is empty")
    if cfg.index == "full":
        index = OccupiedCellIndex.full(grid)
    else:
        index = OccupiedCellIndex.from_trajectories(dataset.trajectories, grid)
    delta = cfg.delta_for(len(dataset))
    ledger = PrivacyLedger()
    parts, outputs = {}, []
    which = args.which
    if which in ("ti", "both"):
        ti = TrajectoryInitializer(index, hidden=cfg.ti_hidden, latent=cfg.ti_latent, seed=cfg.seed)
        res = ti.train(dataset.trajectories, cfg.ti)
        ledger = ledger + res.ledger
        parts["ti"] = {**res.ledger.to_dict(), "final_loss": res.losses[-1] if res.losses else None,
                       "max_clipped_norm": res.max_clipped_norm}
        target = _path(cfg, out, "ti_model")
        ti.save(target, {"dpsgd": dataclasses.asdict(cfg.ti)})
        outputs.append(str(target))
    if which in ("tpg", "both"):
        tset = transition_set(dataset.trajectories, grid, cfg.neighborhood())
        tpg = TransitionModel(index, cfg.neighborhood(), embed_dim=cfg.tpg_embed, hidden=cfg.tpg_hidden,
                              seed=cfg.seed + 1)
        res = tpg.train(tset, cfg.tpg)
        ledger = ledger + res.ledger
        parts["tpg"] = {**res.ledger.to_dict(), "final_loss": res.losses[-1] if res.losses else None,
                        "max_clipped_norm": res.max_clipped_norm, "diagnostics": tpg.diagnostics(tset)}
        target = _path(cfg, out, "tpg_model")
        tpg.save(target, {"dpsgd": dataclasses.asdict(cfg.tpg)})
        outputs.append(str(target))
    report = _ledger_report(ledger, delta, parts)
    target = _path(cfg, out, "ledger")
    atomic_write_text(target, _json(report))
    outputs.append(str(target))
    write_manifest(out, "train", cfg, {"which": which, "outputs": outputs})
    flag = " NON-PRIVATE" if not report["private"] else ""
    print(f"epsilon={report['epsilon']} lambda={report['lambda']} delta={delta:.6g} steps={ledger.steps}{flag}")
    return EXIT_OK


def cmd_generate(cfg: RunConfig, out: Path, args) -> int:
    ti_path, tpg_path = _path(cfg, out, "ti_model"), _path(cfg, out, "tpg_model")
    for p in (ti_path, tpg_path):
        if not p.exists():
            raise DataError(f"missing model file {p}")
    ti = TrajectoryInitializer.load(ti_path)
    tpg = TransitionModel.load(tpg_path)
    if ti.grid != cfg.grid():
        raise DataError("model grid does not match the configured grid")
    try:
        gen = TraceGenerator(ti, tpg, cfg.retries)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    n = args.n if args.n is not None else cfg.n
    if n is None:
        n = ti.n_records
    if n is None:
        raise ConfigError("n not given and the TI model records no dataset size")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result = gen.generate(int(n), cfg.seed)
    target = _path(cfg, out, "synthetic")
    write_dataset(target, result.dataset, synthetic=True)
    counters = dict(sorted(result.counters.items()))
    write_manifest(out, "generate", cfg, {"n": int(n), "generated": len(result.dataset), "counters": counters,
                                          "warnings": [str(w.message) for w in caught],
                                          "outputs": [str(target)]})
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    print(f"generated={len(result.dataset)} requested={n} skipped={result.skipped}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, out: Path, args) -> int:
    grid = cfg.grid()
    orig_path = Path(args.original) if args.original else _path(cfg, out, "dataset")
    syn_path = Path(args.synthetic) if args.synthetic else _path(cfg, out, "synthetic")
    h1, h2 = read_header(orig_path), read_header(syn_path)
    for key in ("rows", "cols", "cell"):
        if h1.get(key) != h2.get(key):
            raise DataError(f"grid mismatch between {orig_path} and {syn_path}: {key}")
    d1, d2 = read_dataset(orig_path, grid), read_dataset(syn_path, grid)
    values = evaluate(d1, d2, cfg.tpr_k, cfg.emd_sample_cap, cfg.seed)
    text = format_report(values)
    target = _path(cfg, out, "report")
    atomic_write_text(target, text)
    write_manifest(out, "evaluate", cfg, {"inputs": [str(orig_path), str(syn_path)], "outputs": [str(target)]})
    sys.stdout.write(text)
    return EXIT_OK


def cmd_accountant(cfg: RunConfig, out: Path, args) -> int:
    if args.records < 1 or args.batch < 1 or args.epochs < 0 or args.sigma < 0:
        raise ConfigError("need records >= 1, batch >= 1, epochs >= 0, sigma >= 0")
    delta = args.delta if args.delta is not None else 1.0 / args.records
    if not 0 < delta < 1:
        raise ConfigError("delta must lie in (0, 1)")
    ledger = training_ledger(args.records, args.batch, args.sigma, args.epochs)
    spend = epsilon_for_delta(ledger, delta)
    eps = format(spend.epsilon, ".6g") if spend.private else "inf"
    flag = "" if spend.private else " NON-PRIVATE"
    print(f"epsilon={eps} lambda={spend.order if spend.order is not None else '-'}{flag}")
    return EXIT_OK


COMMANDS = {"preprocess": cmd_preprocess, "train": cmd_train, "generate": cmd_generate,
            "evaluate": cmd_evaluate, "accountant": cmd_accountant}


def build_parser() -> argparse.ArgumentParser:
    def flags(suppress):
        # subcommands repeat the global flags without clobbering values given before them
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        g = argparse.ArgumentParser(add_help=False)
        g.add_argument("--config", default=d(None), help="flat key = value configuration file")
        g.add_argument("--seed", type=int, default=d(None),
                       help="master seed (also seeds both models' DP-SGD streams)")
        g.add_argument("--out", default=d("."), help="output directory (default: current directory)")
        g.add_argument("--set", action="append", default=d([]), metavar="KEY=VALUE",
                       help="override one configuration key; repeatable")
        g.add_argument("-v", "--verbose", action="store_true", default=d(False))
        return g

    common = flags(True)
    p = argparse.ArgumentParser(prog="dptraj", description=__doc__.splitlines()[0], parents=[flags(False)])
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("preprocess", parents=[common], help="raw GPS files -> processed dataset")
    s.add_argument("input", nargs="*", help="raw files, directories or globs (default: config 'raw')")
    s = sub.add_parser("train", parents=[common], help="train TI and/or TPG with DP-SGD")
    s.add_argument("--which", choices=("ti", "tpg", "both"), default="both")
    s = sub.add_parser("generate", parents=[common], help="sample a synthetic dataset from trained models")
    s.add_argument("--n", type=int, help="number of trajectories (default: |D| from the TI model)")
    s = sub.add_parser("evaluate", parents=[common], help="utility metrics of synthetic vs original")
    s.add_argument("--original")
    s.add_argument("--synthetic")
    s = sub.add_parser("accountant", parents=[common], help="epsilon for a DP-SGD schedule")
    s.add_argument("--records", type=int, required=True, help="|D|")
    s.add_argument("--batch", type=int, default=200)
    s.add_argument("--sigma", type=float, default=1.3)
    s.add_argument("--epochs", type=int, default=30)
    s.add_argument("--delta", type=float, help="default 1/|D|")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = {}
        for item in args.set:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            overrides[key.strip()] = value.strip()
        if args.seed is not None:
            overrides.setdefault("seed", str(args.seed))
            overrides.setdefault("ti.seed", str(args.seed))
            overrides.setdefault("tpg.seed", str(args.seed + 1))
        cfg = load_config(args.config, overrides)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, out, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
