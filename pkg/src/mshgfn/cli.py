"""Batch command line: ingest, train, eval, backtest, ablate, scales, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .backtest import BacktestConfig, predictions_from_array, run_backtest
from .data import DataError, apply_stats, load_panel, make_labels, make_windows, save_stats, split_sizes, write_panel
from .evaluation import evaluate, predict_samples, write_predictions, write_results_table
from .gradcheck import TINY, run_gradcheck
from .model import ABLATIONS
from .training import NumericError, TrainConfig, load_checkpoint, save_checkpoint, train_on_panel

logger = logging.getLogger("mshgfn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DATA_DIR_ENV = "MSHGFN_DATA_DIR"
GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers


def digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def resolve_input(path) -> Path:
    p = Path(path)
    if not p.is_absolute() and not p.exists() and os.environ.get(DATA_DIR_ENV):
        p = Path(os.environ[DATA_DIR_ENV]) / p
    if not p.is_file():
        raise UsageError(f"input file not found: {path}")
    return p


def write_manifest(out_dir: Path, command: str, config: dict | None, inputs: dict, outputs: list[Path]) -> Path:
    manifest = {
        "command": command,
        "code_version": __version__,
        "config": config,
        "seed": (config or {}).get("seed"),
        "inputs": {name: {"path": str(p), "sha256": digest(p)} for name, p in inputs.items()},
        "outputs": [{"path": str(p), "sha256": digest(p)} for p in outputs],
    }
    path = out_dir / f"{command}.manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_config(args) -> TrainConfig:
    raw: dict = {}
    if getattr(args, "config", None):
        raw = json.loads(resolve_input(args.config).read_text())
    overrides = {
        "epochs": getattr(args, "epochs", None),
        "seed": getattr(args, "seed", None),
        "learning_rate": getattr(args, "lr", None),
        "K": getattr(args, "scales", None),
        "ablation": getattr(args, "ablation", None),
    }
    raw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad config: {exc}") from None


def write_history(path: Path, history) -> None:
    cols: list[str] = ["epoch", "train_loss", "val_acc", "val_mcc"]
    for row in history:
        cols += [k for k in row if k not in cols]
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def _samples_for_checkpoint(panel, config: TrainConfig, stats, tickers, split: str):
    if list(panel.tickers) != list(tickers):
        raise DataError(f"panel tickers {list(panel.tickers)} differ from checkpoint tickers {list(tickers)}")
    labels = make_labels(panel, config.gamma, config.label_mode)
    samples = make_windows(apply_stats(panel.values, stats), labels, panel.dates, config.L)
    n_train, n_val, _ = split_sizes(len(samples), config.fractions)
    parts = {"train": samples[:n_train], "val": samples[n_train : n_train + n_val], "test": samples[n_train + n_val :]}
    if not parts[split]:
        raise DataError(f"split {split!r} is empty")
    return parts[split]


def _train_and_score(panel, config: TrainConfig, dataset: str, variant: str) -> dict:
    result, ds = train_on_panel(panel, config)
    m = evaluate(result.model, ds.test)
    return {"dataset": dataset, "variant": variant, "acc": m.acc, "mcc": m.mcc, "best_epoch": result.best_epoch}


# ---------------------------------------------------------------- commands


def cmd_ingest(args) -> int:
    src = resolve_input(args.data)
    panel = load_panel(src)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_panel(panel, out)
    report = out.with_suffix(".report.json")
    report.write_text(
        json.dumps(
            {"n_stocks": panel.n_stocks, "n_days": panel.n_days, "tickers": list(panel.tickers), "dropped": list(panel.dropped)},
            indent=2,
        )
        + "\n"
    )
    if panel.dropped:
        print(f"dropped incomplete tickers: {', '.join(panel.dropped)}")
    print(f"panel: {panel.n_stocks} stocks x {panel.n_days} days -> {out}")
    write_manifest(out.parent, "ingest", None, {"data": src}, [out, report])
    return EXIT_OK


def cmd_train(args) -> int:
    config = load_config(args)
    src = resolve_input(args.data)
    panel = load_panel(src)
    result, ds = train_on_panel(panel, config)
    ckpt = Path(args.out)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, result.model, config, ds.stats, panel.tickers, result.history)
    stats_path = ckpt.with_suffix(".stats.json")
    save_stats(ds.stats, stats_path)
    log_path = ckpt.with_suffix(".log.csv")
    write_history(log_path, result.history)
    print(f"trained {config.epochs} epoch(s); best epoch {result.best_epoch} -> {ckpt}")
    write_manifest(ckpt.parent, "train", config.to_dict(), {"data": src}, [ckpt, stats_path, log_path])
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = resolve_input(args.ckpt)
    src = resolve_input(args.data)
    model, config, stats, tickers, _ = load_checkpoint(ckpt)
    panel = load_panel(src)
    samples = _samples_for_checkpoint(panel, config, stats, tickers, args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    per_day = out / f"{args.split}_per_day.csv"
    m = evaluate(model, samples, per_day_csv=per_day)
    preds = out / f"{args.split}_predictions.csv"
    write_predictions(preds, samples, predict_samples(model, samples), tickers)
    table = out / f"{args.split}_metrics.csv"
    write_results_table(table, [{"dataset": args.dataset or src.stem, "variant": config.ablation, "acc": m.acc, "mcc": m.mcc}])
    print(f"{args.split}: acc={m.acc:.6f} mcc={m.mcc:.6f} (TP={m.tp} TN={m.tn} FP={m.fp} FN={m.fn})")
    write_manifest(out, "eval", config.to_dict(), {"ckpt": ckpt, "data": src}, [per_day, preds, table])
    return EXIT_OK


def cmd_backtest(args) -> int:
    ckpt = resolve_input(args.ckpt)
    src = resolve_input(args.data)
    if args.top_k < 1:
        raise UsageError("--top-k must be >= 1")
    model, config, stats, tickers, _ = load_checkpoint(ckpt)
    panel = load_panel(src)
    samples = _samples_for_checkpoint(panel, config, stats, tickers, args.split)
    preds = predictions_from_array(samples, predict_samples(model, samples), tickers)
    curve = run_backtest(preds, panel, BacktestConfig(top_k=args.top_k, cost_bps=args.cost_bps))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    equity, summary = out / "equity.csv", out / "summary.json"
    curve.write_csv(equity)
    curve.write_summary(summary)
    s = curve.summary()
    print(f"final value {s['final_value']:.2f} (max drawdown {s['max_drawdown']:.4f})")
    write_manifest(out, "backtest", config.to_dict(), {"ckpt": ckpt, "data": src}, [equity, summary])
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = load_config(args)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    bad = [v for v in variants if v not in ABLATIONS]
    if bad or not variants:
        raise UsageError(f"unknown variant(s) {bad}; choose from {', '.join(ABLATIONS)}")
    src = resolve_input(args.data)
    panel = load_panel(src)
    rows = [_train_and_score(panel, replace(config, ablation=v), args.dataset or src.stem, v) for v in variants]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = out / "ablation.csv"
    write_results_table(table, rows)
    for r in rows:
        print(f"{r['variant']:>16}: acc={r['acc']:.6f} mcc={r['mcc']:.6f}")
    write_manifest(out, "ablate", config.to_dict(), {"data": src}, [table])
    return EXIT_OK


def cmd_scales(args) -> int:
    config = load_config(args)
    try:
        ks = [int(k) for k in args.k.split(",") if k.strip()]
    except ValueError:
        raise UsageError(f"--k expects comma-separated integers, got {args.k!r}") from None
    if not ks or min(ks) < 1:
        raise UsageError("--k values must be >= 1")
    src = resolve_input(args.data)
    panel = load_panel(src)
    rows = []
    for k in ks:
        row = _train_and_score(panel, replace(config, K=k), args.dataset or src.stem, config.ablation)
        rows.append({**row, "K": k})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = out / "scales.csv"
    write_results_table(table, rows)
    for r in rows:
        print(f"K={r['K']}: acc={r['acc']:.6f} mcc={r['mcc']:.6f}")
    write_manifest(out, "scales", config.to_dict(), {"data": src}, [table])
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    # without a config: N=4, L=8, D=5, K=2, H=1; a config supplies L, K and model options
    cfg = load_config(args).model_config(TINY.n_stocks) if args.config else TINY
    errors = run_gradcheck(cfg, seed=args.seed or 0)
    worst = max(errors.values())
    for group, err in errors.items():
        print(f"{group:>16}: {err:.3e}")
    print(f"max relative error {worst:.3e} (tolerance {GRADCHECK_TOL:.0e})")
    if not worst < GRADCHECK_TOL:
        print("gradient check FAILED", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mshgfn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def training_flags(p, data=True):
        p.add_argument("--config", help="JSON run config mirroring TrainConfig")
        if data:
            p.add_argument("--data", required=True, help="panel CSV")
        p.add_argument("--epochs", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--dataset", help="dataset name for result tables (default: data file stem)")

    p = sub.add_parser("ingest", help="validate a raw OHLCV CSV and write a clean panel")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    training_flags(p)
    p.add_argument("--scales", type=int, help="override K")
    p.add_argument("--ablation", choices=ABLATIONS)
    p.add_argument("--out", required=True, help="checkpoint path (.json)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on one split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("backtest", help="simulate the top-k portfolio from a checkpoint's predictions")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--cost-bps", type=float, default=0.0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_backtest)

    p = sub.add_parser("ablate", help="train and compare ablation variants")
    training_flags(p)
    p.add_argument("--variants", default=",".join(ABLATIONS))
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("scales", help="sweep the number of scales K")
    training_flags(p)
    p.add_argument("--k", default="2,3,4")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_scales)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter group")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
