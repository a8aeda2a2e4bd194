"""Command-line entry point: ``ingest``, ``train``, ``backtest`` and ``report``.

Every subcommand takes ``--config FILE`` (flat ``key = value`` text) and any
number of ``--set key=value`` overrides.  Exit codes: 0 success, 1 invalid
configuration, 2 data problems, 3 numerical faults.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from portfolio_rl import __version__
from portfolio_rl import marketdata as md
from portfolio_rl.backtest import (BacktestConfig, benchmark_best_stock, benchmark_ubah, benchmark_ucrp, compare,
                                   run_backtest)
from portfolio_rl.config import RunConfig
from portfolio_rl.eiie import EIIEPolicy, PolicyTopology
from portfolio_rl.errors import ConfigError, DataError, NumericalError, PortfolioError
from portfolio_rl.training import Trainer, write_curve_csv

logger = logging.getLogger("portfolio_rl")

CHECKPOINT = "policy.ckpt"
PARTIAL_CHECKPOINT = "partial.ckpt"
CURVE = "curve.csv"
MANIFEST = "manifest.json"
REPORT_DIR = "backtest"
BENCHMARK_ORDER = ("BestStock", "UCRP", "UBAH")


# data ---------------------------------------------------------------------------
def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def data_key(cfg: RunConfig) -> str:
    """Name of the candle store for everything that determines the data."""
    fields = [cfg.data_source, cfg.trading_period, cfg.train_start, cfg.test_end]
    if cfg.data_source == "synthetic":
        fields += [cfg.synthetic_assets, cfg.synthetic_seed]
    elif cfg.data_source == "csv":
        fields += [str(Path(cfg.csv_path).resolve())]
    else:
        fields += [cfg.endpoint, cfg.query_template, cfg.pairs, cfg.cash]
    return hashlib.sha256(json.dumps(fields, default=str).encode()).hexdigest()[:16]


def store_path(cfg: RunConfig) -> Path:
    return cfg.cache_path / f"candles-{data_key(cfg)}.csv"


def _asset_name(pair: str, cash: str) -> str:
    prefix = cash + "_"
    return pair[len(prefix):] if pair.startswith(prefix) else pair


def cmd_ingest(cfg: RunConfig, out=None) -> int:
    """Fetch, load or generate candles for the configured range and write the cache."""
    out = out or sys.stdout
    train_start, _, _, test_end = cfg.ranges
    period = cfg.trading_period
    failures: list[str] = []
    if cfg.data_source == "synthetic":
        periods = (test_end - train_start) // period
        series = md.generate_synthetic_market(cfg.synthetic_spec, periods, cfg.synthetic_seed,
                                              start=train_start, period_seconds=period)
    elif cfg.data_source == "csv":
        if not Path(cfg.csv_path).exists():
            raise DataError(f"CSV source {cfg.csv_path} does not exist")
        series = md.load_csv_series(cfg.csv_path, period, train_start, test_end)
    else:
        client = md.ChartClient(cfg.endpoint, cfg.query_template, cache_dir=cfg.cache_path / "http")
        series = {}
        for pair in cfg.pair_list:
            try:
                s = client.fetch_candles(pair, period, train_start, test_end)
            except DataError as exc:
                failures.append(f"{pair}: {exc}")
                continue
            name = _asset_name(pair, cfg.cash)
            series[name] = md.CandleSeries(name, s.period_seconds, s.start, s.open, s.high, s.low, s.close,
                                           s.volume, s.missing)
    path = store_path(cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    md.write_candles_csv(path, series.values())
    expected = (test_end - train_start) // period
    print(f"candle store: {path}", file=out)
    for name, s in sorted(series.items()):
        missing = int(np.count_nonzero(s.missing))
        status = "complete" if missing == 0 and len(s) == expected else "partial"
        print(f"  {name:<10} {len(s) - missing}/{expected} periods  {status}", file=out)
    for failure in failures:
        print(f"  FAILED {failure}", file=out)
    if failures:
        raise DataError(f"{len(failures)} of {len(cfg.pair_list)} pairs could not be fetched; cache is partial")
    incomplete = [n for n, s in series.items() if s.missing.any()]
    print("coverage: " + ("complete" if not incomplete else f"partial ({len(incomplete)} assets with gaps)"),
          file=out)
    return 0


def load_panel(cfg: RunConfig) -> tuple[md.MarketPanel, dict]:
    """Preselected, gap-filled panel over [train_start, test_end) from the candle store."""
    path = store_path(cfg)
    if not path.exists():
        cmd_ingest(cfg, out=sys.stderr)
    train_start, _, test_start, test_end = cfg.ranges
    series = md.load_csv_series(path, cfg.trading_period, train_start, test_end)
    chosen = md.preselect_assets(series, cfg.volume_observation, cfg.number_of_assets - 1, as_of=test_start,
                                 cash=cfg.cash, test_start=test_start)
    panel = md.MarketPanel.from_series([md.fill_missing(series[a]) for a in sorted(chosen)])
    info = {"store": path.name, "store_sha256": _sha256(path), "panel_sha256": panel.digest(),
            "assets": list(panel.assets)}
    return panel, info


def split(cfg: RunConfig, panel: md.MarketPanel) -> tuple[tuple[int, int], tuple[int, int]]:
    train_start, train_end, test_start, _ = cfg.ranges
    hi = (train_end - train_start) // cfg.trading_period - 1
    first = (test_start - train_start) // cfg.trading_period
    return (0, hi), (first, panel.periods - 1)


def topology(cfg: RunConfig, m: int) -> PolicyTopology:
    return PolicyTopology(cfg.policy, m, cfg.window_size, cfg.conv_map_counts, cfg.kernel_width, cfg.hidden,
                          seed=cfg.seed)


def write_manifest(directory: Path, cfg: RunConfig, command: str, data: dict, **extra) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "config": cfg.to_text(),
        "seeds": {"seed": cfg.seed, "synthetic_seed": cfg.synthetic_seed},
        "data": data,
        **extra,
    }
    (directory / f"{command}.{MANIFEST}").write_text(json.dumps(manifest, sort_keys=True, indent=2))


def _read_curve(path: Path, upto: int) -> list[dict[str, float]]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return [{"step": int(r["step"]), "R": float(r["R"]), "l2": float(r["l2"]), "objective": float(r["objective"])}
                for r in csv.DictReader(fh) if int(r["step"]) <= upto]


# commands ----------------------------------------------------------------------------
def cmd_train(cfg: RunConfig, resume: bool = False, out=None) -> int:
    out = out or sys.stdout
    began = time.perf_counter()
    panel, data = load_panel(cfg)
    (lo, hi), _ = split(cfg, panel)
    directory = Path(cfg.output_dir)
    directory.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(EIIEPolicy(topology(cfg, panel.m)), panel, cfg.training_config())
    partial = directory / PARTIAL_CHECKPOINT
    if resume:
        if not partial.exists():
            raise DataError(f"--resume given but no partial checkpoint at {partial}")
        trainer.load(partial)
        trainer.curve = _read_curve(directory / CURVE, trainer.step)
        print(f"resuming from step {trainer.step}", file=out)

    def checkpoint(t: Trainer) -> None:
        t.save(partial)
        write_curve_csv(directory / CURVE, t.curve)
        write_manifest(directory, cfg, "train", data, complete=False, steps=t.step)

    trainer.pretrain((lo, hi), on_checkpoint=checkpoint)
    trainer.save(directory / CHECKPOINT)
    write_curve_csv(directory / CURVE, trainer.curve)
    write_manifest(directory, cfg, "train", data, complete=True, steps=trainer.step,
                   checkpoint_sha256=_sha256(directory / CHECKPOINT),
                   elapsed_seconds=round(time.perf_counter() - began, 3))
    last = trainer.curve[-1]["R"] if trainer.curve else float("nan")
    print(f"trained {trainer.step} steps on periods {lo}..{hi}; final R = {last:.6g}", file=out)
    print(f"checkpoint: {directory / CHECKPOINT}", file=out)
    return 0


def cmd_backtest(cfg: RunConfig, checkpoint: str | None = None, out=None) -> int:
    out = out or sys.stdout
    began = time.perf_counter()
    path = Path(checkpoint) if checkpoint else Path(cfg.output_dir) / CHECKPOINT
    if not path.exists():
        raise DataError(f"checkpoint {path} not found; run 'train' first or pass --checkpoint")
    panel, data = load_panel(cfg)
    _, (first, last) = split(cfg, panel)
    trainer = Trainer(EIIEPolicy(topology(cfg, panel.m)), panel, cfg.training_config())
    try:
        trainer.load(path)
    except (KeyError, ValueError) as exc:
        raise DataError(f"checkpoint {path} does not match the configured topology/data: {exc}") from exc
    bt = BacktestConfig(first, last, commission_rate=cfg.commission_rate, tolerance=cfg.tolerance,
                        online_learning=cfg.online_learning, charge_entry=cfg.charge_entry, seed=cfg.seed)
    name = f"EIIE-{cfg.policy.upper()}"
    reports = [run_backtest(trainer.policy, panel, bt, trainer=trainer, name=name),
               benchmark_best_stock(panel, bt), benchmark_ucrp(panel, bt), benchmark_ubah(panel, bt)]
    directory = Path(cfg.output_dir) / REPORT_DIR
    for r in reports:
        r.write(directory)
    table = compare(reports)
    (directory / "comparison.csv").write_text(table.to_csv())
    (directory / "comparison.txt").write_text(table.to_text() + "\n")
    write_manifest(Path(cfg.output_dir), cfg, "backtest", data, checkpoint_sha256=_sha256(path),
                   range=[first, last], elapsed_seconds=round(time.perf_counter() - began, 3))
    print(table.to_text(), file=out)
    return 0


def cmd_report(cfg: RunConfig, out=None) -> int:
    out = out or sys.stdout
    directory = Path(cfg.output_dir) / REPORT_DIR
    files = sorted(directory.glob("*.json")) if directory.exists() else []
    if not files:
        raise DataError(f"no back-test reports in {directory}; run 'backtest' first")
    reports = [json.loads(p.read_text()) for p in files]
    # same row order as 'backtest': policies first, then the benchmarks
    reports.sort(key=lambda r: (BENCHMARK_ORDER.index(r["name"]) if r["name"] in BENCHMARK_ORDER else -1, r["name"]))
    table = compare(reports)
    (directory / "comparison.csv").write_text(table.to_csv())
    (directory / "comparison.txt").write_text(table.to_text() + "\n")
    print(table.to_text(), file=out)
    return 0


# entry point ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value configuration file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="portfolio-rl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", parents=[common], help="fetch/load/generate candles into the cache")
    train = sub.add_parser("train", parents=[common], help="pretrain a policy")
    train.add_argument("--resume", action="store_true", help="continue from the last partial checkpoint")
    backtest = sub.add_parser("backtest", parents=[common], help="back-test the policy and the benchmarks")
    backtest.add_argument("--checkpoint", help="checkpoint to load (default: <output_dir>/policy.ckpt)")
    sub.add_parser("report", parents=[common], help="re-tabulate existing back-test reports")
    sub.add_parser("show-config", parents=[common], help="print the effective configuration")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
        cfg.apply_overrides(args.set)
        cfg.validate()
        if args.command == "show-config":
            sys.stdout.write(cfg.to_text())
            return 0
        if args.command == "ingest":
            return cmd_ingest(cfg)
        if args.command == "train":
            return cmd_train(cfg, resume=args.resume)
        if args.command == "backtest":
            return cmd_backtest(cfg, checkpoint=args.checkpoint)
        return cmd_report(cfg)
    except PortfolioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ArithmeticError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return NumericalError.exit_code
    except ValueError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
