"""Rolling back-tests, the Best Stock / UBAH / UCRP benchmarks, and comparison tables.

Trading follows the zero-slippage, zero-market-impact assumptions: every
rebalance fills at the previous close and never moves prices.  A back-test
over periods ``first..last`` makes its decisions at ``first-1 .. last-1``;
the decision at ``d`` sees data up to ``d`` only, pays the remainder factor
for moving from the drifted weights, then earns ``y_{d+1}``.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from portfolio_rl import accounting as acc
from portfolio_rl.accounting import CommissionSchedule, PeriodLedgerEntry
from portfolio_rl.eiie import EIIEPolicy
from portfolio_rl.errors import ConfigError, DataError, NumericalError, UndefinedMetricError
from portfolio_rl.marketdata import MarketPanel

logger = logging.getLogger(__name__)

# decide(d, w_last_decision, w_evolved) -> target weights
Decision = Callable[[int, np.ndarray, np.ndarray], np.ndarray]


@dataclass
class BacktestConfig:
    first: int
    last: int
    commission_rate: float = 0.0025
    tolerance: float = acc.DEFAULT_TOLERANCE
    online_learning: bool = True
    charge_entry: bool = True
    seed: int = 0
    p0: float = 1.0

    def __post_init__(self):
        if self.first < 1 or self.last < self.first:
            raise ConfigError(f"invalid test range {self.first}..{self.last}")
        if not self.tolerance > 0:
            raise ConfigError("tolerance must be positive")

    @property
    def fees(self) -> CommissionSchedule:
        return CommissionSchedule.flat(self.commission_rate)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class BacktestReport:
    name: str
    assets: tuple[str, ...]
    first: int
    last: int
    records: list[PeriodLedgerEntry]
    p0: float = 1.0
    metadata: dict = field(default_factory=dict)

    @property
    def values(self) -> np.ndarray:
        return acc.portfolio_value_path(self.p0, self.records)

    @property
    def returns(self) -> np.ndarray:
        return np.array([e.rho for e in self.records])

    @property
    def summary(self) -> dict[str, float | None]:
        path = self.values
        try:
            sr = acc.sharpe_ratio(self.returns)
        except UndefinedMetricError:
            sr = None
        return {"fAPV": acc.fapv(path), "SR": sr, "MDD": acc.max_drawdown(path)}

    @property
    def mean_turnover(self) -> float:
        return float(np.mean([e.turnover for e in self.records]))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "assets": list(self.assets),
            "range": [self.first, self.last],
            "summary": self.summary,
            "metadata": self.metadata,
            "mean_turnover": self.mean_turnover,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def write(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / f"{self.name}.json").write_text(self.to_json())
        acc.write_ledger_csv(directory / f"{self.name}.ledger.csv", self.records, ("cash",) + self.assets, self.p0)
        with open(directory / f"{self.name}.values.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "p_t"])
            writer.writerow([self.first - 1, repr(self.p0)])
            for e, v in zip(self.records, self.values[1:]):
                writer.writerow([e.t, repr(float(v))])


def simulate(panel: MarketPanel, config: BacktestConfig, decide: Decision, name: str,
             after_decision: Callable[[int, np.ndarray], None] | None = None) -> BacktestReport:
    if config.last >= panel.periods:
        raise DataError(f"test range ends at {config.last} but data has {panel.periods} periods")
    fees = config.fees
    size = panel.m + 1
    w_last = acc.cash_vector(size)
    w_evolved = w_last
    records = []
    for d in range(config.first - 1, config.last):
        if d >= config.first:
            w_evolved = acc.evolve_weights(w_last, panel.relatives([d])[0])
        w = acc.check_portfolio(decide(d, w_last, w_evolved), atol=1e-9)
        entry_fees = fees if (config.charge_entry or d >= config.first) else CommissionSchedule(0.0, 0.0)
        try:
            mu, _ = acc.solve_mu(w, w_evolved, entry_fees, tol=config.tolerance)
            records.append(acc.make_entry(d + 1, panel.relatives([d + 1])[0], w_evolved, w, mu))
        except NumericalError as exc:
            raise NumericalError(f"{name}: numerical fault at period {d}: {exc}") from exc
        if after_decision is not None:
            after_decision(d, w)
        w_last = w
    return BacktestReport(name, panel.assets, config.first, config.last, records, config.p0,
                          {"config": config.digest(), "seed": config.seed})


def run_backtest(policy: EIIEPolicy, panel: MarketPanel, config: BacktestConfig, trainer=None,
                 name: str = "policy") -> BacktestReport:
    """Trade the policy over the test range, optionally learning online after every decision."""
    n = policy.n
    if config.first - 1 < n - 1:
        raise DataError(f"first decision at {config.first - 1} needs {n} periods of history")
    if config.online_learning and trainer is None:
        raise ConfigError("online learning needs a trainer holding the policy's memory and optimizer")
    if trainer is not None and trainer.policy is not policy:
        raise ConfigError("trainer is bound to a different policy")

    def decide(d, w_last, w_evolved):
        return policy.act(panel.price_tensors([d], n)[0], w_last).weights

    def after(d, w):
        if trainer is not None:
            trainer.memory.write(d, w)
            if config.online_learning:
                trainer.online_update(d)

    return simulate(panel, config, decide, name, after)


def benchmark_ubah(panel: MarketPanel, config: BacktestConfig) -> BacktestReport:
    size = panel.m + 1

    def decide(d, w_last, w_evolved):
        return acc.uniform_vector(size) if d == config.first - 1 else w_evolved

    return simulate(panel, config, decide, "UBAH")


def benchmark_ucrp(panel: MarketPanel, config: BacktestConfig) -> BacktestReport:
    size = panel.m + 1
    return simulate(panel, config, lambda d, w_last, w_evolved: acc.uniform_vector(size), "UCRP")


def best_stock_index(panel: MarketPanel, first: int, last: int) -> int:
    """Index (0-based, non-cash) of the asset with the largest v_last / v_{first-1}; ties go to the lower symbol."""
    growth = panel.close[:, last] / panel.close[:, first - 1]
    order = sorted(range(panel.m), key=lambda i: (-growth[i], panel.assets[i]))
    return order[0]


def benchmark_best_stock(panel: MarketPanel, config: BacktestConfig) -> BacktestReport:
    # hindsight: the only strategy allowed to look at the whole test range
    best = best_stock_index(panel, config.first, config.last)
    target = np.zeros(panel.m + 1)
    target[best + 1] = 1.0

    def decide(d, w_last, w_evolved):
        return target if d == config.first - 1 else w_evolved

    report = simulate(panel, config, decide, "BestStock")
    report.metadata["asset"] = panel.assets[best]
    return report


@dataclass
class ComparisonTable:
    rows: list[tuple[str, float, float, float | None]]  # name, MDD, fAPV, SR
    best: dict[str, str]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["strategy", "MDD", "fAPV", "SR", "best"])
        for name, mdd, fapv, sr in self.rows:
            flags = ";".join(col for col, who in self.best.items() if who == name)
            writer.writerow([name, repr(mdd), repr(fapv), "n/a" if sr is None else repr(sr), flags])
        return buf.getvalue()

    def to_text(self) -> str:
        header = f"{'strategy':<12} {'MDD':>9} {'fAPV':>10} {'SR':>9}"
        lines = [header, "-" * len(header)]
        for name, mdd, fapv, sr in self.rows:
            def cell(col, text):
                return text + ("*" if self.best.get(col) == name else " ")
            lines.append(f"{name:<12} {cell('MDD', f'{mdd:.3f}'):>9} {cell('fAPV', f'{fapv:.3f}'):>10} "
                         f"{cell('SR', 'n/a' if sr is None else f'{sr:.3f}'):>9}")
        lines.append("* best in column")
        return "\n".join(lines)


def compare(reports: Sequence[BacktestReport | dict]) -> ComparisonTable:
    """Tabulate MDD / fAPV / SR; lowest MDD and highest fAPV and SR are flagged."""
    if not reports:
        raise ConfigError("nothing to compare")
    dicts = [r.to_dict() if isinstance(r, BacktestReport) else r for r in reports]
    ranges = {tuple(d["range"]) for d in dicts}
    if len(ranges) > 1:
        raise ConfigError(f"reports cover different test ranges: {sorted(ranges)}")
    rows = [(d["name"], d["summary"]["MDD"], d["summary"]["fAPV"], d["summary"]["SR"]) for d in dicts]
    best = {
        "MDD": min(rows, key=lambda r: r[1])[0],
        "fAPV": max(rows, key=lambda r: r[2])[0],
    }
    with_sr = [r for r in rows if r[3] is not None]
    if with_sr:
        best["SR"] = max(with_sr, key=lambda r: r[3])[0]
    return ComparisonTable(rows, best)
