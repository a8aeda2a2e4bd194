"""Scaled-down learning experiment on a synthetic market with one drifting asset.

Five non-cash assets, one drifting upward, the rest driftless; the policy
pretrains on the first block of periods and is then back-tested (with
rolling online updates) on the held-out tail against UCRP.
"""
from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from portfolio_rl.backtest import BacktestConfig, BacktestReport, benchmark_ucrp, run_backtest
from portfolio_rl.eiie import build_cnn_policy
from portfolio_rl.marketdata import MarketPanel, generate_synthetic_market
from portfolio_rl.training import Trainer, TrainingConfig


@dataclass(frozen=True)
class LearningExperiment:
    drift: float = 0.002
    volatility: float = 0.01
    m: int = 5
    train_periods: int = 3000
    test_periods: int = 500
    pretrain_steps: int = 20_000
    commission_rate: float = 0.0025
    online_learning: bool = True
    conv_maps: tuple[int, int] = (8, 40)
    market_seed: int = 1
    seed: int = 0
    training: TrainingConfig = field(default_factory=lambda: TrainingConfig(number_of_assets=6))

    @property
    def drifting_asset(self) -> str:
        return "A"

    def market_spec(self) -> dict[str, tuple[float, float]]:
        names = [chr(ord("A") + i) for i in range(self.m)]
        return {name: (self.drift if i == 0 else 0.0, self.volatility) for i, name in enumerate(names)}

    def training_config(self) -> TrainingConfig:
        return replace(self.training, number_of_assets=self.m + 1, total_steps=self.pretrain_steps,
                       commission_rate=self.commission_rate, seed=self.seed)


@dataclass
class ExperimentResult:
    experiment: LearningExperiment
    panel: MarketPanel
    trainer: Trainer
    policy_report: BacktestReport
    ucrp_report: BacktestReport
    pvm_sweep_change: float
    seconds: float

    @property
    def mean_drifting_weight(self) -> float:
        idx = 1 + self.panel.assets.index(self.experiment.drifting_asset)
        return float(np.mean([e.w_target[idx] for e in self.policy_report.records]))

    @property
    def mean_turnover(self) -> float:
        return self.policy_report.mean_turnover

    def write(self, directory: str | Path) -> dict[str, str]:
        """Write checkpoint and reports; return their sha256 digests keyed by file name."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.trainer.save(directory / "policy.ckpt")
        self.policy_report.write(directory)
        self.ucrp_report.write(directory)
        return {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
                for p in sorted(directory.iterdir()) if p.is_file()}


def run_learning_experiment(experiment: LearningExperiment = LearningExperiment()) -> ExperimentResult:
    began = time.perf_counter()
    total = experiment.train_periods + experiment.test_periods
    panel = MarketPanel.from_series(
        list(generate_synthetic_market(experiment.market_spec(), total, experiment.market_seed).values()))
    config = experiment.training_config()
    policy = build_cnn_policy(experiment.m, config.window_size, seed=experiment.seed,
                              conv_maps=experiment.conv_maps)
    trainer = Trainer(policy, panel, config)
    hi = experiment.train_periods - 1
    trainer.pretrain((0, hi))
    # batches ending at hi decide periods up to hi - 1; slot hi is never written by training
    sweep = trainer.memory_sweep(0, hi - 1)
    bt = BacktestConfig(first=experiment.train_periods, last=total - 1,
                        commission_rate=experiment.commission_rate,
                        online_learning=experiment.online_learning, seed=experiment.seed)
    report = run_backtest(policy, panel, bt, trainer=trainer, name="EIIE-CNN")
    ucrp = benchmark_ucrp(panel, bt)
    return ExperimentResult(experiment, panel, trainer, report, ucrp, sweep, time.perf_counter() - began)
