"""Run configuration: a flat ``key = value`` file whose keys mirror the hyper-parameter table."""
from __future__ import annotations

import os
from dataclasses import dataclass, fields
from datetime import datetime, timezone
from pathlib import Path

from portfolio_rl.errors import ConfigError
from portfolio_rl.training import TrainingConfig

CACHE_ENV = "PORTFOLIO_RL_CACHE"


def parse_time(value: str | int) -> int:
    """Epoch seconds or a UTC date such as ``2016-09-07 04:00``."""
    if isinstance(value, int):
        return value
    text = str(value).strip()
    if text.lstrip("-").isdigit():
        return int(text)
    for fmt in ("%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M", "%Y-%m-%d"):
        try:
            return int(datetime.strptime(text, fmt).replace(tzinfo=timezone.utc).timestamp())
        except ValueError:
            pass
    raise ConfigError(f"cannot parse time {value!r}")


@dataclass
class RunConfig:
    # hyper-parameter table
    batch_size: int = 50
    window_size: int = 50
    number_of_assets: int = 12
    trading_period: int = 1800
    total_steps: int = 2_000_000
    regularization_coefficient: float = 1e-8
    learning_rate: float = 3e-5
    volume_observation: int = 30
    commission_rate: float = 0.0025
    rolling_steps: int = 30
    sample_bias: float = 5e-5
    # solver
    mu_iterations: int = 10
    tolerance: float = 1e-10
    # topology
    policy: str = "cnn"
    conv_maps: str = "8,40"
    kernel_width: int = 3
    hidden: int = 20
    # data
    data_source: str = "synthetic"  # synthetic | csv | http
    csv_path: str = ""
    endpoint: str = "https://poloniex.com/public"
    query_template: str = "?command=returnChartData&currencyPair={pair}&start={start}&end={end}&period={period}"
    pairs: str = ""
    cash: str = "BTC"
    synthetic_assets: str = "A:0.002:0.01,B:0:0.01,C:0:0.01,D:0:0.01,E:0:0.01,F:0:0.01,G:0:0.01,H:0:0.01,I:0:0.01,J:0:0.01,K:0:0.01"
    synthetic_seed: int = 1
    cache_dir: str = ""
    # ranges, half-open [start, end)
    train_start: str = "0"
    train_end: str = "5400000"
    test_start: str = "5400000"
    test_end: str = "6300000"
    # run
    seed: int = 0
    online_learning: bool = True
    charge_entry: bool = True
    checkpoint_every: int = 0
    output_dir: str = "runs/default"

    # parsing ------------------------------------------------------------------
    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def set(self, key: str, raw: str) -> None:
        key = key.strip()
        known = {f.name: f for f in fields(self)}
        if key not in known:
            raise ConfigError(f"unknown configuration key {key!r}")
        kind = known[key].type
        raw = raw.strip()
        try:
            if kind in ("int", int):
                value = int(float(raw)) if "e" in raw.lower() else int(raw)
            elif kind in ("float", float):
                value = float(raw)
            elif kind in ("bool", bool):
                if raw.lower() not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                    raise ValueError(raw)
                value = raw.lower() in ("true", "1", "yes", "on")
            else:
                value = raw
        except ValueError:
            raise ConfigError(f"bad value for {key}: {raw!r}") from None
        setattr(self, key, value)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            cfg.set(key, value)
        return cfg

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        try:
            return cls.from_text(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None

    def apply_overrides(self, overrides: list[str]) -> "RunConfig":
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} must look like key=value")
            self.set(*item.split("=", 1))
        return self

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_render(getattr(self, f.name))}\n" for f in fields(self))

    # derived ----------------------------------------------------------------------
    @property
    def ranges(self) -> tuple[int, int, int, int]:
        return (parse_time(self.train_start), parse_time(self.train_end),
                parse_time(self.test_start), parse_time(self.test_end))

    @property
    def conv_map_counts(self) -> tuple[int, int]:
        try:
            a, b = (int(x) for x in self.conv_maps.split(","))
        except ValueError:
            raise ConfigError(f"conv_maps must be two integers, got {self.conv_maps!r}") from None
        return a, b

    @property
    def synthetic_spec(self) -> dict[str, tuple[float, float]]:
        spec = {}
        for item in filter(None, (s.strip() for s in self.synthetic_assets.split(","))):
            try:
                name, drift, vol = item.split(":")
                spec[name] = (float(drift), float(vol))
            except ValueError:
                raise ConfigError(f"synthetic asset {item!r} must be name:drift:volatility") from None
        return spec

    @property
    def pair_list(self) -> list[str]:
        return [p.strip() for p in self.pairs.split(",") if p.strip()]

    @property
    def cache_path(self) -> Path:
        return Path(self.cache_dir or os.environ.get(CACHE_ENV) or Path(self.output_dir) / "cache")

    def training_config(self) -> TrainingConfig:
        return TrainingConfig(
            batch_size=self.batch_size, window_size=self.window_size, number_of_assets=self.number_of_assets,
            trading_period=self.trading_period, total_steps=self.total_steps,
            regularization_coefficient=self.regularization_coefficient, learning_rate=self.learning_rate,
            sample_bias=self.sample_bias, rolling_steps=self.rolling_steps, commission_rate=self.commission_rate,
            mu_iterations=self.mu_iterations, seed=self.seed, checkpoint_every=self.checkpoint_every)

    def validate(self) -> None:
        """Reject anything that would fail a module precondition, before side effects."""
        self.training_config()
        if self.data_source not in ("synthetic", "csv", "http"):
            raise ConfigError(f"data_source must be synthetic, csv or http, got {self.data_source!r}")
        if self.policy not in ("cnn", "rnn", "lstm"):
            raise ConfigError(f"policy must be cnn, rnn or lstm, got {self.policy!r}")
        self.conv_map_counts
        if not 0 <= self.commission_rate < 0.38:
            raise ConfigError("commission_rate must lie in [0, 0.38)")
        if not self.tolerance > 0:
            raise ConfigError("tolerance must be positive")
        train_start, train_end, test_start, test_end = self.ranges
        if not train_start < train_end:
            raise ConfigError("train_start must precede train_end")
        if not test_start < test_end:
            raise ConfigError("test_start must precede test_end")
        if test_start < train_end:
            raise ConfigError("test range overlaps the training range")
        for name, ts in zip(("train_start", "train_end", "test_start", "test_end"), self.ranges):
            if (ts - train_start) % self.trading_period:
                raise ConfigError(f"{name} is not aligned to the {self.trading_period}s grid")
        if (train_end - train_start) // self.trading_period < self.window_size + self.batch_size + 1:
            raise ConfigError("training range is shorter than one batch plus the lookback window")
        if self.data_source == "synthetic":
            spec = self.synthetic_spec
            if len(spec) < self.number_of_assets - 1:
                raise ConfigError(f"synthetic market has {len(spec)} assets, "
                                  f"need number_of_assets - 1 = {self.number_of_assets - 1}")
        elif self.data_source == "csv" and not self.csv_path:
            raise ConfigError("csv data source needs csv_path")
        elif self.data_source == "http" and len(self.pair_list) < self.number_of_assets - 1:
            raise ConfigError("http data source needs at least number_of_assets - 1 pairs")


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)
