"""Portfolio-vector memory, online stochastic batch sampling and policy-gradient training."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from portfolio_rl import tensorgrad as tg
from portfolio_rl.accounting import CommissionSchedule, check_portfolio
from portfolio_rl.eiie import EIIEPolicy
from portfolio_rl.errors import ConfigError, DataError, NumericalError
from portfolio_rl.marketdata import MarketPanel
from portfolio_rl.tensorgrad import Tensor

logger = logging.getLogger(__name__)


@dataclass
class TrainingConfig:
    """Hyper-parameters; defaults are the values used for the published back-tests."""

    batch_size: int = 50
    window_size: int = 50
    number_of_assets: int = 12  # including cash
    trading_period: int = 1800
    total_steps: int = 2_000_000
    regularization_coefficient: float = 1e-8
    learning_rate: float = 3e-5
    sample_bias: float = 5e-5
    rolling_steps: int = 30
    commission_rate: float = 0.0025
    mu_iterations: int = 10
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        for name in ("batch_size", "window_size", "number_of_assets", "trading_period", "mu_iterations"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("total_steps", "rolling_steps", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0.0 < self.sample_bias < 1.0:
            raise ConfigError("sample_bias must lie in (0, 1)")
        if self.learning_rate < 0 or self.regularization_coefficient < 0:
            raise ConfigError("learning rate and L2 coefficient must be non-negative")

    @property
    def fees(self) -> CommissionSchedule:
        return CommissionSchedule.flat(self.commission_rate)


class PortfolioVectorMemory:
    """One portfolio vector per period index, initialised uniform."""

    def __init__(self, periods: int, size: int):
        if periods < 1 or size < 1:
            raise ConfigError("memory needs at least one slot of size >= 1")
        self.slots = np.full((periods, size), 1.0 / size)

    def __len__(self) -> int:
        return len(self.slots)

    def _check(self, idx) -> np.ndarray:
        idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
        if idx.size and (idx.min() < 0 or idx.max() >= len(self.slots)):
            raise IndexError(f"memory index outside 0..{len(self.slots) - 1}")
        return idx

    def read(self, t: int) -> np.ndarray:
        return self.slots[self._check(t)[0]].copy()

    def write(self, t: int, w) -> None:
        idx = self._check(t)[0]
        self.slots[idx] = check_portfolio(w, atol=1e-9)

    def read_many(self, idx) -> np.ndarray:
        return self.slots[self._check(idx)].copy()

    def write_many(self, idx, w) -> None:
        idx = self._check(idx)
        w = np.asarray(w, dtype=np.float64)
        if np.any(w < 0) or np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("memory rows must be valid portfolio vectors")
        self.slots[idx] = w


def sample_batch_start(t: int, n_b: int, beta: float, rng: np.random.Generator, lower: int = 1) -> int:
    """Draw a batch start t_b <= t - n_b with P(t_b) proportional to beta (1 - beta)^(t - t_b - n_b).

    Starts below ``lower`` are excluded; the geometric law is truncated to the
    feasible offsets by inverse-CDF sampling, which keeps the relative
    probabilities of feasible starts exactly as rejection would.
    """
    if not 0.0 < beta < 1.0:
        raise ConfigError("beta must lie in (0, 1)")
    max_offset = t - n_b - lower
    if max_offset < 0:
        raise DataError(f"no batch of {n_b} periods fits between {lower} and {t}")
    log_q = math.log1p(-beta)
    mass = -math.expm1((max_offset + 1) * log_q)  # P(k <= max_offset)
    u = rng.random()
    k = int(math.floor(math.log1p(-u * mass) / log_q))
    return t - n_b - min(max(k, 0), max_offset)


@dataclass
class MiniBatch:
    """Periods t_b .. t_b + n_b - 1, their histories, and the relatives around them.

    ``y_now[i]`` moves prices into period ``t_b + i``; ``y_next[i]`` is realised
    while holding the decision made at ``t_b + i``.
    """

    start: int
    length: int
    history: np.ndarray
    y_now: np.ndarray
    y_next: np.ndarray

    @property
    def indices(self) -> np.ndarray:
        return np.arange(self.start, self.start + self.length)


def make_batch(panel: MarketPanel, start: int, length: int, window: int, t: int) -> MiniBatch:
    if start + length > t:
        raise DataError(f"batch {start}..{start + length} would read past the current period {t}")
    if start < max(1, window - 1):
        raise DataError(f"batch start {start} leaves no room for a {window}-period lookback")
    idx = np.arange(start, start + length)
    return MiniBatch(start, length, panel.price_tensors(idx, window), panel.relatives(idx),
                     panel.relatives(idx + 1))


def remainder_factor_graph(w: Tensor, w_evolved: np.ndarray, fees: CommissionSchedule, k: int) -> Tensor:
    """Unrolled fixed-point iterations for a batch of rebalances, differentiable in ``w``."""
    w_nc = w[:, 1:]
    wp_nc = w_evolved[:, 1:]
    c = 0.5 * (fees.c_s + fees.c_p)
    # the start value c * sum|dw| stays below 2c < 1, so no clamp is needed
    mu = tg.tsum(tg.absolute(w_nc - wp_nc), axis=1) * c
    numer_const = 1.0 - fees.c_p * w_evolved[:, 0]
    denom = 1.0 - fees.c_p * w[:, 0]
    for _ in range(k):
        selling = tg.tsum(tg.relu(wp_nc - mu.reshape(-1, 1) * w_nc), axis=1)
        mu = (numer_const - selling * fees.combined) / denom
    return mu


def batch_reward(policy: EIIEPolicy, batch: MiniBatch, memory: PortfolioVectorMemory,
                 fees: CommissionSchedule, fixed_k: int, write: bool = True):
    """Mean log return of the batch, with per-period returns and the actions taken.

    Each period reads the previous action from memory, acts, pays the
    remainder factor of moving from the drifted weights, and earns the next
    relative vector.  Actions are written back to memory when ``write``.
    """
    idx = batch.indices
    w_prev = memory.read_many(idx - 1)
    w = policy.forward(batch.history, w_prev)
    grown = batch.y_now * w_prev
    w_evolved = grown / grown.sum(axis=1, keepdims=True)
    mu = remainder_factor_graph(w, w_evolved, fees, fixed_k)
    r = tg.log(mu * tg.tsum(w * batch.y_next, axis=1))
    R = tg.mean(r)
    if write:
        memory.write_many(idx, w.data)
    return R, r.data.copy(), w.data.copy()


def train_step(policy: EIIEPolicy, batch: MiniBatch, memory: PortfolioVectorMemory, optimizer: tg.Adam,
               config: TrainingConfig) -> dict[str, float]:
    """One Adam ascent step on R - L2; memory keeps the pre-step actions."""
    R, _, _ = batch_reward(policy, batch, memory, config.fees, config.mu_iterations)
    l2 = tg.l2_penalty(policy.weights(), config.regularization_coefficient)
    objective = R - l2
    value = float(objective.data)
    if not math.isfinite(value):
        raise NumericalError(f"non-finite objective {value} at batch start {batch.start} "
                             f"(R={float(R.data)}, l2={float(l2.data)})")
    grads = tg.backward(objective, policy.params)
    optimizer.lr = config.learning_rate
    optimizer.step(policy.params, grads)
    return {"R": float(R.data), "l2": float(l2.data), "objective": value}


def objective_value(policy: EIIEPolicy, batch: MiniBatch, memory: PortfolioVectorMemory,
                    config: TrainingConfig) -> float:
    R, _, _ = batch_reward(policy, batch, memory, config.fees, config.mu_iterations, write=False)
    return float(R.data) - float(tg.l2_penalty(policy.weights(), config.regularization_coefficient).data)


class Trainer:
    """Owns everything one training run mutates: parameters, memory, optimizer and RNG."""

    def __init__(self, policy: EIIEPolicy, panel: MarketPanel, config: TrainingConfig):
        if panel.m != policy.m:
            raise ConfigError(f"panel has {panel.m} assets but the policy expects {policy.m}")
        if config.window_size != policy.n:
            raise ConfigError(f"window_size {config.window_size} differs from the policy lookback {policy.n}")
        self.policy = policy
        self.panel = panel
        self.config = config
        self.memory = PortfolioVectorMemory(panel.periods, panel.m + 1)
        self.optimizer = tg.Adam(lr=config.learning_rate, ascend=True)
        self.rng = np.random.default_rng(config.seed)
        self.step = 0
        self.curve: list[dict[str, float]] = []

    @property
    def lower(self) -> int:
        return max(1, self.config.window_size - 1)

    def train_on(self, start: int, t: int) -> dict[str, float]:
        batch = make_batch(self.panel, start, self.config.batch_size, self.config.window_size, t)
        stats = train_step(self.policy, batch, self.memory, self.optimizer, self.config)
        self.step += 1
        return stats

    def pretrain(self, training_range: tuple[int, int],
                 on_checkpoint: Callable[["Trainer"], None] | None = None) -> list[dict[str, float]]:
        """Run until ``config.total_steps`` steps have been taken over periods lo..hi."""
        lo, hi = training_range
        if lo < 0 or hi >= self.panel.periods or hi <= lo:
            raise DataError(f"training range {lo}..{hi} not covered by {self.panel.periods} periods")
        lower = max(self.lower, lo + self.config.window_size - 1)
        if hi - self.config.batch_size < lower:
            raise DataError("training range too short for one batch plus lookback")
        cfg = self.config
        while self.step < cfg.total_steps:
            start = sample_batch_start(hi, cfg.batch_size, cfg.sample_bias, self.rng, lower)
            stats = self.train_on(start, hi)
            self.curve.append({"step": self.step, **stats})
            if cfg.checkpoint_every and self.step % cfg.checkpoint_every == 0 and on_checkpoint:
                on_checkpoint(self)
        return self.curve

    def online_update(self, t: int) -> None:
        """``rolling_steps`` steps on OSBL batches that end no later than ``t``."""
        cfg = self.config
        for _ in range(cfg.rolling_steps):
            start = sample_batch_start(t, cfg.batch_size, cfg.sample_bias, self.rng, self.lower)
            self.train_on(start, t)

    def memory_sweep(self, lo: int, hi: int, write: bool = False) -> float:
        """Recompute actions for periods lo..hi from current memory; return the max-norm change."""
        idx = np.arange(max(lo, self.lower), hi + 1)
        w_prev = self.memory.read_many(idx - 1)
        w = self.policy.forward(self.panel.price_tensors(idx, self.config.window_size), w_prev).data
        change = float(np.abs(w - self.memory.read_many(idx)).max())
        if write:
            self.memory.write_many(idx, w)
        return change

    # persistence -----------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {f"param.{k}": v for k, v in self.policy.arrays().items()}
        arrays.update(self.optimizer.state_arrays())
        arrays["pvm"] = self.memory.slots.copy()
        arrays["train.step"] = np.array([float(self.step)])
        return arrays

    def save(self, path: str | Path) -> None:
        path = Path(path)
        tg.save_checkpoint(path, self.state_arrays())
        rng_state = self.rng.bit_generator.state
        path.with_suffix(path.suffix + ".rng.json").write_text(json.dumps(_jsonable(rng_state), sort_keys=True))

    def load(self, path: str | Path) -> None:
        path = Path(path)
        arrays = tg.load_checkpoint(path)
        self.policy.load_arrays({k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")})
        self.optimizer.load_state_arrays(arrays)
        self.memory.slots = arrays["pvm"].copy()
        self.step = int(arrays["train.step"][0])
        rng_path = path.with_suffix(path.suffix + ".rng.json")
        if rng_path.exists():
            self.rng.bit_generator.state = _from_jsonable(json.loads(rng_path.read_text()))


def _jsonable(state):
    if isinstance(state, dict):
        return {k: _jsonable(v) for k, v in state.items()}
    if isinstance(state, int) and not isinstance(state, bool):
        return {"__int__": str(state)}
    return state


def _from_jsonable(state):
    if isinstance(state, dict):
        if set(state) == {"__int__"}:
            return int(state["__int__"])
        return {k: _from_jsonable(v) for k, v in state.items()}
    return state


def write_curve_csv(path: str | Path, curve: list[dict[str, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "R", "l2", "objective"])
        for row in curve:
            writer.writerow([int(row["step"]), repr(row["R"]), repr(row["l2"]), repr(row["objective"])])


def config_dict(config: TrainingConfig) -> dict:
    return asdict(config)
