"""Portfolio arithmetic: weight drift, the transaction remainder factor, returns and risk metrics.

Weights are plain 1-d numpy arrays with the cash (quote currency) at index 0.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from portfolio_rl.errors import ConfigError, ConvergenceError, DomainError, UndefinedMetricError

WEIGHT_SUM_TOL = 1e-12
DEFAULT_TOLERANCE = 1e-10
DEFAULT_FIXED_ITERATIONS = 10
DEFAULT_MAX_ITER = 10_000
# f(0) > 0 is only guaranteed below this commission rate
MAX_COMMISSION = 0.38


def check_portfolio(w, atol: float = WEIGHT_SUM_TOL) -> np.ndarray:
    """Return ``w`` as a float array after checking non-negativity and unit sum."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.size < 1:
        raise DomainError(f"portfolio vector must be 1-d and non-empty, got shape {w.shape}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise DomainError("portfolio weights must be finite and non-negative")
    if abs(w.sum() - 1.0) > atol:
        raise DomainError(f"portfolio weights sum to {w.sum()!r}, not 1")
    return w


def cash_vector(size: int) -> np.ndarray:
    w = np.zeros(size)
    w[0] = 1.0
    return w


def uniform_vector(size: int) -> np.ndarray:
    return np.full(size, 1.0 / size)


@dataclass(frozen=True)
class CommissionSchedule:
    c_s: float = 0.0025
    c_p: float = 0.0025

    def __post_init__(self):
        for name in ("c_s", "c_p"):
            c = getattr(self, name)
            if not (0.0 <= c < MAX_COMMISSION):
                raise ConfigError(f"commission {name}={c} outside [0, {MAX_COMMISSION})")

    @classmethod
    def flat(cls, c: float) -> "CommissionSchedule":
        return cls(c_s=c, c_p=c)

    @property
    def combined(self) -> float:
        return self.c_s + self.c_p - self.c_s * self.c_p

    @property
    def is_free(self) -> bool:
        return self.c_s == 0.0 and self.c_p == 0.0


def evolve_weights(w_prev, y) -> np.ndarray:
    """Weights at the end of a period after prices moved by the relative vector ``y``."""
    w_prev = np.asarray(w_prev, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise DomainError("price relatives must be positive")
    grown = y * w_prev
    total = grown.sum()
    if not total > 0:
        raise DomainError("y . w_prev must be positive")
    return grown / total


def remainder_map(mu: float, w_target, w_evolved, fees: CommissionSchedule) -> float:
    """One application of the fixed-point map whose root is the remainder factor."""
    w = np.asarray(w_target, dtype=np.float64)
    wp = np.asarray(w_evolved, dtype=np.float64)
    selling = np.maximum(wp[1:] - mu * w[1:], 0.0).sum()
    return (1.0 - fees.c_p * wp[0] - fees.combined * selling) / (1.0 - fees.c_p * w[0])


def initial_guess(w_target, w_evolved, c: float) -> float:
    """Starting value c * sum_i |w'_i - w_i| over the non-cash assets, clamped to [0, 1]."""
    w = np.asarray(w_target, dtype=np.float64)
    wp = np.asarray(w_evolved, dtype=np.float64)
    return float(min(1.0, max(0.0, c * np.abs(wp[1:] - w[1:]).sum())))


def mu_iterates(w_target, w_evolved, fees: CommissionSchedule, start: float) -> Iterator[float]:
    """Infinite sequence start, f(start), f(f(start)), ..."""
    mu = float(start)
    while True:
        yield mu
        mu = remainder_map(mu, w_target, w_evolved, fees)


def solve_mu(w_target, w_evolved, fees: CommissionSchedule, *, k: int | None = None,
             tol: float | None = None, start: float | None = None,
             max_iter: int = DEFAULT_MAX_ITER) -> tuple[float, int]:
    """Iterate the remainder map to the transaction remainder factor.

    Exactly one of ``k`` (fixed number of iterations) or ``tol`` (stop at the
    first step smaller than ``tol``) must be given.  Returns ``(mu, iterations)``.
    ``start`` overrides the default initial guess.
    """
    if (k is None) == (tol is None):
        raise ConfigError("give exactly one of k (fixed iterations) or tol (tolerance)")
    if k is not None and k < 1:
        raise ConfigError("fixed iteration count must be >= 1")
    if tol is not None and not tol > 0:
        raise ConfigError("tolerance must be positive")
    w = np.asarray(w_target, dtype=np.float64)
    wp = np.asarray(w_evolved, dtype=np.float64)
    if start is None:
        # zero turnover: nothing is traded, nothing is paid
        if np.array_equal(w, wp):
            return 1.0, (k if k is not None else 0)
        start = initial_guess(w, wp, 0.5 * (fees.c_s + fees.c_p))
    mu = float(start)
    if k is not None:
        for _ in range(k):
            mu = remainder_map(mu, w, wp, fees)
        return mu, k
    for j in range(1, max_iter + 1):
        nxt = remainder_map(mu, w, wp, fees)
        if abs(nxt - mu) < tol:
            return nxt, j
        mu = nxt
    raise ConvergenceError(f"remainder factor did not converge within {max_iter} iterations")


def period_log_return(y, w_prev, mu: float) -> float:
    """ln(mu * y . w_prev)."""
    growth = mu * float(np.dot(y, w_prev))
    if not growth > 0:
        raise DomainError(f"log-return argument {growth!r} is not positive")
    return math.log(growth)


def rate_of_return(y, w_prev, mu: float) -> float:
    return mu * float(np.dot(y, w_prev)) - 1.0


@dataclass(frozen=True)
class PeriodLedgerEntry:
    """One trading period.

    ``w_evolved`` is the drifted portfolio before trading, ``w_target`` the
    weights after trading, ``mu`` the value surviving the trade, and ``y`` the
    price relatives realised while ``w_target`` is held.
    """

    t: int
    y: np.ndarray
    w_evolved: np.ndarray
    w_target: np.ndarray
    mu: float
    log_return: float

    @property
    def rho(self) -> float:
        return math.expm1(self.log_return)

    @property
    def turnover(self) -> float:
        return float(np.abs(self.w_target - self.w_evolved).sum())


def make_entry(t: int, y, w_evolved, w_target, mu: float) -> PeriodLedgerEntry:
    y = np.asarray(y, dtype=np.float64)
    w_target = np.asarray(w_target, dtype=np.float64)
    return PeriodLedgerEntry(t=t, y=y, w_evolved=np.asarray(w_evolved, dtype=np.float64),
                             w_target=w_target, mu=float(mu),
                             log_return=period_log_return(y, w_target, mu))


def portfolio_value_path(p0: float, ledger: Sequence[PeriodLedgerEntry] | Sequence[float]) -> np.ndarray:
    """p0 * exp(cumulative log return); accepts ledger entries or raw log returns."""
    if not p0 > 0:
        raise DomainError("initial value must be positive")
    logs = np.array([e.log_return if isinstance(e, PeriodLedgerEntry) else float(e) for e in ledger])
    return p0 * np.exp(np.concatenate([[0.0], np.cumsum(logs)]))


def sharpe_ratio(returns: Sequence[float]) -> float:
    """Mean over population standard deviation, risk-free rate zero."""
    r = np.asarray(returns, dtype=np.float64)
    if r.size < 2:
        raise UndefinedMetricError("Sharpe ratio needs at least two returns")
    sd = r.std()
    if sd == 0.0 or np.all(r == r[0]):
        raise UndefinedMetricError("Sharpe ratio undefined for zero-variance returns")
    return float(r.mean() / sd)


def max_drawdown(path: Sequence[float]) -> float:
    path = np.asarray(path, dtype=np.float64)
    if path.size < 1 or np.any(path <= 0):
        raise DomainError("value path must be non-empty and positive")
    peak = path[0]
    worst = 0.0
    for p in path[1:]:
        if p > peak:
            peak = p
        else:
            worst = max(worst, (peak - p) / peak)
    return float(worst)


def fapv(path: Sequence[float]) -> float:
    path = np.asarray(path, dtype=np.float64)
    if path.size < 1 or not path[0] > 0:
        raise DomainError("value path must be non-empty with a positive first value")
    return float(path[-1] / path[0])


def write_ledger_csv(path: str | Path, ledger: Sequence[PeriodLedgerEntry], assets: Sequence[str],
                     p0: float = 1.0) -> None:
    values = portfolio_value_path(p0, ledger)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "mu", "log_return", "rho", "portfolio_value"] + [f"w_{a}" for a in assets])
        for entry, value in zip(ledger, values[1:]):
            writer.writerow([entry.t, repr(entry.mu), repr(entry.log_return), repr(entry.rho), repr(float(value))]
                            + [repr(float(x)) for x in entry.w_target])
