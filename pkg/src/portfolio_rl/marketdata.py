"""Market history: candles on a fixed grid, chart-data fetching, preselection, gap filling and price tensors."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
import requests
from numpy.lib.stride_tricks import sliding_window_view

from portfolio_rl.errors import ConfigError, DataError, DomainError, FetchError, ParseError

logger = logging.getLogger(__name__)

CSV_HEADER = ["timestamp", "asset", "open", "high", "low", "close", "volume"]
FEATURES = ("close", "high", "low")
DEFAULT_QUERY = "?command=returnChartData&currencyPair={pair}&start={start}&end={end}&period={period}"
SUPPORTED_PERIODS = (300, 900, 1800, 7200, 14400, 86400)


@dataclass(frozen=True)
class Candle:
    timestamp: int
    open: float
    high: float
    low: float
    close: float
    volume: float
    missing: bool = False


def _frozen(a, dtype=np.float64) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class CandleSeries:
    """One asset's candles on the grid ``start + j * period_seconds``.

    Missing slots carry NaN prices, zero volume and ``missing[j] = True``.
    """

    asset: str
    period_seconds: int
    start: int
    open: np.ndarray
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    volume: np.ndarray
    missing: np.ndarray

    def __post_init__(self):
        n = len(self.close)
        for name in ("open", "high", "low", "close", "volume"):
            arr = getattr(self, name)
            if len(arr) != n:
                raise DataError(f"{self.asset}: column {name} has {len(arr)} rows, expected {n}")
            object.__setattr__(self, name, _frozen(arr))
        object.__setattr__(self, "missing", _frozen(self.missing, dtype=bool))
        if len(self.missing) != n:
            raise DataError(f"{self.asset}: missing-mask length mismatch")
        if self.period_seconds <= 0:
            raise DataError("period_seconds must be positive")
        present = ~self.missing
        if np.any(self.close[present] <= 0) or np.any(self.low[present] <= 0):
            raise DataError(f"{self.asset}: non-positive price in a present candle")
        if np.any(self.volume < 0):
            raise DataError(f"{self.asset}: negative volume")

    def __len__(self) -> int:
        return len(self.close)

    def __eq__(self, other) -> bool:
        if not isinstance(other, CandleSeries):
            return NotImplemented
        return (self.asset == other.asset and self.period_seconds == other.period_seconds
                and self.start == other.start
                and all(np.array_equal(getattr(self, c), getattr(other, c), equal_nan=True)
                        for c in ("open", "high", "low", "close", "volume"))
                and np.array_equal(self.missing, other.missing))

    @property
    def timestamps(self) -> np.ndarray:
        return self.start + self.period_seconds * np.arange(len(self), dtype=np.int64)

    @property
    def end(self) -> int:
        """Exclusive end of the grid."""
        return self.start + self.period_seconds * len(self)

    def index_of(self, timestamp: int) -> int:
        offset = timestamp - self.start
        if offset % self.period_seconds:
            raise DataError(f"{self.asset}: timestamp {timestamp} is not on the {self.period_seconds}s grid")
        return offset // self.period_seconds

    def candles(self) -> Iterator[Candle]:
        for j, ts in enumerate(self.timestamps):
            yield Candle(int(ts), float(self.open[j]), float(self.high[j]), float(self.low[j]),
                         float(self.close[j]), float(self.volume[j]), bool(self.missing[j]))

    @classmethod
    def from_candles(cls, asset: str, period_seconds: int, start: int, end: int,
                     candles: Iterable[Candle]) -> "CandleSeries":
        """Place candles on the grid [start, end); absent slots are flagged missing."""
        slots = max(0, -(-(end - start) // period_seconds))
        cols = {c: np.full(slots, np.nan) for c in ("open", "high", "low", "close")}
        volume = np.zeros(slots)
        missing = np.ones(slots, dtype=bool)
        for c in candles:
            offset = c.timestamp - start
            if offset % period_seconds:
                raise ParseError(f"{asset}: candle at {c.timestamp} is off the {period_seconds}s grid", "timestamp")
            j = offset // period_seconds
            if not 0 <= j < slots or c.missing:
                continue
            cols["open"][j], cols["high"][j], cols["low"][j], cols["close"][j] = c.open, c.high, c.low, c.close
            volume[j] = c.volume
            missing[j] = False
        return cls(asset, period_seconds, start, cols["open"], cols["high"], cols["low"], cols["close"],
                   volume, missing)

    def window(self, start: int, end: int) -> "CandleSeries":
        lo = max(0, self.index_of(start))
        hi = min(len(self), max(lo, -(-(end - self.start) // self.period_seconds)))
        return CandleSeries(self.asset, self.period_seconds, self.start + lo * self.period_seconds,
                            self.open[lo:hi], self.high[lo:hi], self.low[lo:hi], self.close[lo:hi],
                            self.volume[lo:hi], self.missing[lo:hi])


# CSV -------------------------------------------------------------------------
def write_candles_csv(path: str | Path, series: Iterable[CandleSeries]) -> None:
    """Write present candles; missing slots are simply absent from the file."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for s in series:
            for c in s.candles():
                if not c.missing:
                    writer.writerow([c.timestamp, s.asset, repr(c.open), repr(c.high), repr(c.low),
                                     repr(c.close), repr(c.volume)])


def read_candles_csv(path: str | Path) -> dict[str, list[Candle]]:
    out: dict[str, list[Candle]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ParseError(f"{path}: unexpected header {reader.fieldnames}", "header")
        for row in reader:
            try:
                c = Candle(int(row["timestamp"]), float(row["open"]), float(row["high"]),
                           float(row["low"]), float(row["close"]), float(row["volume"]))
            except (TypeError, ValueError) as exc:
                bad = next((k for k in CSV_HEADER[2:] if not _is_float(row.get(k))), "timestamp")
                raise ParseError(f"{path}: bad candle row {row}", bad) from exc
            out.setdefault(row["asset"], []).append(c)
    return out


def _is_float(x) -> bool:
    try:
        float(x)
        return True
    except (TypeError, ValueError):
        return False


def load_csv_series(path: str | Path, period_seconds: int, start: int, end: int) -> dict[str, CandleSeries]:
    return {asset: CandleSeries.from_candles(asset, period_seconds, start, end, rows)
            for asset, rows in sorted(read_candles_csv(path).items())}


# HTTP ------------------------------------------------------------------------
def _parse_chart_payload(payload, asset: str) -> list[Candle]:
    if not isinstance(payload, list):
        raise ParseError(f"{asset}: expected a JSON array of candles", "<root>")
    out = []
    for item in payload:
        if not isinstance(item, dict):
            raise ParseError(f"{asset}: candle entry is not an object", "<entry>")
        values = {}
        for key in ("date", "open", "high", "low", "close", "volume"):
            if key not in item:
                raise ParseError(f"{asset}: candle missing field", key)
            try:
                values[key] = float(item[key])
            except (TypeError, ValueError):
                raise ParseError(f"{asset}: non-numeric value {item[key]!r}", key) from None
        # Poloniex answers an empty range with a single all-zero record
        if values["date"] == 0 and values["close"] == 0:
            continue
        if values["close"] <= 0:
            raise ParseError(f"{asset}: non-positive close", "close")
        out.append(Candle(int(values["date"]), values["open"], values["high"], values["low"],
                          values["close"], values["volume"]))
    return out


@dataclass
class ChartClient:
    """Client for a Poloniex-style ``returnChartData`` endpoint with an on-disk cache.

    The cache keeps one candle CSV per (pair, period) plus a JSON list of the
    ranges already fetched, so back-tests can be replayed offline.
    """

    base_url: str
    query_template: str = DEFAULT_QUERY
    cache_dir: Path | None = None
    attempts: int = 3
    backoff_seconds: float = 0.5
    timeout: float = 30.0
    session: requests.Session = field(default_factory=requests.Session)

    def _cache_paths(self, pair: str, period: int) -> tuple[Path, Path]:
        assert self.cache_dir is not None
        return self.cache_dir / f"{pair}-{period}.csv", self.cache_dir / f"{pair}-{period}.ranges.json"

    def _cached(self, pair: str, period: int, start: int, end: int) -> list[Candle] | None:
        if self.cache_dir is None:
            return None
        data_path, ranges_path = self._cache_paths(pair, period)
        if not ranges_path.exists():
            return None
        ranges = json.loads(ranges_path.read_text())
        if not any(lo <= start and end <= hi for lo, hi in ranges):
            return None
        rows = read_candles_csv(data_path).get(pair, []) if data_path.exists() else []
        return [c for c in rows if start <= c.timestamp < end]

    def _store(self, pair: str, period: int, start: int, end: int, candles: list[Candle]) -> None:
        if self.cache_dir is None:
            return
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        data_path, ranges_path = self._cache_paths(pair, period)
        merged = {c.timestamp: c for c in (read_candles_csv(data_path).get(pair, []) if data_path.exists() else [])}
        merged.update({c.timestamp: c for c in candles})
        with open(data_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_HEADER)
            for ts in sorted(merged):
                c = merged[ts]
                writer.writerow([c.timestamp, pair, repr(c.open), repr(c.high), repr(c.low), repr(c.close),
                                 repr(c.volume)])
        ranges = json.loads(ranges_path.read_text()) if ranges_path.exists() else []
        ranges.append([start, end])
        ranges_path.write_text(json.dumps(sorted(ranges)))

    def _get(self, url: str):
        last: Exception | None = None
        for attempt in range(1, self.attempts + 1):
            try:
                resp = self.session.get(url, timeout=self.timeout)
                if resp.status_code >= 500:
                    raise requests.HTTPError(f"server error {resp.status_code}")
                resp.raise_for_status()
                try:
                    return resp.json()
                except ValueError:
                    raise ParseError(f"response from {url} is not JSON", "<body>") from None
            except requests.RequestException as exc:
                last = exc
                logger.warning("fetch attempt %d/%d failed: %s", attempt, self.attempts, exc)
                if attempt < self.attempts:
                    time.sleep(self.backoff_seconds * attempt)
        raise FetchError(f"could not fetch {url}: {last}", self.attempts)

    def fetch_candles(self, pair: str, period_seconds: int, start: int, end: int) -> CandleSeries:
        if period_seconds not in SUPPORTED_PERIODS:
            raise ConfigError(f"period {period_seconds}s not in supported grid {SUPPORTED_PERIODS}")
        if start > end:
            raise ConfigError("fetch range start must precede end")
        if start == end:
            return CandleSeries.from_candles(pair, period_seconds, start, end, [])
        candles = self._cached(pair, period_seconds, start, end)
        if candles is None:
            url = self.base_url + self.query_template.format(pair=pair, start=start, end=end, period=period_seconds)
            candles = [c for c in _parse_chart_payload(self._get(url), pair) if start <= c.timestamp < end]
            self._store(pair, period_seconds, start, end, candles)
        return CandleSeries.from_candles(pair, period_seconds, start, end, candles)


def fetch_candles(endpoint: str, asset_pair: str, period_seconds: int, time_range: tuple[int, int],
                  cache_dir: str | Path | None = None, attempts: int = 3) -> CandleSeries:
    client = ChartClient(endpoint, cache_dir=Path(cache_dir) if cache_dir else None, attempts=attempts)
    return client.fetch_candles(asset_pair, period_seconds, *time_range)


# cleaning and selection ------------------------------------------------------
def preselect_assets(all_series: Mapping[str, CandleSeries], observation_days: int, m: int, as_of: int,
                     cash: str = "BTC", test_start: int | None = None) -> list[str]:
    """Top-``m`` assets by quote volume summed over [as_of - observation_days, as_of).

    Ranking must use only history before the back-test starts, otherwise future
    popularity leaks into the experiment.
    """
    if test_start is not None and as_of > test_start:
        raise ConfigError(f"preselection time {as_of} is after the back-test start {test_start}")
    lo = as_of - observation_days * 86400
    totals = []
    for asset, s in all_series.items():
        if asset == cash:
            continue
        ts = s.timestamps
        mask = (ts >= lo) & (ts < as_of) & ~s.missing
        totals.append((asset, float(s.volume[mask].sum())))
    ranked = sorted((t for t in totals if t[1] > 0), key=lambda t: (-t[1], t[0]))
    if len(ranked) < m:
        raise ConfigError(f"only {len(ranked)} assets traded in the observation window, need {m}")
    return [a for a, _ in ranked[:m]]


def fill_missing(series: CandleSeries) -> CandleSeries:
    """Replace missing slots with flat candles (zero volume).

    Slots before the first real candle take its close; later gaps carry the
    previous close forward.
    """
    present = np.flatnonzero(~series.missing)
    if present.size == 0:
        raise DataError(f"{series.asset}: every slot is missing, nothing to fill from")
    if present.size == len(series):
        return series
    idx = np.maximum.accumulate(np.where(series.missing, -1, np.arange(len(series))))
    idx[idx < 0] = present[0]
    cols = {}
    for name in ("open", "high", "low", "close"):
        col = np.asarray(getattr(series, name)).copy()
        col[series.missing] = series.close[idx][series.missing]
        cols[name] = col
    volume = np.where(series.missing, 0.0, series.volume)
    return CandleSeries(series.asset, series.period_seconds, series.start, cols["open"], cols["high"],
                        cols["low"], cols["close"], volume, np.zeros(len(series), dtype=bool))


def price_relative(v_prev, v_now) -> np.ndarray:
    """Element-wise v_now / v_prev with the cash entry pinned to 1."""
    v_prev = np.asarray(v_prev, dtype=np.float64)
    v_now = np.asarray(v_now, dtype=np.float64)
    if np.any(v_prev <= 0) or np.any(v_now <= 0):
        raise DomainError("prices must be positive")
    if v_prev[0] != 1.0 or v_now[0] != 1.0:
        raise DomainError("the cash price must be 1")
    y = v_now / v_prev
    y[0] = 1.0
    return y


@dataclass(frozen=True)
class PriceTensor:
    """Normalised history (features, assets, lookback); features are (close, high, low)."""

    values: np.ndarray
    as_of: int
    assets: tuple[str, ...]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape


def build_price_tensor(series_set: Sequence[CandleSeries], t: int, n: int) -> PriceTensor:
    if n < 1:
        raise ConfigError("lookback n must be >= 1")
    rows = []
    for s in series_set:
        if s.missing.any():
            raise DataError(f"{s.asset}: fill missing data before building price tensors")
        j = s.index_of(t)
        if j >= len(s):
            raise DataError(f"{s.asset}: no candle at {t}; data ends before {s.end}")
        if j - n + 1 < 0:
            raise DataError(f"{s.asset}: lookback {n} before {t} reaches past the earliest covered "
                            f"timestamp {s.start}")
        sl = slice(j - n + 1, j + 1)
        latest = s.close[j]
        rows.append(np.stack([s.close[sl], s.high[sl], s.low[sl]]) / latest)
    values = np.stack(rows, axis=1)
    values[0, :, -1] = 1.0
    return PriceTensor(values, t, tuple(s.asset for s in series_set))


# panel ------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class MarketPanel:
    """Gap-free aligned history of m non-cash assets; the cash price is implicitly 1.

    Arrays are (m, T).  Period indices run 0..T-1.
    """

    assets: tuple[str, ...]
    period_seconds: int
    start: int
    close: np.ndarray
    high: np.ndarray
    low: np.ndarray

    def __post_init__(self):
        for name in ("close", "high", "low"):
            arr = _frozen(getattr(self, name))
            if arr.shape != (len(self.assets), self.close.shape[1]):
                raise DataError(f"panel column {name} has shape {arr.shape}")
            if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
                raise DataError(f"panel column {name} has non-positive or non-finite prices")
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "_stack", np.stack([self.close, self.high, self.low]))

    @classmethod
    def from_series(cls, series: Sequence[CandleSeries]) -> "MarketPanel":
        if not series:
            raise DataError("no series given")
        ref = series[0]
        for s in series:
            if (s.start, s.period_seconds, len(s)) != (ref.start, ref.period_seconds, len(ref)):
                raise DataError(f"{s.asset}: grid differs from {ref.asset}")
            if s.missing.any():
                raise DataError(f"{s.asset}: fill missing data before building a panel")
        return cls(tuple(s.asset for s in series), ref.period_seconds, ref.start,
                   np.stack([s.close for s in series]), np.stack([s.high for s in series]),
                   np.stack([s.low for s in series]))

    @property
    def m(self) -> int:
        return len(self.assets)

    @property
    def periods(self) -> int:
        return self.close.shape[1]

    def timestamp(self, index: int) -> int:
        return self.start + index * self.period_seconds

    def index_of(self, timestamp: int) -> int:
        offset = timestamp - self.start
        if offset % self.period_seconds:
            raise DataError(f"timestamp {timestamp} is off the {self.period_seconds}s grid")
        return offset // self.period_seconds

    def prices(self, index: int) -> np.ndarray:
        """Closing price vector with the cash entry 1 prepended."""
        return np.concatenate([[1.0], self.close[:, index]])

    def price_tensors(self, indices, n: int) -> np.ndarray:
        """Batch of normalised tensors, shape (batch, 3, m, n)."""
        idx = np.atleast_1d(np.asarray(indices, dtype=np.int64))
        if idx.min() - n + 1 < 0 or idx.max() >= self.periods:
            raise DataError(f"price tensor indices {idx.min()}..{idx.max()} with lookback {n} "
                            f"outside the covered range 0..{self.periods - 1}")
        windows = sliding_window_view(self._stack, n, axis=2)  # (3, m, T-n+1, n)
        x = windows[:, :, idx - n + 1, :].transpose(2, 0, 1, 3)
        x = x / self.close[:, idx].T[:, None, :, None]
        x[:, 0, :, -1] = 1.0
        return x

    def price_tensor(self, index: int, n: int) -> PriceTensor:
        return PriceTensor(self.price_tensors([index], n)[0], self.timestamp(index), self.assets)

    def relatives(self, indices) -> np.ndarray:
        """y_t = v_t / v_{t-1} with cash 1, shape (batch, m+1)."""
        idx = np.atleast_1d(np.asarray(indices, dtype=np.int64))
        if idx.min() < 1 or idx.max() >= self.periods:
            raise DataError(f"relative-price indices {idx.min()}..{idx.max()} outside 1..{self.periods - 1}")
        y = self.close[:, idx] / self.close[:, idx - 1]
        return np.concatenate([np.ones((1, idx.size)), y]).T

    def slice(self, lo: int, hi: int) -> "MarketPanel":
        return MarketPanel(self.assets, self.period_seconds, self.timestamp(lo),
                           self.close[:, lo:hi], self.high[:, lo:hi], self.low[:, lo:hi])

    def with_prices(self, close, high=None, low=None) -> "MarketPanel":
        return MarketPanel(self.assets, self.period_seconds, self.start, close,
                           self.high if high is None else high, self.low if low is None else low)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(",".join(self.assets).encode())
        h.update(f"{self.period_seconds}:{self.start}".encode())
        for arr in (self.close, self.high, self.low):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


# synthetic data ---------------------------------------------------------------
def generate_synthetic_market(spec: Mapping[str, tuple[float, ...]], periods: int, seed: int,
                              start: int = 0, period_seconds: int = 1800) -> dict[str, CandleSeries]:
    """Geometric Brownian paths; ``spec[asset] = (log_drift, volatility[, initial_price])`` per period.

    Closes follow ln c_j = ln c_0 + sum (drift + vol * z), highs and lows sit
    a half-normal distance above and below the close with scale ``vol``.
    The same (spec, seed) always gives bit-identical output.
    """
    if periods < 1:
        raise ConfigError("periods must be >= 1")
    rng = np.random.default_rng(seed)
    out = {}
    for asset in sorted(spec):
        drift, vol, *rest = spec[asset]
        p0 = rest[0] if rest else 1.0
        if not (math.isfinite(drift) and math.isfinite(vol) and vol >= 0 and p0 > 0):
            raise ConfigError(f"{asset}: invalid synthetic parameters {spec[asset]}")
        steps = drift + vol * rng.standard_normal(periods - 1)
        close = p0 * np.exp(np.concatenate([[0.0], np.cumsum(steps)]))
        spread = np.abs(vol * rng.standard_normal((2, periods)))
        high = close * (1.0 + spread[0])
        low = close * (1.0 - np.minimum(spread[1], 0.5))
        opening = np.concatenate([[close[0]], close[:-1]])
        volume = 1000.0 * np.exp(rng.standard_normal(periods))
        out[asset] = CandleSeries(asset, period_seconds, start, opening, high, low, close, volume,
                                  np.zeros(periods, dtype=bool))
    return out
