"""EIIE policy networks: one shared evaluator per asset row, joined only at the softmax.

Input history has shape (batch, 3, m, n) and the previous portfolio enters as
its m non-cash weights, stacked as an extra feature map right before the 1x1
scoring convolution.  The learnable cash bias takes the first softmax slot.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from portfolio_rl import tensorgrad as tg
from portfolio_rl.accounting import check_portfolio
from portfolio_rl.errors import ConfigError, ShapeError
from portfolio_rl.marketdata import PriceTensor
from portfolio_rl.tensorgrad import Tensor

KINDS = ("cnn", "rnn", "lstm")


@dataclass(frozen=True)
class PolicyTopology:
    kind: str = "cnn"
    m: int = 11
    n: int = 50
    conv_maps: tuple[int, int] = (8, 40)
    kernel_width: int = 3
    hidden: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown policy kind {self.kind!r}; expected one of {KINDS}")
        if self.m < 1:
            raise ConfigError("m must be >= 1")
        if self.kind == "cnn":
            if self.n < self.kernel_width + 1:
                raise ConfigError(f"CNN needs n >= {self.kernel_width + 1}, got {self.n}")
            if min(self.conv_maps) < 1:
                raise ConfigError("feature-map counts must be positive")
        elif self.n < 1 or self.hidden < 1:
            raise ConfigError("recurrent policy needs n >= 1 and hidden >= 1")


@dataclass
class PolicyOutput:
    weights: np.ndarray
    scores: np.ndarray
    cash_bias: float


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_parameters(topology: PolicyTopology, seed: int | None = None) -> dict[str, np.ndarray]:
    """He-style truncated-normal weights (cut at 2 sigma), zero biases, LSTM forget bias 1."""
    rng = np.random.default_rng(topology.seed if seed is None else seed)
    m_feat = 3
    p: dict[str, np.ndarray] = {}

    def weight(name, shape, fan_in):
        p[name] = _truncated_normal(rng, shape, np.sqrt(2.0 / fan_in))

    if topology.kind == "cnn":
        c1, c2 = topology.conv_maps
        k1 = topology.kernel_width
        k2 = topology.n - k1 + 1
        weight("conv1.weight", (c1, m_feat, k1), m_feat * k1)
        p["conv1.bias"] = np.zeros(c1)
        weight("conv2.weight", (c2, c1, k2), c1 * k2)
        p["conv2.bias"] = np.zeros(c2)
        features = c2
    else:
        h = topology.hidden
        gates = 4 if topology.kind == "lstm" else 1
        weight("rnn.w_x", (m_feat, gates * h), m_feat + h)
        weight("rnn.w_h", (h, gates * h), m_feat + h)
        b = np.zeros(gates * h)
        if topology.kind == "lstm":
            b[h:2 * h] = 1.0
        p["rnn.bias"] = b
        features = h
    weight("score.weight", (features + 1,), features + 1)
    p["cash_bias"] = np.zeros(1)
    return p


class EIIEPolicy:
    """Policy network pi(X_t, w_{t-1}) -> w_t built from a ``PolicyTopology``."""

    def __init__(self, topology: PolicyTopology, params: dict[str, np.ndarray] | None = None):
        self.topology = topology
        arrays = init_parameters(topology) if params is None else params
        expected = init_parameters(topology)
        if set(arrays) != set(expected):
            raise ShapeError(f"parameter names {sorted(arrays)} do not match topology {sorted(expected)}")
        for k, v in arrays.items():
            if np.shape(v) != expected[k].shape:
                raise ShapeError(f"parameter {k}: expected shape {expected[k].shape}, got {np.shape(v)}")
        self.params = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=k)
                       for k, v in sorted(arrays.items())}

    @property
    def m(self) -> int:
        return self.topology.m

    @property
    def n(self) -> int:
        return self.topology.n

    def weights(self) -> list[Tensor]:
        """Parameters subject to L2 regularisation (biases excluded)."""
        return [t for k, t in self.params.items() if "bias" not in k]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_arrays(self, arrays) -> None:
        for k, t in self.params.items():
            t.data = np.array(arrays[k], dtype=np.float64).reshape(t.data.shape)

    # network -----------------------------------------------------------------
    def _features(self, x: Tensor) -> Tensor:
        """Per-asset feature columns, shape (batch, features, m)."""
        p = self.params
        if self.topology.kind == "cnn":
            h = tg.relu(tg.conv_rows(x, p["conv1.weight"], p["conv1.bias"]))
            h = tg.relu(tg.conv_rows(h, p["conv2.weight"], p["conv2.bias"]))
            return h.reshape(h.shape[0], h.shape[1], h.shape[2])
        batch, _, m, n = x.shape
        size = self.topology.hidden
        # every asset row becomes one sequence of the shared recurrent subnet
        seq = x.transpose(0, 2, 3, 1).reshape(batch * m, n, 3)
        h = Tensor(np.zeros((batch * m, size)))
        c = Tensor(np.zeros((batch * m, size)))
        for step in range(n):
            xt = seq[:, step, :]
            if self.topology.kind == "lstm":
                h, c = tg.lstm_cell(xt, h, c, p["rnn.w_x"], p["rnn.w_h"], p["rnn.bias"])
            else:
                h = tg.rnn_cell(xt, h, p["rnn.w_x"], p["rnn.w_h"], p["rnn.bias"])
        return h.reshape(batch, m, size).transpose(0, 2, 1)

    def scores(self, history, w_prev_noncash) -> Tensor:
        x = history if isinstance(history, Tensor) else Tensor(history)
        if x.data.ndim != 4 or x.shape[1:] != (3, self.m, self.n):
            raise ShapeError(f"policy input: expected (batch, 3, {self.m}, {self.n}), got {x.shape}")
        w_prev = np.asarray(w_prev_noncash, dtype=np.float64)
        if w_prev.shape != (x.shape[0], self.m):
            raise ShapeError(f"previous weights: expected ({x.shape[0]}, {self.m}), got {w_prev.shape}")
        feats = self._features(x)
        stacked = tg.concat([feats, Tensor(w_prev[:, None, :])], axis=1)  # (batch, features+1, m)
        # 1x1 convolution: the same weights score every asset column
        return tg.tsum(stacked * self.params["score.weight"].reshape(1, -1, 1), axis=1)

    def forward(self, history, w_prev) -> Tensor:
        """Portfolio weights (batch, m+1) from history (batch, 3, m, n) and previous weights (batch, m+1)."""
        w_prev = np.asarray(w_prev, dtype=np.float64)
        if w_prev.ndim != 2 or w_prev.shape[1] != self.m + 1:
            raise ShapeError(f"previous portfolio: expected (batch, {self.m + 1}), got {w_prev.shape}")
        return tg.softmax_with_bias(self.scores(history, w_prev[:, 1:]), self.params["cash_bias"])

    def act(self, X, w_prev) -> PolicyOutput:
        values = X.values if isinstance(X, PriceTensor) else np.asarray(X, dtype=np.float64)
        w_prev = check_portfolio(w_prev)
        s = self.scores(values[None], w_prev[None, 1:])
        w = tg.softmax_with_bias(s, self.params["cash_bias"])
        return PolicyOutput(weights=w.data[0].copy(), scores=s.data[0].copy(),
                            cash_bias=float(self.params["cash_bias"].data[0]))


def build_cnn_policy(m: int, n: int, seed: int = 0, conv_maps=(8, 40), kernel_width: int = 3) -> EIIEPolicy:
    return EIIEPolicy(PolicyTopology("cnn", m, n, tuple(conv_maps), kernel_width, seed=seed))


def build_recurrent_policy(m: int, n: int, kind: str = "lstm", hidden: int = 20, seed: int = 0) -> EIIEPolicy:
    if kind not in ("rnn", "lstm"):
        raise ConfigError(f"recurrent kind must be 'rnn' or 'lstm', got {kind!r}")
    return EIIEPolicy(PolicyTopology(kind, m, n, hidden=hidden, seed=seed))


def build_policy(topology: PolicyTopology) -> EIIEPolicy:
    return EIIEPolicy(topology)
