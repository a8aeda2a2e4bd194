import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from portfolio_rl.eiie import (EIIEPolicy, PolicyTopology, build_cnn_policy, build_policy, build_recurrent_policy,
                               init_parameters)
from portfolio_rl.errors import ConfigError, ShapeError
from portfolio_rl.marketdata import PriceTensor

KINDS = ["cnn", "rnn", "lstm"]


def small_policy(kind, m=4, n=8, seed=0):
    return build_policy(PolicyTopology(kind, m, n, conv_maps=(3, 5), hidden=6, seed=seed))


def random_input(rng, m, n, batch=1):
    x = np.exp(0.05 * rng.standard_normal((batch, 3, m, n)))
    w = rng.dirichlet(np.ones(m + 1), size=batch)
    return x, w


def test_cnn_output_length_at_full_scale():
    policy = build_cnn_policy(11, 50, seed=0)
    x = np.ones((3, 11, 50))
    out = policy.act(PriceTensor(x, 0, tuple("ABCDEFGHIJK")), np.full(12, 1 / 12))
    assert out.weights.shape == (12,)
    assert out.scores.shape == (11,)


def test_lstm_output_length_at_full_scale():
    policy = build_recurrent_policy(11, 50, kind="lstm", hidden=20, seed=0)
    out = policy.act(np.ones((3, 11, 50)), np.full(12, 1 / 12))
    assert out.weights.shape == (12,)


def test_construction_errors():
    with pytest.raises(ConfigError):
        PolicyTopology("cnn", 3, 3)
    with pytest.raises(ConfigError):
        PolicyTopology("gru", 3, 8)
    with pytest.raises(ConfigError):
        PolicyTopology("cnn", 0, 8)
    with pytest.raises(ConfigError):
        build_recurrent_policy(3, 8, kind="cnn")


@pytest.mark.parametrize("kind", KINDS)
def test_shape_mismatch(kind):
    policy = small_policy(kind)
    with pytest.raises(ShapeError):
        policy.forward(np.ones((1, 3, 5, 8)), np.full((1, 5), 0.2))
    with pytest.raises(ShapeError):
        policy.forward(np.ones((1, 3, 4, 8)), np.full((1, 4), 0.25))
    with pytest.raises(ShapeError):
        EIIEPolicy(policy.topology, {k: np.zeros(1) for k in policy.params})


@pytest.mark.parametrize("kind", KINDS)
def test_row_isolation(kind):
    rng = np.random.default_rng(1)
    policy = small_policy(kind)
    x, w = random_input(rng, 4, 8)
    base = policy.scores(x, w[:, 1:]).data[0]
    for i in range(4):
        bumped = x.copy()
        bumped[0, :, i, :] *= np.exp(0.1 * rng.standard_normal((3, 8)))
        diff = np.abs(policy.scores(bumped, w[:, 1:]).data[0] - base)
        assert diff[i] > 0
        assert np.all(np.delete(diff, i) == 0.0)


@pytest.mark.parametrize("kind", KINDS)
def test_duplicate_rows_score_identically(kind):
    rng = np.random.default_rng(2)
    policy = small_policy(kind)
    x, _ = random_input(rng, 4, 8)
    x[0, :, 3, :] = x[0, :, 1, :]
    w = np.array([[0.1, 0.3, 0.2, 0.2, 0.2]])
    scores = policy.scores(x, w[:, 1:]).data[0]
    assert scores[1] == scores[3]


@pytest.mark.parametrize("kind", KINDS)
@given(st.permutations(range(4)), st.integers(0, 1000))
def test_permutation_equivariance(kind, perm, seed):
    rng = np.random.default_rng(seed)
    policy = small_policy(kind)
    x, w = random_input(rng, 4, 8)
    perm = np.array(perm)
    out = policy.forward(x, w).data[0]
    w_perm = np.concatenate([w[:, :1], w[:, 1:][:, perm]], axis=1)
    out_perm = policy.forward(x[:, :, perm, :], w_perm).data[0]
    assert out_perm[0] == pytest.approx(out[0], abs=1e-15)
    np.testing.assert_allclose(out_perm[1:], out[1:][perm], rtol=1e-13, atol=1e-16)


@pytest.mark.parametrize("kind", KINDS)
def test_symmetric_input_gives_uniform_non_cash_weights(kind):
    policy = small_policy(kind)
    out = policy.act(np.ones((3, 4, 8)), np.full(5, 0.2))
    assert np.all(out.weights[1:] == out.weights[1])
    assert out.cash_bias == 0.0


@pytest.mark.parametrize("kind", KINDS)
@given(st.integers(0, 10_000))
def test_outputs_are_valid_portfolios(kind, seed):
    rng = np.random.default_rng(seed)
    policy = small_policy(kind, seed=seed % 7)
    x, w = random_input(rng, 4, 8, batch=3)
    out = policy.forward(x * rng.uniform(0.1, 10), w).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


@pytest.mark.parametrize("kind", KINDS)
def test_act_is_deterministic(kind):
    x, w = random_input(np.random.default_rng(3), 4, 8)
    a = small_policy(kind, seed=11).act(x[0], w[0])
    b = small_policy(kind, seed=11).act(x[0], w[0])
    assert a.weights.tobytes() == b.weights.tobytes()


@pytest.mark.parametrize("kind", KINDS)
def test_init_is_reproducible_and_cash_bias_starts_at_zero(kind):
    topo = PolicyTopology(kind, 3, 8, hidden=4)
    a, b = init_parameters(topo), init_parameters(topo)
    assert a.keys() == b.keys()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert a["cash_bias"].tolist() == [0.0]
    c = init_parameters(topo, seed=1)
    assert any(a[k].tobytes() != c[k].tobytes() for k in a if "bias" not in k)


def test_init_spread_for_fan_in_100():
    # conv2 has fan-in (first-layer maps) x (n - 2) = 2 x 50 = 100 and 100 x 100 draws
    params = init_parameters(PolicyTopology("cnn", 3, 52, conv_maps=(2, 100)))
    w = params["conv2.weight"]
    assert w.size >= 10_000
    assert abs(w.std() - np.sqrt(0.02)) < 0.2 * np.sqrt(0.02)
    assert np.abs(w).max() <= 2 * np.sqrt(0.02)


def test_lstm_forget_gate_bias_starts_at_one():
    b = init_parameters(PolicyTopology("lstm", 3, 8, hidden=5))["rnn.bias"]
    np.testing.assert_array_equal(b[5:10], 1.0)
    np.testing.assert_array_equal(np.delete(b, range(5, 10)), 0.0)


def test_regularised_parameters_exclude_biases():
    policy = small_policy("cnn")
    names = {t.name for t in policy.weights()}
    assert names == {"conv1.weight", "conv2.weight", "score.weight"}


def test_arrays_round_trip():
    a, b = small_policy("lstm", seed=1), small_policy("lstm", seed=2)
    b.load_arrays(a.arrays())
    x, w = random_input(np.random.default_rng(0), 4, 8)
    assert a.forward(x, w).data.tobytes() == b.forward(x, w).data.tobytes()
