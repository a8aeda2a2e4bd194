"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL`` line with the measured
numbers (also collected into the pytest terminal summary) and then asserts.
The three learning runs (c = 0.25% twice, c = 0 once) are shared through
session fixtures; together they take about ten minutes on one core.
"""
import time

import numpy as np
import pytest
from scipy import stats

from conftest import CRITERION_LINES
from oracles import (central_difference, gradient_mismatches, max_drawdown_exhaustive, random_simplex,
                     remainder_fixed_point_bisection, self_financing_residual, value_path_product)
from portfolio_rl import accounting as acc
from portfolio_rl import tensorgrad as tg
from portfolio_rl.accounting import CommissionSchedule
from portfolio_rl.backtest import BacktestConfig, simulate
from portfolio_rl.eiie import PolicyTopology, build_policy
from portfolio_rl.experiment import LearningExperiment, run_learning_experiment
from portfolio_rl.marketdata import MarketPanel, generate_synthetic_market
from portfolio_rl.training import (PortfolioVectorMemory, TrainingConfig, batch_reward, make_batch, objective_value,
                                   sample_batch_start)

KINDS = ("cnn", "rnn", "lstm")


def verdict(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    CRITERION_LINES.append(line)
    assert ok, line


def rebalance_instances(count=1000, seed=2024):
    """Random (w, w', c_s, c_p) with c in [0, 0.01]; a third of the vectors have zero entries."""
    rng = np.random.default_rng(seed)
    cases = []
    for i in range(count):
        size = int(rng.integers(2, 13))
        w = random_simplex(rng, size, sparse=i % 3 == 0)
        wp = random_simplex(rng, size, sparse=i % 3 == 1)
        cases.append((w, wp, float(rng.uniform(0, 0.01)), float(rng.uniform(0, 0.01))))
    return cases


@pytest.fixture(scope="module")
def instances():
    return rebalance_instances()


# learning runs ----------------------------------------------------------------------------------------------
@pytest.fixture(scope="session")
def learning_run():
    return run_learning_experiment(LearningExperiment())


@pytest.fixture(scope="session")
def learning_rerun():
    return run_learning_experiment(LearningExperiment())


@pytest.fixture(scope="session")
def free_run():
    return run_learning_experiment(LearningExperiment(commission_rate=0.0))


# 1-3: the transaction remainder factor -------------------------------------------------------------------------
def test_criterion_1_mu_solver(instances):
    began = time.perf_counter()
    worst = 0.0
    property_failures = []
    starts = np.random.default_rng(7).random((len(instances), 10))
    for j, (w, wp, c_s, c_p) in enumerate(instances):
        fees = CommissionSchedule(c_s, c_p)
        mu, _ = acc.solve_mu(w, wp, fees, tol=1e-10)
        worst = max(worst, abs(mu - remainder_fixed_point_bisection(w, wp, c_s, c_p)))

        grid = [acc.remainder_map(x, w, wp, fees) for x in np.linspace(0.0, 1.0, 21)]
        up, down = acc.mu_iterates(w, wp, fees, 0.0), acc.mu_iterates(w, wp, fees, 1.0)
        ups = [next(up) for _ in range(40)]
        downs = [next(down) for _ in range(40)]
        limits = [acc.solve_mu(w, wp, fees, tol=1e-12, start=float(s))[0] for s in starts[j]]
        checks = {
            "f monotone": all(b >= a - 1e-15 for a, b in zip(grid, grid[1:])),
            "f(0) > 0": grid[0] > 0.0,
            "f(1) <= 1": grid[-1] <= 1.0 + 1e-15,
            "iterates from 0 increase": all(b >= a - 1e-15 for a, b in zip(ups, ups[1:])),
            "iterates from 1 decrease": all(b <= a + 1e-15 for a, b in zip(downs, downs[1:])),
            "common limit": max(limits) - min(limits) < 1e-10 and abs(limits[0] - mu) < 1e-10,
        }
        property_failures += [(j, name) for name, ok in checks.items() if not ok]
    seconds = time.perf_counter() - began
    ok = worst < 1e-10 and not property_failures and seconds < 5.0
    examples = f" {property_failures[:3]}" if property_failures else ""
    verdict(1, ok, f"max |mu - bisection| = {worst:.2e} (< 1e-10) over {len(instances)} instances; "
                   f"fixed-point property violations {len(property_failures)}{examples}; {seconds:.2f} s (< 5 s)")


def test_criterion_2_self_financing(instances):
    worst = 0.0
    for w, wp, c_s, c_p in instances:
        mu, _ = acc.solve_mu(w, wp, CommissionSchedule(c_s, c_p), tol=1e-10)
        worst = max(worst, abs(self_financing_residual(w, wp, mu, c_s, c_p)))
    verdict(2, worst < 1e-12, f"max cash-flow residual = {worst:.2e} (< 1e-12) over {len(instances)} instances")


def test_criterion_3_zero_cost_identities(instances):
    free = [acc.solve_mu(w, wp, CommissionSchedule(0.0, 0.0), tol=1e-10)[0] for w, wp, _, _ in instances]
    same = [acc.solve_mu(w, w, CommissionSchedule(c_s, c_p), tol=1e-10)[0] for w, _, c_s, c_p in instances]
    fixed_k = [acc.solve_mu(w, w, CommissionSchedule(c_s, c_p), k=5)[0] for w, _, c_s, c_p in instances]
    exact = all(mu == 1.0 for mu in free)
    worst = max(abs(mu - 1.0) for mu in same + fixed_k)
    verdict(3, exact and worst < 1e-14,
            f"free trading gives mu == 1 exactly: {exact}; no-trade max |mu - 1| = {worst:.1e} (< 1e-14)")


# 4: gradients ----------------------------------------------------------------------------------------------------
def test_criterion_4_gradient_fidelity():
    began = time.perf_counter()
    spec = {f"A{i}": (0.0, 0.03) for i in range(3)}
    panel = MarketPanel.from_series(list(generate_synthetic_market(spec, 60, 7).values()))
    config = TrainingConfig(batch_size=4, window_size=8, number_of_assets=4, total_steps=1,
                            regularization_coefficient=1e-3, commission_rate=0.0025)
    memory = PortfolioVectorMemory(panel.periods, 4)
    memory.slots[:] = np.random.default_rng(7).dirichlet(np.ones(4), size=panel.periods)
    batch = make_batch(panel, 20, 4, 8, 40)
    details = []
    total_bad = 0
    for kind in KINDS:
        policy = build_policy(PolicyTopology(kind, 3, 8, conv_maps=(2, 4), hidden=4, seed=3))
        rng = np.random.default_rng(3)  # a generic point: every parameter, biases included, away from zero
        policy.load_arrays({k: 0.5 * rng.standard_normal(v.shape) for k, v in policy.arrays().items()})
        R, _, _ = batch_reward(policy, batch, memory, config.fees, config.mu_iterations, write=False)
        objective = R - tg.l2_penalty(policy.weights(), config.regularization_coefficient)
        analytic = tg.backward(objective, policy.params)
        numeric = central_difference(lambda: objective_value(policy, batch, memory, config),
                                     {k: p.data for k, p in policy.params.items()})
        bad = gradient_mismatches(analytic, numeric)
        total_bad += len(bad)
        size = sum(v.size for v in numeric.values())
        details.append(f"{kind} {size - len(bad)}/{size}")
    seconds = time.perf_counter() - began
    verdict(4, total_bad == 0 and seconds < 60.0,
            f"entries matching finite differences: {', '.join(details)}; {seconds:.1f} s (< 60 s)")


# 5: accounting closure ----------------------------------------------------------------------------------------------
def test_criterion_5_accounting_closure():
    worst_path, worst_summary, worst_mdd = 0.0, 0.0, 0.0
    for seed in range(5):
        spec = {f"S{i}": (0.0005 * (i - 2), 0.02) for i in range(5)}
        panel = MarketPanel.from_series(list(generate_synthetic_market(spec, 1001, seed).values()))
        rng = np.random.default_rng(seed)
        report = simulate(panel, BacktestConfig(1, 1000), lambda d, *_: rng.dirichlet(np.ones(6)), "random")
        records = report.records
        assert len(records) == 1000
        logs = np.array([e.log_return for e in records])
        product = value_path_product(1.0, [e.mu for e in records], [e.y for e in records],
                                     [e.w_target for e in records])
        exp_sum = np.exp(np.concatenate([[0.0], np.cumsum(logs)]))
        worst_path = max(worst_path, float(np.max(np.abs(product / exp_sum - 1.0))))

        path = acc.portfolio_value_path(1.0, records)
        recomputed = {"fAPV": acc.fapv(path), "MDD": acc.max_drawdown(path),
                      "SR": acc.sharpe_ratio([e.rho for e in records])}
        for key, value in recomputed.items():
            worst_summary = max(worst_summary, abs(value - report.summary[key]))
        for start in (0, 250, 501):
            segment = path[start:start + 500]
            worst_mdd = max(worst_mdd, abs(acc.max_drawdown(segment) - max_drawdown_exhaustive(segment)))
    ok = worst_path < 1e-9 and worst_summary < 1e-12 and worst_mdd < 1e-12
    verdict(5, ok, f"product vs exp-sum rel {worst_path:.1e} (< 1e-9); summary recomputation "
                   f"{worst_summary:.1e} (< 1e-12); MDD vs exhaustive {worst_mdd:.1e}")


# 6: online stochastic batch sampling ------------------------------------------------------------------------------
def test_criterion_6_batch_sampling_distribution():
    rng = np.random.default_rng(20240)
    beta, t, n_b = 0.5, 10_000, 50
    k = np.array([t - n_b - sample_batch_start(t, n_b, beta, rng) for _ in range(100_000)])
    top = 12  # offsets >= 12 pooled into one tail cell so every expected count is >= 5
    observed = np.bincount(np.minimum(k, top), minlength=top + 1)
    pmf = beta * (1 - beta) ** np.arange(top)
    expected = np.concatenate([pmf, [1 - pmf.sum()]]) * k.size
    p_value = stats.chisquare(observed, expected).pvalue
    newest = {sample_batch_start(t, n_b, 1 - 1e-12, np.random.default_rng(s)) for s in range(500)}
    ok = p_value > 0.01 and newest == {t - n_b}
    verdict(6, ok, f"chi-square p = {p_value:.3f} (> 0.01) on 1e5 draws; beta -> 1 starts {sorted(newest)} "
                   f"(expected [{t - n_b}])")


# 7-9, 11: learning -------------------------------------------------------------------------------------------------
@pytest.mark.slow
def test_criterion_7_learning(learning_run):
    fapv, ucrp = learning_run.policy_report.summary["fAPV"], learning_run.ucrp_report.summary["fAPV"]
    weight = learning_run.mean_drifting_weight
    ok = fapv > ucrp and weight > 0.5 and learning_run.seconds < 600
    verdict(7, ok, f"EIIE fAPV {fapv:.4f} vs UCRP {ucrp:.4f}; mean weight on drifting asset {weight:.3f} (> 0.5); "
                   f"{learning_run.seconds:.0f} s (< 600 s)")


@pytest.mark.slow
def test_criterion_8_cost_awareness(learning_run, free_run):
    costly, free = learning_run.mean_turnover, free_run.mean_turnover
    verdict(8, costly < free and free_run.seconds < 600,
            f"mean turnover with c = 0.25%: {costly:.5f}, with c = 0: {free:.5f}; "
            f"extra run {free_run.seconds:.0f} s (< 600 s)")


@pytest.mark.slow
def test_criterion_9_memory_convergence(learning_run):
    change = learning_run.pvm_sweep_change
    verdict(9, change < 1e-3, f"max-norm memory change after one sweep = {change:.3e} (< 1e-3)")


@pytest.mark.slow
def test_criterion_11_determinism(learning_run, learning_rerun, tmp_path):
    first = learning_run.write(tmp_path / "first")
    second = learning_rerun.write(tmp_path / "second")
    differing = sorted(name for name in first if first[name] != second.get(name))
    verdict(11, first == second and bool(first),
            f"{len(first)} files (checkpoint, reports) compared; differing: {differing or 'none'}")


# 10: network structure ----------------------------------------------------------------------------------------------
def test_criterion_10_structural_invariants():
    m, n = 6, 12
    rng = np.random.default_rng(10)
    failures = []
    for kind in KINDS:
        policy = build_policy(PolicyTopology(kind, m, n, conv_maps=(3, 6), hidden=5, seed=10))
        policy.load_arrays({k: 0.5 * rng.standard_normal(v.shape) for k, v in policy.arrays().items()})
        for trial in range(5):
            x = np.exp(0.05 * rng.standard_normal((1, 3, m, n)))
            w = rng.dirichlet(np.ones(m + 1))[None, :]
            out = policy.forward(x, w).data[0]
            perm = rng.permutation(m)
            w_perm = np.concatenate([w[:, :1], w[:, 1:][:, perm]], axis=1)
            out_perm = policy.forward(x[:, :, perm, :], w_perm).data[0]
            if not (np.allclose(out_perm[1:], out[1:][perm], rtol=1e-12, atol=1e-15)
                    and abs(out_perm[0] - out[0]) < 1e-15):
                failures.append((kind, "equivariance", trial))
            base = policy.scores(x, w[:, 1:]).data[0]
            for i in range(m):
                bumped = x.copy()
                bumped[0, :, i, :] *= np.exp(0.1 * rng.standard_normal((3, n)))
                moved = policy.scores(bumped, w[:, 1:]).data[0] - base
                if moved[i] == 0.0 or np.any(np.delete(moved, i) != 0.0):
                    failures.append((kind, "row isolation", trial, i))
    verdict(10, not failures, f"permutation equivariance and row isolation on {', '.join(KINDS)}; "
                              f"violations {failures[:3] if failures else 'none'}")
