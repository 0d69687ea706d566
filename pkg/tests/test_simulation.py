import math

import numpy as np
import pytest

from sdma import fit_sd_random, fit_standard_random, equal_weights
from sdma.errors import TooFewSamples
from sdma.simulation import (
    SimCondition,
    generate_replication,
    mcse,
    ols_slope,
    factorial_grid,
    run_condition,
)


def test_factorial_grid_shape():
    g = factorial_grid(n_reps=10)
    assert len(g) == 20
    assert {c.K for c in g} == {3, 10, 30, 100, 300}
    assert {c.beta for c in g} == {0.0, 0.3}
    assert {c.tau for c in g} == {0.0, 0.1}
    assert all(c.n_obs == 100 for c in g)


def test_condition_validation():
    with pytest.raises(ValueError):
        SimCondition(K=1, beta=0, tau=0)
    with pytest.raises(ValueError):
        SimCondition(K=3, beta=0, tau=0, n_reps=0)


def test_ols_against_lstsq(rng):
    x = rng.standard_normal(50)
    y = 0.4 * x + rng.standard_normal(50)
    b, s = ols_slope(x, y)
    X = np.column_stack([np.ones(50), x])
    coef, res, *_ = np.linalg.lstsq(X, y, rcond=None)
    sigma2 = res[0] / 48
    cov = sigma2 * np.linalg.inv(X.T @ X)
    assert b == pytest.approx(coef[1], rel=1e-12)
    assert s == pytest.approx(math.sqrt(cov[1, 1]), rel=1e-10)


def test_tau_zero_copies_identical():
    es = generate_replication(SimCondition(K=3, beta=0.3, tau=0.0), 7)
    assert es.K == 3
    assert len({(r.y, r.se) for r in es.records}) == 1


def test_tau_positive_perturbs():
    cond = SimCondition(K=10, beta=0.0, tau=0.1)
    es = generate_replication(cond, 0)
    assert len(set(es.y)) == 10
    ratio = es.se / es.se.min()
    assert ratio.max() <= 1.2 / 0.75 + 1e-12


def test_deviation_sd_matches_tau():
    # the shared slope cancels in deviations from the K = 10 mean of each rep,
    # so pool within-rep sample SDs instead of needing the unobserved b
    cond = SimCondition(K=10, beta=0.0, tau=0.1)
    devs = []
    for r in range(1000):
        es = generate_replication(cond, r)
        devs.append(es.y - es.y.mean())
    devs = np.concatenate(devs)
    sd = math.sqrt((devs**2).sum() / (len(devs) * 9 / 10))
    assert sd == pytest.approx(0.1, abs=0.003)


def test_replication_deterministic():
    cond = SimCondition(K=5, beta=0.3, tau=0.1, seed=99)
    a = generate_replication(cond, 42)
    b = generate_replication(cond, 42)
    assert a == b
    assert generate_replication(cond, 43) != a
    assert generate_replication(SimCondition(K=5, beta=0.3, tau=0.1, seed=100), 42) != a


def test_tau_zero_algebra():
    for K in (3, 30):
        cond = SimCondition(K=K, beta=0.0, tau=0.0)
        for r in range(5):
            es = generate_replication(cond, r)
            s = es.se[0]
            adj = fit_sd_random(es, equal_weights(K))
            std = fit_standard_random(es)
            assert adj.mu_hat == std.mu_hat == es.y[0]
            assert adj.se_mu == pytest.approx(s, rel=1e-14)
            assert std.se_mu == pytest.approx(s / math.sqrt(K), rel=1e-14)


class TestMcse:
    def test_binomial_half(self):
        x = np.array([1.0] * 5000 + [0.0] * 5000)
        assert mcse("rejection_rate", x) == pytest.approx(0.005, abs=1e-15)

    def test_binomial_five_percent(self):
        x = np.array([1.0] * 500 + [0.0] * 9500)
        assert mcse("rejection_rate", x) == pytest.approx(math.sqrt(0.05 * 0.95 / 1e4), rel=1e-12)
        assert mcse("rejection_rate", x) == pytest.approx(0.00218, abs=1e-5)

    @pytest.mark.parametrize("kind", ["bias", "avg_se", "rmse", "emp_se", "rejection_rate"])
    def test_constant(self, kind):
        assert mcse(kind, np.full(10, 0.0)) == 0.0
        if kind != "rejection_rate":
            assert mcse(kind, np.full(10, 0.3)) == pytest.approx(0.0, abs=1e-15)

    def test_rmse_delta_vs_bootstrap(self, rng):
        e = rng.normal(0.05, 0.2, 4000)
        boot = [math.sqrt(np.mean(rng.choice(e, e.size) ** 2)) for _ in range(800)]
        assert mcse("rmse", e) == pytest.approx(np.std(boot), rel=0.1)

    def test_too_few(self):
        with pytest.raises(TooFewSamples):
            mcse("bias", [1.0])


def test_run_condition_small():
    rep = run_condition(SimCondition(K=10, beta=0.3, tau=0.1, n_reps=200))
    for m in (rep.adjusted, rep.unadjusted):
        assert 0 <= m.rejection_rate <= 1
        assert m.rmse >= abs(m.bias)
        assert min(m.mcse_avg_se, m.mcse_emp_se, m.mcse_bias, m.mcse_rmse, m.mcse_rejection_rate) >= 0
        assert m.n_used + rep.n_failed == 200
    assert rep.adjusted.avg_se > rep.unadjusted.avg_se
    rows = rep.rows()
    assert [r["method"] for r in rows] == ["adjusted", "unadjusted"]


def test_tau_zero_identical_point_estimates():
    rep = run_condition(SimCondition(K=30, beta=0.0, tau=0.0, n_reps=100))
    assert rep.adjusted.bias == rep.unadjusted.bias
    assert rep.adjusted.rmse == rep.unadjusted.rmse
    assert rep.adjusted.avg_se / rep.unadjusted.avg_se == pytest.approx(math.sqrt(30), rel=1e-12)


def test_parallel_matches_serial():
    cond = SimCondition(K=10, beta=0.0, tau=0.1, n_reps=120)
    a = run_condition(cond, n_jobs=1, chunk=50)
    b = run_condition(cond, n_jobs=2, chunk=50)
    c = run_condition(cond, n_jobs=1, chunk=7)
    assert a == b == c
    for k in a.draws:
        assert np.array_equal(a.draws[k], b.draws[k])
