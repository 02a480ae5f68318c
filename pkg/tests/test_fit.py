import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from frontier_mm.bounds import DomainError
from frontier_mm.dist import ScaledBeta, TruncNormal
from frontier_mm.fit import (FitConfig, InfeasibleFitError, conditional_sup_frontier, default_bandwidth,
                             effective_sample_size, effective_sample_sizes, fit_deviation_distribution, fit_many,
                             floor_moments, frontier_estimate, n_eff_from_weights, required_mass)
from frontier_mm.moments import pooled_moments
from frontier_mm.panel import PanelDataset
from frontier_mm.residualize import ResidualDecomposition
from frontier_mm.sim import SimDesign, draw_deviations

BETA_224 = (0.8, 0.0, 48 / 35)


def moms(p):
    return tuple(p.central_moment(k) for k in (2, 3, 4))


# ---------------------------------------------------------------- config

def test_config_round_trip_and_validation():
    cfg = FitConfig(family="trunc_normal", m0=2, c=0.5, h=0.3, seed=4)
    assert FitConfig.from_dict(cfg.to_dict()) == cfg
    assert FitConfig.from_dict(FitConfig().to_dict()).c == math.inf
    assert not FitConfig().constrained and FitConfig(c=1).constrained
    for bad in ({"family": "gamma"}, {"m0": 0}, {"c": 0}, {"h": -1}, {"multistarts": 0}):
        with pytest.raises(ValueError):
            FitConfig(**bad)


# ---------------------------------------------------------------- kernel weights

def test_uniform_weights_give_n():
    pts = np.random.default_rng(0).normal(size=(37, 2))
    assert effective_sample_size(pts, 3, math.inf).n_eff == pytest.approx(37, rel=1e-14)


def test_concentrated_weights_give_one():
    assert n_eff_from_weights([0, 0, 1.0, 0]) == 1.0
    pts = np.array([0.0, 100.0, 200.0])
    assert effective_sample_size(pts, 0, 1e-3).n_eff == pytest.approx(1.0)


def test_two_equal_weights_give_two():
    assert n_eff_from_weights([0.5, 0.5, 0, 0, 0]) == 2.0


def test_tiny_bandwidth_keeps_self_weight():
    # the point's own kernel value is K(0) = 1, so the row never vanishes
    pts = np.array([0.0, 1.0, 2.0])
    for kernel in ("gaussian", "epanechnikov"):
        kw = effective_sample_size(pts, 1, 0.01, kernel=kernel)
        assert kw.n_eff == 1.0 and kw.weights[1] == 1.0


def test_default_bandwidth_rule():
    pts = np.random.default_rng(1).normal(size=(200, 1))
    assert default_bandwidth(pts) == pytest.approx(np.std(pts, ddof=1) * 200 ** (-0.2))
    assert default_bandwidth(np.ones(10)) == math.inf
    ne = effective_sample_sizes(np.ones(10))
    np.testing.assert_allclose(ne, 10)


@given(st.integers(2, 30), st.floats(0.05, 5))
def test_n_eff_between_one_and_n(n, h):
    pts = np.linspace(0, 1, n)
    ne = effective_sample_sizes(pts, h)
    assert np.all(ne >= 1 - 1e-12) and np.all(ne <= n + 1e-9)


def test_required_mass():
    assert required_mass(1, 25) == 0.04
    assert required_mass(1, 100) == 0.01
    ne = np.array([5, 10, 25, 100, 1000.0])
    assert np.all(np.diff([required_mass(1, v) for v in ne]) <= 0)


# ---------------------------------------------------------------- fitting

def test_recovers_four_beta_2_2():
    r = fit_deviation_distribution(BETA_224, 250)
    assert r.objective <= 1e-10
    assert (r.params.a, r.params.b, r.params.q) == pytest.approx((2, 2, 4), rel=1e-5)
    assert r.implied_mean == pytest.approx(2, rel=1e-6)
    assert r.constraint_mass == 1.0 and not r.bind and r.converged


def test_recovery_beats_grid_search_oracle():
    # dense grid over (log a, log b, log q) around the truth
    p = ScaledBeta(1.5, 3.0, 2.0)
    mu = np.array(moms(p))
    la = np.linspace(math.log(0.5), math.log(6), 41)
    lq = np.linspace(math.log(0.5), math.log(8), 41)
    best = math.inf
    for x, y in itertools.product(la, la):
        a, b = math.exp(x), math.exp(y)
        for z in lq:
            m = moms(ScaledBeta(a, b, math.exp(z)))
            best = min(best, float(np.sum((mu - m) ** 2)))
    r = fit_deviation_distribution(tuple(mu), 500)
    assert r.objective <= best
    assert r.implied_mean == pytest.approx(p.mean(), rel=1e-5)


@pytest.mark.parametrize("p", [ScaledBeta(0.5, 2, 4), ScaledBeta(2, 4, 4), ScaledBeta(4, 2, 4), ScaledBeta(2, 0.5, 4)])
def test_recovers_representative_designs(p):
    r = fit_deviation_distribution(moms(p), 2500)
    assert r.implied_mean == pytest.approx(p.mean(), rel=1e-4)


def test_recovers_truncated_normal():
    p = TruncNormal(0.7, 1.3)
    r = fit_deviation_distribution(moms(p), 100, FitConfig(family="trunc_normal"))
    assert r.objective <= 1e-12
    assert r.implied_mean == pytest.approx(p.mean(), rel=1e-5)


def test_constrained_binds_for_low_near_frontier_mass():
    # symmetric, concentrated away from zero: almost no mass within half an sd of 0
    p = ScaledBeta(8, 8, 4)
    cfg = FitConfig(m0=1, c=0.5)
    r = fit_deviation_distribution(moms(p), 25, cfg)
    assert r.bind
    assert abs(r.constraint_mass - 0.04) <= 1e-6
    assert r.implied_mean < p.mean()


def test_constrained_trunc_normal_binds():
    p = TruncNormal(3.0, 0.5)
    r = fit_deviation_distribution(moms(p), 25, FitConfig(family="trunc_normal", c=1.0))
    assert r.bind and abs(r.constraint_mass - r.required_mass) <= 1e-6


def test_constraint_slack_when_truth_feasible():
    p = ScaledBeta(0.6, 2, 3)  # plenty of mass at zero
    r = fit_deviation_distribution(moms(p), 2500, FitConfig(c=1.0))
    assert not r.bind
    assert r.implied_mean == pytest.approx(p.mean(), rel=1e-5)


def test_floors_are_flagged():
    (m2, _, m4), flags = floor_moments((-0.1, 0.0, 0.0), scale_ref=2.0)
    assert m2 == 2e-8 and m4 == m2 * m2 and flags == ["mu2_floored", "mu4_floored"]
    r = fit_deviation_distribution((1.0, 0.0, 0.5), 100)
    assert "mu4_floored" in r.flags


def test_deterministic_given_seed_and_stream():
    mu = (0.9, -0.3, 2.1)
    a = fit_deviation_distribution(mu, 40, FitConfig(c=1, seed=3), stream=(2, 5))
    b = fit_deviation_distribution(mu, 40, FitConfig(c=1, seed=3), stream=(2, 5))
    assert a.to_dict() == b.to_dict()


def test_fit_many_shares_duplicates():
    rows = [BETA_224, (1.0, 0.5, 3.0), BETA_224]
    out = fit_many(rows, 100, FitConfig(c=1.0))
    assert out[0] is out[2]
    assert out[1].implied_mean > 0


def test_infeasible_error_carries_best():
    err = InfeasibleFitError("x", best=(1.0, None))
    assert err.best == (1.0, None)


def _random_triples(k, seed):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(k):
        m2 = float(rng.lognormal(0, 1))
        g = float(rng.uniform(-1.5, 2))
        kap = (g * g + 1) * (1 + float(rng.exponential(0.8)))
        out.append((m2, g * m2**1.5, kap * m2 * m2))
    return out


@pytest.mark.slow
def test_dominance_and_feasibility_on_random_triples():
    for i, mu in enumerate(_random_triples(100, 40)):
        unc = fit_deviation_distribution(mu, 50, stream=i)
        con = fit_deviation_distribution(mu, 50, FitConfig(c=1.0), stream=i)
        # constrained optimum cannot beat the unconstrained one (up to optimizer noise)
        assert con.objective >= unc.objective * (1 - 1e-6) - 1e-12, (mu, con.objective, unc.objective)
        assert con.constraint_mass >= con.required_mass - 1e-8


@settings(max_examples=15)
@given(st.floats(0.3, 6), st.floats(0.3, 6), st.floats(0.05, 20))
def test_scale_consistency(a, b, s):
    p = ScaledBeta(a, b, 1.0)
    mu = moms(p)
    r1 = fit_deviation_distribution(mu, 500)
    r2 = fit_deviation_distribution((mu[0] * s**2, mu[1] * s**3, mu[2] * s**4), 500)
    assert r2.implied_mean == pytest.approx(s * r1.implied_mean, rel=1e-4)
    assert r2.params.q == pytest.approx(s * r1.params.q, rel=1e-3)
    assert (r2.params.a, r2.params.b) == pytest.approx((r1.params.a, r1.params.b), rel=1e-3)


# ---------------------------------------------------------------- frontier assembly

def test_frontier_zero_and_constant_shift():
    pred = np.array([1.0, 2.0, 3.0])
    assert np.array_equal(frontier_estimate(pred, 0.0).g_hat, pred)
    np.testing.assert_array_equal(frontier_estimate(pred, 0.25).g_hat, pred + 0.25)
    fe = frontier_estimate(pred, np.array([0.1, 0.2]), firm_index=[0, 0, 1], firm_ids=["a", "a", "b"])
    np.testing.assert_allclose(fe.g_hat, [1.1, 2.1, 3.2])


@pytest.mark.slow
def test_flat_frontier_recovered_high_nfm():
    d = SimDesign(a=0.5, b=2, n=2500, T=8)
    rng = np.random.default_rng(50)
    u = draw_deviations(d, rng)
    y = d.g - u[:, None] + rng.normal(0, np.std(u), (d.n, d.T))
    ybar = y.mean()
    m = pooled_moments(ResidualDecomposition.from_matrix(y - ybar))
    r = fit_deviation_distribution(m.u, d.n, FitConfig(c=1.0), scale_ref=m.mu2_ebar)
    g_hat = frontier_estimate(np.full(y.size, ybar), r.implied_mean).g_hat
    assert abs(g_hat.mean() - 5) < 0.1


def _sup_panel(n, rng, noise=0.0):
    u = ScaledBeta(0.7, 2, 2).sample(rng, n)
    x = rng.uniform(0, 1, n)
    y = 5 - u + noise * rng.normal(size=n)
    return PanelDataset.from_arrays(np.arange(n), x, y)


def test_conditional_sup_noiseless_converges_from_below():
    rng = np.random.default_rng(51)
    est = [conditional_sup_frontier(_sup_panel(n, rng), 0.5, 0.1) for n in (50, 500, 5000, 50000)]
    assert all(e <= 5 for e in est)
    assert 5 - est[-1] < 1e-3
    assert 5 - est[-1] < 5 - est[0]


def test_conditional_sup_single_and_empty():
    d = PanelDataset.from_arrays(["a", "b"], [0.0, 1.0], [3.0, 4.0])
    assert conditional_sup_frontier(d, 0.0, 0.5) == 3.0
    with pytest.raises(DomainError):
        conditional_sup_frontier(d, 10.0, 0.5)


def test_conditional_sup_overshoots_with_noise():
    rng = np.random.default_rng(52)
    est = [conditional_sup_frontier(_sup_panel(20000, rng, noise=0.5), 0.5, 0.1) for _ in range(5)]
    assert np.mean(est) > 5
