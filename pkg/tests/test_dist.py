import math

import numpy as np
import pytest
from hypothesis import example, given, strategies as st
from scipy import integrate, stats

from frontier_mm.dist import (ScaledBeta, TruncNormal, dev_cdf, dev_central_moment, dev_mean, dev_quantile,
                              dev_sample, params_from_dict)


def tn_quad(p, f):
    # integrate over the region holding the mass, relative to the truncated normalizer
    hi = max(p.mu, 0.0) + 40 * p.sigma
    dens = lambda x: math.exp(-0.5 * ((x - p.mu) / p.sigma) ** 2)
    z = integrate.quad(dens, 0, hi, epsabs=0, epsrel=1e-13, limit=200)[0]
    return integrate.quad(lambda x: f(x) * dens(x), 0, hi, epsabs=0, epsrel=1e-13, limit=200)[0] / z


def test_mean_examples():
    assert dev_mean(ScaledBeta(1, 1, 1)) == 0.5
    assert dev_mean(ScaledBeta(2, 2, 4)) == 2.0
    p = TruncNormal(0, 1)
    assert dev_mean(p) == pytest.approx(math.sqrt(2 / math.pi), rel=1e-14)
    assert dev_mean(p) == pytest.approx(tn_quad(p, lambda x: x), rel=1e-10)


def test_central_moment_examples():
    u = ScaledBeta(1, 1, 1)
    assert dev_central_moment(u, 2) == pytest.approx(1 / 12, rel=1e-15)
    assert dev_central_moment(u, 3) == 0.0
    assert dev_central_moment(u, 4) == pytest.approx(1 / 80, rel=1e-15)
    assert dev_central_moment(ScaledBeta(3.3, 3.3, 7), 3) == 0.0
    assert dev_central_moment(TruncNormal(0, 1), 2) == pytest.approx(1 - 2 / math.pi, rel=1e-14)


def test_four_beta_2_2_fourth_moment():
    # 4 * Beta(2, 2): mu4 = 256 * 3 / 560 = 48 / 35
    assert dev_central_moment(ScaledBeta(2, 2, 4), 4) == pytest.approx(48 / 35, rel=1e-15)
    assert dev_central_moment(ScaledBeta(2, 2, 4), 2) == pytest.approx(0.8, rel=1e-15)


def test_cdf_examples():
    assert dev_cdf(ScaledBeta(0.7, 3, 2.5), 2.5) == 1.0
    assert dev_cdf(ScaledBeta(1, 1, 2), 0.5) == pytest.approx(0.25, rel=1e-15)
    want = (stats.norm.cdf(1) - 0.5) / 0.5
    assert dev_cdf(TruncNormal(0, 1), 1.0) == pytest.approx(want, rel=1e-14)
    assert dev_cdf(TruncNormal(0, 1), 1.0) == pytest.approx(0.68269, abs=1e-5)
    assert dev_cdf(ScaledBeta(2, 3, 1), -1.0) == 0.0 and dev_cdf(TruncNormal(1, 1), -0.1) == 0.0


def test_quantile_examples():
    assert dev_quantile(ScaledBeta(1, 1, 1), 0.5) == pytest.approx(0.5, rel=1e-14)
    assert dev_quantile(TruncNormal(0, 1), 0.68269) == pytest.approx(1.0, abs=1e-4)
    with pytest.raises(ValueError):
        dev_quantile(ScaledBeta(1, 1, 1), 1.0)


def test_tn_far_tail_cdf_accurate():
    # truncation point ten sd above the location: survival ratios must not cancel
    p = TruncNormal(-10, 1)
    want = 1 - stats.norm.sf(10 + 0.05) / stats.norm.sf(10)
    assert dev_cdf(p, 0.05) == pytest.approx(want, rel=1e-12)
    assert p.mean() == pytest.approx(tn_quad(p, lambda x: x), rel=1e-9)


def test_tn_moments_large_location():
    # mu >> sigma: the truncation is irrelevant and the moments are normal ones
    p = TruncNormal(50, 1)
    assert p.mean() == pytest.approx(50, rel=1e-15)
    assert p.central_moment(2) == pytest.approx(1, rel=1e-12)
    assert p.central_moment(4) == pytest.approx(3, rel=1e-12)


def test_sample_examples():
    rng = np.random.default_rng(30)
    u = dev_sample(ScaledBeta(1, 1, 1), rng, 20_000)
    assert stats.kstest(u, "uniform").pvalue > 0.01
    t = dev_sample(TruncNormal(-10, 1), rng, 10_000)
    assert t.min() >= 0 and np.median(t) < 0.1
    b = dev_sample(ScaledBeta(2, 2, 4), rng, 1_000_000)
    assert abs(b.mean() - 2) <= 4 * math.sqrt(0.8 / 1e6)


@pytest.mark.parametrize("p", [ScaledBeta(0.5, 2, 3), TruncNormal(0.5, 2.0), TruncNormal(-1, 0.5)])
def test_sample_mean_matches(p):
    x = dev_sample(p, np.random.default_rng(31), 1_000_000)
    assert abs(x.mean() - p.mean()) <= 4 * math.sqrt(p.central_moment(2) / x.size)


def test_json_encoding_round_trip():
    for p in (ScaledBeta(0.5, 2.0, 3.0), TruncNormal(-1.0, 0.5)):
        assert params_from_dict(p.to_dict()) == p
    with pytest.raises(ValueError):
        params_from_dict({"family": "exponential", "rate": 1})


def test_invalid_params():
    with pytest.raises(ValueError):
        ScaledBeta(0, 1, 1)
    with pytest.raises(ValueError):
        TruncNormal(0, 0)
    with pytest.raises(ValueError):
        ScaledBeta(1, 1, math.inf)


pos = st.floats(0.2, 20)


@given(pos, pos, pos, st.floats(0.01, 100))
def test_beta_scale_equivariance(a, b, q, s):
    p, ps = ScaledBeta(a, b, q), ScaledBeta(a, b, q * s)
    assert ps.mean() == pytest.approx(s * p.mean(), rel=1e-13)
    for k in (2, 3, 4):
        assert ps.central_moment(k) == pytest.approx(s**k * p.central_moment(k), rel=1e-12, abs=1e-300)
    for frac in (0.1, 0.5, 0.9):
        assert float(ps.cdf(frac * q * s)) == pytest.approx(float(p.cdf(frac * q)), rel=1e-12, abs=1e-300)


@given(pos, pos, st.floats(0.02, 0.98))
@example(1.0, 13.0, 0.875)
def test_beta_quantile_inverts_cdf(a, b, frac):
    p = ScaledBeta(a, b, 2.0)
    t = frac * p.q
    prob = float(p.cdf(t))
    if 1e-12 < prob < 1 - 1e-12:
        # rounding prob to a double moves the exact inverse by about eps / density
        dens = stats.beta.pdf(frac, a, b) / p.q
        slack = 4 * np.finfo(float).eps * max(prob, 1 - prob) / dens
        assert abs(p.quantile(prob) - t) <= 1e-8 * t + slack


@given(st.floats(-3, 3), st.floats(0.1, 10), st.floats(0.01, 0.99))
def test_tn_cdf_quantile_identity(r, s, prob):
    p = TruncNormal(r * s, s)
    assert float(p.cdf(p.quantile(prob))) == pytest.approx(prob, abs=1e-10)


@given(st.floats(-3, 3), st.floats(0.1, 10), st.floats(0, 5), st.floats(0, 5))
def test_cdf_monotone(r, s, t1, t2):
    p = TruncNormal(r * s, s)
    lo, hi = sorted((t1 * s, t2 * s))
    assert float(p.cdf(lo)) <= float(p.cdf(hi))


def test_translation_changes_cdf_not_moments():
    # a shifted copy of q * Beta(a, b) shares its central moments but not its mass near zero
    p = ScaledBeta(3, 2, 2)
    alpha = 0.4
    x = np.linspace(0, 1, 200_001)
    w = x**2 * (1 - x)  # Beta(3, 2) kernel on a grid
    w /= w.sum()
    grid = p.q * x + alpha
    mean = float(w @ grid)
    for k in (2, 3, 4):
        assert float(w @ (grid - mean) ** k) == pytest.approx(p.central_moment(k), rel=1e-4)
    t = 0.5 * math.sqrt(p.central_moment(2))
    assert float(w[grid <= t].sum()) == 0.0 < float(p.cdf(t))
