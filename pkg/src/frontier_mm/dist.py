"""Parametric families for a nonnegative deviation: scaled Beta and zero-truncated normal."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import mpmath
import numpy as np
from scipy import special, stats
from scipy.optimize import brentq


class QuantileError(ArithmeticError):
    pass


def _quantile_by_bisection(cdf, prob, lo, hi):
    if not 0.0 < prob < 1.0:
        raise ValueError(f"probability must be in (0, 1), got {prob}")
    try:
        return brentq(lambda t: cdf(t) - prob, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    except (RuntimeError, ValueError) as exc:
        raise QuantileError(f"quantile search failed for p={prob}: {exc}") from exc


@dataclass(frozen=True)
class ScaledBeta:
    """q * Beta(a, b), supported on [0, q]."""

    a: float
    b: float
    q: float
    family = "scaled_beta"

    def __post_init__(self):
        for name in ("a", "b", "q"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"scaled Beta needs finite {name} > 0, got {v}")

    def mean(self) -> float:
        return self.q * self.a / (self.a + self.b)

    def central_moment(self, k: int) -> float:
        a, b, q = self.a, self.b, self.q
        s = a + b
        if k == 2:
            return q**2 * a * b / (s * s * (s + 1))
        if k == 3:
            return q**3 * 2 * a * b * (b - a) / (s**3 * (s + 1) * (s + 2))
        if k == 4:
            return q**4 * 3 * a * b * (a * b * (s - 6) + 2 * s * s) / (s**4 * (s + 1) * (s + 2) * (s + 3))
        return _central_from_raw(self.raw_moments(k), k)

    def raw_moments(self, J: int) -> list:
        out, m = [], 1.0
        for j in range(J):
            m *= self.q * (self.a + j) / (self.a + self.b + j)
            out.append(m)
        return out

    def cdf(self, t):
        return special.betainc(self.a, self.b, np.clip(np.asarray(t, dtype=float) / self.q, 0.0, 1.0))

    def quantile(self, prob: float) -> float:
        return _quantile_by_bisection(lambda t: float(self.cdf(t)), prob, 0.0, self.q)

    def sample(self, rng, size=None):
        return self.q * rng.beta(self.a, self.b, size)

    def to_dict(self) -> dict:
        return {"family": self.family, "a": self.a, "b": self.b, "q": self.q}


_ALPHA_MP = 3.0  # above this truncation point the float closed forms lose too many digits


def _mills(alpha: float) -> float:
    """phi(alpha) / (1 - Phi(alpha)), stable for either tail."""
    return math.sqrt(2 / math.pi) / special.erfcx(alpha / math.sqrt(2))


def _std_trunc_central(alpha: float):
    """Mean offset and central moments 2..4 of Z | Z > alpha, Z standard normal."""
    if alpha <= _ALPHA_MP:
        lam = _mills(alpha)
        c2 = math.fsum([1.0, alpha * lam, -lam * lam])
        c3 = lam * math.fsum([alpha * alpha, -1.0, -3 * alpha * lam, 2 * lam * lam])
        c4 = math.fsum([3.0, 3 * alpha * lam, alpha**3 * lam, -2 * lam * lam, -4 * alpha**2 * lam**2,
                        6 * alpha * lam**3, -3 * lam**4])
        return lam, c2, c3, c4
    with mpmath.workdps(60):
        al = mpmath.mpf(alpha)
        lam = mpmath.sqrt(2 / mpmath.pi) * mpmath.exp(-al * al / 2) / mpmath.erfc(al / mpmath.sqrt(2))
        c2 = 1 + al * lam - lam**2
        c3 = lam * (al**2 - 1 - 3 * al * lam + 2 * lam**2)
        c4 = 3 + 3 * al * lam + al**3 * lam - 2 * lam**2 - 4 * al**2 * lam**2 + 6 * al * lam**3 - 3 * lam**4
        return float(lam), float(c2), float(c3), float(c4)


@dataclass(frozen=True)
class TruncNormal:
    """N(mu, sigma^2) truncated to [0, inf)."""

    mu: float
    sigma: float
    family = "trunc_normal"

    def __post_init__(self):
        if not (math.isfinite(self.mu) and math.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError(f"truncated normal needs finite mu and sigma > 0, got ({self.mu}, {self.sigma})")

    @property
    def alpha(self) -> float:
        return -self.mu / self.sigma

    def mean(self) -> float:
        return self.mu + self.sigma * _std_trunc_central(self.alpha)[0]

    def central_moment(self, k: int) -> float:
        if k in (2, 3, 4):
            return _std_trunc_central(self.alpha)[k - 1] * self.sigma**k
        return _central_from_raw(self.raw_moments(k), k)

    def raw_moments(self, J: int) -> list:
        m = [1.0, self.mean()]
        for k in range(2, J + 1):
            m.append(self.mu * m[k - 1] + (k - 1) * self.sigma**2 * m[k - 2])
        return m[1:J + 1]

    def cdf(self, t):
        t = np.asarray(t, dtype=float)
        z = (np.maximum(t, 0.0) - self.mu) / self.sigma
        al = self.alpha
        if al > 0:
            out = -np.expm1(special.log_ndtr(-z) - special.log_ndtr(-al))
        else:
            out = np.exp(special.log_ndtr(z)) * -np.expm1(special.log_ndtr(al) - special.log_ndtr(z)) / special.ndtr(-al)
        out = np.clip(out, 0.0, 1.0)
        return np.where(t <= 0, 0.0, out)

    def quantile(self, prob: float) -> float:
        hi = max(self.mu, 0.0) + 40 * self.sigma
        return _quantile_by_bisection(lambda t: float(self.cdf(t)), prob, 0.0, hi)

    def sample(self, rng, size=None):
        return stats.truncnorm.rvs(self.alpha, np.inf, loc=self.mu, scale=self.sigma, size=size, random_state=rng)

    def to_dict(self) -> dict:
        return {"family": self.family, "mu": self.mu, "sigma": self.sigma}


DeviationParams = Union[ScaledBeta, TruncNormal]
FAMILIES = {"scaled_beta": ScaledBeta, "trunc_normal": TruncNormal}


def _central_from_raw(raw, k):
    m = [1.0, *raw]
    mean = m[1]
    return math.fsum(math.comb(k, j) * m[j] * (-mean) ** (k - j) for j in range(k + 1))


def params_from_dict(d: dict) -> DeviationParams:
    d = dict(d)
    fam = d.pop("family")
    if fam not in FAMILIES:
        raise ValueError(f"unknown family {fam!r}; expected one of {sorted(FAMILIES)}")
    return FAMILIES[fam](**{k: float(v) for k, v in d.items()})


def dev_mean(p: DeviationParams) -> float:
    return p.mean()


def dev_central_moment(p: DeviationParams, k: int) -> float:
    return p.central_moment(k)


def dev_cdf(p: DeviationParams, t) -> float:
    return float(p.cdf(t)) if np.ndim(t) == 0 else p.cdf(t)


def dev_quantile(p: DeviationParams, prob: float) -> float:
    return p.quantile(prob)


def dev_sample(p: DeviationParams, rng, size=None):
    return p.sample(rng, size)
