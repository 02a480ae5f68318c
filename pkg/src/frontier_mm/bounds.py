"""Stieltjes feasibility of moment sequences and moment-based lower bounds on a mean.

A sequence of raw moments m_1, m_2, ... belongs to some distribution on
[0, inf) iff the primary Hankel determinants (entries m_{i+j}, m_0 = 1) and
the shifted ones (entries m_{i+j+1}) are all nonnegative. Written in terms
of the mean t and central moments, the shifted determinants are polynomials
in t, which bound the mean from below.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq


class DomainError(ValueError):
    pass


def raw_to_central(m):
    """Raw moments m_1..m_J -> (mean, [mu_2..mu_J])."""
    m = [float(v) for v in m]
    if len(m) < 2:
        raise DomainError("need at least two raw moments")
    mean = m[0]
    full = [1.0, *m]
    central = []
    for k in range(2, len(full)):
        central.append(math.fsum(math.comb(k, j) * full[j] * (-mean) ** (k - j) for j in range(k + 1)))
    return mean, central


def central_to_raw(mean, central):
    """(mean, [mu_2..mu_J]) -> raw moments m_1..m_J."""
    mu = [1.0, 0.0, *[float(v) for v in central]]
    raw = []
    for k in range(1, len(mu)):
        raw.append(math.fsum(math.comb(k, j) * mu[j] * mean ** (k - j) for j in range(k + 1)))
    return raw


@dataclass
class HankelResult:
    primary_dets: list  # det Delta_n^(0), n = 1, 2, ...
    shifted_dets: list  # det Delta_n^(1), n = 1, 2, ...
    feasible: bool
    scale: float = 1.0  # u was divided by this before evaluation
    failing: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"primary_dets": self.primary_dets, "shifted_dets": self.shifted_dets,
                "feasible": self.feasible, "scale": self.scale, "failing": self.failing}


def _det_and_tol(H, rel_tol):
    det = float(np.linalg.det(H)) if H.shape[0] > 1 else float(H[0, 0])
    tol = rel_tol * float(np.prod(np.abs(np.diag(H))))
    return det, tol


def hankel_feasibility(m, order: int | None = None, max_order: int = 4, rel_tol: float = 1e-10) -> HankelResult:
    """Primary and shifted Hankel determinants for every order the moments allow.

    With `order` given, moments through m_{2 order - 1} are required. Moments
    are standardized to unit variance before evaluation; determinants are
    reported on the original scale. A determinant counts as negative only
    below -rel_tol times the product of the diagonal magnitudes.
    """
    m = [float(v) for v in m]
    J = len(m)
    if order is not None:
        if J < 2 * order - 1:
            raise DomainError(f"Hankel order {order} needs moments up to m_{2 * order - 1}, got m_1..m_{J}")
        max_order = order
    if J < 1:
        raise DomainError("need at least one raw moment")
    var = m[1] - m[0] ** 2 if J >= 2 else 0.0
    scale = math.sqrt(var) if var > 0 else (abs(m[0]) if m[0] != 0 else 1.0)
    s = [1.0] + [v / scale ** (j + 1) for j, v in enumerate(m)]  # s[j] = standardized m_j

    primary, shifted, failing = [], [], []
    feasible = True
    for n in range(1, max_order + 1):
        if 2 * n - 2 <= J:
            H = np.array([[s[i + j] for j in range(n)] for i in range(n)])
            d, tol = _det_and_tol(H, rel_tol)
            primary.append(d * scale ** (n * (n - 1)))
            if d < -tol:
                feasible = False
                failing.append(f"primary_{n}")
        if 2 * n - 1 <= J:
            H = np.array([[s[i + j + 1] for j in range(n)] for i in range(n)])
            d, tol = _det_and_tol(H, rel_tol)
            shifted.append(d * scale ** (n * n))
            if d < -tol:
                feasible = False
                failing.append(f"shifted_{n}")
    # with m_1 = 0 the order-2 shifted determinant is -m_2^2 whatever m_3 is
    if J == 2 and s[1] == 0.0 and s[2] > 0:
        shifted.append(-m[1] ** 2)
        feasible = False
        failing.append("shifted_2")
    return HankelResult(primary, shifted, feasible, scale, failing)


def skewness_lower_bound(mu2: float, mu3: float) -> float:
    """Larger root of mu2 t^2 + mu3 t - mu2^2 = 0, a lower bound on the mean of u >= 0."""
    if not mu2 > 0:
        raise DomainError(f"second central moment must be positive, got {mu2}")
    root = math.sqrt(mu3 * mu3 + 4 * mu2**3)
    if mu3 > 0:
        # same root, rewritten to avoid cancellation
        return 2 * mu2 * mu2 / (mu3 + root)
    return (root - mu3) / (2 * mu2)


def kurtosis_lower_bound(mu2: float, mu3: float, mu4: float, mu5: float):
    """sqrt(mu4 / mu2) when both odd central moments are nonpositive, else None."""
    if not mu2 > 0:
        raise DomainError(f"second central moment must be positive, got {mu2}")
    if mu4 < 0:
        raise DomainError(f"fourth central moment must be nonnegative, got {mu4}")
    if mu3 <= 0 and mu5 <= 0:
        return math.sqrt(mu4 / mu2)
    return None


def cubic_coefficients(mu2, mu3, mu4, mu5):
    """Coefficients (t^3, t^2, t, 1) of det Delta_3^(1) written in the mean t."""
    return (
        mu2 * mu4 - mu2**3 - mu3**2,
        mu2 * mu5 - mu2**2 * mu3 - mu3 * mu4,
        mu3 * mu5 - mu4**2 - mu2 * mu3**2 + mu2**2 * mu4,
        2 * mu2 * mu3 * mu4 - mu3**3 - mu2**2 * mu5,
    )


def cubic_value(mu2, mu3, mu4, mu5, t):
    c3, c2, c1, c0 = cubic_coefficients(mu2, mu3, mu4, mu5)
    return ((c3 * t + c2) * t + c1) * t + c0


def cubic_mean_feasible(mu2, mu3, mu4, mu5, t, rel_tol: float = 1e-10) -> bool:
    """Whether mean t is compatible with the order-3 shifted determinant."""
    if not mu2 > 0:
        raise DomainError(f"second central moment must be positive, got {mu2}")
    scale = max(abs(c) * max(abs(t), math.sqrt(mu2)) ** (3 - i)
                for i, c in enumerate(cubic_coefficients(mu2, mu3, mu4, mu5)))
    return cubic_value(mu2, mu3, mu4, mu5, t) >= -rel_tol * scale


@dataclass
class CubicScan:
    bound: float | None
    start: float
    diagnostics: str = ""
    upper: float = math.inf  # end of the feasible stretch that starts at `bound`


def cubic_lower_bound(mu2, mu3, mu4, mu5, grid_ratio: float = 1.25, max_steps: int = 400) -> CubicScan:
    """Smallest t >= max(0, skewness bound) satisfying the cubic inequality.

    Scans a geometric grid upward from the skewness bound and bisects the
    first bracket where the cubic turns nonnegative.
    """
    start = max(0.0, skewness_lower_bound(mu2, mu3))
    f = lambda t: cubic_value(mu2, mu3, mu4, mu5, t)
    if cubic_mean_feasible(mu2, mu3, mu4, mu5, start):
        scan = CubicScan(start, start, "feasible at the skewness bound")
    else:
        scan = None
        lo = start
        step = max(start, math.sqrt(mu2)) * (grid_ratio - 1)
        for _ in range(max_steps):
            hi = lo + step
            if f(hi) >= 0:
                scan = CubicScan(brentq(f, lo, hi, xtol=1e-15 * max(hi, 1.0)), start, "bracketed")
                break
            lo, step = hi, step * grid_ratio
        if scan is None:
            return CubicScan(None, start, f"no sign change up to t = {lo:.6g}")
    # a cubic has at most one more sign change past the first feasible point
    roots = np.roots(cubic_coefficients(mu2, mu3, mu4, mu5))
    later = sorted(r.real for r in roots if abs(r.imag) <= 1e-9 * max(1.0, abs(r)) and r.real > scan.bound * (1 + 1e-9) + 1e-300)
    for r in later:
        mid = 0.5 * (scan.bound + r)
        if not cubic_mean_feasible(mu2, mu3, mu4, mu5, mid):
            break
        if not cubic_mean_feasible(mu2, mu3, mu4, mu5, r * 1.0001 + 1e-12):
            scan.upper = r
            break
    return scan


@dataclass
class BoundReport:
    sigma: float
    gamma: float
    kappa: float | None
    lb_skew: float
    lb_kurt: float | None = None
    cubic_interval: tuple | None = None  # (lower, upper) feasible means from the order-3 determinant
    cubic_diagnostics: str = ""
    hankel: HankelResult | None = None

    def to_dict(self) -> dict:
        d = {"sigma": self.sigma, "gamma": self.gamma, "kappa": self.kappa, "lb_skew": self.lb_skew,
             "lb_kurt": self.lb_kurt, "cubic_interval": None if self.cubic_interval is None else list(self.cubic_interval),
              "cubic_diagnostics": self.cubic_diagnostics}
        if self.hankel is not None:
            d["hankel"] = self.hankel.to_dict()
        return d


def bound_report(mu2, mu3, mu4=None, mu5=None, mean=None) -> BoundReport:
    """Collect every bound the supplied central moments allow.

    If a mean is given, the implied raw moments are screened for Stieltjes
    feasibility; otherwise the tightest available lower bound stands in as a
    provisional mean.
    """
    lb = skewness_lower_bound(mu2, mu3)
    sigma = math.sqrt(mu2)
    rep = BoundReport(sigma, mu3 / sigma**3, None if mu4 is None else mu4 / mu2**2, lb)
    if mu4 is not None and mu5 is not None:
        rep.lb_kurt = kurtosis_lower_bound(mu2, mu3, mu4, mu5)
        scan = cubic_lower_bound(mu2, mu3, mu4, mu5)
        rep.cubic_diagnostics = scan.diagnostics
        if scan.bound is not None:
            rep.cubic_interval = (scan.bound, scan.upper)
    central = [mu2, mu3]
    if mu4 is not None:
        central.append(mu4)
        if mu5 is not None:
            central.append(mu5)
    if mean is None:
        mean = max(v for v in (lb, rep.lb_kurt, rep.cubic_interval and rep.cubic_interval[0]) if v is not None)
    rep.hankel = hankel_feasibility(central_to_raw(mean, central))
    return rep
