"""Method-of-moments fit of the deviation distribution under a near-frontier mass constraint.

The fitted family must reproduce the estimated central moments of u while
placing at least m0 / n_eff probability within c * sigma_u of zero. Given the
fit, the frontier at x is the conditional mean plus the implied mean deviation.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import special
from scipy.optimize import brentq, minimize
from scipy.stats import qmc

from . import bounds
from .dist import ScaledBeta, TruncNormal, _std_trunc_central

BIND_TOL = 1e-6
TIE_RTOL = 1e-9


class InfeasibleFitError(RuntimeError):
    def __init__(self, msg, best=None):
        super().__init__(msg)
        self.best = best


@dataclass(frozen=True)
class FitConfig:
    family: str = "scaled_beta"
    m0: float = 1.0
    c: float = math.inf  # inf gives the unconstrained estimator
    h: float | None = None  # kernel bandwidth; None picks a Scott-type rule
    multistarts: int = 8
    max_iter: int = 4000
    tol: float = 1e-14  # on the objective divided by the sum of squared target moments
    penalty: float = 1e3
    seed: int = 0

    def __post_init__(self):
        if self.family not in ("scaled_beta", "trunc_normal"):
            raise ValueError(f"unknown family {self.family!r}")
        if not self.m0 > 0:
            raise ValueError(f"m0 must be positive, got {self.m0}")
        if not self.c > 0:
            raise ValueError(f"c must be positive or inf, got {self.c}")
        if self.h is not None and not self.h > 0:
            raise ValueError(f"bandwidth must be positive, got {self.h}")
        if self.multistarts < 1:
            raise ValueError("need at least one start")

    @property
    def constrained(self) -> bool:
        return math.isfinite(self.c)

    def to_dict(self) -> dict:
        return {"family": self.family, "m0": self.m0, "c": "inf" if math.isinf(self.c) else self.c,
                "h": self.h, "multistarts": self.multistarts, "max_iter": self.max_iter,
                "tol": self.tol, "penalty": self.penalty, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        d = dict(d)
        if "c" in d:
            d["c"] = math.inf if str(d["c"]).lower() in ("inf", "infinity", "none") else float(d["c"])
        return cls(**d)


# ---------------------------------------------------------------- kernel weights

@dataclass
class KernelWeights:
    index: int
    weights: np.ndarray
    n_eff: float


def default_bandwidth(points) -> float:
    """Scott-type rule: average coordinate sd times n^(-1/(d+4)); inf when there is no spread."""
    pts = _as_points(points)
    n, d = pts.shape
    sd = float(np.mean(np.std(pts, axis=0, ddof=1))) if n > 1 else 0.0
    if not sd > 0:
        return math.inf
    return sd * n ** (-1.0 / (d + 4))


def _as_points(points):
    pts = np.asarray(points, dtype=float)
    return pts[:, None] if pts.ndim == 1 else pts


def effective_sample_size(points, i: int, h: float, kernel: str = "gaussian") -> KernelWeights:
    """Normalized kernel weights around point i and the Kish effective sample size."""
    pts = _as_points(points)
    n = pts.shape[0]
    if n < 1:
        raise ValueError("need at least one point")
    if not h > 0:
        raise ValueError(f"bandwidth must be positive, got {h}")
    if math.isinf(h):
        w = np.full(n, 1.0 / n)
        return KernelWeights(i, w, n_eff_from_weights(w))
    dist = np.sqrt(np.sum((pts - pts[i]) ** 2, axis=1)) / h
    if kernel == "gaussian":
        k = np.exp(-0.5 * dist**2)
    elif kernel == "epanechnikov":
        k = np.maximum(0.0, 1 - dist**2)
    else:
        raise ValueError(f"unknown kernel {kernel!r}")
    total = math.fsum(k)
    if not total > 0:
        warnings.warn(f"kernel row {i} is numerically zero; using self-weight", RuntimeWarning, stacklevel=2)
        k = np.zeros(n)
        k[i] = 1.0
        total = 1.0
    w = k / total
    return KernelWeights(i, w, n_eff_from_weights(w))


def n_eff_from_weights(w) -> float:
    w = np.asarray(w, dtype=float)
    w = w / math.fsum(w)
    return 1.0 / math.fsum(w * w)


def effective_sample_sizes(points, h: float | None = None, kernel: str = "gaussian") -> np.ndarray:
    pts = _as_points(points)
    if h is None:
        h = default_bandwidth(pts)
    return np.array([effective_sample_size(pts, i, h, kernel).n_eff for i in range(pts.shape[0])])


def required_mass(m0: float, n_eff: float) -> float:
    return m0 / n_eff


# ---------------------------------------------------------------- families

class _BetaAdapter:
    """Scaled Beta over z = (log a, log b, log q)."""

    dim = 3
    lo = np.array([-7.0, -7.0, -np.inf])
    hi = np.array([12.0, 12.0, np.inf])

    def __init__(self, sigma):
        self.lo = self.lo.copy()
        self.hi = self.hi.copy()
        self.lo[2] = math.log(sigma) - 8
        self.hi[2] = math.log(sigma) + 30

    @staticmethod
    def params(z):
        a, b, q = np.exp(z)
        return ScaledBeta(float(a), float(b), float(q))

    @staticmethod
    def moments(z):
        a, b, q = (math.exp(v) for v in z)
        s = a + b
        m2 = q * q * a * b / (s * s * (s + 1))
        m3 = q**3 * 2 * a * b * (b - a) / (s**3 * (s + 1) * (s + 2))
        m4 = q**4 * 3 * a * b * (a * b * (s - 6) + 2 * s * s) / (s**4 * (s + 1) * (s + 2) * (s + 3))
        return m2, m3, m4

    @staticmethod
    def mass(z, t):
        a, b, q = (math.exp(v) for v in z)
        return float(special.betainc(a, b, min(1.0, t / q)))

    def heuristic(self, mu):
        """Four-parameter Beta moment match; the location is then dropped."""
        m2, m3, m4 = mu
        sd = math.sqrt(m2)
        g, k = m3 / sd**3, m4 / m2**2
        den = 6 + 3 * g * g - 2 * k
        nu = 6 * (k - g * g - 1) / den if den > 0 else -1.0
        if nu > 0:
            if abs(g) > 1e-12:
                r = 1 / math.sqrt(1 + 16 * (nu + 1) / ((nu + 2) ** 2 * g * g))
            else:
                r = 0.0
            a, b = nu / 2 * (1 - r), nu / 2 * (1 + r)
            if g < 0:
                a, b = b, a
            a, b = max(a, 1e-3), max(b, 1e-3)
        else:
            a, b = (0.5, 2.0) if g > 0 else (2.0, 0.5)
        s = a + b
        q = sd * s * math.sqrt(s + 1) / math.sqrt(a * b)
        return np.clip(np.log([a, b, q]), self.lo + 1e-9, self.hi - 1e-9)

    # boundary reduction: given (log a, log b), q puts mass exactly `req` below t
    reduced_dim = 2

    def on_boundary(self, r, t, req):
        a, b = math.exp(r[0]), math.exp(r[1])
        x = float(special.betaincinv(a, b, req))
        if not x > 0:
            return None
        lq = math.log(t / x)
        if not self.lo[2] <= lq <= self.hi[2]:
            return None
        return np.array([r[0], r[1], lq])

    @staticmethod
    def reduce(z):
        return np.asarray(z[:2], dtype=float)

    def reduced_bounds(self):
        return list(zip(self.lo[:2], self.hi[:2]))


class _TruncNormalAdapter:
    """Truncated normal over z = (mu / sigma_hat, log sigma)."""

    dim = 2

    def __init__(self, sigma):
        self.s = sigma
        self.lo = np.array([-60.0, math.log(sigma) - 8])
        self.hi = np.array([60.0, math.log(sigma) + 12])

    def params(self, z):
        return TruncNormal(float(z[0] * self.s), float(math.exp(z[1])))

    def moments(self, z):
        sig = math.exp(z[1])
        _, c2, c3, c4 = _std_trunc_central(-z[0] * self.s / sig)
        return c2 * sig**2, c3 * sig**3, c4 * sig**4

    def mass(self, z, t):
        return float(self.params(z).cdf(t))

    def heuristic(self, mu):
        m2, m3, _ = mu
        g = m3 / m2**1.5

        def skew(al):
            _, c2, c3, _ = _std_trunc_central(al)
            return c3 / c2**1.5

        if g <= skew(-6.0):
            al = -6.0
        elif g >= skew(8.0):
            al = 8.0
        else:
            al = brentq(lambda v: skew(v) - g, -6.0, 8.0, xtol=1e-10)
        sig = math.sqrt(m2 / _std_trunc_central(al)[1])
        return np.clip(np.array([-al * sig / self.s, math.log(sig)]), self.lo + 1e-9, self.hi - 1e-9)

    reduced_dim = 1

    def on_boundary(self, r, t, req):
        sig = math.exp(r[0])
        f = lambda m: TruncNormal(m, sig).cdf(t) - req
        lo, hi = t - 10 * sig, t + 10 * sig
        for _ in range(60):
            if f(lo) > 0:
                break
            lo -= 10 * sig + abs(lo)
        for _ in range(60):
            if f(hi) < 0:
                break
            hi += 10 * sig + abs(hi)
        try:
            m = brentq(f, lo, hi, xtol=1e-14 * max(1.0, abs(hi)), rtol=1e-15)
        except ValueError:
            return None
        return np.array([m / self.s, r[0]])

    @staticmethod
    def reduce(z):
        return np.asarray(z[1:], dtype=float)

    def reduced_bounds(self):
        return [(self.lo[1], self.hi[1])]


_ADAPTERS = {"scaled_beta": _BetaAdapter, "trunc_normal": _TruncNormalAdapter}


# ---------------------------------------------------------------- fitting

@dataclass
class FitResult:
    params: object
    objective: float
    constraint_mass: float
    required_mass: float
    bind: bool
    implied_mean: float
    starts_tried: int
    converged: bool
    moments_used: tuple = ()
    flags: list = field(default_factory=list)
    hankel_feasible: bool | None = None
    near_optima: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "objective": self.objective,
            "constraint_mass": self.constraint_mass,
            "required_mass": self.required_mass,
            "bind": self.bind,
            "implied_mean": self.implied_mean,
            "starts_tried": self.starts_tried,
            "converged": self.converged,
            "moments_used": list(self.moments_used),
            "flags": list(self.flags),
            "hankel_feasible": self.hankel_feasible,
            "near_optima": self.near_optima,
        }


def floor_moments(muhat, scale_ref: float | None = None):
    """Floor a nonpositive variance and a fourth moment below mu2^2; returns (moments, flags)."""
    m2, m3, m4 = (float(v) for v in muhat)
    flags = []
    if not m2 > 0:
        ref = scale_ref if scale_ref and scale_ref > 0 else max(abs(m3) ** (2 / 3), math.sqrt(abs(m4)), 1.0)
        m2 = 1e-8 * ref
        flags.append("mu2_floored")
    if m4 < m2 * m2:
        m4 = m2 * m2
        flags.append("mu4_floored")
    return (m2, m3, m4), flags


def fit_deviation_distribution(muhat, n_eff: float, cfg: FitConfig = FitConfig(), *,
                               scale_ref: float | None = None, stream=0) -> FitResult:
    """Best-of-multistart moment match subject to F(c sigma_hat) >= m0 / n_eff.

    sigma_hat = sqrt(mu2_hat) stays fixed, so the constraint region does not
    move with the model's own variance. When the unconstrained optimum is
    infeasible the search continues on the constraint boundary, where the
    scale (or location) is pinned so that the mass is exactly the requirement.
    """
    mu, flags = floor_moments(muhat, scale_ref)
    m2, m3, m4 = mu
    sigma = math.sqrt(m2)
    req = required_mass(cfg.m0, n_eff)
    t = cfg.c * sigma
    ad = _ADAPTERS[cfg.family](sigma)
    # one common divisor keeps the optimizer's tolerances scale-free without reweighting the terms
    norm = math.fsum(v * v for v in mu)

    def obj(z):
        try:
            mod = ad.moments(z)
            return math.fsum((mu[k] - mod[k]) ** 2 for k in range(3)) / norm
        except OverflowError:
            return 1e300

    def raw_obj(z):
        mod = ad.moments(z)
        return math.fsum((mu[k] - mod[k]) ** 2 for k in range(3))

    try:
        hk = bounds.hankel_feasibility(bounds.central_to_raw(max(0.0, bounds.skewness_lower_bound(m2, m3)), list(mu)))
        hankel_ok = hk.feasible
    except bounds.DomainError:
        hankel_ok = None
    if hankel_ok is False:
        flags.append("hankel_precheck_failed")

    rng = np.random.default_rng([int(cfg.seed), int(stream)] if np.ndim(stream) == 0 else [int(cfg.seed), *stream])
    x0 = ad.heuristic(mu)
    starts = [x0]
    if cfg.multistarts > 1:
        lhs = qmc.LatinHypercube(d=ad.dim, seed=rng).random(cfg.multistarts - 1)
        for row in lhs:
            starts.append(np.clip(x0 + 3.0 * (row - 0.5), ad.lo + 1e-9, ad.hi - 1e-9))
    box = list(zip(ad.lo, ad.hi))
    opts = {"maxiter": cfg.max_iter, "maxfev": 2 * cfg.max_iter, "xatol": 1e-10, "fatol": cfg.tol}

    def run(f, z0, bnds):
        r = minimize(f, z0, method="Nelder-Mead", bounds=bnds, options=opts)
        # one restart shakes a collapsed simplex loose
        r2 = minimize(f, r.x, method="Nelder-Mead", bounds=bnds, options=opts)
        return r2 if r2.fun <= r.fun else r, bool(r.success or r2.success)

    cands = []  # (scaled objective, z, converged, source)
    converged = False
    for z0 in starts:
        r, ok = run(obj, z0, box)
        converged |= ok
        cands.append((float(r.fun), r.x, ok, "interior"))

    if cfg.constrained:
        feasible = [cd for cd in cands if ad.mass(cd[1], t) >= req]
        best_u = min(cands, key=lambda cd: cd[0])
        if not feasible or min(feasible, key=lambda cd: cd[0])[0] > best_u[0] * (1 + TIE_RTOL) + 1e-300:
            # exact-penalty pass, projected onto the boundary as extra seeds
            pen = lambda z: obj(z) + cfg.penalty * max(0.0, req - ad.mass(z, t)) / req
            seeds = []
            for z0 in starts:
                r, _ = run(pen, z0, box)
                seeds.append(ad.reduce(r.x))
            seeds += [ad.reduce(cd[1]) for cd in cands]
            rbox = ad.reduced_bounds()

            def bobj(r):
                z = ad.on_boundary(r, t, req)
                return 1e300 if z is None else obj(z)

            for r0 in seeds:
                r0 = np.clip(r0, [b[0] + 1e-9 for b in rbox], [b[1] - 1e-9 for b in rbox])
                rr, ok = run(bobj, r0, rbox)
                z = ad.on_boundary(rr.x, t, req)
                if z is not None:
                    converged |= ok
                    cands.append((float(rr.fun), z, ok, "boundary"))
        cands = [cd for cd in cands if ad.mass(cd[1], t) >= req * (1 - 1e-10) - 1e-12]
        if not cands:
            raise InfeasibleFitError("no start reached the feasible set", best=min(feasible or [best_u], key=lambda cd: cd[0]))

    fbest = min(cd[0] for cd in cands)
    near = [cd for cd in cands if cd[0] <= fbest * (1 + TIE_RTOL) + 1e-300]
    chosen = min(near, key=lambda cd: (ad.params(cd[1]).mean(), cd[0]))
    z = chosen[1]
    p = ad.params(z)
    mass = ad.mass(z, t) if cfg.constrained else 1.0
    return FitResult(
        params=p,
        objective=raw_obj(z),
        constraint_mass=mass,
        required_mass=req,
        bind=bool(cfg.constrained and abs(mass - req) <= BIND_TOL),
        implied_mean=p.mean(),
        starts_tried=len(starts),
        converged=converged,
        moments_used=mu,
        flags=flags,
        hankel_feasible=hankel_ok,
        near_optima=[{"params": ad.params(cd[1]).to_dict(), "source": cd[3]} for cd in near],
    )


def fit_many(triples, n_eff, cfg: FitConfig, *, scale_ref=None, jobs: int = 1):
    """Fit every row of `triples`; identical (triple, n_eff) rows share one fit.

    Each distinct problem is seeded by the index of its first occurrence, so
    results do not depend on the number of workers.
    """
    triples = np.asarray(triples, dtype=float)
    n_eff = np.broadcast_to(np.asarray(n_eff, dtype=float), (len(triples),))
    keys, first, owner = {}, [], []
    for i, (tr, ne) in enumerate(zip(triples, n_eff)):
        key = (*map(float, tr), float(ne))
        if key not in keys:
            keys[key] = len(first)
            first.append(i)
        owner.append(keys[key])
    tasks = [(tuple(triples[i]), float(n_eff[i]), cfg, scale_ref, i) for i in first]
    if jobs > 1 and len(tasks) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            fits = list(ex.map(_fit_task, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        fits = [_fit_task(tk) for tk in tasks]
    return [fits[o] for o in owner]


def _fit_task(task):
    tr, ne, cfg, scale_ref, stream = task
    try:
        return fit_deviation_distribution(tr, ne, cfg, scale_ref=scale_ref, stream=stream)
    except InfeasibleFitError as exc:
        return exc


# ---------------------------------------------------------------- frontier

@dataclass
class FrontierEstimate:
    firm_ids: tuple  # per observation
    g_hat: np.ndarray
    mean_prediction: np.ndarray
    mean_deviation: np.ndarray  # per observation, from the firm's fit
    cond_sup: float | None = None


def frontier_estimate(mean_prediction, mean_deviation, firm_index=None, firm_ids=None, cond_sup=None) -> FrontierEstimate:
    """g_hat = E[y | x] + E[u | x], pointwise.

    `mean_deviation` is per firm when `firm_index` maps observations to firms,
    otherwise per observation.
    """
    pred = np.asarray(mean_prediction, dtype=float)
    dev = np.asarray(mean_deviation, dtype=float)
    if firm_index is not None:
        dev = dev[np.asarray(firm_index)]
    dev = np.broadcast_to(dev, pred.shape).astype(float)
    ids = tuple(firm_ids) if firm_ids is not None else tuple(range(len(pred)))
    return FrontierEstimate(ids, pred + dev, pred, dev, cond_sup)


def conditional_sup_frontier(data, x0, radius: float) -> float:
    """Largest outcome among observations within `radius` of x0; meaningful only without noise."""
    x, y, _ = data.stacked()
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    d = np.sqrt(np.sum((x - x0) ** 2, axis=1))
    inside = d <= radius
    if not inside.any():
        raise bounds.DomainError(f"no observations within {radius} of {x0.tolist()}")
    return float(np.max(y[inside]))
