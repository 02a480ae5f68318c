"""Central moments of the error v and deviation u from within/between residuals.

Within residuals depend on v only, so their moments identify the error moments;
between residuals mix u with the averaged error, whose contribution is then
subtracted. Estimators come in three flavours: per firm, smoothed over the
conditioning covariate, and pooled across firms.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .residualize import BasisSpec, Basis, ResidualDecomposition, ridge_solve, segment_fsum


class DomainError(ValueError):
    pass


class SequencingError(RuntimeError):
    """Fourth adjusted power requested before the second moment of u was smoothed."""


class DegeneratePanelError(ValueError):
    pass


# ---------------------------------------------------------------------------
# population identities

def within_identities(mu_v, T):
    """Central moments (2, 3, 4) of a within residual given those of v."""
    mu2, mu3, mu4 = mu_v
    if T < 2:
        raise DomainError(f"within identities need T >= 2, got {T}")
    w2 = (T - 1) / T * mu2
    w3 = (T - 1) * (T - 2) / T**2 * mu3
    w4 = (T - 1) * (T * T - 3 * T + 3) / T**3 * mu4 + 3 * (T - 1) * (2 * T - 3) / T**3 * mu2**2
    return w2, w3, w4


def invert_within_identities(mu_w, T):
    """Inverse of `within_identities`. The third moment is not identified at T = 2 (nan)."""
    w2, w3, w4 = mu_w
    if T < 2:
        raise DomainError(f"within identities need T >= 2, got {T}")
    mu2 = T / (T - 1) * w2
    mu3 = T**2 / ((T - 1) * (T - 2)) * w3 if T > 2 else float("nan")
    mu4 = (w4 - 3 * (T - 1) * (2 * T - 3) / T**3 * mu2**2) * T**3 / ((T - 1) * (T * T - 3 * T + 3))
    return mu2, mu3, mu4


def between_identities(mu_u, mu_v, T, mu2_v_squared=None):
    """Central moments (2, 3, 4) of a between residual. Note the sign flip on the third."""
    if T < 1:
        raise DomainError(f"between identities need T >= 1, got {T}")
    u2, u3, u4 = mu_u
    v2, v3, v4 = mu_v
    vsq = v2**2 if mu2_v_squared is None else mu2_v_squared
    b2 = u2 + v2 / T
    b3 = -u3 + v3 / T**2
    b4 = u4 + 6 * u2 * v2 / T + v4 / T**3 + 3 * (T - 1) / T**3 * vsq
    return b2, b3, b4


def invert_between_identities(mu_ebar, mu_v, T, mu2_v_squared=None):
    b2, b3, b4 = mu_ebar
    v2, v3, v4 = mu_v
    vsq = v2**2 if mu2_v_squared is None else mu2_v_squared
    u2 = b2 - v2 / T
    u3 = -(b3 - v3 / T**2)
    u4 = b4 - 6 * u2 * v2 / T - v4 / T**3 - 3 * (T - 1) / T**3 * vsq
    return u2, u3, u4


# ---------------------------------------------------------------------------
# per-firm error moments

@dataclass(frozen=True)
class ErrorMomentsPerFirm:
    T: int
    mu2_v: float | None
    mu3_v: float | None = None
    mu4_v: float | None = None
    mu2_v_squared: float | None = None  # unbiased for (mu2_v)^2, not the square of mu2_v

    @property
    def flags(self):
        return {"mu2_v": self.T >= 2, "mu3_v": self.T >= 3, "mu4_v": self.T >= 4, "mu2_v_squared": self.T >= 4}


def _per_firm(s2, s3, s4, pairs, T):
    """Vectorised per-firm estimators from within power sums; nan where T is too small."""
    T = np.asarray(T, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        mu2 = np.where(T >= 2, s2 / (T - 1), np.nan)
        mu3 = np.where(T >= 3, T * s3 / ((T - 1) * (T - 2)), np.nan)
        den = T * (T - 1) * (T - 2) * (T - 3)
        mu4 = np.where(T >= 4, ((T**3 - 2 * T**2 - 3 * T + 9) * s4 - 6 * (2 * T - 3) * pairs) / den, np.nan)
        vsq = np.where(T >= 4, (2 * (T * T - 3 * T + 3) * pairs - (2 * T - 3) * s4) / den, np.nan)
    return mu2, mu3, mu4, vsq


def error_moments_per_firm(within, T=None) -> ErrorMomentsPerFirm:
    """Unbiased estimators of v's central moments from one firm's within residuals."""
    w = np.asarray(within, dtype=float)
    T = w.size if T is None else int(T)
    if T != w.size:
        raise ValueError("T does not match the number of within residuals")
    a = (w * w).tolist()
    s2 = math.fsum(a)
    s3 = math.fsum((w**3).tolist())
    s4 = math.fsum([v * v for v in a])
    pairs = (s2 * s2 - s4) / 2
    mu2, mu3, mu4, vsq = (float(v) for v in _per_firm(s2, s3, s4, pairs, T))

    def keep(v, ok):
        return v if ok else None

    return ErrorMomentsPerFirm(T, keep(mu2, T >= 2), keep(mu3, T >= 3), keep(mu4, T >= 4), keep(vsq, T >= 4))


def within_power_sums(decomp: ResidualDecomposition):
    """Per-firm sums of within residual powers 2..4 and the pair sum of squares."""
    w = decomp.within
    a = w * w
    s2 = segment_fsum(a, decomp.offsets)
    s3 = segment_fsum(a * w, decomp.offsets)
    s4 = segment_fsum(a * a, decomp.offsets)
    pairs = (s2 * s2 - s4) / 2
    return s2, s3, s4, pairs


def error_moments_all(decomp: ResidualDecomposition) -> dict:
    s2, s3, s4, pairs = within_power_sums(decomp)
    mu2, mu3, mu4, vsq = _per_firm(s2, s3, s4, pairs, decomp.T)
    return {"mu2_v": mu2, "mu3_v": mu3, "mu4_v": mu4, "mu2_v_squared": vsq}


# ---------------------------------------------------------------------------
# adjusted between-residual powers

def adjusted_square_cube(ebar, mu2_v, mu3_v, T):
    """First step: u^2 and u^3 estimates with the averaged-error contribution removed."""
    ebar = np.asarray(ebar, dtype=float)
    T = np.asarray(T, dtype=float)
    return ebar**2 - mu2_v / T, -(ebar**3) + mu3_v / T**2


def adjusted_deviation_powers(ebar, mu2_v, mu3_v, mu4_v, mu2_v_squared, T, mu2_u=None):
    """Return (u^2, u^3, u^4) adjusted powers of between residuals.

    The fourth power needs the already-smoothed second moment of u at the
    firm's covariate, so `mu2_u` is required.
    """
    if mu2_u is None:
        raise SequencingError("u^4 needs the smoothed second moment of u; smooth u^2 first")
    u2, u3 = adjusted_square_cube(ebar, mu2_v, mu3_v, T)
    ebar = np.asarray(ebar, dtype=float)
    T = np.asarray(T, dtype=float)
    u4 = ebar**4 - 6 * mu2_u * mu2_v / T - mu4_v / T**3 - 3 * (T - 1) / T**3 * mu2_v_squared
    if u2.ndim == 0:
        return float(u2), float(u3), float(u4)
    return u2, u3, u4


def smooth_conditional_moments(targets, xbar, spec: BasisSpec, ridge_lambda="gcv"):
    """Regress per-firm targets on the firm covariate and predict back at every firm.

    Firms with a nan target (ineligible for that moment) are left out of the
    fit but still receive a smoothed value.
    """
    targets = np.asarray(targets, dtype=float)
    xbar = np.asarray(xbar, dtype=float)
    if xbar.ndim == 1:
        xbar = xbar[:, None]
    if targets.shape[0] < 2:
        raise DomainError("smoothing needs at least two firms")
    ok = np.isfinite(targets)
    if ok.sum() == 0:
        return np.full(targets.shape, np.nan)
    basis = Basis.fit(xbar[ok], spec, "xbar", xbar.shape[1])
    rf = ridge_solve(basis.design(xbar[ok]), targets[ok], ridge_lambda)
    return basis.design(xbar) @ rf.coefficients


# ---------------------------------------------------------------------------
# estimate containers

@dataclass
class MomentEstimates:
    """Second to fourth central moments of u and v.

    For the pooled scope each entry is a float; for the conditional scope each
    entry is an array with one value per firm.
    """

    scope: str  # "pooled" | "conditional"
    mu2_u: object
    mu3_u: object
    mu4_u: object
    mu2_v: object
    mu3_v: object
    mu4_v: object
    mu2_v_squared: object
    mu2_ebar: object = None
    firm_ids: list = field(default_factory=list)
    counts: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def u(self):
        return self.mu2_u, self.mu3_u, self.mu4_u

    @property
    def v(self):
        return self.mu2_v, self.mu3_v, self.mu4_v

    def to_dict(self) -> dict:
        keys = ("mu2_u", "mu3_u", "mu4_u", "mu2_v", "mu3_v", "mu4_v", "mu2_v_squared", "mu2_ebar")
        out = {"scope": self.scope}
        for k in keys:
            v = getattr(self, k)
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        if self.firm_ids:
            out["firm_ids"] = list(self.firm_ids)
        out["counts"] = dict(self.counts)
        return out


# ---------------------------------------------------------------------------
# pooled estimators

def _fsum(a) -> float:
    return math.fsum(np.asarray(a, dtype=float).tolist())


def pooled_moments(decomp: ResidualDecomposition) -> MomentEstimates:
    """Pooled (input-independent) moments of u and v with firm-specific T_i weights."""
    T = decomp.T.astype(float)
    n = decomp.n_firms
    if n < 4:
        raise DegeneratePanelError(f"pooled fourth moments need at least 4 firms, got {n}")
    s2, s3, s4, pairs = within_power_sums(decomp)
    S2, S3, S4, P = _fsum(s2), _fsum(s3), _fsum(s4), _fsum(pairs)

    d2 = _fsum(T - 1)
    if d2 <= 0:
        raise DegeneratePanelError("sum of (T_i - 1) is zero: no within variation")
    mu2_v = S2 / d2
    d3 = _fsum((T - 1) * (T - 2) / T)
    mu3_v = S3 / d3 if d3 > 0 else float("nan")

    A1 = _fsum((T - 1) * (T * T - 3 * T + 3) / T**2)
    A2 = _fsum((T - 1) * (2 * T - 3) / T**2)
    A3 = _fsum((T - 1) * (T**3 - 2 * T**2 - 3 * T + 9) / T**2)
    den4 = A1 * A3 - 3 * A2 * A2
    if not den4 > 1e-12 * A1 * A3:
        raise DegeneratePanelError("pooled fourth-moment denominator vanishes (needs some firm with T_i >= 4)")
    mu4_v = (A3 * S4 - 6 * A2 * P) / den4
    mu2_v_sq = (2 * A1 * P - A2 * S4) / den4

    e = decomp.between
    H1, H2, H3 = _fsum(1 / T), _fsum(1 / T**2), _fsum(1 / T**3)
    E2 = _fsum(e**2)
    E3 = _fsum(e**3)
    E4 = _fsum(e**4)
    mu2_ebar = E2 / (n - 1)
    mu2_u = mu2_ebar - mu2_v / n * H1
    mu3_u = -n / ((n - 1) * (n - 2)) * E3 + mu3_v / n * H2
    mu4_u = pooled_mu4_u(E2, E4, n, mu2_u, mu2_v, mu4_v, mu2_v_sq, H1, H2, H3)

    counts = {
        "n_firms": n,
        "n_obs": int(decomp.T.sum()),
        "firms_T_ge_2": int((decomp.T >= 2).sum()),
        "firms_T_ge_3": int((decomp.T >= 3).sum()),
        "firms_T_ge_4": int((decomp.T >= 4).sum()),
    }
    return MomentEstimates("pooled", mu2_u, mu3_u, mu4_u, mu2_v, mu3_v, mu4_v, mu2_v_sq, mu2_ebar,
                           counts=counts)


def pooled_mu4_u(E2, E4, n, mu2_u, mu2_v, mu4_v, mu2_v_sq, H1, H2, H3):
    """Unbiased pooled fourth central moment of u.

    E2, E4 are sums of squared and fourth-power between residuals (centered at
    their firm average), Hk = sum of T_i^-k. The first term is the usual
    unbiased fourth-moment statistic of the between residuals; the rest removes
    the averaged-error contribution.
    """
    pairs = E2 * E2 - E4  # ordered pairs i != i'
    h4 = ((n**3 - 2 * n**2 - 3 * n + 9) * E4 - 3 * (2 * n - 3) * pairs) / (n * (n - 1) * (n - 2) * (n - 3))
    return h4 - (6 * mu2_u * mu2_v * H1 + mu4_v * H3 + 3 * mu2_v_sq * (H2 - H3)) / n


# ---------------------------------------------------------------------------
# conditional (smoothed) estimators

def conditional_moments(decomp: ResidualDecomposition, spec: BasisSpec | None = None,
                        ridge_lambda="gcv") -> MomentEstimates:
    """Per-firm moments of u and v smoothed over the firm covariate.

    Error moments are estimated firm by firm, smoothed, and then used to
    adjust powers of the between residuals, which are smoothed in turn; the
    fourth power uses the smoothed second moment of u.
    """
    spec = spec or BasisSpec()
    if decomp.n_firms < 2:
        raise DomainError("conditional moments need at least two firms")
    T = decomp.T.astype(float)
    raw = error_moments_all(decomp)
    sm = {k: smooth_conditional_moments(v, decomp.xbar, spec, ridge_lambda) for k, v in raw.items()}
    for k, v in sm.items():
        if not np.all(np.isfinite(v)):
            raise DegeneratePanelError(f"no firm is eligible for {k}")
    e = decomp.between
    u2, u3 = adjusted_square_cube(e, sm["mu2_v"], sm["mu3_v"], T)
    mu2_u = smooth_conditional_moments(u2, decomp.xbar, spec, ridge_lambda)
    mu3_u = smooth_conditional_moments(u3, decomp.xbar, spec, ridge_lambda)
    _, _, u4 = adjusted_deviation_powers(e, sm["mu2_v"], sm["mu3_v"], sm["mu4_v"], sm["mu2_v_squared"], T,
                                         mu2_u=mu2_u)
    mu4_u = smooth_conditional_moments(u4, decomp.xbar, spec, ridge_lambda)
    counts = {k: int(np.isfinite(v).sum()) for k, v in raw.items()}
    counts["n_firms"] = decomp.n_firms
    return MomentEstimates("conditional", mu2_u, mu3_u, mu4_u, sm["mu2_v"], sm["mu3_v"], sm["mu4_v"],
                           sm["mu2_v_squared"], firm_ids=list(decomp.firm_ids), counts=counts,
                           extra={"raw_error_moments": raw, "u2_adj": u2, "u3_adj": u3, "u4_adj": u4})
