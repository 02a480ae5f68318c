"""Flexible conditional-mean stage and the within/between residual split.

The conditional mean E[y | x] is fitted by (ridge-)penalized least squares on a
polynomial or cubic B-spline basis with main effects and pairwise tensor
interactions. Residuals are then split per firm into a time-averaged part and
deviations from that average.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.interpolate import BSpline

from .panel import PanelDataset

CONDITIONING = ("xbar", "xit", "both")


class SingularDesignError(np.linalg.LinAlgError):
    pass


class IllPosedWarning(UserWarning):
    pass


@dataclass(frozen=True)
class BasisSpec:
    kind: str = "polynomial"  # "polynomial" | "cubic-spline"
    degree: int = 1
    knots: int | None = None  # interior knots per margin; None -> ceil(sqrt(N)/input_dim)
    include_interactions: bool = True
    max_knots: int = 12

    def __post_init__(self):
        if self.kind not in ("polynomial", "cubic-spline"):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if self.kind == "polynomial" and self.degree < 0:
            raise ValueError("polynomial degree must be >= 0")
        if self.knots is not None and self.knots < 0:
            raise ValueError("knot count must be >= 0")

    def knot_count(self, n_obs: int, input_dim: int) -> int:
        if self.knots is not None:
            return self.knots
        return max(1, min(self.max_knots, math.ceil(math.sqrt(max(n_obs, 1)) / input_dim)))

    @classmethod
    def intercept_only(cls) -> "BasisSpec":
        return cls(kind="polynomial", degree=0, include_interactions=False)


def segment_fsum(values: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Correctly rounded sum of each segment values[offsets[i]:offsets[i+1]].

    fsum is exact up to the final rounding, so the result does not depend on
    the order of values inside a segment.
    """
    vals = values.tolist()
    return np.array([math.fsum(vals[a:b]) for a, b in zip(offsets[:-1], offsets[1:])])


def firm_covariates(data: PanelDataset, conditioning: str = "xbar") -> np.ndarray:
    """Per-observation covariates for the chosen conditioning set."""
    if conditioning not in CONDITIONING:
        raise ValueError(f"conditioning must be one of {CONDITIONING}, got {conditioning!r}")
    x, _, idx = data.stacked()
    xbar = data.firm_means()[idx] if data.n_firms else x
    if conditioning == "xbar":
        return xbar
    if conditioning == "xit":
        return x
    return np.hstack([xbar, x - xbar])


@dataclass
class _Margin:
    column: int
    lo: float
    hi: float
    knots: np.ndarray | None = None  # full knot vector for splines


@dataclass
class Basis:
    """A basis whose data-dependent pieces (knot locations, ranges) are fixed."""

    spec: BasisSpec
    conditioning: str
    input_dim: int = 1
    margins: list = field(default_factory=list)
    dropped: list = field(default_factory=list)  # covariate columns with no variation

    @classmethod
    def fit(cls, cov: np.ndarray, spec: BasisSpec, conditioning: str, input_dim: int) -> "Basis":
        basis = cls(spec, conditioning, input_dim)
        if spec.kind == "polynomial" and spec.degree == 0:
            return basis
        n_obs = cov.shape[0]
        n_knots = spec.knot_count(n_obs, input_dim)
        for j in range(cov.shape[1]):
            col = cov[:, j]
            lo, hi = float(col.min()), float(col.max())
            if not hi > lo:
                basis.dropped.append(j)
                continue
            m = _Margin(j, lo, hi)
            if spec.kind == "cubic-spline":
                uniq = np.unique(col)
                k = min(n_knots, max(len(uniq) - 4, 0))
                inner = np.quantile(uniq, np.linspace(0, 1, k + 2)[1:-1]) if k else np.empty(0)
                m.knots = np.concatenate([[lo] * 4, inner, [hi] * 4])
            basis.margins.append(m)
        return basis

    def _marginal(self, m: _Margin, col: np.ndarray) -> np.ndarray:
        if self.spec.kind == "polynomial":
            return np.column_stack([col ** p for p in range(1, self.spec.degree + 1)])
        B = BSpline.design_matrix(col, m.knots, 3, extrapolate=True).toarray()
        return B[:, 1:]  # B-splines sum to one; drop a column to stay clear of the intercept

    def design(self, cov: np.ndarray) -> np.ndarray:
        cols = [np.ones((cov.shape[0], 1))]
        blocks = [self._marginal(m, cov[:, m.column]) for m in self.margins]
        cols.extend(blocks)
        if self.spec.include_interactions:
            for b1, b2 in combinations(blocks, 2):
                cols.append((b1[:, :, None] * b2[:, None, :]).reshape(cov.shape[0], -1))
        return np.hstack(cols)

    def n_outside(self, cov: np.ndarray) -> int:
        """Rows with some covariate outside the range seen at fit time."""
        out = np.zeros(cov.shape[0], dtype=bool)
        for m in self.margins:
            c = cov[:, m.column]
            out |= (c < m.lo) | (c > m.hi)
        return int(out.sum())

    @property
    def dim(self) -> int:
        if not self.margins:
            return 1
        per = [self.spec.degree if self.spec.kind == "polynomial" else len(m.knots) - 5 for m in self.margins]
        total = 1 + sum(per)
        if self.spec.include_interactions:
            total += sum(p * q for p, q in combinations(per, 2))
        return total


def build_design(data: PanelDataset, spec: BasisSpec, conditioning: str = "xbar") -> np.ndarray:
    """Design matrix with an intercept column first, then main effects, then interactions."""
    cov = firm_covariates(data, conditioning)
    basis = Basis.fit(cov, spec, conditioning, data.input_dim)
    Z = basis.design(cov)
    if Z.shape[1] >= Z.shape[0]:
        warnings.warn(f"basis dimension {Z.shape[1]} >= {Z.shape[0]} observations; fit relies on ridge",
                      IllPosedWarning, stacklevel=2)
    return Z


@dataclass
class RidgeFit:
    coefficients: np.ndarray
    ridge_lambda: float
    gcv_score: float = float("nan")
    lambda_grid: np.ndarray | None = None


def ridge_solve(Z: np.ndarray, y: np.ndarray, ridge_lambda="gcv", n_grid: int = 20) -> RidgeFit:
    """Penalized least squares with an unpenalized intercept (first column of Z).

    `ridge_lambda` is a nonnegative number or "gcv" for generalized
    cross-validation over a log-spaced grid.
    """
    N, p = Z.shape
    ybar = math.fsum(y.tolist()) / N
    if p == 1:
        return RidgeFit(np.array([ybar]), 0.0 if ridge_lambda == "gcv" else float(ridge_lambda))
    zbar = Z[:, 1:].mean(axis=0)
    Zc = Z[:, 1:] - zbar
    yc = y - ybar
    U, s, Vt = np.linalg.svd(Zc, full_matrices=False)
    c = U.T @ yc

    grid = None
    gcv = float("nan")
    if isinstance(ridge_lambda, str):
        if ridge_lambda != "gcv":
            raise ValueError(f"ridge_lambda must be a number or 'gcv', got {ridge_lambda!r}")
        scale = float(np.mean(s ** 2)) or 1.0
        grid = scale * np.logspace(-8, 3, n_grid)
        yy = float(yc @ yc)
        scores = []
        for lam in grid:
            shrink = s ** 2 / (s ** 2 + lam)
            rss = yy - float(c @ c) + float(((1 - shrink) * c) @ ((1 - shrink) * c))
            df = 1 + shrink.sum()
            scores.append(N * max(rss, 0.0) / (N - df) ** 2 if N > df else np.inf)
        k = int(np.argmin(scores))
        lam, gcv = float(grid[k]), float(scores[k])
    else:
        lam = float(ridge_lambda)
        if lam < 0:
            raise ValueError("ridge_lambda must be >= 0")

    if lam == 0.0:
        tol = s[0] * max(N, p) * np.finfo(float).eps if s.size else 0.0
        if s.size < p - 1 or s[-1] <= tol:
            raise SingularDesignError("normal equations are singular; use a positive ridge_lambda or 'gcv'")
        beta = Vt.T @ (c / s)
    else:
        beta = Vt.T @ (s * c / (s ** 2 + lam))
    intercept = ybar - float(zbar @ beta)
    return RidgeFit(np.concatenate([[intercept], beta]), lam, gcv, grid)


@dataclass
class ConditionalMeanModel:
    basis: Basis
    coefficients: np.ndarray
    ridge_lambda: float
    conditioning: str = "xbar"
    gcv_score: float = float("nan")
    n_extrapolated: int = 0

    def predict_covariates(self, cov: np.ndarray) -> np.ndarray:
        return self.basis.design(cov) @ self.coefficients

    def predict(self, data: PanelDataset) -> np.ndarray:
        cov = firm_covariates(data, self.conditioning)
        self.n_extrapolated = self.basis.n_outside(cov)
        return self.predict_covariates(cov)


def fit_conditional_mean(data: PanelDataset, spec: BasisSpec, ridge_lambda="gcv",
                         conditioning: str = "xbar") -> ConditionalMeanModel:
    if data.n_obs == 0:
        raise ValueError("cannot fit a conditional mean to an empty panel")
    cov = firm_covariates(data, conditioning)
    basis = Basis.fit(cov, spec, conditioning, data.input_dim)
    Z = basis.design(cov)
    if Z.shape[1] >= Z.shape[0] and ridge_lambda == 0:
        warnings.warn(f"basis dimension {Z.shape[1]} >= {Z.shape[0]} observations", IllPosedWarning, stacklevel=2)
    _, y, _ = data.stacked()
    rf = ridge_solve(Z, y, ridge_lambda)
    return ConditionalMeanModel(basis, rf.coefficients, rf.ridge_lambda, conditioning, rf.gcv_score)


@dataclass
class ResidualDecomposition:
    """Centered residuals split into between (per firm) and within (per observation) parts.

    Observations are stored firm by firm; firm i owns rows offsets[i]:offsets[i+1].
    """

    firm_ids: list
    T: np.ndarray
    between: np.ndarray  # (n,)
    within: np.ndarray  # (N,)
    offsets: np.ndarray  # (n+1,)
    xbar: np.ndarray  # (n, d) conditioning covariate

    @property
    def n_firms(self) -> int:
        return len(self.firm_ids)

    @property
    def firm_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_firms), self.T)

    @property
    def residuals(self) -> np.ndarray:
        return self.within + self.between[self.firm_index]

    def within_of(self, i: int) -> np.ndarray:
        return self.within[self.offsets[i]:self.offsets[i + 1]]

    @classmethod
    def from_residuals(cls, eps, T, firm_ids=None, xbar=None) -> "ResidualDecomposition":
        eps = np.asarray(eps, dtype=float)
        T = np.asarray(T, dtype=int)
        if T.sum() != eps.size:
            raise ValueError("residual count does not match sum of T_i")
        if np.any(T < 1):
            raise ValueError("every firm needs at least one period")
        offsets = np.concatenate([[0], np.cumsum(T)])
        between = segment_fsum(eps, offsets) / T
        within = eps - np.repeat(between, T)
        if firm_ids is None:
            firm_ids = [str(i) for i in range(len(T))]
        if xbar is None:
            xbar = np.zeros((len(T), 1))
        return cls(list(firm_ids), T, between, within, offsets, np.asarray(xbar, dtype=float))

    @classmethod
    def from_matrix(cls, eps: np.ndarray, **kw) -> "ResidualDecomposition":
        """Balanced panel given as an (n, T) residual matrix."""
        eps = np.asarray(eps, dtype=float)
        return cls.from_residuals(eps.ravel(), np.full(eps.shape[0], eps.shape[1]), **kw)


def decompose_residuals(data: PanelDataset, model: ConditionalMeanModel) -> ResidualDecomposition:
    if data.input_dim != model.basis.input_dim:
        raise ValueError(f"model was fitted on input_dim={model.basis.input_dim}, panel has {data.input_dim}")
    _, y, _ = data.stacked()
    eps = y - model.predict(data)
    return ResidualDecomposition.from_residuals(eps, data.T, data.firm_ids, data.firm_means())


def grand_mean_decomposition(data: PanelDataset) -> ResidualDecomposition:
    """Residuals y_it minus the pooled mean of all outcomes (intercept-only stage)."""
    _, y, _ = data.stacked()
    ybar = math.fsum(y.tolist()) / y.size
    return ResidualDecomposition.from_residuals(y - ybar, data.T, data.firm_ids, data.firm_means())
