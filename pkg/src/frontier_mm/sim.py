"""Monte Carlo panels with scarce near-frontier deviations, and the experiment harness.

Deviations are q * Beta(a, b) candidates thinned below their f-quantile:
a candidate under the threshold survives with probability 1 - p, anything
above it always survives. Each replication owns an RNG keyed by
(seed, grid index, replication index), so results do not depend on how
work is scheduled.
"""
from __future__ import annotations

import math
import time
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import special

from . import bounds
from .fit import FitConfig, InfeasibleFitError, fit_deviation_distribution
from .moments import DegeneratePanelError, pooled_moments
from .panel import PanelDataset
from .residualize import ResidualDecomposition

REGIONS = ("High-NFM", "Uni-R", "Uni-L", "Low-NFM")
REPRESENTATIVE = {"High-NFM": (0.5, 2.0), "Uni-R": (2.0, 4.0), "Uni-L": (4.0, 2.0), "Low-NFM": (2.0, 0.5)}


@dataclass(frozen=True)
class SimDesign:
    a: float = 2.0
    b: float = 2.0
    q: float = 4.0
    g: float = 5.0
    n: int = 250
    T: int = 8
    f: float = 0.05
    p: float = 0.95
    sigma_v: object = "match-u-sd"  # or a fixed nonnegative number
    reps: int = 50
    seed: int = 0

    def __post_init__(self):
        for k in ("a", "b", "q"):
            if not getattr(self, k) > 0:
                raise ValueError(f"{k} must be positive")
        if self.n < 1 or self.T < 1 or self.reps < 1:
            raise ValueError("n, T and reps must be at least 1")
        if not 0 < self.f < 1:
            raise ValueError(f"f must lie in (0, 1), got {self.f}")
        if not 0 <= self.p < 1:
            raise ValueError(f"p must lie in [0, 1), got {self.p}")
        if not self.f * self.p < 1:
            raise ValueError("f * p must be below 1")
        if self.sigma_v != "match-u-sd" and not (isinstance(self.sigma_v, (int, float)) and self.sigma_v >= 0):
            raise ValueError(f"sigma_v must be 'match-u-sd' or a nonnegative number, got {self.sigma_v!r}")

    @property
    def region(self) -> str:
        return region_label(self.a, self.b)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimDesign":
        d = dict(d)
        for k in ("n", "T", "reps", "seed"):
            if k in d:
                d[k] = int(d[k])
        if "sigma_v" in d and d["sigma_v"] != "match-u-sd":
            d["sigma_v"] = float(d["sigma_v"])
        return cls(**d)


def region_label(a: float, b: float) -> str:
    if a < 1:
        return "High-NFM"
    if b < 1:
        return "Low-NFM"
    return "Uni-R" if a <= b else "Uni-L"


def threshold(design: SimDesign) -> float:
    """The f-quantile of the candidate distribution, on the u scale."""
    return design.q * float(special.betaincinv(design.a, design.b, design.f))


def draw_deviations(design: SimDesign, rng, n: int | None = None) -> np.ndarray:
    n = design.n if n is None else n
    xi = threshold(design)
    keep_low = 1 - design.p
    out, have = [], 0
    while have < n:
        m = int(math.ceil((n - have) / (1 - design.p * design.f) * 1.05)) + 16
        cand = design.q * rng.beta(design.a, design.b, m)
        acc = (cand >= xi) | (rng.random(m) < keep_low)
        cand = cand[acc]
        out.append(cand)
        have += cand.size
    return np.concatenate(out)[:n]


# ---------------------------------------------------------------- ground truth

def population_raw_moments(design: SimDesign, J: int = 5) -> list:
    """E[u^k], k = 1..J, of the thinned distribution, via incomplete Beta functions."""
    a, b, q, f, p = design.a, design.b, design.q, design.f, design.p
    x = float(special.betaincinv(a, b, f))
    out = []
    for k in range(1, J + 1):
        ratio = math.exp(special.betaln(a + k, b) - special.betaln(a, b))
        below = float(special.betainc(a + k, b, x))
        out.append(q**k * ratio * (1 - p * below) / (1 - p * f))
    return out


@dataclass
class GroundTruth:
    mean: float
    central: tuple  # (mu2, mu3, mu4, mu5)
    lb: float
    sd: float
    source: str = "analytic"

    def to_dict(self) -> dict:
        return {"mean": self.mean, "mu2": self.central[0], "mu3": self.central[1], "mu4": self.central[2],
                "mu5": self.central[3], "lb": self.lb, "sd": self.sd, "source": self.source}


def population_truth(design: SimDesign) -> GroundTruth:
    mean, central = bounds.raw_to_central(population_raw_moments(design, 5))
    return GroundTruth(mean, tuple(central), bounds.skewness_lower_bound(central[0], central[1]),
                       math.sqrt(central[0]))


def sample_truth(u: np.ndarray, source: str = "sample") -> GroundTruth:
    u = np.asarray(u, dtype=float)
    mean = math.fsum(u.tolist()) / u.size
    d = u - mean
    central = tuple(math.fsum((d**k).tolist()) / u.size for k in (2, 3, 4, 5))
    lb = bounds.skewness_lower_bound(central[0], central[1]) if central[0] > 0 else 0.0
    return GroundTruth(mean, central, lb, math.sqrt(central[0]), source)


def reference_truth(design: SimDesign, draws: int = 1_000_000, seed=None) -> GroundTruth:
    rng = np.random.default_rng([design.seed if seed is None else seed, 2**31 - 1])
    return sample_truth(draw_deviations(design, rng, draws), "reference")


# ---------------------------------------------------------------- panels

@dataclass
class SimPanel:
    y: np.ndarray  # (n, T)
    u: np.ndarray
    sigma_v: float
    design: SimDesign

    def to_dataset(self) -> PanelDataset:
        n, T = self.y.shape
        ids = [f"{i:06d}" for i in range(n)]
        return PanelDataset.from_arrays(np.repeat(ids, T), np.zeros((n * T, 1)), self.y.ravel(),
                                        periods=np.tile(np.arange(T), n))


def simulate_panel(design: SimDesign, rng) -> SimPanel:
    u = draw_deviations(design, rng)
    if design.sigma_v == "match-u-sd":
        sv = float(np.std(u))
    else:
        sv = float(design.sigma_v)
    v = rng.normal(0.0, 1.0, (design.n, design.T)) * sv
    return SimPanel(design.g - u[:, None] + v, u, sv, design)


def generate_panel(design: SimDesign, rng, reference_draws: int = 0):
    """Simulated PanelDataset with ground truth from the realized draws and the population.

    Ground truth keys: "u", "sigma_v", "realized", "population" and, when
    reference_draws > 0, "reference" (a separate sample of that size).
    """
    sp = simulate_panel(design, rng)
    truth = {"u": sp.u, "sigma_v": sp.sigma_v, "realized": sample_truth(sp.u, "realized"),
             "population": population_truth(design)}
    if reference_draws:
        truth["reference"] = reference_truth(design, reference_draws)
    return sp.to_dataset(), truth


def replication_rng(seed: int, grid_index: int, rep: int):
    return np.random.default_rng([int(seed), int(grid_index), int(rep)])


# ---------------------------------------------------------------- experiment

def estimator_name(cfg: FitConfig) -> str:
    if not cfg.constrained:
        return "unconstrained"
    return f"m0={cfg.m0:g} c={cfg.c:g}"


@dataclass
class RepResult:
    grid_index: int
    rep: int
    lb: float = math.nan
    eu: dict = field(default_factory=dict)  # estimator -> implied mean
    bind: dict = field(default_factory=dict)
    error: str = ""


def run_replication(design: SimDesign, grid_index: int, rep: int, estimators) -> RepResult:
    rng = replication_rng(design.seed, grid_index, rep)
    sp = simulate_panel(design, rng)
    ybar = math.fsum(sp.y.ravel().tolist()) / sp.y.size
    out = RepResult(grid_index, rep)
    try:
        est = pooled_moments(ResidualDecomposition.from_matrix(sp.y - ybar))
        mu = est.u
        if not mu[0] > 0:
            raise bounds.DomainError(f"estimated mu2_u = {mu[0]:.3g} is not positive")
        out.lb = bounds.skewness_lower_bound(mu[0], mu[1])
        for cfg in estimators:
            r = fit_deviation_distribution(mu, design.n, cfg, scale_ref=est.mu2_ebar, stream=(grid_index, rep))
            out.eu[estimator_name(cfg)] = r.implied_mean
            out.bind[estimator_name(cfg)] = r.bind
    except (bounds.DomainError, DegeneratePanelError, InfeasibleFitError, FloatingPointError, ValueError) as exc:
        out.error = f"{type(exc).__name__}: {exc}"
    return out


def _run_task(task):
    design, gi, rep, estimators = task
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return run_replication(design, gi, rep, estimators)


def _median(a):
    return float(np.median(a)) if len(a) else math.nan


def _mean(a):
    return math.fsum(a) / len(a) if len(a) else math.nan


def point_metrics(design: SimDesign, truth: GroundTruth, reps: list, estimators) -> list:
    """Per-grid-point statistics over replications, one row per estimator."""
    done = [r for r in reps if not r.error]
    rows = []
    lb_err = [abs(r.lb - truth.lb) / truth.lb for r in done]
    for cfg in estimators:
        name = estimator_name(cfg)
        eu = [r.eu[name] for r in done]
        dev = [e - truth.mean for e in eu]
        rows.append({
            "a": design.a, "b": design.b, "n": design.n, "region": design.region, "estimator": name,
            "true_mean": truth.mean, "true_lb": truth.lb,
            "share_lb_gt_eu": _mean([float(r.lb > r.eu[name]) for r in done]),
            "median_relerr_eu": _median([abs(d) / truth.mean for d in dev]),
            "median_relerr_lb": _median(lb_err),
            "bias": _mean(dev),
            "abs_bias": abs(_mean(dev)) if dev else math.nan,
            "mse": _mean([d * d for d in dev]),
            "bind_share": _mean([float(r.bind[name]) for r in done]) if cfg.constrained else math.nan,
            "completed": len(done),
            "failures": len(reps) - len(done),
        })
    return rows


def region_metrics(grid_rows: list) -> list:
    """Aggregate grid-point rows by (n, estimator, region) into regional averages and medians."""
    keys = []
    for r in grid_rows:
        k = (r["n"], r["estimator"], r["region"])
        if k not in keys:
            keys.append(k)
    out = []
    for n, est, reg in keys:
        rows = [r for r in grid_rows if (r["n"], r["estimator"], r["region"]) == (n, est, reg)]
        col = lambda c: [r[c] for r in rows if not math.isnan(r[c])]
        out.append({
            "n": n, "estimator": est, "region": reg, "grid_points": len(rows),
            "share_lb_gt_eu": _mean(col("share_lb_gt_eu")),
            "median_relerr_eu": _mean(col("median_relerr_eu")),
            "median_relerr_lb": _mean(col("median_relerr_lb")),
            "median_bias": _median(col("bias")),
            "median_mse": _median(col("mse")),
            "mean_mse": _mean(col("mse")),
            "bind_share": _mean(col("bind_share")),
            "median_abs_bias": _median(col("abs_bias")),
            "mean_abs_bias": _mean(col("abs_bias")),
            "completed": sum(r["completed"] for r in rows),
            "failures": sum(r["failures"] for r in rows),
        })
    return out


@dataclass
class MetricsTable:
    regions: list
    grid: list
    replications: list = field(default_factory=list)
    elapsed: float = 0.0

    def lookup(self, region: str, estimator: str = "unconstrained", n: int | None = None) -> dict:
        for r in self.regions:
            if r["region"] == region and r["estimator"] == estimator and (n is None or r["n"] == n):
                return r
        raise KeyError((region, estimator, n))


# each region as a box in (log a, log b) on the [-2, 2]^2 design square
REGION_BOXES = {
    "High-NFM": ((-2.0, 0.0), (-2.0, 2.0)),
    "Low-NFM": ((0.0, 2.0), (-2.0, 0.0)),
}


def region_subgrid(region: str, k: int = 3):
    """Cell centers of a k x k split of a region's box, as (a, b) pairs.

    Only the two rectangular regions are supported; the unimodal regions are
    triangles split by the diagonal a = b.
    """
    if region not in REGION_BOXES:
        raise ValueError(f"no rectangular box for region {region!r}")
    (a0, a1), (b0, b1) = REGION_BOXES[region]
    ca = [a0 + (a1 - a0) * (j + 0.5) / k for j in range(k)]
    cb = [b0 + (b1 - b0) * (j + 0.5) / k for j in range(k)]
    return [(math.exp(la), math.exp(lb)) for la in ca for lb in cb]


def log_grid(k: int, lo: float = -2.0, hi: float = 2.0):
    """k x k equally spaced (a, b) points over [lo, hi]^2 in logs."""
    pts = np.linspace(lo, hi, k)
    return [(float(math.exp(la)), float(math.exp(lb))) for la in pts for lb in pts]


def run_experiment(designs, estimators, grid=None, jobs: int = 1, truth: str = "analytic") -> MetricsTable:
    """Replicate every design under every estimator and aggregate per point, then per region.

    `grid`, if given, is a list of (a, b) pairs that expands each design.
    `truth` is "analytic" or "reference" (a 10^6-draw sample per point).
    """
    designs = list(designs)
    if not designs:
        raise ValueError("need at least one design")
    estimators = list(estimators)
    if grid is not None:
        designs = [replace(d, a=a, b=b) for d in designs for a, b in grid]
    t0 = time.perf_counter()
    tasks = [(d, gi, rep, estimators) for gi, d in enumerate(designs) for rep in range(d.reps)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_task, tasks, chunksize=max(1, len(tasks) // (8 * jobs))))
    else:
        results = [_run_task(t) for t in tasks]
    grid_rows, k = [], 0
    for gi, d in enumerate(designs):
        reps = results[k:k + d.reps]
        k += d.reps
        tr = population_truth(d) if truth == "analytic" else reference_truth(d)
        grid_rows += point_metrics(d, tr, reps, estimators)
    return MetricsTable(region_metrics(grid_rows), grid_rows, results, time.perf_counter() - t0)


GRID_COLUMNS = ("a", "b", "n", "region", "estimator", "true_mean", "true_lb", "share_lb_gt_eu",
                "median_relerr_eu", "median_relerr_lb", "bias", "abs_bias", "mse", "bind_share",
                "completed", "failures")
REGION_COLUMNS = ("n", "estimator", "region", "grid_points", "share_lb_gt_eu", "median_relerr_eu",
                  "median_relerr_lb", "median_bias", "median_mse", "mean_mse", "bind_share",
                  "median_abs_bias", "mean_abs_bias", "completed", "failures")
