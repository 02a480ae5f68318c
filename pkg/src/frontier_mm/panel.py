"""Unbalanced panel container, CSV ingestion and validation."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class PanelError(ValueError):
    """Base class for input problems with a panel file."""


class SchemaError(PanelError):
    pass


class ParseError(PanelError):
    pass


class DuplicateError(PanelError):
    pass


MISSING_TOKENS = frozenset({"", "na", "nan", "null", "none", "."})


@dataclass(frozen=True)
class FirmBlock:
    firm_id: str
    x: np.ndarray  # (T_i, input_dim)
    y: np.ndarray  # (T_i,)
    periods: tuple = ()

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        y = np.asarray(self.y, dtype=float).ravel()
        if x.shape[0] != y.shape[0]:
            raise PanelError(f"firm {self.firm_id}: {x.shape[0]} input rows but {y.shape[0]} outcomes")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise PanelError(f"firm {self.firm_id}: non-finite values")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        if not self.periods:
            object.__setattr__(self, "periods", tuple(range(1, y.shape[0] + 1)))

    @property
    def T(self) -> int:
        return int(self.y.shape[0])


@dataclass(frozen=True)
class PanelDataset:
    """Firms with per-period input vectors and scalar outcomes.

    Firms are kept in the order given; `load_panel_csv` and `from_arrays`
    sort them by firm id so that every reduction over firms has a fixed order.
    """

    firms: tuple
    input_dim: int
    rejected: tuple = ()  # (row index, reason) pairs dropped at ingestion

    def __post_init__(self):
        object.__setattr__(self, "firms", tuple(self.firms))
        if self.input_dim < 1:
            raise PanelError("input_dim must be positive")
        seen = set()
        for f in self.firms:
            if f.firm_id in seen:
                raise DuplicateError(f"firm id {f.firm_id!r} appears twice")
            seen.add(f.firm_id)
            if f.x.shape[1] != self.input_dim:
                raise PanelError(f"firm {f.firm_id}: input vectors of length {f.x.shape[1]}, expected {self.input_dim}")

    @property
    def n_firms(self) -> int:
        return len(self.firms)

    @property
    def n_obs(self) -> int:
        return sum(f.T for f in self.firms)

    @property
    def T(self) -> np.ndarray:
        return np.array([f.T for f in self.firms], dtype=int)

    @property
    def firm_ids(self) -> list[str]:
        return [f.firm_id for f in self.firms]

    def stacked(self):
        """Return (x, y, firm_index) stacked over all observations."""
        if not self.firms:
            return np.empty((0, self.input_dim)), np.empty(0), np.empty(0, dtype=int)
        x = np.vstack([f.x for f in self.firms])
        y = np.concatenate([f.y for f in self.firms])
        idx = np.repeat(np.arange(self.n_firms), self.T)
        return x, y, idx

    def firm_means(self) -> np.ndarray:
        """Time-averaged inputs, one row per firm."""
        if not self.firms:
            return np.empty((0, self.input_dim))
        return np.vstack([f.x.mean(axis=0) for f in self.firms])

    @classmethod
    def from_arrays(cls, firm_ids, x, y, periods=None) -> "PanelDataset":
        """Build a dataset from long-format arrays (one row per observation)."""
        firm_ids = np.asarray(firm_ids).astype(str)
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        y = np.asarray(y, dtype=float)
        uniq, inv = np.unique(firm_ids, return_inverse=True)  # uniq is sorted
        by_firm = np.argsort(inv, kind="stable")
        groups = np.split(by_firm, np.cumsum(np.bincount(inv, minlength=uniq.size))[:-1])
        if periods is None:
            periods = np.zeros(len(y), dtype=int)
            for m in groups:
                periods[m] = np.arange(1, m.size + 1)
        periods = np.asarray(periods)
        firms = []
        for fid, m in zip(uniq.tolist(), groups):
            order = m[np.argsort(periods[m], kind="stable")]
            per = periods[order].tolist()
            if len(set(per)) != len(per):
                raise DuplicateError(f"duplicate (firm, period) for firm {fid!r}")
            firms.append(FirmBlock(fid, x[order], y[order], tuple(per)))
        return cls(tuple(firms), x.shape[1])


@dataclass(frozen=True)
class CsvSchema:
    firm_col: str = "firm"
    period_col: str = "period"
    y_col: str = "y"
    x_cols: tuple = ("x",)

    def __post_init__(self):
        object.__setattr__(self, "x_cols", tuple(self.x_cols))
        if not self.x_cols:
            raise SchemaError("schema needs at least one input column")


@dataclass
class ValidationReport:
    n_firms: int
    n_obs: int
    min_T: int
    max_T: int
    short_firms: list = field(default_factory=list)  # firm ids with T_i < requested min_T
    mu2_v_firms: int = 0  # firms with T_i >= 2
    mu3_v_firms: int = 0  # T_i >= 3
    mu4_v_firms: int = 0  # T_i >= 4
    pooled_mu2_ok: bool = False
    pooled_mu3_ok: bool = False
    pooled_mu4_ok: bool = False
    per_firm_mu4_ok: bool = False  # every firm has T_i >= 4
    rejected: list = field(default_factory=list)
    firm_flags: dict = field(default_factory=dict)  # firm id -> (mu2_v, mu3_v, mu4_v) eligibility

    @property
    def ok(self) -> bool:
        return self.n_firms > 0 and not self.short_firms


def _parse_period(tokens):
    try:
        return [float(t) for t in tokens], True
    except ValueError:
        return list(tokens), False


def load_panel_csv(path, schema: CsvSchema = CsvSchema()) -> PanelDataset:
    path = Path(path)
    if not path.exists():
        raise PanelError(f"{path}: no such file")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        rows = list(reader)
    if header is None:
        return PanelDataset((), len(schema.x_cols))
    header = [h.strip() for h in header]
    needed = [schema.firm_col, schema.period_col, schema.y_col, *schema.x_cols]
    missing = [c for c in needed if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}; have {', '.join(header)}")
    col = {name: header.index(name) for name in needed}

    rejected = []
    keep = []
    for i, row in enumerate(rows, start=2):  # row 1 is the header
        if not any(cell.strip() for cell in row):
            continue
        cells = [row[col[c]].strip() if col[c] < len(row) else "" for c in needed]
        empty = [c for c, v in zip(needed, cells) if v.lower() in MISSING_TOKENS]
        if empty:
            rejected.append((i, f"missing {', '.join(empty)}"))
            continue
        try:
            nums = [float(v) for v in cells[2:]]
        except ValueError:
            bad = next(c for c, v in zip(needed[2:], cells[2:]) if not _is_float(v))
            raise ParseError(f"{path}: row {i}: non-numeric value in column {bad!r}") from None
        if not all(math.isfinite(v) for v in nums):
            rejected.append((i, "non-finite value"))
            continue
        keep.append((cells[0], cells[1], nums[0], nums[1:], i))

    period_tokens = [k[1] for k in keep]
    period_vals, numeric = _parse_period(period_tokens)
    groups: dict[str, list] = {}
    for (fid, _, y, x, rowno), per in zip(keep, period_vals):
        groups.setdefault(fid, []).append((per, y, x, rowno))

    firms = []
    for fid in sorted(groups):
        recs = sorted(groups[fid], key=lambda r: r[0])
        pers = [r[0] for r in recs]
        for a, b in zip(pers, pers[1:]):
            if a == b:
                rows_dup = [r[3] for r in recs if r[0] == a]
                raise DuplicateError(f"{path}: duplicate (firm, period) = ({fid}, {a}) at rows {rows_dup}")
        firms.append(FirmBlock(
            fid,
            np.array([r[2] for r in recs], dtype=float).reshape(len(recs), len(schema.x_cols)),
            np.array([r[1] for r in recs], dtype=float),
            tuple(_period_out(p, numeric) for p in pers),
        ))
    return PanelDataset(tuple(firms), len(schema.x_cols), tuple(rejected))


def _is_float(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


def _period_out(p, numeric):
    if numeric and float(p).is_integer():
        return int(p)
    return p


def write_panel_csv(data: PanelDataset, path, schema: CsvSchema = CsvSchema()) -> None:
    from .io import fmt_float

    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([schema.firm_col, schema.period_col, schema.y_col, *schema.x_cols])
        for f in data.firms:
            for per, xrow, yv in zip(f.periods, f.x, f.y):
                per_s = fmt_float(per) if isinstance(per, float) else str(per)
                w.writerow([f.firm_id, per_s, fmt_float(yv), *(fmt_float(v) for v in xrow)])


def validate(data: PanelDataset, min_T: int = 4) -> ValidationReport:
    T = data.T
    if data.n_firms == 0:
        return ValidationReport(0, 0, 0, 0, rejected=list(data.rejected))
    rep = ValidationReport(
        n_firms=data.n_firms,
        n_obs=int(T.sum()),
        min_T=int(T.min()),
        max_T=int(T.max()),
        short_firms=[f.firm_id for f in data.firms if f.T < min_T],
        mu2_v_firms=int((T >= 2).sum()),
        mu3_v_firms=int((T >= 3).sum()),
        mu4_v_firms=int((T >= 4).sum()),
        rejected=list(data.rejected),
        firm_flags={f.firm_id: (f.T >= 2, f.T >= 3, f.T >= 4) for f in data.firms},
    )
    rep.pooled_mu2_ok = rep.mu2_v_firms > 0 and data.n_firms >= 2
    rep.pooled_mu3_ok = rep.mu3_v_firms > 0 and data.n_firms >= 3
    rep.pooled_mu4_ok = rep.mu4_v_firms > 0 and data.n_firms >= 4
    rep.per_firm_mu4_ok = rep.min_T >= 4
    return rep
