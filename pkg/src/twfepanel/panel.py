"""Balanced two-way panel container, stayer handling, and CSV ingestion."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError, DomainError, ParseError

REGRESSOR_KINDS = ("continuous", "binary", "lagged-outcome")
EXOGENEITY = ("strict", "predetermined")


@dataclass(frozen=True)
class RegressorMeta:
    name: str
    exogeneity: str = "strict"
    kind: str = "continuous"

    def __post_init__(self):
        if self.exogeneity not in EXOGENEITY:
            raise DomainError(f"bad exogeneity {self.exogeneity!r}")
        if self.kind not in REGRESSOR_KINDS:
            raise DomainError(f"bad regressor kind {self.kind!r}")


@dataclass(frozen=True)
class PanelData:
    """Balanced N x T panel with an N x T x K regressor tensor.

    Immutable after construction; every cell must be populated.
    """

    outcomes: np.ndarray
    regressors: np.ndarray
    regressor_meta: tuple
    unit_ids: tuple = ()
    period_ids: tuple = ()

    def __post_init__(self):
        y = np.asarray(self.outcomes)
        x = np.asarray(self.regressors, dtype=float)
        if y.ndim != 2:
            raise ContractError("outcomes must be an N x T array")
        if x.ndim != 3 or x.shape[:2] != y.shape:
            raise ContractError("regressors must be N x T x K matching outcomes")
        if not np.isfinite(x).all() or not np.isfinite(np.asarray(y, dtype=float)).all():
            raise DomainError("panel contains non-finite cells; panels must be balanced")
        meta = tuple(
            m if isinstance(m, RegressorMeta) else RegressorMeta(**m)
            for m in self.regressor_meta
        )
        if len(meta) != x.shape[2]:
            raise ContractError("one RegressorMeta entry required per regressor")
        object.__setattr__(self, "outcomes", y)
        object.__setattr__(self, "regressors", x)
        object.__setattr__(self, "regressor_meta", meta)
        if not self.unit_ids:
            object.__setattr__(self, "unit_ids", tuple(range(1, y.shape[0] + 1)))
        if not self.period_ids:
            object.__setattr__(self, "period_ids", tuple(range(1, y.shape[1] + 1)))
        if len(self.unit_ids) != y.shape[0] or len(self.period_ids) != y.shape[1]:
            raise ContractError("id label lengths must match panel dimensions")
        self._check_lag_columns()

    def _check_lag_columns(self):
        y = self.outcomes
        for k, m in enumerate(self.regressor_meta):
            if m.kind != "lagged-outcome":
                continue
            col = self.regressors[:, 1:, k]
            if not np.allclose(col, y[:, :-1]):
                raise DomainError(
                    f"lagged-outcome column {m.name!r} does not equal the shifted outcome"
                )

    @property
    def n_units(self):
        return self.outcomes.shape[0]

    @property
    def n_periods(self):
        return self.outcomes.shape[1]

    @property
    def n_regressors(self):
        return self.regressors.shape[2]

    @property
    def all_strict(self):
        return all(m.exogeneity == "strict" for m in self.regressor_meta)

    @property
    def regressor_names(self):
        return tuple(m.name for m in self.regressor_meta)

    def subset(self, unit_mask, period_mask):
        return PanelData(
            outcomes=self.outcomes[np.ix_(unit_mask, period_mask)],
            regressors=self.regressors[np.ix_(unit_mask, period_mask)],
            regressor_meta=self.regressor_meta,
            unit_ids=tuple(np.asarray(self.unit_ids, dtype=object)[unit_mask]),
            period_ids=tuple(np.asarray(self.period_ids, dtype=object)[period_mask]),
        )


@dataclass(frozen=True)
class StayerReport:
    panel: PanelData
    dropped_units: tuple
    dropped_periods: tuple
    full_shape: tuple

    @property
    def kept_cells(self):
        return self.panel.n_units * self.panel.n_periods

    @property
    def full_cells(self):
        return self.full_shape[0] * self.full_shape[1]


def drop_stayers(data, family):
    """Remove units and periods whose discrete outcome never varies.

    Their additive effects are unidentified, so they are excluded from index
    estimation; population-scaled averages add them back as zero-effect cells.
    The scan iterates because dropping units can create constant periods.
    """
    if family.kind == "gaussian-ar":
        return StayerReport(data, (), (), (data.n_units, data.n_periods))
    keep_u = np.ones(data.n_units, dtype=bool)
    keep_t = np.ones(data.n_periods, dtype=bool)
    y = data.outcomes
    changed = True
    while changed:
        changed = False
        sub = y[np.ix_(keep_u, keep_t)]
        if sub.shape[1] > 1:
            const_u = (sub == sub[:, :1]).all(axis=1)
            if const_u.any():
                idx = np.flatnonzero(keep_u)[const_u]
                keep_u[idx] = False
                changed = True
        sub = y[np.ix_(keep_u, keep_t)]
        if sub.shape[0] > 1:
            const_t = (sub == sub[:1, :]).all(axis=0)
            if const_t.any():
                idx = np.flatnonzero(keep_t)[const_t]
                keep_t[idx] = False
                changed = True
    dropped_units = tuple(np.asarray(data.unit_ids, dtype=object)[~keep_u])
    dropped_periods = tuple(np.asarray(data.period_ids, dtype=object)[~keep_t])
    if not dropped_units and not dropped_periods:
        return StayerReport(data, (), (), (data.n_units, data.n_periods))
    return StayerReport(
        data.subset(keep_u, keep_t), dropped_units, dropped_periods,
        (data.n_units, data.n_periods),
    )


def read_panel_csv(path, regressor_meta=None):
    """Read the long-format panel CSV ``unit,period,y,x1..xK``.

    Parsing is strict: the header must match, every field must be numeric, and
    the row count must equal the full N*T grid.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty panel file", row=1) from None
        header = [h.strip() for h in header]
        if header[:3] != ["unit", "period", "y"]:
            raise ParseError(
                f"header must start with 'unit,period,y', got {','.join(header[:3])}",
                row=1,
            )
        xnames = header[3:]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ParseError(
                    f"expected {len(header)} fields, found {len(row)}",
                    row=lineno, column=len(row) + 1,
                )
            parsed = [row[0].strip(), row[1].strip()]
            for col, cell in enumerate(row[2:], start=3):
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise ParseError(
                        f"non-numeric value {cell!r}", row=lineno, column=col
                    ) from None
            rows.append(parsed)
    if not rows:
        raise ParseError("panel file has a header but no data rows", row=2)
    units = sorted({r[0] for r in rows}, key=_label_key)
    periods = sorted({r[1] for r in rows}, key=_label_key)
    n, t, k = len(units), len(periods), len(xnames)
    if len(rows) != n * t:
        raise ParseError(
            f"panel is unbalanced: {len(rows)} rows but {n} units x {t} periods"
        )
    uidx = {u: i for i, u in enumerate(units)}
    tidx = {p: j for j, p in enumerate(periods)}
    y = np.full((n, t), np.nan)
    x = np.full((n, t, k), np.nan)
    for lineno, r in enumerate(rows, start=2):
        i, j = uidx[r[0]], tidx[r[1]]
        if not np.isnan(y[i, j]):
            raise ParseError(f"duplicate cell unit={r[0]} period={r[1]}", row=lineno)
        y[i, j] = r[2]
        x[i, j] = r[3:]
    if regressor_meta is None:
        regressor_meta = tuple(RegressorMeta(name=nm) for nm in xnames)
    else:
        regressor_meta = tuple(
            m if isinstance(m, RegressorMeta) else RegressorMeta(**m)
            for m in regressor_meta
        )
        names = [m.name for m in regressor_meta]
        if names != xnames:
            raise ParseError(
                f"regressor config names {names} do not match CSV columns {xnames}"
            )
    if np.allclose(y, np.round(y)):
        y = np.round(y).astype(int)
    return PanelData(outcomes=y, regressors=x, regressor_meta=regressor_meta,
                     unit_ids=tuple(units), period_ids=tuple(periods))


def write_panel_csv(path, data):
    """Write a panel in the long CSV format accepted by read_panel_csv."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["unit", "period", "y"] + list(data.regressor_names))
        for i, u in enumerate(data.unit_ids):
            for j, p in enumerate(data.period_ids):
                writer.writerow(
                    [u, p, _fmt(data.outcomes[i, j])]
                    + [_fmt(v) for v in data.regressors[i, j]]
                )


def _fmt(v):
    f = float(v)
    return str(int(f)) if f == int(f) else repr(f)


def _label_key(label):
    try:
        return (0, float(label), "")
    except ValueError:
        return (1, 0.0, label)
