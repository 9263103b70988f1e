"""Covariate balance metrics and their summaries across many assignments."""

from __future__ import annotations

import csv
import enum
import itertools
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import CovariateTable, DataError, FSMError


class GapMode(enum.Enum):
    CORRELATION = "correlation"
    COVARIANCE = "covariance"


def _group_rows(values: np.ndarray, assignment: np.ndarray, g: int) -> np.ndarray:
    rows = values[np.asarray(assignment) == g]
    if len(rows) == 0:
        raise FSMError(f"group {g} has no units")
    return rows


def _variance(rows: np.ndarray) -> np.ndarray:
    if len(rows) < 2:
        return np.zeros(rows.shape[1:])
    return rows.var(axis=0, ddof=1)


def asmd_vector(values: np.ndarray, assignment: np.ndarray, g: int, h: int,
                columns: Sequence[str] | None = None) -> np.ndarray:
    """Per-column ``|mean_g - mean_h| / sqrt((s_g^2 + s_h^2) / 2)`` with sample variances.

    A column with zero variance in both groups scores 0 when the means agree
    and is an error otherwise.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    a = _group_rows(values, assignment, g)
    b = _group_rows(values, assignment, h)
    gap = np.abs(a.mean(axis=0) - b.mean(axis=0))
    scale = np.sqrt((_variance(a) + _variance(b)) / 2)
    flat = scale <= 0
    if np.any(flat & (gap > 1e-12 * (1 + np.abs(a.mean(axis=0))))):
        j = int(np.flatnonzero(flat & (gap > 0))[0])
        name = columns[j] if columns is not None else f"column {j + 1}"
        raise DataError(f"{name}: zero variance within groups {g} and {h} but different means")
    out = np.zeros_like(gap)
    np.divide(gap, scale, out=out, where=~flat)
    return out


def asmd(x: np.ndarray, assignment: np.ndarray, g: int, h: int) -> float:
    """ASMD of a single covariate between groups ``g`` and ``h``."""
    return float(asmd_vector(np.asarray(x, dtype=float)[:, None], assignment, g, h)[0])


def second_order_expand(table: CovariateTable, columns: Sequence[str] | None = None,
                        order: int = 2, center: bool = True) -> CovariateTable:
    """Degree-``order`` terms of the (by default demeaned) covariates.

    Products run over distinct columns of the subset. Powers (squares, or
    cubes for ``order=3``) are only formed for scaled columns, since a power
    of a binary column is an affine function of the column itself.
    Demeaning uses full-sample means; ``center=False`` multiplies the raw
    columns instead.
    """
    if order not in (2, 3):
        raise ValueError(f"order must be 2 or 3, got {order}")
    idx = table.column_indices(columns)
    centred = table.values - table.values.mean(axis=0) if center else table.values
    names: list[str] = []
    cols: list[np.ndarray] = []
    for combo in itertools.combinations_with_replacement(idx, order):
        distinct = set(combo)
        if len(distinct) == 1 and not table.scaled_mask[combo[0]]:
            continue
        if 1 < len(distinct) < order:
            continue
        if len(distinct) == 1:
            names.append(f"{table.columns[combo[0]]}^{order}")
        else:
            names.append("*".join(table.columns[i] for i in combo))
        cols.append(np.prod(centred[:, list(combo)], axis=1))
    values = np.column_stack(cols) if cols else np.zeros((table.n, 0))
    return CovariateTable(table.unit_ids, tuple(names), values)


def _group_matrix(rows: np.ndarray, mode: GapMode, names: Sequence[str], g: int) -> np.ndarray:
    if len(rows) < 2:
        raise FSMError(f"group {g} needs at least 2 units for a {mode.value} matrix")
    S = np.cov(rows, rowvar=False, ddof=1)
    S = np.atleast_2d(S)
    if mode is GapMode.COVARIANCE:
        return S
    sd = np.sqrt(np.diag(S))
    if np.any(sd <= 0):
        j = int(np.flatnonzero(sd <= 0)[0])
        raise DataError(f"{names[j]}: zero variance within group {g}, correlation undefined")
    return S / np.outer(sd, sd)


def frobenius_gap(table: CovariateTable, assignment: np.ndarray, g: int, h: int,
                  mode: GapMode | str = GapMode.CORRELATION) -> float:
    """``||R_g - R_h||_F`` (correlation) or ``||S_g - S_h||_F`` (covariance)."""
    mode = GapMode(mode)
    Mg = _group_matrix(_group_rows(table.values, assignment, g), mode, table.columns, g)
    Mh = _group_matrix(_group_rows(table.values, assignment, h), mode, table.columns, h)
    return float(np.linalg.norm(Mg - Mh))


@dataclass(frozen=True)
class BalanceConfig:
    """What :func:`summarize_draws` measures.

    ``second_order_columns`` picks the columns fed to the expansion
    (``None``: all) and ``center`` whether they are demeaned first. Set
    ``order`` to 3 for cubes and three-way products or to ``None`` to skip
    higher-order balance.
    """

    second_order_columns: tuple[str, ...] | None = None
    order: int | None = 2
    center: bool = True
    frobenius: bool = True


@dataclass
class BalanceReport:
    """Per-draw balance metrics for one design; arrays are indexed ``[draw, pair, ...]``."""

    pairs: list[tuple[int, int]]
    columns: tuple[str, ...]
    asmd_main: np.ndarray
    second_columns: tuple[str, ...] = ()
    asmd_second: np.ndarray | None = None
    frobenius_corr: np.ndarray | None = None
    frobenius_cov: np.ndarray | None = None
    design: str = ""
    extras: dict = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return self.asmd_main.shape[0]

    @property
    def mean_asmd_main(self) -> float:
        return float(self.asmd_main.mean())

    @property
    def mean_asmd_second(self) -> float | None:
        if self.asmd_second is None or self.asmd_second.size == 0:
            return None
        return float(self.asmd_second.mean())

    def column_means(self, second: bool = False) -> dict[str, float]:
        data = self.asmd_second if second else self.asmd_main
        names = self.second_columns if second else self.columns
        avg = data.mean(axis=(0, 1))
        return {c: float(v) for c, v in zip(names, avg)}

    def _metrics(self):
        yield "asmd_main", self.asmd_main, self.columns
        if self.asmd_second is not None:
            yield "asmd_second", self.asmd_second, self.second_columns
        if self.frobenius_corr is not None:
            yield "frobenius_corr", self.frobenius_corr[:, :, None], ("",)
            yield "frobenius_cov", self.frobenius_cov[:, :, None], ("",)

    def long_rows(self) -> list[dict]:
        rows = []
        for metric, data, names in self._metrics():
            for d in range(data.shape[0]):
                for p, (g, h) in enumerate(self.pairs):
                    for j, col in enumerate(names):
                        rows.append({"design": self.design, "metric": metric, "pair": f"{g}-{h}",
                                     "column": col, "draw": d + 1, "value": repr(float(data[d, p, j]))})
        return rows

    def summary(self) -> dict:
        out: dict = {"design": self.design, "draws": self.n_draws,
                     "mean_asmd_main": self.mean_asmd_main,
                     "asmd_main_by_column": self.column_means()}
        if self.mean_asmd_second is not None:
            out["mean_asmd_second"] = self.mean_asmd_second
            out["asmd_second_by_column"] = self.column_means(second=True)
        # per draw: mean ASMD over pairs and columns, largest Frobenius gap over pairs
        dists = {}
        for metric, data, _ in self._metrics():
            if metric.startswith("asmd"):
                dists[metric] = distribution(data.mean(axis=(1, 2)))
            else:
                dists[metric] = distribution(data[:, :, 0].max(axis=1))
        out["distributions"] = dists
        out.update(self.extras)
        return out


LONG_FIELDS = ["design", "metric", "pair", "column", "draw", "value"]


def distribution(values: np.ndarray) -> dict[str, float]:
    v = np.asarray(values, dtype=float)
    q = np.quantile(v, [0.25, 0.5, 0.75])
    return {"min": float(v.min()), "q1": float(q[0]), "median": float(q[1]),
            "mean": float(v.mean()), "q3": float(q[2]), "max": float(v.max())}


def summarize_draws(table: CovariateTable, draws: Sequence, config: BalanceConfig = BalanceConfig(),
                    design: str = "", second: CovariateTable | None = None) -> BalanceReport:
    """Balance metrics for every draw (each an assignment vector or result).

    ``second`` may carry a precomputed expansion to avoid rebuilding it.
    """
    if len(draws) == 0:
        raise FSMError("summarize_draws needs at least one draw")
    A = np.stack([np.asarray(getattr(d, "assignment", d)) for d in draws])
    G = int(A.max())
    pairs = list(itertools.combinations(range(1, G + 1), 2))
    if second is None and config.order is not None:
        second = second_order_expand(table, config.second_order_columns, config.order,
                                     config.center)
    main = np.empty((len(A), len(pairs), table.k))
    sec = None if second is None else np.empty((len(A), len(pairs), second.k))
    fc = fv = None
    if config.frobenius:
        fc = np.empty((len(A), len(pairs)))
        fv = np.empty((len(A), len(pairs)))
    for d, a in enumerate(A):
        for p, (g, h) in enumerate(pairs):
            main[d, p] = asmd_vector(table.values, a, g, h, table.columns)
            if sec is not None:
                sec[d, p] = asmd_vector(second.values, a, g, h, second.columns)
            if fc is not None:
                fc[d, p] = frobenius_gap(table, a, g, h, GapMode.CORRELATION)
                fv[d, p] = frobenius_gap(table, a, g, h, GapMode.COVARIANCE)
    return BalanceReport(pairs, table.columns, main,
                         () if second is None else second.columns, sec, fc, fv, design)


def write_long_csv(path, reports: Sequence[BalanceReport]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=LONG_FIELDS, lineterminator="\n")
        writer.writeheader()
        for rep in reports:
            writer.writerows(rep.long_rows())


def write_summary_json(path, reports: Sequence[BalanceReport], extra: dict | None = None) -> None:
    doc = {"designs": {rep.design: rep.summary() for rep in reports}}
    if extra:
        doc.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
