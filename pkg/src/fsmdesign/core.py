"""Shared data model: covariate tables, design specifications and seeded streams."""

from __future__ import annotations

import csv
import enum
import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable, Mapping, Sequence, TypeVar

import numpy as np

T = TypeVar("T")


class FSMError(Exception):
    """Base class for all errors raised by this package."""


class DataError(FSMError):
    """Input data is malformed (unparseable cells, duplicate ids, misaligned files)."""


class SpecError(FSMError):
    """A design specification is inconsistent with itself or with the data."""


class SingularCovarianceError(FSMError):
    """A covariance matrix that must be inverted is numerically singular."""


# ---------------------------------------------------------------------------
# Covariates
# ---------------------------------------------------------------------------


def _binary_mask(values: np.ndarray) -> np.ndarray:
    return np.all((values == 0.0) | (values == 1.0), axis=0)


@dataclass(frozen=True, eq=False)
class CovariateTable:
    """N units by k covariates.

    ``scaled_mask`` flags the non-binary columns; only those receive squares
    (and cubes) in the higher-order expansions used for balance diagnostics.
    """

    unit_ids: tuple[str, ...]
    columns: tuple[str, ...]
    values: np.ndarray
    scaled_mask: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self):
        values = np.array(self.values, dtype=float, copy=True)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2:
            raise DataError("covariate values must be a 2-d matrix")
        n, k = values.shape
        if n < 1 or k < 1:
            raise DataError(f"covariate table must have N >= 1 and k >= 1, got {n}x{k}")
        if not np.all(np.isfinite(values)):
            bad = np.argwhere(~np.isfinite(values))[0]
            raise DataError(
                f"non-finite covariate at row {bad[0] + 1}, column {self.columns[bad[1]]!r}"
            )
        if len(self.unit_ids) != n:
            raise DataError(f"{len(self.unit_ids)} unit ids for {n} rows")
        if len(self.columns) != k:
            raise DataError(f"{len(self.columns)} column names for {k} columns")
        if len(set(self.unit_ids)) != n:
            seen = set()
            for uid in self.unit_ids:
                if uid in seen:
                    raise DataError(f"duplicate unit id {uid!r}")
                seen.add(uid)
        if self.scaled_mask is None:
            mask = ~_binary_mask(values)
        else:
            mask = np.array(self.scaled_mask, dtype=bool, copy=True)
        if mask.shape != (k,):
            raise DataError("scaled_mask must have one flag per column")
        values.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "unit_ids", tuple(str(u) for u in self.unit_ids))
        object.__setattr__(self, "columns", tuple(str(c) for c in self.columns))
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "scaled_mask", mask)

    @classmethod
    def from_array(cls, values, columns: Sequence[str] | None = None,
                   unit_ids: Sequence[str] | None = None) -> "CovariateTable":
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        n, k = values.shape
        if columns is None:
            columns = [f"X{j + 1}" for j in range(k)]
        if unit_ids is None:
            unit_ids = [str(i + 1) for i in range(n)]
        return cls(tuple(unit_ids), tuple(columns), values)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def k(self) -> int:
        return self.values.shape[1]

    def column_indices(self, names: Sequence[str] | None) -> list[int]:
        if names is None:
            return list(range(self.k))
        lookup = {c: j for j, c in enumerate(self.columns)}
        missing = [c for c in names if c not in lookup]
        if missing:
            raise DataError(f"unknown column(s): {', '.join(missing)}")
        return [lookup[c] for c in names]

    def select_columns(self, names: Sequence[str]) -> "CovariateTable":
        idx = self.column_indices(names)
        return CovariateTable(self.unit_ids, tuple(self.columns[j] for j in idx),
                              self.values[:, idx], self.scaled_mask[idx])

    def subset(self, rows: Sequence[int]) -> "CovariateTable":
        rows = list(rows)
        return CovariateTable(tuple(self.unit_ids[i] for i in rows), self.columns,
                              self.values[rows], self.scaled_mask)


DEFAULT_ID_COLUMN = "unit_id"


def load_covariates(path, id_column: str | None = None,
                    skip_columns: Sequence[str] = ()) -> CovariateTable:
    """Read a CSV with a header row into a :class:`CovariateTable`.

    Every cell outside ``id_column`` and ``skip_columns`` must parse as a
    decimal real. When ``id_column`` is not given, a column named
    ``unit_id`` serves as the id if present; otherwise units are labelled
    ``1..N`` in file order.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [row for row in reader if any(cell.strip() for cell in row)]
    if not rows:
        raise DataError(f"{path}: no data rows")
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate column names in header")
    if id_column is None and DEFAULT_ID_COLUMN in header:
        id_column = DEFAULT_ID_COLUMN
    if id_column is not None and id_column not in header:
        raise DataError(f"{path}: id column {id_column!r} not in header")
    for name in skip_columns:
        if name not in header:
            raise DataError(f"{path}: column {name!r} not in header")
    id_pos = header.index(id_column) if id_column is not None else None
    cov_pos = [j for j in range(len(header)) if j != id_pos and header[j] not in skip_columns]
    if not cov_pos:
        raise DataError(f"{path}: no covariate columns")

    ids: list[str] = []
    values = np.empty((len(rows), len(cov_pos)))
    for i, row in enumerate(rows):
        line = i + 2
        if len(row) != len(header):
            raise DataError(f"{path}: row {line} has {len(row)} cells, expected {len(header)}")
        ids.append(row[id_pos].strip() if id_pos is not None else str(i + 1))
        for out_j, j in enumerate(cov_pos):
            cell = row[j].strip()
            try:
                v = float(cell)
            except ValueError:
                raise DataError(
                    f"{path}: non-numeric value {cell!r} at row {line}, column {header[j]!r}"
                ) from None
            if not math.isfinite(v):
                raise DataError(
                    f"{path}: non-finite value {cell!r} at row {line}, column {header[j]!r}"
                )
            values[i, out_j] = v
    return CovariateTable(tuple(ids), tuple(header[j] for j in cov_pos), values)


@dataclass(frozen=True, eq=False)
class FullSampleStats:
    mean: np.ndarray
    scatter: np.ndarray
    covariance: np.ndarray
    design_cross: np.ndarray
    n: int

    @cached_property
    def whitener(self) -> np.ndarray | None:
        """``L^{-1}`` with ``L L' = covariance``; None when the covariance is singular."""
        try:
            L = np.linalg.cholesky(self.covariance)
        except np.linalg.LinAlgError:
            return None
        d = np.diag(L)
        if d.min() ** 2 <= 1e-12 * max(d.max() ** 2, 1e-300):
            return None
        return np.linalg.inv(L)


def full_sample_stats(table: CovariateTable | np.ndarray) -> FullSampleStats:
    """Moments of the whole sample, all with divide-by-N normalisation."""
    X = table.values if isinstance(table, CovariateTable) else np.asarray(table, dtype=float)
    n, k = X.shape
    mean = X.mean(axis=0)
    scatter = X.T @ X / n
    centered = X - mean
    covariance = centered.T @ centered / n
    covariance = (covariance + covariance.T) / 2
    design = np.empty((k + 1, k + 1))
    design[0, 0] = 1.0
    design[0, 1:] = mean
    design[1:, 0] = mean
    design[1:, 1:] = scatter
    for arr in (mean, scatter, covariance, design):
        arr.setflags(write=False)
    return FullSampleStats(mean, scatter, covariance, design, n)


# ---------------------------------------------------------------------------
# Design specification
# ---------------------------------------------------------------------------


class Selection(enum.Enum):
    D_OPTIMAL = "d_optimal"
    A_OPTIMAL = "a_optimal"
    RANDOM = "random"


@dataclass(frozen=True, eq=False)
class DesignSpec:
    """Group sizes plus the selection rule and its tuning inputs.

    ``strata`` holds one stratum label per unit; ``stratum_sizes`` maps each
    stratum label to its per-group sizes ``(n_s1, ..., n_sG)``.
    """

    group_sizes: tuple[int, ...]
    selection: Selection = Selection.D_OPTIMAL
    epsilon: float = 0.01
    policy: np.ndarray | None = None
    policy_weights: np.ndarray | None = None
    strata: tuple | None = None
    stratum_sizes: Mapping | None = None
    seed: int = 0
    tie_tolerance: float = 1e-9
    rank_tolerance: float = 1e-9

    def __post_init__(self):
        sizes = tuple(int(n) for n in self.group_sizes)
        object.__setattr__(self, "group_sizes", sizes)
        if not sizes:
            raise SpecError("group_sizes: at least one group is required")
        if any(n < 1 for n in sizes):
            raise SpecError(f"group_sizes: every group size must be positive, got {sizes}")
        if not isinstance(self.selection, Selection):
            try:
                object.__setattr__(self, "selection", Selection(self.selection))
            except ValueError:
                choices = ", ".join(s.value for s in Selection)
                raise SpecError(f"selection: expected one of {choices}, got {self.selection!r}") from None
        if not self.epsilon > 0:
            raise SpecError(f"epsilon: must be positive, got {self.epsilon}")
        if not self.tie_tolerance > 0:
            raise SpecError(f"tie_tolerance: must be positive, got {self.tie_tolerance}")
        if not self.rank_tolerance > 0:
            raise SpecError(f"rank_tolerance: must be positive, got {self.rank_tolerance}")
        if not 0 <= int(self.seed) < 2**64:
            raise SpecError(f"seed: must be a 64-bit unsigned integer, got {self.seed}")
        object.__setattr__(self, "seed", int(self.seed))
        if self.selection is Selection.A_OPTIMAL and self.policy is None:
            raise SpecError("policy: A-optimal selection requires a policy matrix")
        if self.policy is not None:
            P = np.atleast_2d(np.asarray(self.policy, dtype=float))
            w = (np.ones(P.shape[0]) if self.policy_weights is None
                 else np.asarray(self.policy_weights, dtype=float))
            if w.shape != (P.shape[0],):
                raise SpecError("policy_weights: need one weight per policy row")
            if np.any(w < 0):
                raise SpecError("policy_weights: weights must be non-negative")
            object.__setattr__(self, "policy", P)
            object.__setattr__(self, "policy_weights", w)
        if (self.strata is None) != (self.stratum_sizes is None):
            raise SpecError("strata: unit labels and stratum_sizes must be given together")
        if self.stratum_sizes is not None:
            object.__setattr__(self, "strata", tuple(self.strata))
            table = {s: tuple(int(v) for v in row) for s, row in self.stratum_sizes.items()}
            object.__setattr__(self, "stratum_sizes", table)
            G = len(sizes)
            for s, row in table.items():
                if len(row) != G:
                    raise SpecError(f"stratum_sizes: stratum {s!r} lists {len(row)} sizes for {G} groups")
                if any(v < 0 for v in row):
                    raise SpecError(f"stratum_sizes: negative size in stratum {s!r}")
            for g in range(G):
                total = sum(row[g] for row in table.values())
                if total != sizes[g]:
                    raise SpecError(
                        f"stratum_sizes: group {g + 1} sums to {total} across strata, expected {sizes[g]}"
                    )
            counts: dict = {}
            for s in self.strata:
                counts[s] = counts.get(s, 0) + 1
            for s in counts:
                if s not in table:
                    raise SpecError(f"strata: unit stratum {s!r} has no entry in stratum_sizes")
            for s, row in table.items():
                if counts.get(s, 0) != sum(row):
                    raise SpecError(
                        f"stratum_sizes: stratum {s!r} has {counts.get(s, 0)} units but sizes sum to {sum(row)}"
                    )

    @property
    def n_groups(self) -> int:
        return len(self.group_sizes)

    @property
    def n_units(self) -> int:
        return sum(self.group_sizes)

    @property
    def policy_matrix(self) -> np.ndarray | None:
        """``T = P' diag(w) P`` for A-optimal selection."""
        if self.policy is None:
            return None
        return self.policy.T @ (self.policy_weights[:, None] * self.policy)

    def check_units(self, n: int) -> None:
        if self.n_units != n:
            raise SpecError(f"group_sizes: sizes sum to {self.n_units} but the table has {n} units")
        if self.strata is not None and len(self.strata) != n:
            raise SpecError(f"strata: {len(self.strata)} labels for {n} units")

    def replace(self, **changes) -> "DesignSpec":
        fields = {f: getattr(self, f) for f in self.__dataclass_fields__}
        fields.update(changes)
        return DesignSpec(**fields)


# ---------------------------------------------------------------------------
# Randomness
# ---------------------------------------------------------------------------


def _tag_id(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


class RngStream:
    """Seeded PCG64 stream with keyed, order-insensitive child streams.

    Children are derived through :class:`numpy.random.SeedSequence` spawn keys,
    so ``fork(m, tag)`` yields the same stream no matter what else ran first.
    """

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise SpecError(f"seed: must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self.key = tuple(int(k) for k in key)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(seed, spawn_key=self.key))
        )

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, key={self.key})"

    def fork(self, index: int, tag: str = "") -> "RngStream":
        return RngStream(self.seed, self.key + (int(index), _tag_id(tag)))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, size=None):
        return self._gen.random(size)

    def integers(self, high: int, size=None):
        return self._gen.integers(0, high, size=size)

    def permutation(self, x):
        return self._gen.permutation(x)

    def permuted(self, x, axis=-1):
        return self._gen.permuted(x, axis=axis)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)


def map_replicates(fn: Callable[[int], T], count: int, threads: int = 1) -> list[T]:
    """Evaluate ``fn(0..count-1)``; results come back in index order regardless of threads."""
    if threads <= 1 or count <= 1:
        return [fn(m) for m in range(count)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(count)))
