"""Comparator designs: complete randomization and Mahalanobis rerandomization."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    CovariateTable,
    DesignSpec,
    FSMError,
    RngStream,
    SingularCovarianceError,
    SpecError,
    map_replicates,
)
from .engine import AssignmentResult

_BATCH = 2048


class RerandomizationBudgetError(FSMError):
    """No draw met the acceptance threshold within ``max_attempts``."""


@dataclass(frozen=True)
class RerandSpec:
    """Acceptance rule for rerandomization.

    ``criterion_columns`` names the columns entering M (``None`` means every
    column of the table passed in). To balance on squares and products,
    pass a table built with :func:`fsmdesign.diagnostics.second_order_expand`
    appended to the main covariates. ``pilot_draws`` defaults to
    ``ceil(100 / acceptance_rate)``.
    """

    acceptance_rate: float
    criterion_columns: tuple[str, ...] | None = None
    pilot_draws: int | None = None
    max_attempts: int = 10_000_000

    def __post_init__(self):
        if not 0 < self.acceptance_rate <= 1:
            raise SpecError(f"acceptance_rate: must lie in (0, 1], got {self.acceptance_rate}")
        if self.pilot_draws is not None and self.pilot_draws < 1:
            raise SpecError(f"pilot_draws: must be positive, got {self.pilot_draws}")
        if self.max_attempts < 1:
            raise SpecError(f"max_attempts: must be positive, got {self.max_attempts}")
        if self.criterion_columns is not None:
            object.__setattr__(self, "criterion_columns", tuple(self.criterion_columns))

    @property
    def n_pilot(self) -> int:
        if self.pilot_draws is not None:
            return self.pilot_draws
        return math.ceil(100 / self.acceptance_rate)


def _labels(spec: DesignSpec) -> np.ndarray:
    return np.repeat(np.arange(1, spec.n_groups + 1, dtype=np.int64), spec.group_sizes)


def crd_batch(spec: DesignSpec, rng: RngStream, size: int) -> np.ndarray:
    """``size`` independent complete randomizations, one per row."""
    base = np.broadcast_to(_labels(spec), (size, spec.n_units))
    return rng.permuted(base, axis=1)


def crd(spec: DesignSpec, rng: RngStream | None = None,
        unit_ids: Sequence[str] | None = None) -> AssignmentResult:
    """Uniform random partition of the units into groups of the sizes in ``spec``."""
    rng = RngStream(spec.seed) if rng is None else rng
    assignment = rng.permutation(_labels(spec))
    ids = tuple(unit_ids) if unit_ids is not None else tuple(str(i + 1) for i in range(spec.n_units))
    if len(ids) != spec.n_units:
        raise SpecError(f"group_sizes: sizes sum to {spec.n_units} but {len(ids)} unit ids were given")
    return AssignmentResult(assignment, ids, seed=rng.seed, metadata={"design": "crd"})


class MahalanobisCriterion:
    """Evaluates M for many assignments at once.

    The criterion columns are whitened once by the full-sample covariance
    (divisor N), after which M for groups ``g, g'`` is
    ``n_g n_g' / (n_g + n_g') * ||mean_g(z) - mean_g'(z)||^2``.
    """

    def __init__(self, table: CovariateTable, columns: Sequence[str] | None = None):
        idx = table.column_indices(columns)
        X = table.values[:, idx]
        centred = X - X.mean(axis=0)
        cov = centred.T @ centred / X.shape[0]
        try:
            L = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise SingularCovarianceError(
                "pooled covariance of the criterion columns is singular"
            ) from None
        d = np.diag(L)
        if d.min() ** 2 <= 1e-12 * d.max() ** 2:
            raise SingularCovarianceError("pooled covariance of the criterion columns is singular")
        self.columns = tuple(table.columns[i] for i in idx)
        self.z = np.linalg.solve(L, centred.T).T

    def batch(self, assignments: np.ndarray) -> np.ndarray:
        A = np.atleast_2d(assignments)
        G = int(A.max())
        sums = np.stack([(A == g).astype(float) @ self.z for g in range(1, G + 1)], axis=1)
        counts = np.stack([(A == g).sum(axis=1) for g in range(1, G + 1)], axis=1).astype(float)
        if np.any(counts == 0):
            raise FSMError("every group needs at least one unit to compute M")
        means = sums / counts[:, :, None]
        best = np.zeros(len(A))
        for g in range(G):
            for h in range(g + 1, G):
                diff = means[:, g] - means[:, h]
                factor = counts[:, g] * counts[:, h] / (counts[:, g] + counts[:, h])
                best = np.maximum(best, factor * np.einsum("ij,ij->i", diff, diff))
        return best

    def __call__(self, assignment: np.ndarray) -> float:
        return float(self.batch(np.asarray(assignment)[None, :])[0])


def max_pairwise_mahalanobis(table: CovariateTable, assignment: np.ndarray,
                             columns: Sequence[str] | None = None) -> float:
    """Largest between-group Mahalanobis imbalance M over all pairs of groups."""
    return MahalanobisCriterion(table, columns)(assignment)


def pilot_statistics(criterion: MahalanobisCriterion, spec: DesignSpec, n_draws: int,
                     rng: RngStream, threads: int = 1) -> np.ndarray:
    """M over ``n_draws`` complete randomizations, chunked into fixed child streams."""
    chunks = math.ceil(n_draws / _BATCH)

    def one(c: int) -> np.ndarray:
        size = min(_BATCH, n_draws - c * _BATCH)
        return criterion.batch(crd_batch(spec, rng.fork(c, "pilot"), size))

    return np.concatenate(map_replicates(one, chunks, threads))


def threshold_from_pilot(pilot: np.ndarray, acceptance_rate: float) -> float:
    """Empirical ``acceptance_rate`` quantile (inverse-CDF convention); inf when the rate is 1."""
    if acceptance_rate >= 1:
        return math.inf
    ordered = np.sort(np.asarray(pilot, dtype=float))
    pos = max(math.ceil(acceptance_rate * len(ordered)) - 1, 0)
    return float(ordered[pos])


def estimate_threshold(table: CovariateTable, spec: DesignSpec, rerand: RerandSpec,
                       rng: RngStream, threads: int = 1) -> float:
    if rerand.acceptance_rate >= 1:
        return math.inf
    criterion = MahalanobisCriterion(table, rerand.criterion_columns)
    pilot = pilot_statistics(criterion, spec, rerand.n_pilot, rng.fork(0, "pilot"), threads)
    return threshold_from_pilot(pilot, rerand.acceptance_rate)


def rerandomize(table: CovariateTable, spec: DesignSpec, rerand: RerandSpec,
                rng: RngStream | None = None, threshold: float | None = None,
                criterion: MahalanobisCriterion | None = None, threads: int = 1) -> AssignmentResult:
    """Complete randomization redrawn until M falls at or below the threshold.

    The threshold comes from a pilot of complete randomizations unless given;
    pass a precomputed one to reuse a single pilot across many replicates.
    Attempts are drawn in fixed batches from one child stream and the first
    acceptable draw in attempt order is returned.
    """
    spec.check_units(table.n)
    rng = RngStream(spec.seed) if rng is None else rng
    criterion = MahalanobisCriterion(table, rerand.criterion_columns) if criterion is None else criterion
    if threshold is None:
        threshold = estimate_threshold(table, spec, rerand, rng, threads)
    attempts_rng = rng.fork(0, "attempts")
    attempts = 0
    batch = 0
    while attempts < rerand.max_attempts:
        size = min(_BATCH, rerand.max_attempts - attempts)
        if rerand.acceptance_rate >= 1:
            size = 1
        draws = crd_batch(spec, attempts_rng.fork(batch, "batch"), size)
        stats = criterion.batch(draws)
        hits = np.flatnonzero(stats <= threshold)
        if len(hits):
            i = int(hits[0])
            attempts += i + 1
            return AssignmentResult(
                draws[i].copy(), table.unit_ids, seed=rng.seed,
                metadata={"design": "rerandomization", "acceptance_rate": rerand.acceptance_rate,
                          "threshold": threshold, "attempts": attempts, "M": float(stats[i]),
                          "criterion_columns": list(criterion.columns)},
            )
        attempts += size
        batch += 1
    raise RerandomizationBudgetError(
        f"no assignment with M <= {threshold:.6g} within max_attempts = {rerand.max_attempts}"
    )
