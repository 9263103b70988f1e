"""Randomization tests, difference-in-means, regression imputation and design-based SEs."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import CovariateTable, DataError, FSMError, RngStream, SpecError, map_replicates


@dataclass(frozen=True, eq=False)
class OutcomeTable:
    """Observed outcomes aligned to unit ids, plus optional ``N x G`` potential outcomes."""

    unit_ids: tuple[str, ...]
    observed: np.ndarray
    potentials: np.ndarray | None = None

    def __post_init__(self):
        y = np.array(self.observed, dtype=float, copy=True).reshape(-1)
        if len(y) != len(self.unit_ids):
            raise DataError(f"{len(y)} outcomes for {len(self.unit_ids)} unit ids")
        if not np.all(np.isfinite(y)):
            i = int(np.flatnonzero(~np.isfinite(y))[0])
            raise DataError(f"non-finite outcome for unit {self.unit_ids[i]!r}")
        y.setflags(write=False)
        object.__setattr__(self, "observed", y)
        object.__setattr__(self, "unit_ids", tuple(str(u) for u in self.unit_ids))
        if self.potentials is not None:
            P = np.array(self.potentials, dtype=float, copy=True)
            if P.ndim != 2 or P.shape[0] != len(y) or not np.all(np.isfinite(P)):
                raise DataError("potential outcomes must be a finite N x G matrix")
            P.setflags(write=False)
            object.__setattr__(self, "potentials", P)

    @classmethod
    def from_potentials(cls, unit_ids: Sequence[str], potentials: np.ndarray,
                        assignment: np.ndarray | None = None) -> "OutcomeTable":
        P = np.asarray(potentials, dtype=float)
        y = P[:, 0] if assignment is None else observed_outcomes(P, assignment)
        return cls(tuple(unit_ids), y, P)

    def aligned_to(self, unit_ids: Sequence[str]) -> "OutcomeTable":
        """Reorder to ``unit_ids``; a missing id is a data error naming it."""
        pos = {u: i for i, u in enumerate(self.unit_ids)}
        order = []
        for u in unit_ids:
            if u not in pos:
                raise DataError(f"unit id {u!r} has no outcome")
            order.append(pos[u])
        if len(order) != len(self.unit_ids):
            extra = next(u for u in self.unit_ids if u not in set(unit_ids))
            raise DataError(f"outcome for unknown unit id {extra!r}")
        P = None if self.potentials is None else self.potentials[order]
        return OutcomeTable(tuple(unit_ids), self.observed[order], P)


def observed_outcomes(potentials: np.ndarray, assignment: np.ndarray) -> np.ndarray:
    z = np.asarray(assignment)
    return np.asarray(potentials)[np.arange(len(z)), z - 1]


def load_outcomes(path, id_column: str = "unit_id", outcome_column: str | None = None) -> OutcomeTable:
    """Read a CSV with a unit id column and one outcome column (the first other column by default)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty outcome file")
        if id_column not in reader.fieldnames:
            raise DataError(f"{path}: missing id column {id_column!r}")
        if outcome_column is None:
            others = [c for c in reader.fieldnames if c != id_column]
            if not others:
                raise DataError(f"{path}: no outcome column")
            outcome_column = others[0]
        elif outcome_column not in reader.fieldnames:
            raise DataError(f"{path}: missing outcome column {outcome_column!r}")
        ids, ys = [], []
        for line, row in enumerate(reader, start=2):
            try:
                ys.append(float(row[outcome_column]))
            except (TypeError, ValueError):
                raise DataError(f"{path}: line {line}: bad outcome {row[outcome_column]!r}") from None
            ids.append(row[id_column])
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate unit ids")
    return OutcomeTable(tuple(ids), np.array(ys))


def _members(y: np.ndarray, z: np.ndarray, g: int) -> np.ndarray:
    vals = y[z == g]
    if len(vals) == 0:
        raise FSMError(f"group {g} is empty")
    return vals


def diff_in_means(y: np.ndarray, assignment: np.ndarray, g: int = 1, h: int = 2) -> float:
    """Mean outcome in group ``g`` minus mean outcome in group ``h``."""
    y = np.asarray(y, dtype=float)
    z = np.asarray(assignment)
    return float(_members(y, z, g).mean() - _members(y, z, h).mean())


def studentized_diff(y: np.ndarray, assignment: np.ndarray, g: int = 1, h: int = 2) -> float:
    """Difference in means over its unpooled standard error; 0 when that error is 0."""
    y = np.asarray(y, dtype=float)
    z = np.asarray(assignment)
    a, b = _members(y, z, g), _members(y, z, h)
    va = a.var(ddof=1) if len(a) > 1 else 0.0
    vb = b.var(ddof=1) if len(b) > 1 else 0.0
    se = np.sqrt(va / len(a) + vb / len(b))
    diff = a.mean() - b.mean()
    return float(diff / se) if se > 0 else 0.0


class Statistic(enum.Enum):
    ABS_DIFF_IN_MEANS = "abs_diff_in_means"
    STUDENTIZED = "studentized"


def statistic_value(statistic: Statistic | str, y: np.ndarray, assignment: np.ndarray,
                    g: int = 1, h: int = 2) -> float:
    statistic = Statistic(statistic)
    if statistic is Statistic.ABS_DIFF_IN_MEANS:
        return abs(diff_in_means(y, assignment, g, h))
    return abs(studentized_diff(y, assignment, g, h))


def _batch_stat(statistic: Statistic, y: np.ndarray, A: np.ndarray, g: int, h: int) -> np.ndarray:
    if statistic is not Statistic.ABS_DIFF_IN_MEANS:
        return np.array([statistic_value(statistic, y, a, g, h) for a in A])
    ing, inh = (A == g), (A == h)
    ng, nh = ing.sum(axis=1), inh.sum(axis=1)
    if np.any(ng == 0) or np.any(nh == 0):
        raise FSMError("a replicate assignment left a compared group empty")
    return np.abs(ing @ y / ng - inh @ y / nh)


def monte_carlo_p_value(replicates: np.ndarray, t_obs: float, conservative: bool = False) -> float:
    """Share of replicate statistics at least ``t_obs``.

    A relative tolerance of 1e-12 absorbs rounding so that replicates equal
    to ``t_obs`` in exact arithmetic count as ties.
    """
    T = np.asarray(replicates, dtype=float)
    hits = int(np.count_nonzero(T >= t_obs - 1e-12 * max(1.0, abs(t_obs))))
    if conservative:
        return (hits + 1) / (len(T) + 1)
    return hits / len(T)


@dataclass
class TestResult:
    statistic: str
    statistic_observed: float
    p_hat: float
    M: int
    replicate_stats: np.ndarray | None = None
    seed: int | None = None
    conservative: bool = False
    extras: dict = field(default_factory=dict)

    __test__ = False  # keep pytest from collecting this class

    def to_dict(self) -> dict:
        out = {"statistic": self.statistic, "t_obs": self.statistic_observed, "M": self.M,
               "p_hat": self.p_hat, "seed": self.seed, "conservative": self.conservative}
        out.update(self.extras)
        return out


def replicate_assignments(sampler, M: int, rng: RngStream, threads: int = 1) -> np.ndarray:
    """``M`` fresh assignments from ``sampler`` (a :class:`DesignSampler` or ``rng -> array``)."""
    if M < 1:
        raise SpecError(f"M: need at least one replicate, got {M}")
    if hasattr(sampler, "draw_assignments"):
        return sampler.draw_assignments(M, rng, threads)
    return np.stack(map_replicates(lambda m: np.asarray(sampler(rng.fork(m, "draw"))), M, threads))


def randomization_test(sampler, outcomes: OutcomeTable | np.ndarray, assignment: np.ndarray,
                       statistic: Statistic | str = Statistic.ABS_DIFF_IN_MEANS, M: int = 1000,
                       rng: RngStream | None = None, g: int = 1, h: int = 2, threads: int = 1,
                       conservative: bool = False, keep_replicates: bool = True) -> TestResult:
    """Monte Carlo test of the sharp null of no effect for any unit.

    Under the null the observed outcomes are fixed, so each replicate only
    needs a new assignment drawn from the same design as the observed one.
    """
    statistic = Statistic(statistic)
    y = outcomes.observed if isinstance(outcomes, OutcomeTable) else np.asarray(outcomes, dtype=float)
    rng = RngStream(0) if rng is None else rng
    t_obs = statistic_value(statistic, y, assignment, g, h)
    A = replicate_assignments(sampler, M, rng.fork(0, "replicates"), threads)
    T = _batch_stat(statistic, y, A, g, h)
    return TestResult(statistic.value, t_obs, monte_carlo_p_value(T, t_obs, conservative), M,
                      T if keep_replicates else None, rng.seed, conservative)


def exact_p_value(y: np.ndarray, assignment: np.ndarray, assignments: np.ndarray,
                  statistic: Statistic | str = Statistic.ABS_DIFF_IN_MEANS,
                  g: int = 1, h: int = 2) -> float:
    """p-value over an explicit, equally likely set of assignments."""
    statistic = Statistic(statistic)
    y = np.asarray(y, dtype=float)
    t_obs = statistic_value(statistic, y, assignment, g, h)
    return monte_carlo_p_value(_batch_stat(statistic, y, np.asarray(assignments), g, h), t_obs)


def shift_confidence_interval(sampler, outcomes: np.ndarray, assignment: np.ndarray,
                              alpha: float = 0.05, M: int = 1000, rng: RngStream | None = None,
                              g: int = 1, h: int = 2, tol: float = 1e-6,
                              threads: int = 1) -> tuple[float, float]:
    """Interval of constant effects ``tau`` not rejected at level ``alpha``.

    Each hypothesis ``Y(g) = Y(h) + tau`` is tested with the absolute
    difference-in-means statistic on one shared set of replicate
    assignments; the two endpoints are found by bisection.
    """
    y = np.asarray(outcomes, dtype=float)
    z = np.asarray(assignment)
    rng = RngStream(0) if rng is None else rng
    A = replicate_assignments(sampler, M, rng.fork(0, "replicates"), threads)
    est = diff_in_means(y, z, g, h)

    def p_at(tau: float) -> float:
        # under the hypothesis these adjusted outcomes do not depend on the assignment
        y0 = y - tau * (z == g)
        T = _batch_stat(Statistic.ABS_DIFF_IN_MEANS, y0, A, g, h)
        return monte_carlo_p_value(T, abs(diff_in_means(y0, z, g, h)))

    spread = np.std(y) + 1.0

    def edge(direction: float) -> float:
        inside, step = est, spread
        outside = est + direction * step
        while p_at(outside) > alpha:
            inside, step = outside, step * 2
            outside = est + direction * step
            if step > 1e12 * spread:
                return direction * np.inf
        while abs(outside - inside) > tol * spread:
            mid = (inside + outside) / 2
            if p_at(mid) > alpha:
                inside = mid
            else:
                outside = mid
        return inside

    return edge(-1.0), edge(1.0)


def regression_imputation(table: CovariateTable, assignment: np.ndarray,
                          outcomes: OutcomeTable | np.ndarray, basis_columns: Sequence[str] | None,
                          g: int = 1, h: int = 2) -> tuple[float, float]:
    """Per-group least squares, contrasted at the full-sample basis mean.

    The basis is an intercept plus ``basis_columns`` (``None``: all columns,
    empty: intercept only). The standard error is the classical
    homoskedastic one from the two independent fits.
    """
    y = outcomes.observed if isinstance(outcomes, OutcomeTable) else np.asarray(outcomes, dtype=float)
    z = np.asarray(assignment)
    idx = table.column_indices(basis_columns)
    B = np.hstack([np.ones((table.n, 1)), table.values[:, idx]])
    b_bar = B.mean(axis=0)
    betas, covs = [], []
    for grp in (g, h):
        rows = z == grp
        Bg, yg = B[rows], y[rows]
        n, b = Bg.shape
        if n <= b or np.linalg.matrix_rank(Bg) < b:
            raise DataError(f"group {grp}: basis design is rank deficient or has no residual degrees of freedom")
        gram_inv = np.linalg.inv(Bg.T @ Bg)
        beta = gram_inv @ (Bg.T @ yg)
        resid = yg - Bg @ beta
        sigma2 = float(resid @ resid) / (n - b)
        betas.append(beta)
        covs.append(sigma2 * gram_inv)
    estimate = float((betas[0] - betas[1]) @ b_bar)
    se = float(np.sqrt(max(b_bar @ (covs[0] + covs[1]) @ b_bar, 0.0)))
    return estimate, se


Estimator = Callable[[np.ndarray, np.ndarray], float]


def randomization_se(sampler, potentials: np.ndarray, estimator: Estimator | None = None,
                     R: int = 400, rng: RngStream | None = None, threads: int = 1,
                     return_draws: bool = False):
    """Standard deviation of an estimator across ``R`` independent design draws.

    ``estimator(y_obs, assignment)`` defaults to the group 1 minus group 2
    difference in means.
    """
    if R < 2:
        raise SpecError(f"R: need at least 2 draws for a standard deviation, got {R}")
    P = np.asarray(potentials, dtype=float)
    est = estimator or (lambda y, z: diff_in_means(y, z, 1, 2))
    rng = RngStream(0) if rng is None else rng
    A = replicate_assignments(sampler, R, rng, threads)
    values = np.array([est(observed_outcomes(P, a), a) for a in A])
    se = float(values.std(ddof=1))
    return (se, values) if return_draws else se
