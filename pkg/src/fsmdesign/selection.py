"""Selection functions: which available unit the choosing group takes next.

The D-optimal rule is evaluated in its Mahalanobis form. Depending on the
group's history the centre and scatter come from the full sample (no units
yet), an epsilon-mixture of group and full sample (group design cross-product
singular), or the group alone (invertible). The determinant form is kept as
an independent check.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .core import (
    CovariateTable,
    DesignSpec,
    FSMError,
    FullSampleStats,
    RngStream,
    Selection,
    SingularCovarianceError,
)


class Regime(enum.Enum):
    EMPTY = "empty"
    RIDGE = "ridge"
    PURE = "pure"


@dataclass
class GroupState:
    """Running design information for one treatment group."""

    label: int
    count: int
    sum: np.ndarray
    scatter_sum: np.ndarray
    design_cross: np.ndarray
    selected_units: list[int] = field(default_factory=list)

    @classmethod
    def empty(cls, label: int, k: int) -> "GroupState":
        return cls(label, 0, np.zeros(k), np.zeros((k, k)), np.zeros((k + 1, k + 1)), [])

    @classmethod
    def from_rows(cls, label: int, rows: np.ndarray, units=None) -> "GroupState":
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        state = cls.empty(label, rows.shape[1])
        units = range(len(rows)) if units is None else units
        for x, u in zip(rows, units):
            state.add(x, int(u))
        return state

    @property
    def k(self) -> int:
        return len(self.sum)

    @property
    def mean(self) -> np.ndarray:
        return self.sum / self.count

    @property
    def covariance(self) -> np.ndarray:
        m = self.mean
        return self.scatter_sum / self.count - np.outer(m, m)

    def add(self, x: np.ndarray, unit: int | None = None) -> None:
        """Rank-one accumulation of one selected row (in place)."""
        x = np.asarray(x, dtype=float)
        self.count += 1
        self.sum = self.sum + x
        outer = np.outer(x, x)
        self.scatter_sum = self.scatter_sum + outer
        dc = self.design_cross.copy()
        dc[0, 0] += 1.0
        dc[0, 1:] += x
        dc[1:, 0] += x
        dc[1:, 1:] += outer
        self.design_cross = dc
        if unit is not None:
            self.selected_units.append(int(unit))

    def copy(self) -> "GroupState":
        return GroupState(self.label, self.count, self.sum.copy(), self.scatter_sum.copy(),
                          self.design_cross.copy(), list(self.selected_units))


def update_state(state: GroupState, x: np.ndarray, unit: int | None = None) -> GroupState:
    new = state.copy()
    new.add(x, unit)
    return new


def whitened_design_cross(state: GroupState, whitener: np.ndarray, centre: np.ndarray) -> np.ndarray:
    """Design cross-product of the group's rows after ``z = W (x - centre)``."""
    n = state.count
    s = state.sum - n * centre
    C = (state.scatter_sum - np.outer(state.sum, centre) - np.outer(centre, state.sum)
         + n * np.outer(centre, centre))
    k = state.k
    out = np.empty((k + 1, k + 1))
    out[0, 0] = n
    out[0, 1:] = out[1:, 0] = whitener @ s
    out[1:, 1:] = whitener @ C @ whitener.T
    return out


def regime_of(state: GroupState, rank_tolerance: float = 1e-9,
              full: FullSampleStats | None = None) -> Regime:
    """EMPTY, RIDGE (design cross-product singular) or PURE.

    The rank test is a relative singular-value threshold. When ``full`` is
    given it is applied to the covariates whitened by the full-sample
    covariance, which makes the decision invariant to affine recoding.
    """
    if state.count == 0:
        return Regime.EMPTY
    if state.count < state.k + 1:
        return Regime.RIDGE
    M = state.design_cross
    if full is not None and full.whitener is not None:
        M = whitened_design_cross(state, full.whitener, full.mean)
    sv = np.linalg.svd(M, compute_uv=False)
    return Regime.PURE if sv[-1] > rank_tolerance * sv[0] else Regime.RIDGE


def dopt_target(state: GroupState, full: FullSampleStats, epsilon: float,
                rank_tolerance: float = 1e-9) -> tuple[Regime, np.ndarray, np.ndarray]:
    """Centre and scatter ``(X*, S*)`` of the Mahalanobis form for this group."""
    regime = regime_of(state, rank_tolerance, full)
    if regime is Regime.EMPTY:
        return regime, full.mean, full.covariance
    if regime is Regime.PURE:
        return regime, state.mean, state.covariance
    centre = (state.mean + epsilon * full.mean) / (1.0 + epsilon)
    scatter = (state.scatter_sum / state.count + epsilon * full.scatter
               - (1.0 + epsilon) * np.outer(centre, centre))
    return regime, centre, scatter


def _cholesky(S: np.ndarray) -> np.ndarray:
    S = (S + S.T) / 2
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise SingularCovarianceError(
            "covariance used by the D-optimal score is singular (constant or collinear column?)"
        ) from None
    diag = np.diag(L)
    if diag.min() ** 2 <= 1e-12 * diag.max() ** 2:
        raise SingularCovarianceError(
            "covariance used by the D-optimal score is numerically singular"
        )
    return L


def mahalanobis_scores(X: np.ndarray, centre: np.ndarray, S: np.ndarray) -> np.ndarray:
    """``(x - c)' S^{-1} (x - c)`` for each row of ``X``, via one Cholesky factor."""
    L = _cholesky(S)
    Z = solve_triangular(L, (np.atleast_2d(X) - centre).T, lower=True, check_finite=False)
    return np.einsum("ij,ij->j", Z, Z)


def dopt_scores(X: np.ndarray, state: GroupState, full: FullSampleStats, epsilon: float,
                rank_tolerance: float = 1e-9) -> tuple[np.ndarray, Regime]:
    regime, centre, S = dopt_target(state, full, epsilon, rank_tolerance)
    return mahalanobis_scores(X, centre, S), regime


def dopt_score(candidate: np.ndarray, state: GroupState, full: FullSampleStats,
               epsilon: float = 0.01) -> float:
    scores, _ = dopt_scores(np.atleast_2d(candidate), state, full, epsilon)
    return float(scores[0])


def _augment(X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return np.hstack([np.ones((X.shape[0], 1)), X])


def _checked_inverse(M: np.ndarray, what: str) -> np.ndarray:
    sv = np.linalg.svd(M, compute_uv=False)
    if sv[-1] <= 1e-12 * sv[0]:
        raise SingularCovarianceError(f"{what} is singular")
    return np.linalg.inv(M)


def dopt_score_det(candidate: np.ndarray, state: GroupState) -> float:
    """``(1, x') M^{-1} (1, x')'`` with ``M`` the group's design cross-product.

    ``det(M + v v') = det(M) (1 + v' M^{-1} v)``, so this ranks candidates by
    the determinant they would produce. Only defined when ``M`` is invertible.
    """
    Minv = _checked_inverse(state.design_cross, "group design cross-product")
    v = _augment(candidate)[0]
    return float(v @ Minv @ v)


def aopt_scores(X: np.ndarray, state: GroupState, T: np.ndarray) -> np.ndarray:
    """Reduction in ``trace(T M^{-1})`` from adding each row of ``X`` (larger is better)."""
    Minv = _checked_inverse(state.design_cross, "group design cross-product")
    V = _augment(X)
    A = V @ Minv
    num = np.einsum("ij,jk,ik->i", A, T, A)
    den = 1.0 + np.einsum("ij,ij->i", A, V)
    return num / den


def aopt_score(candidate: np.ndarray, state: GroupState, T: np.ndarray) -> float:
    return float(aopt_scores(np.atleast_2d(candidate), state, T)[0])


@dataclass
class SelectionScorecard:
    scores: dict[int, float]
    chosen: int
    regime: Regime
    tie_set: list[int]
    fallback: bool = False


def tie_set(scores: np.ndarray, tolerance: float) -> np.ndarray:
    """Positions whose score is within ``tolerance * max(1, |max|)`` of the max."""
    top = scores.max()
    return np.flatnonzero(scores >= top - tolerance * max(1.0, abs(top)))


def score_pool(X_pool: np.ndarray, state: GroupState, full: FullSampleStats,
               spec: DesignSpec) -> tuple[np.ndarray, Regime, bool]:
    """Scores for the candidate rows under the selection rule of ``spec``."""
    if spec.selection is Selection.RANDOM:
        return np.zeros(len(X_pool)), regime_of(state, spec.rank_tolerance, full), False
    if spec.selection is Selection.A_OPTIMAL:
        regime = regime_of(state, spec.rank_tolerance, full)
        if regime is Regime.PURE:
            return aopt_scores(X_pool, state, spec.policy_matrix), regime, False
        scores, regime = dopt_scores(X_pool, state, full, spec.epsilon, spec.rank_tolerance)
        return scores, regime, True
    scores, regime = dopt_scores(X_pool, state, full, spec.epsilon, spec.rank_tolerance)
    return scores, regime, False


def select_next(state: GroupState, pool, table: CovariateTable | np.ndarray,
                full: FullSampleStats, spec: DesignSpec,
                rng: RngStream) -> tuple[int, SelectionScorecard]:
    """Pick the best available unit for ``state``; ties are broken uniformly.

    The pool is scanned in ascending unit order and exactly one integer is
    drawn from ``rng`` per call, so the random stream stays aligned across
    runs whatever the size of the tie set.
    """
    pool = np.sort(np.fromiter(pool, dtype=np.int64)) if not isinstance(pool, np.ndarray) \
        else np.sort(pool.astype(np.int64))
    if len(pool) == 0:
        raise FSMError("cannot select from an empty pool")
    X = table.values if isinstance(table, CovariateTable) else np.asarray(table, dtype=float)
    scores, regime, fallback = score_pool(X[pool], state, full, spec)
    ties = tie_set(scores, spec.tie_tolerance)
    pick = int(pool[ties[rng.integers(len(ties))]])
    card = SelectionScorecard(
        scores={int(u): float(s) for u, s in zip(pool, scores)},
        chosen=pick,
        regime=regime,
        tie_set=[int(u) for u in pool[ties]],
        fallback=fallback,
    )
    return pick, card
