"""Synthetic covariates and potential-outcome models for design comparisons."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .core import CovariateTable, RngStream, SpecError

HAINMUELLER_COV = np.array([[2.0, 1.0, -1.0], [1.0, 1.0, -0.5], [-1.0, -0.5, 1.0]])


def hainmueller_covariates(n: int = 120, rng: RngStream | None = None) -> CovariateTable:
    """Six covariates: a correlated normal triple, Unif(-3, 3), chi-square(1), Bernoulli(1/2)."""
    rng = RngStream(0) if rng is None else rng
    gen = rng.generator
    normal = gen.multivariate_normal(np.zeros(3), HAINMUELLER_COV, size=n, method="cholesky")
    x4 = gen.uniform(-3.0, 3.0, size=n)
    x5 = gen.chisquare(1, size=n)
    x6 = gen.binomial(1, 0.5, size=n).astype(float)
    X = np.column_stack([normal, x4, x5, x6])
    return CovariateTable.from_array(X, columns=[f"X{j}" for j in range(1, 7)])


def _c(X: np.ndarray, j: int) -> np.ndarray:
    return X[:, j - 1]


# Each model maps (covariates, noise) to one potential outcome per unit.
# noise_scale is the standard deviation of the noise the model expects.
MODELS: dict[str, tuple[Callable[[np.ndarray, np.ndarray], np.ndarray], float, int]] = {
    "b1": (lambda X, e: _c(X, 1) + _c(X, 2) + _c(X, 3) - _c(X, 4) + _c(X, 5) + _c(X, 6) + e, 1.0, 6),
    "b2": (lambda X, e: (_c(X, 1) + _c(X, 2) + _c(X, 5)) ** 2 + e, 1.0, 5),
    "linear4": (lambda X, e: 10 + 2 * _c(X, 1) + 3 * _c(X, 2) + 0.5 * _c(X, 3) + 0.3 * _c(X, 4) + e,
               1.5, 4),
    "interact5": (lambda X, e: 10 + 2 * _c(X, 1) + 2 * _c(X, 2) * _c(X, 3) - _c(X, 4) * _c(X, 5) + e,
               1.5, 5),
    "b3": (lambda X, e: 5 - 3 * _c(X, 1) + _c(X, 2) + _c(X, 3) - 0.2 * _c(X, 4) + 0.8 * _c(X, 5) + e,
           1.5, 5),
    "b4": (lambda X, e: (5 - 2 * _c(X, 1) ** 2 + 0.5 * _c(X, 3) ** 2 + 0.5 * _c(X, 5) ** 2
                         + 5 * _c(X, 1) * _c(X, 2) - 0.8 * _c(X, 3) * _c(X, 5) + e), 1.5, 5),
    "b5": (lambda X, e: 10 + 8 * _c(X, 1) * _c(X, 2) + 3 * _c(X, 2) * _c(X, 5)
           - 0.5 * _c(X, 3) * _c(X, 5) + e, 1.5, 5),
    "b6": (lambda X, e: (0.8 * _c(X, 1) * _c(X, 2) - 3 * _c(X, 3) ** 2 + 1 / (1 + _c(X, 4))
                         - 4 * _c(X, 1) ** 3 + e), 1.5, 4),
    "constant": (lambda X, e: np.zeros(X.shape[0]), 0.0, 0),
}


def potential_outcomes(table: CovariateTable, model: str, rng: RngStream | None = None,
                       n_groups: int = 2, effects: np.ndarray | None = None) -> np.ndarray:
    """``N x G`` potential outcomes with a constant effect per group (zero by default).

    The noise is drawn once per unit and shared by every group, so with zero
    effects all potential outcomes of a unit coincide.
    """
    key = model.lower()
    if key not in MODELS:
        raise SpecError(f"model: unknown model {model!r} (known: {', '.join(sorted(MODELS))})")
    fn, scale, needs = MODELS[key]
    if table.k < needs:
        raise SpecError(f"model: {model!r} uses {needs} covariates but the table has {table.k}")
    rng = RngStream(0) if rng is None else rng
    noise = rng.normal(0.0, scale, size=table.n) if scale > 0 else np.zeros(table.n)
    base = np.asarray(fn(table.values, noise), dtype=float)
    effects = np.zeros(n_groups) if effects is None else np.asarray(effects, dtype=float)
    if effects.shape != (n_groups,):
        raise SpecError(f"effects: expected {n_groups} values, got {effects.shape}")
    return base[:, None] + effects[None, :]
