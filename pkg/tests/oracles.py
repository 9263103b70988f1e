"""Slow, direct reference computations used to cross-check the package."""

from __future__ import annotations

import itertools
from fractions import Fraction

import numpy as np


def augmented(rows):
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    return np.hstack([np.ones((len(rows), 1)), rows])


def design_det(rows) -> float:
    A = augmented(rows)
    return float(np.linalg.det(A.T @ A))


def brute_force_det_scores(group_rows, pool_rows) -> np.ndarray:
    """det of the augmented cross-product after appending each candidate."""
    return np.array([design_det(np.vstack([group_rows, c])) for c in pool_rows])


def brute_force_trace(group_rows, pool_rows, T) -> np.ndarray:
    out = []
    for c in pool_rows:
        A = augmented(np.vstack([group_rows, c]))
        out.append(float(np.trace(T @ np.linalg.inv(A.T @ A))))
    return np.array(out)


def scomars_path_probability(n1: int, n2: int, path) -> Fraction:
    """Exact probability of a 0/1 path (1 = group 1) under the two-group chain."""
    N = n1 + n2
    p = Fraction(n1, N)
    s = 0
    prob = Fraction(1)
    for r, w in enumerate(path, start=1):
        gap = s - (r - 1) * p
        q = min(Fraction(1), max(Fraction(0), (p - max(Fraction(0), gap)) / (1 - abs(gap))))
        prob *= q if w else 1 - q
        s += w
    return prob


def naive_fsm(X, som, epsilon, tie_draws):
    """Direct transcription of the stage rule with explicit inverses.

    ``tie_draws(n_ties)`` returns the position in the tie list. Regimes are
    decided by the rank of the group's augmented rows, which agrees with the
    package on generic continuous data.
    """
    X = np.asarray(X, dtype=float)
    N, k = X.shape
    mean_full = X.mean(axis=0)
    cov_full = (X - mean_full).T @ (X - mean_full) / N
    scatter_full = X.T @ X / N
    groups: dict[int, list[int]] = {}
    available = list(range(N))
    picked = []
    for g in som:
        rows = groups.setdefault(int(g), [])
        if not rows:
            c, S = mean_full, cov_full
        else:
            G = X[rows]
            n = len(rows)
            if np.linalg.matrix_rank(augmented(G)) == k + 1:
                c = G.mean(axis=0)
                S = (G - c).T @ (G - c) / n
            else:
                c = (G.mean(axis=0) + epsilon * mean_full) / (1 + epsilon)
                S = G.T @ G / n + epsilon * scatter_full - (1 + epsilon) * np.outer(c, c)
        Sinv = np.linalg.inv(S)
        scores = np.array([(X[i] - c) @ Sinv @ (X[i] - c) for i in available])
        top = scores.max()
        ties = [available[j] for j in np.flatnonzero(scores >= top - 1e-9 * max(1.0, abs(top)))]
        unit = ties[tie_draws(len(ties))]
        rows.append(unit)
        available.remove(unit)
        picked.append(unit)
    return picked


def exact_permutation_p(y, z, g=1, h=2) -> float:
    """p-value of |difference in means| over every equally likely relabelling."""
    y = np.asarray(y, dtype=float)
    z = np.asarray(z)
    n_g = int(np.sum(z == g))
    N = len(y)
    t_obs = abs(y[z == g].mean() - y[z == h].mean())
    hits = total = 0
    for combo in itertools.combinations(range(N), n_g):
        mask = np.zeros(N, dtype=bool)
        mask[list(combo)] = True
        t = abs(y[mask].mean() - y[~mask].mean())
        hits += t >= t_obs - 1e-12 * max(1.0, t_obs)
        total += 1
    return hits / total


def all_partitions(N: int, n1: int) -> np.ndarray:
    out = []
    for combo in itertools.combinations(range(N), n1):
        z = np.full(N, 2)
        z[list(combo)] = 1
        out.append(z)
    return np.array(out)


def ols_normal_equations(B, y):
    B = np.asarray(B, dtype=float)
    beta = np.linalg.solve(B.T @ B, B.T @ y)
    resid = y - B @ beta
    sigma2 = resid @ resid / (len(y) - B.shape[1])
    return beta, sigma2 * np.linalg.inv(B.T @ B)


def sample_asmd(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    va = np.var(a, ddof=1) if len(a) > 1 else 0.0
    vb = np.var(b, ddof=1) if len(b) > 1 else 0.0
    return abs(a.mean() - b.mean()) / np.sqrt((va + vb) / 2)
