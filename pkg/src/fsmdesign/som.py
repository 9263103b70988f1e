"""Selection order matrices: the fair random schedule of which group picks next.

Exact generators are provided for two groups of any sizes (SCOMARS), equal
group sizes (randomized chunk), two size classes, and size classes with equal
class totals. Any other size vector goes through a supergroup heuristic that
keeps counts exact but carries no sequential-control guarantee.
"""

from __future__ import annotations

import csv
import enum
import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import DesignSpec, RngStream, SpecError

# Exhaustive two-way partition search is used up to this many groups.
_MAX_EXACT_PARTITION = 16


class StratifiedMethod(enum.Enum):
    PER_STRATUM = "per_stratum"
    INTERLEAVED = "interleaved"


@dataclass(frozen=True, eq=False)
class SelectionOrderMatrix:
    group_at_stage: np.ndarray
    stratum_at_stage: tuple | None = None
    marginal_probs: np.ndarray | None = None

    def __post_init__(self):
        groups = np.asarray(self.group_at_stage, dtype=np.int64).copy()
        groups.setflags(write=False)
        object.__setattr__(self, "group_at_stage", groups)
        if self.stratum_at_stage is not None:
            if len(self.stratum_at_stage) != len(groups):
                raise SpecError("stratum column length differs from group column length")
            object.__setattr__(self, "stratum_at_stage", tuple(self.stratum_at_stage))

    def __len__(self) -> int:
        return len(self.group_at_stage)

    @property
    def stages(self) -> np.ndarray:
        return np.arange(1, len(self) + 1)

    def counts(self, n_groups: int | None = None) -> np.ndarray:
        G = n_groups if n_groups is not None else int(self.group_at_stage.max())
        return np.bincount(self.group_at_stage, minlength=G + 1)[1:]

    def running_counts(self, n_groups: int) -> np.ndarray:
        """``S[i, g]``: selections by group ``g+1`` up to and including stage ``i+1``."""
        onehot = self.group_at_stage[:, None] == np.arange(1, n_groups + 1)[None, :]
        return np.cumsum(onehot, axis=0)

    def max_control_deviation(self, group_sizes: Sequence[int]) -> float:
        """``max_{i,g} |S_ig - i n_g / N|`` over all stages and groups."""
        return control_deviation(self.group_at_stage[None, :], group_sizes)

    def to_rows(self) -> list[dict]:
        rows = []
        for r, g in enumerate(self.group_at_stage):
            row = {"stage": r + 1, "group": int(g)}
            if self.stratum_at_stage is not None:
                row["stratum"] = self.stratum_at_stage[r]
            if self.marginal_probs is not None:
                row["marginal_prob"] = float(self.marginal_probs[r])
            rows.append(row)
        return rows

    def write_csv(self, path) -> None:
        rows = self.to_rows()
        fields = ["stage", "group"]
        if self.stratum_at_stage is not None:
            fields.append("stratum")
        if self.marginal_probs is not None:
            fields.append("marginal_prob")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
            writer.writeheader()
            for row in rows:
                if "marginal_prob" in row:
                    row["marginal_prob"] = repr(row["marginal_prob"])
                writer.writerow(row)


def control_deviation(orders: np.ndarray, group_sizes: Sequence[int]) -> float:
    """Largest ``|S_ig - F_ig|`` across a batch of label sequences (rows)."""
    orders = np.atleast_2d(orders)
    sizes = np.asarray(group_sizes, dtype=float)
    N = sizes.sum()
    stages = np.arange(1, orders.shape[1] + 1, dtype=float)
    worst = 0.0
    for g, n_g in enumerate(sizes, start=1):
        S = np.cumsum(orders == g, axis=1)
        F = stages * n_g / N
        worst = max(worst, float(np.max(np.abs(S - F[None, :]))))
    return worst


# ---------------------------------------------------------------------------
# Two groups: SCOMARS
# ---------------------------------------------------------------------------


def scomars_conditional(p_cum_prev: float, p_r: float, s_prev: float) -> float:
    """P(group 1 selects at stage r | S_{r-1} = s_prev), clamped to [0, 1]."""
    gap = s_prev - p_cum_prev
    if not 0.0 <= p_r <= 1.0:
        raise ValueError(f"p_r must lie in [0, 1], got {p_r}")
    if abs(gap) >= 1.0:
        raise ValueError(
            f"|S_(r-1) - F_(r-1)| = {abs(gap)} >= 1: the order is not sequentially controlled"
        )
    prob = (p_r - max(0.0, gap)) / (1.0 - abs(gap))
    return min(1.0, max(0.0, prob))


def scomars_indicators(n1: int, n2: int, rng: RngStream, size: int | None = None) -> np.ndarray:
    """Stage-wise indicators that group 1 selects, one row per draw.

    Uses the constant marginal ``p_r = n1/N``. All arithmetic is carried out
    on the integer scale ``N (s - F)`` so the forced stages (conditional
    probability exactly 0 or 1) are exact.
    """
    n1, n2 = int(n1), int(n2)
    if n1 < 1 or n2 < 1:
        raise SpecError(f"SCOMARS needs two positive group sizes, got ({n1}, {n2})")
    N = n1 + n2
    rows = 1 if size is None else int(size)
    u = rng.uniform((rows, N))
    out = np.zeros((rows, N), dtype=bool)
    s = np.zeros(rows, dtype=np.int64)
    for r in range(N):
        d = s * N - r * n1
        num = n1 - np.maximum(d, 0)
        den = N - np.abs(d)
        pick = u[:, r] * den < num
        out[:, r] = pick
        s += pick
    return out[0] if size is None else out


def generate_scomars_som(n1: int, n2: int, rng: RngStream) -> SelectionOrderMatrix:
    w = scomars_indicators(n1, n2, rng)
    labels = np.where(w, 1, 2)
    probs = np.full(len(labels), n1 / (n1 + n2))
    return SelectionOrderMatrix(labels, marginal_probs=probs)


# ---------------------------------------------------------------------------
# Equal sizes: randomized chunk
# ---------------------------------------------------------------------------


def chunk_orders(labels: Sequence[int], n_per_group: int, rng: RngStream,
                 size: int | None = None) -> np.ndarray:
    """Stacked independent permutations of ``labels``; one row per draw."""
    labels = np.asarray(labels, dtype=np.int64)
    rows = 1 if size is None else int(size)
    base = np.broadcast_to(labels, (rows * n_per_group, len(labels)))
    perms = rng.permuted(base, axis=1).reshape(rows, n_per_group * len(labels))
    return perms[0] if size is None else perms


def generate_randomized_chunk_som(G: int, n_per_group: int, rng: RngStream) -> SelectionOrderMatrix:
    if G < 2 or n_per_group < 1:
        raise SpecError(f"randomized chunk needs G >= 2 and n >= 1, got G={G}, n={n_per_group}")
    return SelectionOrderMatrix(chunk_orders(range(1, G + 1), n_per_group, rng))


# ---------------------------------------------------------------------------
# Supergroup constructions
# ---------------------------------------------------------------------------


def _fill(super_order: np.ndarray, parts: dict[int, np.ndarray]) -> np.ndarray:
    out = np.empty(len(super_order), dtype=np.int64)
    for key, seq in parts.items():
        slots = np.flatnonzero(super_order == key)
        out[slots] = seq
    return out


def _chunk_sequence(labels: Sequence[int], n: int, rng: RngStream) -> np.ndarray:
    if len(labels) == 1:
        return np.full(n, labels[0], dtype=np.int64)
    return chunk_orders(labels, n, rng)


def _two_class_sequence(class_a: Sequence[int], size_a: int, class_b: Sequence[int],
                        size_b: int, rng: RngStream) -> np.ndarray:
    w = scomars_indicators(len(class_a) * size_a, len(class_b) * size_b, rng)
    super_order = np.where(w, 0, 1)
    return _fill(super_order, {
        0: _chunk_sequence(class_a, size_a, rng),
        1: _chunk_sequence(class_b, size_b, rng),
    })


def _size_classes(labels: Sequence[int], sizes: Sequence[int]) -> list[tuple[list[int], int]]:
    classes: dict[int, list[int]] = {}
    for lab, n in zip(labels, sizes):
        classes.setdefault(n, []).append(lab)
    return [(labs, n) for n, labs in classes.items()]


def generate_two_size_som(sizes: Sequence[int], rng: RngStream) -> SelectionOrderMatrix:
    """SCOMARS over the two size classes, then randomized chunk inside each."""
    sizes = [int(n) for n in sizes]
    classes = _size_classes(range(1, len(sizes) + 1), sizes)
    if len(classes) != 2:
        raise SpecError(f"two-size SOM needs exactly two distinct sizes, got {sorted(set(sizes))}")
    (la, na), (lb, nb) = classes
    return SelectionOrderMatrix(_two_class_sequence(la, na, lb, nb, rng))


def _equal_product_sequence(classes: list[tuple[list[int], int]], rng: RngStream) -> np.ndarray:
    totals = {len(labs) * n for labs, n in classes}
    if len(classes) < 2 or len(totals) != 1:
        raise SpecError("equal-product SOM needs >= 2 size classes with equal class totals")
    total = totals.pop()
    super_order = chunk_orders(range(len(classes)), total, rng)
    parts = {j: _chunk_sequence(labs, n, rng) for j, (labs, n) in enumerate(classes)}
    return _fill(super_order, parts)


def generate_equal_product_som(size_classes: Sequence[tuple[int, int]],
                               rng: RngStream) -> SelectionOrderMatrix:
    """Randomized chunk over supergroups of equal total size, then within each.

    ``size_classes`` lists ``(G_j, n_j)``; groups are labelled consecutively
    class by class.
    """
    classes = []
    next_label = 1
    for G_j, n_j in size_classes:
        classes.append((list(range(next_label, next_label + int(G_j))), int(n_j)))
        next_label += int(G_j)
    return SelectionOrderMatrix(_equal_product_sequence(classes, rng))


# ---------------------------------------------------------------------------
# Dispatcher and heuristic
# ---------------------------------------------------------------------------


def _best_split(labels: list[int], sizes: list[int]) -> tuple[list[int], list[int]]:
    """Two-way split of the groups with the most nearly equal totals.

    Exhaustive for small G (ties go to the lexicographically smallest first
    block, which always contains the first group); greedy beyond that.
    """
    G = len(labels)
    total = sum(sizes)
    if G <= _MAX_EXACT_PARTITION:
        best = None
        rest = list(range(1, G))
        for r in range(0, G - 1):
            for combo in itertools.combinations(rest, r):
                block = (0,) + combo
                gap = abs(total - 2 * sum(sizes[i] for i in block))
                key = (gap, block)
                if best is None or key < best:
                    best = key
        block = set(best[1])
    else:
        order = sorted(range(G), key=lambda i: (-sizes[i], i))
        block, load = set(), [0, 0]
        for i in order:
            side = 0 if load[0] <= load[1] else 1
            load[side] += sizes[i]
            if side == 0:
                block.add(i)
    first = [labels[i] for i in range(G) if i in block]
    second = [labels[i] for i in range(G) if i not in block]
    return first, second


def _sequence(labels: list[int], sizes: list[int], rng: RngStream) -> tuple[np.ndarray, bool]:
    """Label sequence for the given groups, plus whether an exact construction was used."""
    if len(labels) == 1:
        return np.full(sizes[0], labels[0], dtype=np.int64), True
    classes = _size_classes(labels, sizes)
    if len(classes) == 1:
        return chunk_orders(labels, sizes[0], rng), True
    if len(labels) == 2:
        w = scomars_indicators(sizes[0], sizes[1], rng)
        return np.where(w, labels[0], labels[1]).astype(np.int64), True
    if len(classes) == 2:
        (la, na), (lb, nb) = classes
        return _two_class_sequence(la, na, lb, nb, rng), True
    if len({len(labs) * n for labs, n in classes}) == 1:
        return _equal_product_sequence(classes, rng), True
    first, second = _best_split(labels, sizes)
    lookup = dict(zip(labels, sizes))
    sa = [lookup[g] for g in first]
    sb = [lookup[g] for g in second]
    w = scomars_indicators(sum(sa), sum(sb), rng)
    seq_a, _ = _sequence(first, sa, rng)
    seq_b, _ = _sequence(second, sb, rng)
    return _fill(np.where(w, 0, 1), {0: seq_a, 1: seq_b}), False


def _nested_sequence(node, sizes: dict[int, int], rng: RngStream) -> tuple[np.ndarray, int]:
    if isinstance(node, (int, np.integer)):
        if int(node) not in sizes:
            raise SpecError(f"supergroups: unknown group label {node}")
        return np.full(sizes[int(node)], int(node), dtype=np.int64), sizes[int(node)]
    children = list(node)
    if not children:
        raise SpecError("supergroups: empty block")
    if len(children) == 1:
        return _nested_sequence(children[0], sizes, rng)
    parts = [_nested_sequence(c, sizes, rng.fork(j, "block")) for j, c in enumerate(children)]
    totals = [t for _, t in parts]
    top, _ = _sequence(list(range(len(children))), totals, rng.fork(0, "top"))
    return _fill(top, {j: seq for j, (seq, _) in enumerate(parts)}), sum(totals)


def generate_nested_som(sizes: Sequence[int], supergroups, rng: RngStream) -> SelectionOrderMatrix:
    """SOM from an explicit nesting of groups, e.g. ``((1, 2), (3, 4))``.

    Each block's selection order among its children is generated from the
    children's totals with the exact generators (SCOMARS for two children),
    recursively down to single groups.
    """
    sizes = [int(n) for n in sizes]
    lookup = {g: n for g, n in enumerate(sizes, start=1)}
    seq, _ = _nested_sequence(supergroups, lookup, rng)
    counts = np.bincount(seq, minlength=len(sizes) + 1)[1:]
    if counts.tolist() != sizes:
        raise SpecError(f"supergroups: every group must appear exactly once, got counts {counts.tolist()}")
    return SelectionOrderMatrix(seq)


def is_exact_configuration(sizes: Sequence[int]) -> bool:
    """True when the sizes admit a construction with guaranteed sequential control."""
    sizes = [int(n) for n in sizes]
    if len(sizes) <= 2:
        return True
    classes = _size_classes(range(len(sizes)), sizes)
    return len(classes) <= 2 or len({len(l) * n for l, n in classes}) == 1


def generate_som_for_sizes(sizes: Sequence[int], rng: RngStream) -> SelectionOrderMatrix:
    sizes = [int(n) for n in sizes]
    if not sizes or any(n < 1 for n in sizes):
        raise SpecError(f"group_sizes: every group size must be positive, got {sizes}")
    seq, _ = _sequence(list(range(1, len(sizes) + 1)), sizes, rng)
    probs = None
    if len(sizes) == 2:
        probs = np.full(len(seq), sizes[0] / sum(sizes))
    return SelectionOrderMatrix(seq, marginal_probs=probs)


def generate_som(spec: DesignSpec, rng: RngStream) -> SelectionOrderMatrix:
    """SOM for the group sizes of ``spec`` (strata, if any, are ignored here)."""
    return generate_som_for_sizes(spec.group_sizes, rng)


def stratum_order(spec: DesignSpec) -> list:
    return list(spec.stratum_sizes.keys())


def generate_stratified_som(spec: DesignSpec, method: StratifiedMethod | str,
                            rng: RngStream) -> SelectionOrderMatrix:
    """SOM with a stratum column honouring every per-(stratum, group) size.

    PER_STRATUM concatenates one SOM per stratum in ``stratum_sizes`` order.
    INTERLEAVED draws a usual SOM and then, for each group, orders the strata
    it picks from with the same two-way/multi-way generators.
    """
    method = StratifiedMethod(method)
    if spec.stratum_sizes is None:
        raise SpecError("strata: stratified SOM requested but the design has no strata")
    strata = stratum_order(spec)
    G = spec.n_groups
    if method is StratifiedMethod.PER_STRATUM:
        som_rng = rng.fork(0, "som")
        groups, labels = [], []
        for s in strata:
            row = spec.stratum_sizes[s]
            active = [g + 1 for g in range(G) if row[g] > 0]
            if not active:
                continue
            seq, _ = _sequence(active, [row[g - 1] for g in active], som_rng)
            groups.append(seq)
            labels.extend([s] * len(seq))
        return SelectionOrderMatrix(np.concatenate(groups), stratum_at_stage=tuple(labels))

    base = generate_som_for_sizes(spec.group_sizes, rng.fork(0, "som"))
    strata_rng = rng.fork(0, "strata")
    labels: list = [None] * len(base)
    for g in range(1, G + 1):
        per = [spec.stratum_sizes[s][g - 1] for s in strata]
        active = [j for j, n in enumerate(per) if n > 0]
        seq, _ = _sequence(active, [per[j] for j in active], strata_rng.fork(g, "group"))
        for slot, j in zip(np.flatnonzero(base.group_at_stage == g), seq):
            labels[slot] = strata[j]
    return SelectionOrderMatrix(base.group_at_stage, stratum_at_stage=tuple(labels),
                                marginal_probs=base.marginal_probs)
