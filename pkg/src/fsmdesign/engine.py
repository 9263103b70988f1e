"""Run the finite selection model: a selection order plus a selection function."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import (
    CovariateTable,
    DesignSpec,
    FSMError,
    FullSampleStats,
    RngStream,
    SpecError,
    full_sample_stats,
)
from .selection import GroupState, Regime, SelectionScorecard, score_pool, tie_set
from .som import (
    SelectionOrderMatrix,
    StratifiedMethod,
    generate_som,
    generate_stratified_som,
)


@dataclass(frozen=True)
class TraceEntry:
    stage: int
    group: int
    unit: int
    regime: Regime
    stratum: object = None


@dataclass(eq=False)
class AssignmentResult:
    """Final unit-to-group map (labels 1..G, indexed by unit position) and how it arose."""

    assignment: np.ndarray
    unit_ids: tuple[str, ...]
    trace: list[TraceEntry] = field(default_factory=list)
    som: SelectionOrderMatrix | None = None
    seed: int | None = None
    metadata: dict = field(default_factory=dict)
    scorecards: list[SelectionScorecard] | None = None

    def group_counts(self, n_groups: int | None = None) -> np.ndarray:
        G = n_groups if n_groups is not None else int(self.assignment.max())
        return np.bincount(self.assignment, minlength=G + 1)[1:]

    def members(self, group: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == group)

    def stage_of_unit(self) -> dict[int, TraceEntry]:
        return {t.unit: t for t in self.trace}

    def assignment_rows(self) -> list[dict]:
        by_unit = self.stage_of_unit()
        rows = []
        for i, uid in enumerate(self.unit_ids):
            t = by_unit.get(i)
            rows.append({
                "unit_id": uid,
                "group": int(self.assignment[i]),
                "stage": "" if t is None else t.stage,
                "regime": "" if t is None else t.regime.value,
            })
        return rows

    def trace_rows(self) -> list[dict]:
        rows = []
        for t in self.trace:
            rows.append({
                "stage": t.stage,
                "group": t.group,
                "unit_id": self.unit_ids[t.unit],
                "regime": t.regime.value,
                "stratum": "" if t.stratum is None else t.stratum,
            })
        return rows

    def write_csv(self, path) -> None:
        _write_rows(path, ["unit_id", "group", "stage", "regime"], self.assignment_rows())

    def write_trace_csv(self, path) -> None:
        _write_rows(path, ["stage", "group", "unit_id", "regime", "stratum"], self.trace_rows())

    def write_scorecards_csv(self, path) -> None:
        if self.scorecards is None:
            raise FSMError("scorecards were not recorded for this run")
        rows = []
        for t, card in zip(self.trace, self.scorecards):
            for unit, score in card.scores.items():
                rows.append({
                    "stage": t.stage,
                    "group": t.group,
                    "regime": card.regime.value,
                    "unit_id": self.unit_ids[unit],
                    "score": repr(score),
                    "tied": int(unit in card.tie_set),
                    "chosen": int(unit == card.chosen),
                })
        _write_rows(path, ["stage", "group", "regime", "unit_id", "score", "tied", "chosen"], rows)


def _write_rows(path, fields, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def _warn_if_thin(k: int, sizes: Sequence[int]) -> None:
    if k + 1 > min(sizes):
        warnings.warn(
            f"k + 1 = {k + 1} exceeds the smallest group size {min(sizes)}; the D-optimal "
            "rule will rely on ridge augmentation for most stages",
            stacklevel=3,
        )


def _run_stages(X: np.ndarray, som: SelectionOrderMatrix, states: dict[int, GroupState],
                full: FullSampleStats, spec: DesignSpec, rng: RngStream,
                unit_strata: np.ndarray | None = None, unit_offset: int = 0,
                record_scores: bool = False):
    N = X.shape[0]
    available = np.ones(N, dtype=bool)
    assignment = np.zeros(N, dtype=np.int64)
    trace: list[TraceEntry] = []
    cards: list[SelectionScorecard] | None = [] if record_scores else None
    strata = som.stratum_at_stage
    for r, g in enumerate(som.group_at_stage):
        g = int(g)
        mask = available
        stratum = None
        if strata is not None:
            stratum = strata[r]
            mask = available & (unit_strata == stratum)
        pool = np.flatnonzero(mask)
        if len(pool) == 0:
            raise FSMError(f"stage {r + 1}: no available unit for group {g} (stratum {stratum!r})")
        state = states[g]
        scores, regime, fallback = score_pool(X[pool], state, full, spec)
        ties = tie_set(scores, spec.tie_tolerance)
        unit = int(pool[ties[rng.integers(len(ties))]])
        if cards is not None:
            cards.append(SelectionScorecard(
                scores={int(u): float(s) for u, s in zip(pool, scores)},
                chosen=unit, regime=regime,
                tie_set=[int(u) for u in pool[ties]], fallback=fallback,
            ))
        state.add(X[unit], unit + unit_offset)
        available[unit] = False
        assignment[unit] = g
        trace.append(TraceEntry(r + 1, g, unit, regime, stratum))
    return assignment, trace, cards


def _check_som(som: SelectionOrderMatrix, spec: DesignSpec) -> None:
    if len(som) != spec.n_units:
        raise SpecError(f"selection order has {len(som)} stages for {spec.n_units} units")
    counts = som.counts(spec.n_groups)
    if tuple(counts) != spec.group_sizes or som.group_at_stage.max() > spec.n_groups:
        raise SpecError(f"selection order counts {tuple(counts)} differ from group sizes {spec.group_sizes}")


def run_fsm(table: CovariateTable, spec: DesignSpec, rng: RngStream | None = None,
            som: SelectionOrderMatrix | None = None, full: FullSampleStats | None = None,
            record_scores: bool = False) -> AssignmentResult:
    """Assign every unit by letting groups pick in SOM order.

    ``rng`` defaults to a stream seeded with ``spec.seed``. The SOM (unless
    given) and the tie-breaks use separate child streams of ``rng``.
    """
    spec.check_units(table.n)
    _warn_if_thin(table.k, spec.group_sizes)
    rng = RngStream(spec.seed) if rng is None else rng
    som = generate_som(spec, rng.fork(0, "som")) if som is None else som
    _check_som(som, spec)
    full = full_sample_stats(table) if full is None else full
    states = {g: GroupState.empty(g, table.k) for g in range(1, spec.n_groups + 1)}
    assignment, trace, cards = _run_stages(table.values, som, states, full, spec,
                                           rng.fork(0, "select"), record_scores=record_scores)
    return AssignmentResult(assignment, table.unit_ids, trace, som, rng.seed,
                            {"design": "fsm", "selection": spec.selection.value,
                             "epsilon": spec.epsilon}, cards)


def run_stratified(table: CovariateTable, spec: DesignSpec,
                   method: StratifiedMethod | str = StratifiedMethod.INTERLEAVED,
                   rng: RngStream | None = None, record_scores: bool = False) -> AssignmentResult:
    """FSM within strata: at each stage the pool is the stratum named by the SOM."""
    spec.check_units(table.n)
    if spec.strata is None:
        raise SpecError("strata: run_stratified needs a design with strata")
    method = StratifiedMethod(method)
    _warn_if_thin(table.k, spec.group_sizes)
    rng = RngStream(spec.seed) if rng is None else rng
    som = generate_stratified_som(spec, method, rng)
    _check_som(som, spec)
    full = full_sample_stats(table)
    states = {g: GroupState.empty(g, table.k) for g in range(1, spec.n_groups + 1)}
    unit_strata = np.empty(table.n, dtype=object)
    unit_strata[:] = list(spec.strata)
    assignment, trace, cards = _run_stages(table.values, som, states, full, spec,
                                           rng.fork(0, "select"), unit_strata=unit_strata,
                                           record_scores=record_scores)
    return AssignmentResult(assignment, table.unit_ids, trace, som, rng.seed,
                            {"design": "fsm", "stratified": method.value,
                             "selection": spec.selection.value, "epsilon": spec.epsilon}, cards)


def run_sequential(batches: Sequence[CovariateTable], specs: Sequence[DesignSpec] | DesignSpec,
                   carryover: Sequence[GroupState] | None = None, rng: RngStream | None = None,
                   anchor: str = "batch") -> tuple[list[AssignmentResult], list[GroupState]]:
    """Assign batches one after another, carrying each group's design forward.

    Scores in batch ``b`` use the group's accumulated design cross-product
    from all earlier batches. ``anchor`` picks the full sample used by the
    empty and ridge branches: ``"batch"`` (current batch only) or
    ``"cumulative"`` (every unit seen so far, current batch included).
    Unit indices recorded in the returned states are positions in the
    concatenation of all batches.
    """
    if anchor not in ("batch", "cumulative"):
        raise SpecError(f"anchor: expected 'batch' or 'cumulative', got {anchor!r}")
    if isinstance(specs, DesignSpec):
        specs = [specs] * len(batches)
    if len(specs) != len(batches):
        raise SpecError(f"{len(specs)} specs for {len(batches)} batches")
    if not batches:
        return [], list(carryover or [])
    k = batches[0].k
    G = specs[0].n_groups
    if carryover is None:
        states = [GroupState.empty(g, k) for g in range(1, G + 1)]
    else:
        states = [s.copy() for s in carryover]
    if len(states) != G:
        raise SpecError(f"{len(states)} carried-over group states for {G} groups")
    rng = RngStream(specs[0].seed) if rng is None else rng
    results = []
    seen: list[np.ndarray] = []
    offset = 0
    for b, (table, spec) in enumerate(zip(batches, specs)):
        if table.k != k or any(s.k != table.k for s in states):
            raise SpecError(f"batch {b + 1}: covariate dimension {table.k} differs from carried states")
        if spec.n_groups != G:
            raise SpecError(f"batch {b + 1}: {spec.n_groups} groups, expected {G}")
        spec.check_units(table.n)
        seen.append(table.values)
        full = full_sample_stats(table if anchor == "batch" else np.vstack(seen))
        brng = rng.fork(b, "batch")
        som = generate_som(spec, brng.fork(0, "som"))
        by_label = {s.label: s for s in states}
        assignment, trace, _ = _run_stages(table.values, som, by_label, full, spec,
                                           brng.fork(0, "select"), unit_offset=offset)
        results.append(AssignmentResult(assignment, table.unit_ids, trace, som, rng.seed,
                                        {"design": "fsm", "batch": b + 1, "anchor": anchor}))
        offset += table.n
    return results, states
