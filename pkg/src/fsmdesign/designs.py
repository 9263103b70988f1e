"""A uniform way to draw many assignments from FSM, CRD or rerandomization."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field

import numpy as np

from .baselines import MahalanobisCriterion, RerandSpec, crd, estimate_threshold, rerandomize
from .core import CovariateTable, DesignSpec, FullSampleStats, RngStream, SpecError, full_sample_stats, map_replicates
from .engine import AssignmentResult, run_fsm, run_stratified


class Design(enum.Enum):
    FSM = "fsm"
    CRD = "crd"
    RERANDOMIZATION = "rerandomization"


_RR = re.compile(r"^rr(?:[_-]?)(\d*\.?\d+(?:e-?\d+)?)?$")


def parse_design(name: str, default_rate: float = 0.001) -> tuple[Design, float | None]:
    """``fsm``, ``crd``, ``rr`` or ``rr<rate>`` such as ``rr0.001``."""
    key = name.strip().lower()
    if key in ("fsm", "crd"):
        return Design(key), None
    if key == "rerandomization":
        return Design.RERANDOMIZATION, default_rate
    m = _RR.match(key)
    if m:
        return Design.RERANDOMIZATION, float(m.group(1)) if m.group(1) else default_rate
    raise SpecError(f"designs: unknown design {name!r} (use fsm, crd, rr or rr<rate>)")


@dataclass
class DesignSampler:
    """Draws assignments for one design on a fixed covariate table.

    For rerandomization the acceptance threshold is estimated once, from
    ``threshold_rng`` (default: a child of ``spec.seed``), and shared by
    every draw.
    """

    table: CovariateTable
    spec: DesignSpec
    design: Design = Design.FSM
    rerand: RerandSpec | None = None
    stratified_method: str | None = None
    threshold: float | None = None
    threshold_rng: RngStream | None = None
    _full: FullSampleStats | None = field(default=None, init=False, repr=False)
    _criterion: MahalanobisCriterion | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.design = Design(self.design)
        self.spec.check_units(self.table.n)
        if self.design is Design.RERANDOMIZATION and self.rerand is None:
            raise SpecError("rerand: rerandomization needs a RerandSpec")

    @classmethod
    def from_name(cls, name: str, table: CovariateTable, spec: DesignSpec,
                  rerand: RerandSpec | None = None, **kwargs) -> "DesignSampler":
        design, rate = parse_design(name, rerand.acceptance_rate if rerand else 0.001)
        if design is Design.RERANDOMIZATION:
            base = rerand if rerand is not None else RerandSpec(rate)
            if base.acceptance_rate != rate:
                base = RerandSpec(rate, base.criterion_columns, base.pilot_draws, base.max_attempts)
            rerand = base
        return cls(table, spec, design, rerand, **kwargs)

    @property
    def name(self) -> str:
        if self.design is Design.RERANDOMIZATION:
            return f"rr{self.rerand.acceptance_rate:g}"
        return self.design.value

    def prepare(self, threads: int = 1) -> None:
        if self.design is Design.FSM and self._full is None:
            self._full = full_sample_stats(self.table)
        if self.design is Design.RERANDOMIZATION:
            if self._criterion is None:
                self._criterion = MahalanobisCriterion(self.table, self.rerand.criterion_columns)
            if self.threshold is None:
                rng = self.threshold_rng or RngStream(self.spec.seed).fork(0, "threshold")
                self.threshold = estimate_threshold(self.table, self.spec, self.rerand, rng, threads)

    def draw(self, rng: RngStream) -> AssignmentResult:
        self.prepare()
        if self.design is Design.CRD:
            return crd(self.spec, rng, self.table.unit_ids)
        if self.design is Design.RERANDOMIZATION:
            return rerandomize(self.table, self.spec, self.rerand, rng, self.threshold, self._criterion)
        if self.spec.strata is not None:
            return run_stratified(self.table, self.spec, self.stratified_method or "interleaved", rng)
        return run_fsm(self.table, self.spec, rng, full=self._full)

    def draw_many(self, count: int, rng: RngStream, threads: int = 1) -> list[AssignmentResult]:
        """``count`` draws; draw ``m`` always uses ``rng.fork(m, "draw")``."""
        self.prepare(threads)
        return map_replicates(lambda m: self.draw(rng.fork(m, "draw")), count, threads)

    def draw_assignments(self, count: int, rng: RngStream, threads: int = 1) -> np.ndarray:
        return np.stack([r.assignment for r in self.draw_many(count, rng, threads)])
