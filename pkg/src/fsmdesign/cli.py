"""Command-line entry point: ``fsmdesign assign | compare | simulate | test``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .baselines import RerandomizationBudgetError, RerandSpec
from .core import (
    CovariateTable,
    DataError,
    DesignSpec,
    FSMError,
    RngStream,
    SingularCovarianceError,
    SpecError,
    load_covariates,
)
from .designs import Design, DesignSampler, parse_design
from .diagnostics import BalanceConfig, second_order_expand, summarize_draws, write_long_csv, write_summary_json
from .inference import Statistic, load_outcomes, randomization_se, randomization_test
from .simulation import MODELS, hainmueller_covariates, potential_outcomes

log = logging.getLogger("fsmdesign")

EXIT_OK, EXIT_FAILURE, EXIT_SPEC, EXIT_DATA, EXIT_BUDGET = 0, 1, 2, 3, 4


@dataclass
class RunConfig:
    """Everything a command needs; mirrors a JSON config file field for field."""

    method: str = "fsm"
    group_sizes: list[int] | None = None
    n_groups: int | None = None
    selection: str = "d_optimal"
    epsilon: float = 0.01
    tie_tolerance: float = 1e-9
    rank_tolerance: float = 1e-9
    policy: list[list[float]] | None = None
    policy_weights: list[float] | None = None
    id_column: str | None = None
    columns: list[str] | None = None
    strata_column: str | None = None
    stratum_sizes: dict[str, list[int]] | None = None
    stratified_method: str = "interleaved"
    acceptance_rate: float = 0.001
    criterion: str = "main"
    criterion_columns: list[str] | None = None
    pilot_draws: int | None = None
    max_attempts: int = 10_000_000
    designs: list[str] = field(default_factory=lambda: ["crd", "rr0.001", "fsm"])
    draws: int = 100
    second_order_columns: list[str] | None = None
    order: int | None = 2
    center: bool = True
    frobenius: bool = True
    dgp: str = "hainmueller"
    dgp_n: int = 120
    model: str = "b1"
    statistic: str = "abs_diff_in_means"
    M: int = 1000
    conservative: bool = False
    groups_compared: list[int] = field(default_factory=lambda: [1, 2])
    seed: int = 0

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise SpecError("config: top level must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise SpecError(f"config: unknown field(s) {', '.join(unknown)}")
        return cls(**doc)

    def merged(self, overrides: dict) -> "RunConfig":
        return dataclasses.replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise DataError(f"config: cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise SpecError(f"config: {path} is not valid JSON ({exc.msg}, line {exc.lineno})") from None
    try:
        return RunConfig.from_dict(doc)
    except TypeError as exc:
        raise SpecError(f"config: {exc}") from None


def _sizes(cfg: RunConfig, n: int) -> tuple[int, ...]:
    if cfg.group_sizes is not None:
        return tuple(int(v) for v in cfg.group_sizes)
    G = cfg.n_groups or 2
    if n % G:
        raise SpecError(f"group_sizes: {n} units do not split evenly into {G} groups; give group_sizes")
    return (n // G,) * G


def read_labels(path, column: str, id_column: str | None) -> list[str]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        if column not in header:
            raise DataError(f"{path}: column {column!r} not in header")
        j = header.index(column)
        return [row[j].strip() for row in reader if any(c.strip() for c in row)]


def build_spec(cfg: RunConfig, table: CovariateTable, strata: Sequence[str] | None = None) -> DesignSpec:
    stratum_sizes = None
    if strata is not None:
        if cfg.stratum_sizes is None:
            raise SpecError("stratum_sizes: required when strata_column is set")
        stratum_sizes = {str(s): row for s, row in cfg.stratum_sizes.items()}
    return DesignSpec(
        group_sizes=_sizes(cfg, table.n),
        selection=cfg.selection,
        epsilon=cfg.epsilon,
        policy=None if cfg.policy is None else np.asarray(cfg.policy, dtype=float),
        policy_weights=None if cfg.policy_weights is None else np.asarray(cfg.policy_weights, dtype=float),
        strata=None if strata is None else tuple(strata),
        stratum_sizes=stratum_sizes,
        seed=cfg.seed,
        tie_tolerance=cfg.tie_tolerance,
        rank_tolerance=cfg.rank_tolerance,
    )


def load_table(path, cfg: RunConfig) -> tuple[CovariateTable, list[str] | None]:
    skip = [cfg.strata_column] if cfg.strata_column else []
    table = load_covariates(path, cfg.id_column, skip_columns=skip)
    if cfg.columns is not None:
        table = table.select_columns(cfg.columns)
    strata = read_labels(path, cfg.strata_column, cfg.id_column) if cfg.strata_column else None
    return table, strata


def rerand_spec(cfg: RunConfig, rate: float | None = None) -> RerandSpec:
    return RerandSpec(rate if rate is not None else cfg.acceptance_rate,
                      None if cfg.criterion_columns is None else tuple(cfg.criterion_columns),
                      cfg.pilot_draws, cfg.max_attempts)


def criterion_table(cfg: RunConfig, table: CovariateTable) -> CovariateTable:
    """Main covariates, plus their squares and products for the second-order criterion."""
    if cfg.criterion == "main":
        return table
    if cfg.criterion != "second_order":
        raise SpecError(f"criterion: expected 'main' or 'second_order', got {cfg.criterion!r}")
    extra = second_order_expand(table, cfg.second_order_columns, 2, cfg.center)
    return CovariateTable(table.unit_ids, table.columns + extra.columns,
                          np.hstack([table.values, extra.values]))


def make_sampler(name: str, cfg: RunConfig, table: CovariateTable, spec: DesignSpec,
                 rng: RngStream) -> DesignSampler:
    design, rate = parse_design(name, cfg.acceptance_rate)
    if design is Design.RERANDOMIZATION:
        return DesignSampler(criterion_table(cfg, table), spec, design, rerand_spec(cfg, rate),
                             threshold_rng=rng.fork(0, "threshold"))
    method = cfg.stratified_method if spec.strata is not None else None
    return DesignSampler(table, spec, design, stratified_method=method)


def write_json(path: Path, doc: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def metadata(cfg: RunConfig, command: str, **extra) -> dict:
    doc = {"version": __version__, "command": command, "seed": cfg.seed,
           "config_hash": cfg.digest(), "config": cfg.to_dict()}
    doc.update(extra)
    return doc


def _finite(x: float):
    return x if np.isfinite(x) else None


def cmd_assign(args, cfg: RunConfig) -> list[Path]:
    table, strata = load_table(args.covariates, cfg)
    spec = build_spec(cfg, table, strata)
    spec.check_units(table.n)
    rng = RngStream(cfg.seed)
    log.info("assigning %d units to %d groups with %s", table.n, spec.n_groups, cfg.method)
    sampler = make_sampler(cfg.method, cfg, table, spec, rng)
    sampler.prepare(args.threads)
    result = sampler.draw(rng.fork(0, "assign"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "assignment.csv", out / "trace.csv", out / "metadata.json"]
    result.write_csv(paths[0])
    result.write_trace_csv(paths[1])
    extra = {k: (_finite(v) if isinstance(v, float) else v) for k, v in result.metadata.items()}
    write_json(paths[2], metadata(cfg, "assign", design=sampler.name, n_units=table.n,
                                  group_counts=result.group_counts(spec.n_groups).tolist(),
                                  result=extra))
    return paths


def cmd_compare(args, cfg: RunConfig) -> list[Path]:
    table, strata = load_table(args.covariates, cfg)
    spec = build_spec(cfg, table, strata)
    rng = RngStream(cfg.seed)
    bcfg = BalanceConfig(None if cfg.second_order_columns is None else tuple(cfg.second_order_columns),
                         cfg.order, cfg.center, cfg.frobenius)
    second = None if cfg.order is None else second_order_expand(
        table, bcfg.second_order_columns, cfg.order, cfg.center)
    reports = []
    for name in cfg.designs:
        sampler = make_sampler(name, cfg, table, spec, rng)
        log.info("drawing %d assignments under %s", cfg.draws, sampler.name)
        A = sampler.draw_assignments(cfg.draws, rng.fork(0, sampler.name), args.threads)
        extras = {}
        if sampler.threshold is not None:
            extras["threshold"] = _finite(sampler.threshold)
        rep = summarize_draws(table, A, bcfg, design=sampler.name, second=second)
        rep.extras.update(extras)
        reports.append(rep)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "balance_long.csv", out / "summary.json", out / "metadata.json"]
    write_long_csv(paths[0], reports)
    write_summary_json(paths[1], reports)
    write_json(paths[2], metadata(cfg, "compare", designs=[r.design for r in reports], draws=cfg.draws))
    return paths


def _read_potentials(path, ids: Sequence[str], id_column: str) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or id_column not in reader.fieldnames:
            raise DataError(f"{path}: missing id column {id_column!r}")
        cols = [c for c in reader.fieldnames if c != id_column]
        rows = {}
        for line, row in enumerate(reader, start=2):
            try:
                rows[row[id_column]] = [float(row[c]) for c in cols]
            except (TypeError, ValueError):
                raise DataError(f"{path}: line {line}: non-numeric potential outcome") from None
    missing = [u for u in ids if u not in rows]
    if missing:
        raise DataError(f"{path}: no potential outcomes for unit id {missing[0]!r}")
    return np.array([rows[u] for u in ids])


def cmd_simulate(args, cfg: RunConfig) -> list[Path]:
    rng = RngStream(cfg.seed)
    if cfg.dgp == "hainmueller":
        table = hainmueller_covariates(cfg.dgp_n, rng.fork(0, "dgp"))
    else:
        table, _ = load_table(cfg.dgp, cfg)
    spec = build_spec(cfg, table)
    if cfg.model.lower() in MODELS:
        potentials = potential_outcomes(table, cfg.model, rng.fork(0, "model"), spec.n_groups)
    else:
        potentials = _read_potentials(cfg.model, table.unit_ids, cfg.id_column or "unit_id")
    g, h = cfg.groups_compared
    rows = []
    ses = {}
    for name in cfg.designs:
        sampler = make_sampler(name, cfg, table, spec, rng)
        log.info("estimating the randomization SE under %s (%d draws)", sampler.name, cfg.draws)
        ses[sampler.name] = randomization_se(
            sampler, potentials,
            lambda y, z: float(y[z == g].mean() - y[z == h].mean()),
            cfg.draws, rng.fork(0, sampler.name), args.threads)
    ref = ses.get("fsm")
    for name, se in ses.items():
        ratio = "" if not ref else repr(se / ref)
        rows.append({"design": name, "model": cfg.model, "draws": cfg.draws, "se": repr(se),
                     "ratio_to_fsm": ratio})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "se_table.csv", out / "covariates.csv", out / "metadata.json"]
    with open(paths[0], "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["design", "model", "draws", "se", "ratio_to_fsm"],
                                lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    with open(paths[1], "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["unit_id", *table.columns])
        for uid, row in zip(table.unit_ids, table.values):
            writer.writerow([uid, *(repr(float(v)) for v in row)])
    write_json(paths[2], metadata(cfg, "simulate", designs=list(ses), n_units=table.n))
    return paths


def _read_assignment(path, ids: Sequence[str]) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"unit_id", "group"} <= set(reader.fieldnames):
            raise DataError(f"{path}: assignment file needs unit_id and group columns")
        groups = {}
        for line, row in enumerate(reader, start=2):
            try:
                groups[row["unit_id"]] = int(row["group"])
            except ValueError:
                raise DataError(f"{path}: line {line}: bad group label {row['group']!r}") from None
    for u in ids:
        if u not in groups:
            raise DataError(f"{path}: unit id {u!r} has no assignment")
    extra = sorted(set(groups) - set(ids))
    if extra:
        raise DataError(f"{path}: assignment for unknown unit id {extra[0]!r}")
    return np.array([groups[u] for u in ids], dtype=np.int64)


def cmd_test(args, cfg: RunConfig) -> list[Path]:
    table, strata = load_table(args.covariates, cfg)
    spec = build_spec(cfg, table, strata)
    outcomes = load_outcomes(args.outcomes, "unit_id").aligned_to(table.unit_ids)
    assignment = _read_assignment(args.assignment, table.unit_ids)
    counts = np.bincount(assignment, minlength=spec.n_groups + 1)[1:]
    if len(counts) != spec.n_groups or tuple(counts) != spec.group_sizes:
        raise SpecError(f"group_sizes: observed assignment has counts {tuple(counts)}, "
                        f"config implies {spec.group_sizes}")
    rng = RngStream(cfg.seed)
    sampler = make_sampler(cfg.method, cfg, table, spec, rng)
    g, h = cfg.groups_compared
    log.info("randomization test with %d replicates under %s", cfg.M, sampler.name)
    result = randomization_test(sampler, outcomes, assignment, cfg.statistic, cfg.M,
                                rng.fork(0, "test"), g, h, args.threads, cfg.conservative,
                                keep_replicates=False)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "test.json"
    doc = result.to_dict()
    doc.update({"design": sampler.name, "groups": [g, h], "version": __version__,
                "config_hash": cfg.digest()})
    write_json(path, doc)
    return [path]


def _parse_ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _parse_names(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fsmdesign", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, default=1, help="replicate-level parallelism")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--quiet", action="store_true", help="no progress messages")
    common.add_argument("--group-sizes", type=_parse_ints, dest="group_sizes")
    common.add_argument("--epsilon", type=float)
    common.add_argument("--selection", choices=["d_optimal", "a_optimal", "random"])
    common.add_argument("--acceptance-rate", type=float, dest="acceptance_rate")

    p = sub.add_parser("assign", parents=[common], help="assign units to groups")
    p.add_argument("covariates")
    p.add_argument("--method", help="fsm, crd, rerandomization or rr<rate>")

    p = sub.add_parser("compare", parents=[common], help="balance of several designs over many draws")
    p.add_argument("covariates")
    p.add_argument("--draws", type=int)
    p.add_argument("--designs", type=_parse_names)

    p = sub.add_parser("simulate", parents=[common], help="randomization SEs on synthetic outcomes")
    p.add_argument("--dgp", help="'hainmueller' or a covariate CSV")
    p.add_argument("--model", help=f"{', '.join(sorted(MODELS))} or a potential-outcome CSV")
    p.add_argument("--draws", type=int)
    p.add_argument("--designs", type=_parse_names)

    p = sub.add_parser("test", parents=[common], help="Monte Carlo randomization test of the sharp null")
    p.add_argument("covariates")
    p.add_argument("outcomes")
    p.add_argument("assignment")
    p.add_argument("--M", type=int, dest="M")
    p.add_argument("--statistic", choices=[s.value for s in Statistic])
    p.add_argument("--method", help="design used for the replicate assignments")
    return parser


_OVERRIDES = ("seed", "group_sizes", "epsilon", "selection", "acceptance_rate", "method",
              "draws", "designs", "dgp", "model", "M", "statistic")

COMMANDS = {"assign": cmd_assign, "compare": cmd_compare, "simulate": cmd_simulate, "test": cmd_test}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr, force=True)
    try:
        if args.threads < 1:
            raise SpecError(f"threads: must be at least 1, got {args.threads}")
        cfg = load_config(args.config)
        cfg = cfg.merged({k: getattr(args, k, None) for k in _OVERRIDES})
        paths = COMMANDS[args.command](args, cfg)
    except RerandomizationBudgetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (DataError, SingularCovarianceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SpecError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SPEC
    except OSError as exc:
        print(f"error: {exc.filename}: {exc.strerror}", file=sys.stderr)
        return EXIT_DATA
    except FSMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    for p in paths:
        print(p)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
