"""Experiment harness: scenario generation, baseline allocators, a brute-force
optimum for desk-scale instances, team composition changes, and the
single/multi-objective and situational-awareness experiment drivers.

Because absolute metric values depend on configurable model constants, the
harness's primary reproducible outputs are relative orderings (Welch tests),
normalized preference-alignment tables, and invariant checks; absolute means
are still logged for calibration.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import random
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from scipy import stats as scipy_stats

from .core import (
    Collaboration,
    HumanProfile,
    ItaPlan,
    MissionScenario,
    NormalizationBounds,
    Objective,
    PerformanceRecord,
    PreferenceVector,
    RobotKind,
    RobotProfile,
    TaskSpec,
    Tier,
    aggregate_objective,
    natural_key,
)
from .llm import CompletionProvider, heuristic_allocate
from .pipeline import RetrievalConfig, derive_seed, infer
from .retrieval import ExperienceDatabase, RulesDatabase
from .sim import SimConfig, run_mission

logger = logging.getLogger(__name__)

METHODS = ("rebel", "zero_shot", "heuristic", "random", "brute_force")
ADAPTIVE_METHODS = ("rebel", "zero_shot")  # can re-plan after composition changes

MOO_PRIMARY_WEIGHT = 0.5
BRUTE_FORCE_CAP = 100_000


class Mode:
    SOO = "SOO"
    MOO = "MOO"
    SITUATIONAL = "SituationalAwareness"


@dataclass(frozen=True)
class TeamSpec:
    humans: int = 5
    robots: int = 7
    pois: int = 30


@dataclass(frozen=True)
class CompositionChange:
    """Post-planning team edit: explicit removals and/or count-based ones."""

    remove_ids: tuple[str, ...] = ()
    remove_robots: int = 0
    remove_humans: int = 0
    add_robots: int = 0
    add_humans: int = 0


@dataclass(frozen=True)
class ExperimentSpec:
    mode: str = Mode.SOO
    team: TeamSpec = TeamSpec()
    trials: int = 100
    methods: tuple[str, ...] = ("rebel", "random")
    seed: int = 0
    preferences: tuple[PreferenceVector, ...] = ()
    change: CompositionChange | None = None
    brute_force_samples: int = 8

    def __post_init__(self) -> None:
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not self.methods:
            raise ValueError("at least one method is required")
        for method in self.methods:
            if method not in METHODS:
                raise ValueError(f"unknown method {method!r}; pick from {METHODS}")
        if self.mode not in (Mode.SOO, Mode.MOO, Mode.SITUATIONAL):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not self.preferences:
            object.__setattr__(self, "preferences", default_preferences(self.mode))

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentSpec":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        team = TeamSpec(
            humans=raw.get("humans", 5), robots=raw.get("robots", 7), pois=raw.get("pois", 30)
        )
        prefs = tuple(
            PreferenceVector(tuple((Objective.parse(k), float(v)) for k, v in p.items()))
            for p in raw.get("preferences", [])
        )
        change = None
        if "change" in raw:
            c = raw["change"]
            change = CompositionChange(
                remove_ids=tuple(c.get("remove_ids", [])),
                remove_robots=c.get("remove_robots", 0),
                remove_humans=c.get("remove_humans", 0),
                add_robots=c.get("add_robots", 0),
                add_humans=c.get("add_humans", 0),
            )
        return cls(
            mode=raw.get("mode", Mode.SOO),
            team=team,
            trials=raw.get("trials", 100),
            methods=tuple(raw.get("methods", ["rebel", "random"])),
            seed=raw.get("seed", 0),
            preferences=prefs,
            change=change,
            brute_force_samples=raw.get("brute_force_samples", 8),
        )


def default_preferences(mode: str) -> tuple[PreferenceVector, ...]:
    if mode == Mode.SOO:
        return tuple(PreferenceVector.single(obj) for obj in Objective)
    if mode == Mode.MOO:
        return tuple(rotation_preferences(MOO_PRIMARY_WEIGHT))
    return (PreferenceVector.single(Objective.TASK_PERFORMANCE),)


def rotation_preferences(primary: float = MOO_PRIMARY_WEIGHT) -> list[PreferenceVector]:
    """One preference vector per objective, giving it the primary weight and
    splitting the remainder evenly over the others."""
    rest = (1.0 - primary) / (len(Objective) - 1)
    return [
        PreferenceVector(tuple((obj, primary if obj is focus else rest) for obj in Objective))
        for focus in Objective
    ]


def random_scenario(
    humans: int, robots: int, tasks: int, seed: int, arena_side: float = 2000.0
) -> MissionScenario:
    """Uniformly random team and task layout, deterministic in the seed."""
    rng = random.Random(seed)
    tiers = list(Tier)
    human_profiles = tuple(
        HumanProfile(f"H_{i}", cognition=rng.choice(tiers), skill=rng.choice(tiers))
        for i in range(humans)
    )
    robot_profiles = []
    counters = {RobotKind.UAV: 0, RobotKind.UGV: 0}
    for _ in range(robots):
        kind = rng.choice((RobotKind.UAV, RobotKind.UGV))
        robot_profiles.append(
            RobotProfile(
                f"{kind.value}_{counters[kind]}",
                kind,
                speed=round(rng.uniform(5.0, 15.0), 1),
                camera_quality=rng.choice(tiers),
            )
        )
        counters[kind] += 1
    task_specs = tuple(
        TaskSpec(
            f"T_{i}",
            (round(rng.uniform(0, arena_side), 1), round(rng.uniform(0, arena_side), 1)),
            rng.choice(tiers),
        )
        for i in range(tasks)
    )
    return MissionScenario(
        humans=human_profiles, robots=tuple(robot_profiles), tasks=task_specs, arena_side=arena_side
    )


def random_allocate(scenario: MissionScenario, seed: int) -> ItaPlan:
    """Uniform feasible baseline: random robot, random collaboration pattern."""
    if not scenario.robots:
        raise ValueError("scenario has no robots")
    rng = random.Random(seed)
    robots = sorted(scenario.robots, key=lambda r: natural_key(r.id))
    humans = sorted(scenario.humans, key=lambda h: natural_key(h.id))
    assignments = {}
    for task in sorted(scenario.tasks, key=lambda t: natural_key(t.id)):
        robot = rng.choice(robots)
        options: list[Collaboration] = [Collaboration.autonomous()]
        options += [Collaboration.shared_control(h.id) for h in humans]
        options += [Collaboration.human_analysis(h.id) for h in humans]
        assignments[task.id] = ((robot.id, rng.choice(options)),)
    return ItaPlan(assignments)


def _pattern_options(scenario: MissionScenario) -> list[Collaboration]:
    humans = sorted(scenario.humans, key=lambda h: natural_key(h.id))
    options = [Collaboration.autonomous()]
    options += [Collaboration.shared_control(h.id) for h in humans]
    options += [Collaboration.human_analysis(h.id) for h in humans]
    return options


def enumerate_plans(scenario: MissionScenario, cap: int = BRUTE_FORCE_CAP) -> list[ItaPlan]:
    """Every feasible plan over the robot x collaboration-pattern candidate set."""
    tasks = sorted(scenario.tasks, key=lambda t: natural_key(t.id))
    robots = sorted(scenario.robots, key=lambda r: natural_key(r.id))
    options = _pattern_options(scenario)
    per_task = [
        [(robot.id, collab) for robot in robots for collab in options] for _ in tasks
    ]
    total = 1
    for choices in per_task:
        total *= len(choices)
        if total > cap:
            raise ValueError(
                f"search space exceeds the {cap} plan cap; use a smaller instance"
            )
    plans = []
    for combo in itertools.product(*per_task):
        plans.append(ItaPlan({task.id: (entry,) for task, entry in zip(tasks, combo)}))
    return plans


def brute_force_table(
    scenario: MissionScenario,
    prefs: PreferenceVector,
    sim_cfg: SimConfig,
    samples_per_plan: int = 8,
    cap: int = BRUTE_FORCE_CAP,
    base_seed: int = 0,
) -> list[tuple[ItaPlan, float]]:
    """Mean aggregate score per enumerated plan under common random numbers.

    Normalization bounds are shared across every (plan, sample) record so the
    scores are directly comparable.
    """
    plans = enumerate_plans(scenario, cap=cap)
    per_plan_records: list[list[PerformanceRecord]] = []
    for plan in plans:
        records = [
            run_mission(scenario, plan, sim_cfg.with_seed(base_seed + s))[0]
            for s in range(samples_per_plan)
        ]
        per_plan_records.append(records)
    bounds = NormalizationBounds.from_records(
        [record for records in per_plan_records for record in records]
    )
    table = []
    for plan, records in zip(plans, per_plan_records):
        mean_j = statistics.fmean(
            aggregate_objective(record, prefs, bounds) for record in records
        )
        table.append((plan, mean_j))
    return table


def brute_force_optimal(
    scenario: MissionScenario,
    prefs: PreferenceVector,
    sim_cfg: SimConfig,
    samples_per_plan: int = 8,
    cap: int = BRUTE_FORCE_CAP,
    base_seed: int = 0,
) -> tuple[ItaPlan, float]:
    """Exhaustive argmax of the mean aggregate score; ties break toward the
    lexicographically smallest plan text."""
    table = brute_force_table(scenario, prefs, sim_cfg, samples_per_plan, cap, base_seed)
    best_plan, best_j = min(table, key=lambda pair: (-pair[1], pair[0].render()))
    return best_plan, best_j


@dataclass(frozen=True)
class ChangeReport:
    removed: tuple[str, ...]
    added: tuple[str, ...]
    orphaned_tasks: tuple[str, ...]


def apply_composition_change(
    scenario: MissionScenario, plan: ItaPlan, change: CompositionChange
) -> tuple[MissionScenario, ChangeReport]:
    """Strip/add team members and report plan assignments left dangling."""
    remove = set(change.remove_ids)
    robots_sorted = sorted(scenario.robots, key=lambda r: natural_key(r.id))
    humans_sorted = sorted(scenario.humans, key=lambda h: natural_key(h.id))
    if change.remove_robots:
        remove.update(r.id for r in robots_sorted[-change.remove_robots:])
    if change.remove_humans:
        remove.update(h.id for h in humans_sorted[-change.remove_humans:])

    unknown = remove - scenario.human_ids() - scenario.robot_ids()
    if unknown:
        raise ValueError(f"cannot remove unknown agents: {sorted(unknown)}")

    humans = tuple(h for h in scenario.humans if h.id not in remove)
    robots = tuple(r for r in scenario.robots if r.id not in remove)
    if not robots:
        raise ValueError("composition change would leave the team with no robots")

    added: list[str] = []
    rng = random.Random(derive_seed("composition", *sorted(remove)))
    tiers = list(Tier)
    taken = {h.id for h in scenario.humans}
    new_humans = list(humans)
    index = 0
    for _ in range(change.add_humans):
        while f"H_{index}" in taken:
            index += 1
        profile = HumanProfile(f"H_{index}", cognition=rng.choice(tiers), skill=rng.choice(tiers))
        new_humans.append(profile)
        added.append(profile.id)
        taken.add(profile.id)
    new_robots = list(robots)
    existing = {r.id for r in scenario.robots}
    index = 0
    for _ in range(change.add_robots):
        while f"UGV_{index}" in existing:
            index += 1
        profile = RobotProfile(
            f"UGV_{index}",
            RobotKind.UGV,
            speed=round(rng.uniform(5.0, 15.0), 1),
            camera_quality=rng.choice(tiers),
        )
        new_robots.append(profile)
        added.append(profile.id)
        existing.add(profile.id)

    orphaned = tuple(
        task_id
        for task_id in plan.assignments
        if plan.referenced_agents(task_id) & remove
    )
    modified = MissionScenario(
        humans=tuple(new_humans),
        robots=tuple(new_robots),
        tasks=scenario.tasks,
        arena_side=scenario.arena_side,
    )
    return modified, ChangeReport(
        removed=tuple(sorted(remove, key=natural_key)),
        added=tuple(added),
        orphaned_tasks=tuple(sorted(orphaned, key=natural_key)),
    )


def welch_test(sample_a: list[float], sample_b: list[float]) -> tuple[float, float]:
    """Two-sided Welch t-test; returns (statistic, p-value)."""
    result = scipy_stats.ttest_ind(sample_a, sample_b, equal_var=False)
    return float(result.statistic), float(result.pvalue)


@dataclass
class BenchDeps:
    """Everything run_experiment needs beyond the spec itself."""

    provider: CompletionProvider
    rules_db: RulesDatabase
    exp_db: ExperienceDatabase
    sim_cfg: SimConfig = field(default_factory=SimConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    workers: int = 1


@dataclass
class CellResult:
    method: str
    pref_label: str
    prefs: PreferenceVector
    prioritized: str | None
    records: list[PerformanceRecord]
    fallbacks: int
    runtime_s: float
    na: bool = False
    changed_records: list[PerformanceRecord] | None = None
    norms: dict[Objective, float] = field(default_factory=dict)
    aligned: bool | None = None
    # per-trial weighted normalized scores on batch-wide bounds; the input
    # for method-vs-method Welch comparisons
    trial_scores: list[float] = field(default_factory=list)

    def mean(self, objective: Objective) -> float:
        return statistics.fmean(r.value(objective) for r in self.records)

    def stdev(self, objective: Objective) -> float:
        values = [r.value(objective) for r in self.records]
        return statistics.stdev(values) if len(values) > 1 else 0.0

    def values(self, objective: Objective) -> list[float]:
        return [r.value(objective) for r in self.records]

    def mean_score(self) -> float:
        return statistics.fmean(self.trial_scores) if self.trial_scores else float("nan")


@dataclass
class ExperimentReport:
    spec: ExperimentSpec
    cells: list[CellResult]
    checks: list[tuple[str, bool]]

    def cell(self, method: str, pref_label: str) -> CellResult:
        for cell in self.cells:
            if cell.method == method and cell.pref_label == pref_label:
                return cell
        raise KeyError((method, pref_label))

    def all_checks_pass(self) -> bool:
        return all(ok for _, ok in self.checks)

    def to_csv(self, path: str | Path) -> None:
        columns = [
            "method", "preferences", "prioritized", "trials", "na",
            "mean_accuracy_points", "std_accuracy_points",
            "mean_mission_seconds", "std_mission_seconds",
            "mean_human_utilization", "std_human_utilization",
            "norm_TP", "norm_MT", "norm_HW", "aligned", "mean_aggregate_score",
            "fallback_rate", "runtime_s",
            "changed_mean_accuracy_points",
        ]
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(columns)
            for cell in self.cells:
                if cell.na:
                    writer.writerow(
                        [cell.method, cell.pref_label, cell.prioritized or "", 0, "NA"]
                        + ["NA"] * (len(columns) - 5)
                    )
                    continue
                row = [
                    cell.method, cell.pref_label, cell.prioritized or "",
                    len(cell.records), "",
                ]
                for objective in Objective:
                    row += [f"{cell.mean(objective):.6f}", f"{cell.stdev(objective):.6f}"]
                for objective in Objective:
                    row.append("" if objective not in cell.norms else f"{cell.norms[objective]:.6f}")
                row.append("" if cell.aligned is None else str(cell.aligned))
                row.append(f"{cell.mean_score():.6f}")
                row.append(f"{cell.fallbacks / max(1, len(cell.records)):.4f}")
                row.append(f"{cell.runtime_s:.3f}")
                if cell.changed_records:
                    row.append(f"{statistics.fmean(r.accuracy_points for r in cell.changed_records):.6f}")
                else:
                    row.append("")
                writer.writerow(row)

    def summary_text(self) -> str:
        lines = [
            f"mode: {self.spec.mode}",
            f"team: {self.spec.team.humans} humans / {self.spec.team.robots} robots / "
            f"{self.spec.team.pois} POIs",
            f"trials per cell: {self.spec.trials}",
            "",
        ]
        for cell in self.cells:
            if cell.na:
                lines.append(f"[{cell.method} | {cell.pref_label}] N/A (method cannot re-plan)")
                continue
            parts = [
                f"TP={cell.mean(Objective.TASK_PERFORMANCE):.2f}",
                f"MT={cell.mean(Objective.MISSION_TIME):.2f}s",
                f"HW={cell.mean(Objective.HUMAN_WORKLOAD):.4f}",
            ]
            if cell.norms:
                parts.append(
                    "norm=("
                    + ", ".join(f"{obj.short}:{cell.norms[obj]:.3f}" for obj in Objective)
                    + ")"
                )
            if cell.trial_scores:
                parts.append(f"J={cell.mean_score():.3f}")
            if cell.aligned is not None:
                parts.append(f"aligned={cell.aligned}")
            if cell.changed_records is not None:
                changed = statistics.fmean(r.accuracy_points for r in cell.changed_records)
                parts.append(f"post-change TP={changed:.2f}")
            lines.append(f"[{cell.method} | {cell.pref_label}] " + "  ".join(parts))
        lines.append("")
        for name, ok in self.checks:
            lines.append(f"check {'PASS' if ok else 'FAIL'}: {name}")
        return "\n".join(lines) + "\n"


def _plan_for(
    method: str,
    scenario: MissionScenario,
    prefs: PreferenceVector,
    trial_seed: int,
    spec: ExperimentSpec,
    deps: BenchDeps,
) -> tuple[ItaPlan, bool]:
    """Returns (plan, used_fallback)."""
    if method == "rebel":
        result = infer(scenario, prefs, deps.rules_db, deps.exp_db, deps.provider, deps.retrieval)
        return result.plan, result.used_fallback
    if method == "zero_shot":
        empty_rules, empty_exp = RulesDatabase(), ExperienceDatabase()
        result = infer(scenario, prefs, empty_rules, empty_exp, deps.provider, deps.retrieval)
        return result.plan, result.used_fallback
    if method == "heuristic":
        return heuristic_allocate(scenario, prefs), False
    if method == "random":
        return random_allocate(scenario, derive_seed(trial_seed, "alloc")), False
    if method == "brute_force":
        plan, _ = brute_force_optimal(
            scenario,
            prefs,
            deps.sim_cfg,
            samples_per_plan=spec.brute_force_samples,
            base_seed=derive_seed(trial_seed, "bf"),
        )
        return plan, False
    raise ValueError(f"unknown method {method!r}")


def _run_cell(
    method: str,
    prefs: PreferenceVector,
    spec: ExperimentSpec,
    deps: BenchDeps,
) -> CellResult:
    label = prefs.label()
    prioritized = prefs.dominant()
    start = time.perf_counter()

    if spec.mode == Mode.SITUATIONAL and method not in ADAPTIVE_METHODS:
        return CellResult(
            method=method,
            pref_label=label,
            prefs=prefs,
            prioritized=prioritized.short if prioritized else None,
            records=[],
            fallbacks=0,
            runtime_s=time.perf_counter() - start,
            na=True,
        )

    def one_trial(trial: int) -> tuple[PerformanceRecord, bool, PerformanceRecord | None]:
        scenario_seed = derive_seed(spec.seed, "scenario", trial)
        sim_seed = derive_seed(spec.seed, "sim", trial)
        scenario = random_scenario(
            spec.team.humans, spec.team.robots, spec.team.pois, seed=scenario_seed
        )
        plan, fallback = _plan_for(
            method, scenario, prefs, derive_seed(spec.seed, method, trial), spec, deps
        )
        record, _ = run_mission(scenario, plan, deps.sim_cfg.with_seed(sim_seed))

        changed_record = None
        if spec.mode == Mode.SITUATIONAL:
            change = spec.change or CompositionChange(remove_robots=1, remove_humans=1)
            modified, _report = apply_composition_change(scenario, plan, change)
            new_plan, _ = _plan_for(
                method, modified, prefs, derive_seed(spec.seed, method, trial, "re"), spec, deps
            )
            changed_record, _ = run_mission(modified, new_plan, deps.sim_cfg.with_seed(sim_seed))
        return record, fallback, changed_record

    if deps.workers > 1:
        with ThreadPoolExecutor(max_workers=deps.workers) as pool:
            results = list(pool.map(one_trial, range(spec.trials)))
    else:
        results = [one_trial(trial) for trial in range(spec.trials)]

    records = [r for r, _, _ in results]
    fallbacks = sum(1 for _, fb, _ in results if fb)
    changed = [c for _, _, c in results if c is not None]
    return CellResult(
        method=method,
        pref_label=label,
        prefs=prefs,
        prioritized=prioritized.short if prioritized else None,
        records=records,
        fallbacks=fallbacks,
        runtime_s=time.perf_counter() - start,
        changed_records=changed if changed else None,
    )


class _DropEmptyDbWarnings(logging.Filter):
    """The zero_shot method runs inference on empty databases on purpose;
    per-trial degradation warnings would drown the report."""

    def filter(self, record: logging.LogRecord) -> bool:
        return "inferring without" not in record.getMessage()


def run_experiment(spec: ExperimentSpec, deps: BenchDeps) -> ExperimentReport:
    """Run every (method x preference) cell and assemble the report."""
    if "rebel" in spec.methods and (not len(deps.rules_db) or not len(deps.exp_db)):
        raise ValueError(
            "rebel needs populated databases; run `rebel gen-rules` and `rebel gen-exp` first"
        )

    pipeline_logger = logging.getLogger("rebel.pipeline")
    quiet = _DropEmptyDbWarnings()
    if "zero_shot" in spec.methods:
        pipeline_logger.addFilter(quiet)
    try:
        cells = [
            _run_cell(method, prefs, spec, deps)
            for method in spec.methods
            for prefs in spec.preferences
        ]
    finally:
        pipeline_logger.removeFilter(quiet)

    live = [c for c in cells if not c.na]
    if spec.mode == Mode.MOO and live:
        for objective in Objective:
            means = [cell.mean(objective) for cell in live]
            lo, hi = min(means), max(means)
            for cell, value in zip(live, means):
                if hi - lo < 1e-12:
                    norm = 0.5
                elif objective.direction.value == "maximize":
                    norm = (value - lo) / (hi - lo)
                else:
                    norm = (hi - value) / (hi - lo)
                cell.norms[objective] = norm
        for cell in live:
            if cell.prioritized is None:
                continue
            target = Objective.parse(cell.prioritized)
            cell.aligned = cell.norms[target] >= max(cell.norms.values()) - 1e-12

    if live:
        batch_bounds = NormalizationBounds.from_records(
            [record for cell in live for record in cell.records]
        )
        for cell in live:
            cell.trial_scores = [
                aggregate_objective(record, cell.prefs, batch_bounds)
                for record in cell.records
            ]

    checks: list[tuple[str, bool]] = []
    max_points = deps.sim_cfg.points_per_correct * spec.team.pois
    for cell in live:
        tag = f"{cell.method}|{cell.pref_label}"
        checks.append(
            (f"{tag}: utilization in [0,1]",
             all(0.0 <= r.human_utilization <= 1.0 for r in cell.records))
        )
        checks.append(
            (f"{tag}: accuracy points <= {max_points}",
             all(r.accuracy_points <= max_points + 1e-9 for r in cell.records))
        )
        if cell.norms:
            checks.append(
                (f"{tag}: normalized values in [0,1]",
                 all(-1e-12 <= v <= 1 + 1e-12 for v in cell.norms.values()))
            )
    if spec.mode == Mode.MOO and live:
        for objective in Objective:
            column = [cell.norms[objective] for cell in live]
            checks.append(
                (f"norm column {objective.short} attains 0 and 1",
                 min(column) <= 1e-9 and max(column) >= 1 - 1e-9)
            )

    return ExperimentReport(spec=spec, cells=cells, checks=checks)
