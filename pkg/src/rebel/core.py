"""Domain model for multi-human multi-robot initial task allocation.

Agents, tasks, allocation plans, preference weights, and the scalarized
objective used to compare mission outcomes. All types are immutable after
construction and every operation here is pure.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

ARENA_SIDE_DEFAULT = 2000.0

_NUM = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"


def fmt_num(value: float) -> str:
    """Render a number compactly; integral floats drop the trailing '.0'.

    repr() is used for fractional values so text round-trips exactly.
    """
    f = float(value)
    if math.isfinite(f) and f.is_integer():
        return str(int(f))
    return repr(f)


def natural_key(text: str) -> tuple:
    """Sort key treating digit runs numerically, so T_2 sorts before T_10."""
    return tuple(
        (0, int(part)) if part.isdigit() else (1, part)
        for part in re.split(r"(\d+)", text)
        if part
    )


class Tier(Enum):
    """Three-level attribute scale used for all qualitative agent/task traits."""

    LOW = "Lo"
    MED = "Med"
    HIGH = "Hi"

    @property
    def rank(self) -> int:
        return (Tier.LOW, Tier.MED, Tier.HIGH).index(self)

    @property
    def axis(self) -> float:
        """Tier mapped onto the symmetric {-1, 0, +1} difficulty axis."""
        return float(self.rank - 1)

    @classmethod
    def parse(cls, text: str) -> "Tier":
        key = text.strip().lower()
        aliases = {
            "lo": cls.LOW, "low": cls.LOW,
            "med": cls.MED, "medium": cls.MED,
            "hi": cls.HIGH, "high": cls.HIGH,
        }
        if key not in aliases:
            raise ValueError(f"unknown tier {text!r}")
        return aliases[key]


class RobotKind(Enum):
    UAV = "UAV"
    UGV = "UGV"

    @classmethod
    def from_id(cls, robot_id: str) -> "RobotKind":
        return cls.UAV if robot_id.upper().startswith("UAV") else cls.UGV


class Objective(Enum):
    """Mission objectives a stakeholder can weight against each other."""

    TASK_PERFORMANCE = "TP"
    MISSION_TIME = "MT"
    HUMAN_WORKLOAD = "HW"

    @property
    def short(self) -> str:
        return self.value

    @property
    def direction(self) -> "Direction":
        return Direction.MAXIMIZE if self is Objective.TASK_PERFORMANCE else Direction.MINIMIZE

    @property
    def soo_text(self) -> str:
        return {
            Objective.TASK_PERFORMANCE: "Maximize the overall task performance.",
            Objective.MISSION_TIME: "Minimize the overall mission time.",
            Objective.HUMAN_WORKLOAD: "Minimize the overall human workload.",
        }[self]

    @property
    def weighted_text(self) -> str:
        return {
            Objective.TASK_PERFORMANCE: "Maximize task performance",
            Objective.MISSION_TIME: "Minimize mission time",
            Objective.HUMAN_WORKLOAD: "Minimize human workload",
        }[self]

    @classmethod
    def parse(cls, text: str) -> "Objective":
        key = text.strip().upper()
        for obj in cls:
            if key in (obj.value, obj.name):
                return obj
        raise ValueError(f"unknown objective {text!r}")


class Direction(Enum):
    MAXIMIZE = "maximize"
    MINIMIZE = "minimize"


@dataclass(frozen=True)
class HumanProfile:
    """Human operator described by cognitive ability and operational skill."""

    id: str
    cognition: Tier
    skill: Tier


@dataclass(frozen=True)
class RobotProfile:
    """Robot described by platform kind, travel speed, and camera quality."""

    id: str
    kind: RobotKind
    speed: float
    camera_quality: Tier

    def __post_init__(self) -> None:
        if not (math.isfinite(self.speed) and self.speed > 0):
            raise ValueError(f"robot {self.id}: speed must be > 0, got {self.speed}")


@dataclass(frozen=True)
class TaskSpec:
    """Point of interest requiring image capture and hazard classification."""

    id: str
    location: tuple[float, float]
    difficulty: Tier

    def __post_init__(self) -> None:
        x, y = self.location
        object.__setattr__(self, "location", (float(x), float(y)))


class CollabMode(Enum):
    ROBOT_AUTONOMOUS = "robot_autonomous"
    SHARED_CONTROL = "shared_control"
    HUMAN_ANALYSIS = "human_analysis"


@dataclass(frozen=True)
class Collaboration:
    """Execution mode of one assignment, optionally tied to a human operator.

    Shared control: the named human teleoperates the robot (affecting travel
    speed) and analyzes the captured image. Human analysis: the robot travels
    autonomously but the named human classifies the image.
    """

    mode: CollabMode
    human_id: str | None = None

    def __post_init__(self) -> None:
        needs_human = self.mode in (CollabMode.SHARED_CONTROL, CollabMode.HUMAN_ANALYSIS)
        if needs_human and not self.human_id:
            raise ValueError(f"{self.mode.value} requires a human id")
        if not needs_human and self.human_id is not None:
            raise ValueError("autonomous mode must not reference a human")

    @staticmethod
    def autonomous() -> "Collaboration":
        return Collaboration(CollabMode.ROBOT_AUTONOMOUS)

    @staticmethod
    def shared_control(human_id: str) -> "Collaboration":
        return Collaboration(CollabMode.SHARED_CONTROL, human_id)

    @staticmethod
    def human_analysis(human_id: str) -> "Collaboration":
        return Collaboration(CollabMode.HUMAN_ANALYSIS, human_id)


Assignment = tuple[str, Collaboration]


@dataclass(frozen=True)
class MissionScenario:
    """Team composition plus the task list, with the arena bound they live in."""

    humans: tuple[HumanProfile, ...]
    robots: tuple[RobotProfile, ...]
    tasks: tuple[TaskSpec, ...]
    arena_side: float = ARENA_SIDE_DEFAULT

    def __post_init__(self) -> None:
        # canonical member order: natural id sort, so logically equal teams
        # compare equal and render identically regardless of input order
        object.__setattr__(
            self, "humans", tuple(sorted(self.humans, key=lambda a: natural_key(a.id)))
        )
        object.__setattr__(
            self, "robots", tuple(sorted(self.robots, key=lambda a: natural_key(a.id)))
        )
        object.__setattr__(
            self, "tasks", tuple(sorted(self.tasks, key=lambda a: natural_key(a.id)))
        )
        ids: list[str] = [a.id for a in self.humans + self.robots + self.tasks]
        if len(set(ids)) != len(ids):
            raise ValueError("agent and task ids must be unique and disjoint")
        for task in self.tasks:
            x, y = task.location
            if not (0 <= x <= self.arena_side and 0 <= y <= self.arena_side):
                raise ValueError(f"task {task.id} outside [0, {self.arena_side}]^2")

    @property
    def runnable(self) -> bool:
        return bool(self.robots)

    def human(self, human_id: str) -> HumanProfile:
        for h in self.humans:
            if h.id == human_id:
                return h
        raise KeyError(human_id)

    def robot(self, robot_id: str) -> RobotProfile:
        for r in self.robots:
            if r.id == robot_id:
                return r
        raise KeyError(robot_id)

    def task(self, task_id: str) -> TaskSpec:
        for t in self.tasks:
            if t.id == task_id:
                return t
        raise KeyError(task_id)

    def human_ids(self) -> set[str]:
        return {h.id for h in self.humans}

    def robot_ids(self) -> set[str]:
        return {r.id for r in self.robots}

    def task_ids(self) -> set[str]:
        return {t.id for t in self.tasks}

    # Canonical text renderings. Keys are sorted naturally so logically equal
    # scenarios always produce byte-identical text.
    def render_human_section(self) -> str:
        items = ", ".join(
            f"{h.id}: [{h.skill.value}, {h.cognition.value}]"
            for h in sorted(self.humans, key=lambda h: natural_key(h.id))
        )
        return "Human Attributes: {" + items + "}"

    def render_robot_section(self) -> str:
        items = ", ".join(
            f"{r.id}: [{fmt_num(r.speed)}, {r.camera_quality.value}]"
            for r in sorted(self.robots, key=lambda r: natural_key(r.id))
        )
        return "Robot Details: {" + items + "}"

    def render_task_section(self) -> str:
        items = ", ".join(
            f"{t.id}: [({fmt_num(t.location[0])}, {fmt_num(t.location[1])}), {t.difficulty.value}]"
            for t in sorted(self.tasks, key=lambda t: natural_key(t.id))
        )
        return "Task Info: {" + items + "}"

    def render_spf(self) -> str:
        """Three-dictionary form used verbatim in prompts and for embeddings."""
        return "\n".join(
            (self.render_human_section(), self.render_robot_section(), self.render_task_section())
        )

    def serialize(self) -> str:
        return f"Arena Side: {fmt_num(self.arena_side)}\n" + self.render_spf()

    @classmethod
    def parse(cls, text: str) -> "MissionScenario":
        arena = ARENA_SIDE_DEFAULT
        human_line = robot_line = task_line = ""
        for line in text.splitlines():
            stripped = line.strip()
            if stripped.startswith("Arena Side:"):
                arena = float(stripped.split(":", 1)[1].strip())
            elif stripped.startswith("Human Attributes:"):
                human_line = stripped
            elif stripped.startswith("Robot Details:"):
                robot_line = stripped
            elif stripped.startswith("Task Info:"):
                task_line = stripped
        if not (human_line and robot_line and task_line):
            raise ValueError("scenario text must contain all three attribute dictionaries")

        humans = tuple(
            HumanProfile(m.group(1), Tier.parse(m.group(3)), Tier.parse(m.group(2)))
            for m in re.finditer(r"(\w+)\s*:\s*\[\s*(\w+)\s*,\s*(\w+)\s*\]", human_line[len("Human Attributes:"):])
        )
        robots = tuple(
            RobotProfile(m.group(1), RobotKind.from_id(m.group(1)), float(m.group(2)), Tier.parse(m.group(3)))
            for m in re.finditer(rf"(\w+)\s*:\s*\[\s*({_NUM})\s*,\s*(\w+)\s*\]", robot_line[len("Robot Details:"):])
        )
        tasks = tuple(
            TaskSpec(m.group(1), (float(m.group(2)), float(m.group(3))), Tier.parse(m.group(4)))
            for m in re.finditer(
                rf"(\w+)\s*:\s*\[\s*\(\s*({_NUM})\s*,\s*({_NUM})\s*\)\s*,\s*(\w+)\s*\]",
                task_line[len("Task Info:"):],
            )
        )
        return cls(humans=humans, robots=robots, tasks=tasks, arena_side=arena)


@dataclass(frozen=True)
class ItaPlan:
    """Allocation: each task maps to an ordered list of (agent, collaboration).

    Assignments are canonicalized to natural task-id order at construction;
    the first robot-agent entry of a task is its travel/capture robot.
    """

    assignments: dict[str, tuple[Assignment, ...]]

    def __post_init__(self) -> None:
        canonical: dict[str, tuple[Assignment, ...]] = {}
        for task_id in sorted(self.assignments, key=natural_key):
            canonical[task_id] = tuple(self.assignments[task_id])
        object.__setattr__(self, "assignments", canonical)

    def task_ids(self) -> set[str]:
        return set(self.assignments)

    def referenced_agents(self, task_id: str) -> set[str]:
        agents: set[str] = set()
        for agent_id, collab in self.assignments[task_id]:
            agents.add(agent_id)
            if collab.human_id:
                agents.add(collab.human_id)
        return agents

    def render(self) -> str:
        """Canonical plan-grammar text: one `T_i: (...)` line per task.

        Only the first entry per task is rendered; reparsing the output and
        rendering again is a fixed point.
        """
        lines = []
        for task_id, entries in self.assignments.items():
            agent_id, collab = entries[0]
            if collab.human_id:
                lines.append(f"{task_id}: ({collab.human_id}, {agent_id})")
            else:
                lines.append(f"{task_id}: ({agent_id})")
        return "\n".join(lines)

    serialize = render


@dataclass(frozen=True)
class PreferenceVector:
    """Objective weights; normalized to sum to 1 at construction."""

    weights: tuple[tuple[Objective, float], ...]

    def __post_init__(self) -> None:
        pairs = tuple((obj, float(w)) for obj, w in self.weights)
        seen = [obj for obj, _ in pairs]
        if len(set(seen)) != len(seen):
            raise ValueError("objectives in a preference vector must be distinct")
        for obj, w in pairs:
            if not (math.isfinite(w) and 0.0 <= w <= 1.0):
                raise ValueError(f"weight for {obj.short} must lie in [0, 1], got {w}")
        total = sum(w for _, w in pairs)
        if total <= 0:
            raise ValueError("at least one weight must be positive")
        object.__setattr__(self, "weights", tuple((obj, w / total) for obj, w in pairs))

    @staticmethod
    def single(objective: Objective) -> "PreferenceVector":
        return PreferenceVector(((objective, 1.0),))

    @staticmethod
    def of(**shorts: float) -> "PreferenceVector":
        return PreferenceVector(tuple((Objective.parse(k), v) for k, v in shorts.items()))

    def weight(self, objective: Objective) -> float:
        for obj, w in self.weights:
            if obj is objective:
                return w
        return 0.0

    def objectives(self) -> tuple[Objective, ...]:
        return tuple(obj for obj, _ in self.weights)

    def dominant(self) -> Objective | None:
        """The unique highest-weighted objective, or None on a tie."""
        best = max(w for _, w in self.weights)
        top = [obj for obj, w in self.weights if w == best]
        return top[0] if len(top) == 1 else None

    def label(self) -> str:
        if len(self.weights) == 1:
            return self.weights[0][0].short
        return ",".join(f"{obj.short}={fmt_num(round(w, 6))}" for obj, w in self.weights)


@dataclass(frozen=True)
class PerformanceRecord:
    """Mission outcome triple: accuracy points, duration, human utilization."""

    accuracy_points: float
    mission_seconds: float
    human_utilization: float

    def __post_init__(self) -> None:
        for name in ("accuracy_points", "mission_seconds", "human_utilization"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.accuracy_points < 0 or self.mission_seconds < 0:
            raise ValueError("accuracy points and mission seconds must be >= 0")
        if not (0.0 <= self.human_utilization <= 1.0):
            raise ValueError("human utilization must lie in [0, 1]")

    def value(self, objective: Objective) -> float:
        return {
            Objective.TASK_PERFORMANCE: self.accuracy_points,
            Objective.MISSION_TIME: self.mission_seconds,
            Objective.HUMAN_WORKLOAD: self.human_utilization,
        }[objective]

    def serialize(self) -> str:
        return (
            f"Performance: [{fmt_num(self.accuracy_points)}, "
            f"{fmt_num(self.mission_seconds)}, {fmt_num(self.human_utilization)}]"
        )

    @classmethod
    def parse(cls, text: str) -> "PerformanceRecord":
        m = re.search(rf"Performance:\s*\[\s*({_NUM})\s*,\s*({_NUM})\s*,\s*({_NUM})\s*\]", text)
        if not m:
            raise ValueError(f"unparseable performance line: {text!r}")
        return cls(float(m.group(1)), float(m.group(2)), float(m.group(3)))


@dataclass(frozen=True)
class ObjectiveBounds:
    """Observed value range for one objective plus its optimization direction."""

    lo: float
    hi: float
    direction: Direction

    def __post_init__(self) -> None:
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)) or self.lo >= self.hi:
            raise ValueError(f"bounds need lo < hi, got [{self.lo}, {self.hi}]")


@dataclass(frozen=True)
class NormalizationBounds:
    """Per-objective min/max used to put raw metrics on a common [0, 1] scale."""

    entries: dict[Objective, ObjectiveBounds]

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", dict(self.entries))

    def entry(self, objective: Objective) -> ObjectiveBounds:
        if objective not in self.entries:
            raise KeyError(f"no normalization bounds for objective {objective.short}")
        return self.entries[objective]

    @classmethod
    def from_records(cls, records: Sequence[PerformanceRecord], pad: float = 0.5) -> "NormalizationBounds":
        """Empirical bounds over a batch; degenerate ranges are widened by pad
        so every value normalizes to the neutral 0.5."""
        if not records:
            raise ValueError("cannot derive bounds from an empty batch")
        entries = {}
        for obj in Objective:
            values = [r.value(obj) for r in records]
            lo, hi = min(values), max(values)
            if hi - lo < 1e-12:
                lo, hi = lo - pad, hi + pad
            entries[obj] = ObjectiveBounds(lo, hi, obj.direction)
        return cls(entries)


def normalize_objective(value: float, bounds: ObjectiveBounds) -> float:
    """Map a raw metric into [0, 1] where 1 is always the preferred end."""
    if not math.isfinite(value):
        raise ValueError(f"cannot normalize non-finite value {value}")
    span = bounds.hi - bounds.lo
    if bounds.direction is Direction.MAXIMIZE:
        score = (value - bounds.lo) / span
    else:
        score = (bounds.hi - value) / span
    return min(1.0, max(0.0, score))


def aggregate_objective(
    record: PerformanceRecord,
    prefs: PreferenceVector,
    bounds: NormalizationBounds,
) -> float:
    """Weighted sum of direction-corrected normalized objective scores."""
    return sum(
        w * normalize_objective(record.value(obj), bounds.entry(obj))
        for obj, w in prefs.weights
    )


@dataclass(frozen=True)
class PlanValidation:
    ok: bool
    violations: tuple[str, ...] = ()

    def __bool__(self) -> bool:
        return self.ok


def validate_plan(plan: ItaPlan, scenario: MissionScenario) -> PlanValidation:
    """Structural feasibility: full task coverage, known ids, one travel robot
    per task, and every referenced operator/analyst present in the team."""
    violations: list[str] = []
    human_ids = scenario.human_ids()
    robot_ids = scenario.robot_ids()
    task_ids = scenario.task_ids()

    for task_id in sorted(task_ids - plan.task_ids(), key=natural_key):
        violations.append(f"{task_id} unassigned")
    for task_id in sorted(plan.task_ids() - task_ids, key=natural_key):
        violations.append(f"unknown task {task_id}")

    for task_id, entries in plan.assignments.items():
        if not entries:
            violations.append(f"{task_id} has no assignment entries")
            continue
        robot_agents = []
        for agent_id, collab in entries:
            if agent_id in robot_ids:
                robot_agents.append(agent_id)
            elif agent_id not in human_ids:
                violations.append(f"{task_id}: unknown agent {agent_id}")
            if collab.human_id is not None and collab.human_id not in human_ids:
                violations.append(f"{task_id}: unknown human {collab.human_id}")
        if len(robot_agents) == 0:
            violations.append(f"{task_id}: no robot responsible for travel")
        elif len(robot_agents) > 1:
            violations.append(f"{task_id}: multiple travel robots {robot_agents}")

    return PlanValidation(ok=not violations, violations=tuple(violations))
