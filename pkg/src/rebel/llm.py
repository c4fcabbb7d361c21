"""Completion providers: OpenAI-compatible HTTP client, deterministic stub,
transcript record/replay, and the no-LLM greedy allocator used as fallback.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import requests

from .core import (
    CollabMode,
    Collaboration,
    ItaPlan,
    MissionScenario,
    Objective,
    PreferenceVector,
    natural_key,
)
from .prompt import (
    GOAL_GENERATE_RULES,
    GOAL_PERFORM_ITA,
    GOAL_REFINE_RULES,
    SECTION_GOAL,
    SECTION_OBJECTIVES,
    SECTION_RULES,
    SECTION_SCENARIO,
    extract_section,
    parse_objectives_text,
)
from .sim import SimConfig, human_accuracy_probability, robot_accuracy_probability, travel_time


class LlmError(Exception):
    pass


class Timeout(LlmError):
    """The provider did not answer within the configured window."""


class ProviderRejected(LlmError):
    """The provider refused the request (HTTP 4xx); retrying will not help."""


class Unavailable(LlmError):
    """Transient failures exhausted the retry budget."""


@dataclass(frozen=True)
class CompletionRequest:
    prompt: str
    temperature: float = 0.2
    max_tokens: int = 1024
    model: str = "gpt-4o-mini"

    def __post_init__(self) -> None:
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if not (0.0 <= self.temperature <= 2.0):
            raise ValueError("temperature must lie in [0, 2]")


@dataclass(frozen=True)
class ProviderConfig:
    endpoint: str = "https://api.openai.com/v1"
    api_key_env: str = "OPENAI_API_KEY"
    timeout_s: float = 60.0
    retries: int = 2
    backoff_s: float = 0.5
    max_concurrency: int = 4

    def __post_init__(self) -> None:
        if self.timeout_s <= 0:
            raise ValueError("timeout must be > 0")
        if self.retries < 0:
            raise ValueError("retry count must be >= 0")


class CompletionProvider(Protocol):
    def complete(self, request: CompletionRequest) -> str: ...


class HttpCompletionProvider:
    """Chat-completion client for any OpenAI-compatible endpoint.

    Transient failures (5xx, connection errors, timeouts) are retried with
    exponential backoff; 4xx responses are rejected immediately.
    """

    def __init__(self, cfg: ProviderConfig):
        self.cfg = cfg
        self._gate = threading.Semaphore(max(1, cfg.max_concurrency))

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.cfg.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def complete(self, request: CompletionRequest) -> str:
        url = self.cfg.endpoint.rstrip("/") + "/chat/completions"
        payload = {
            "model": request.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        last_error: Exception | None = None
        timed_out = False
        for attempt in range(self.cfg.retries + 1):
            if attempt:
                time.sleep(self.cfg.backoff_s * 2 ** (attempt - 1))
            try:
                with self._gate:
                    response = requests.post(
                        url, json=payload, headers=self._headers(), timeout=self.cfg.timeout_s
                    )
            except requests.Timeout as exc:
                last_error, timed_out = exc, True
                continue
            except requests.RequestException as exc:
                last_error = exc
                continue
            if 400 <= response.status_code < 500:
                raise ProviderRejected(f"HTTP {response.status_code}: {response.text[:500]}")
            if response.status_code >= 500:
                last_error = RuntimeError(f"HTTP {response.status_code}")
                continue
            data = response.json()
            return data["choices"][0]["message"]["content"]
        if timed_out:
            raise Timeout(f"no response within {self.cfg.timeout_s}s: {last_error}") from last_error
        raise Unavailable(f"retries exhausted: {last_error}") from last_error


def complete(request: CompletionRequest, cfg: ProviderConfig) -> str:
    return HttpCompletionProvider(cfg).complete(request)


class HttpEmbedder:
    """Embedding client for an OpenAI-compatible /embeddings endpoint."""

    def __init__(self, cfg: ProviderConfig, model: str = "text-embedding-3-small"):
        self.cfg = cfg
        self.model = model

    def embed(self, text: str) -> tuple[float, ...]:
        url = self.cfg.endpoint.rstrip("/") + "/embeddings"
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.cfg.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        try:
            response = requests.post(
                url,
                json={"model": self.model, "input": [text]},
                headers=headers,
                timeout=self.cfg.timeout_s,
            )
        except requests.Timeout as exc:
            raise Timeout(str(exc)) from exc
        except requests.RequestException as exc:
            raise Unavailable(str(exc)) from exc
        if 400 <= response.status_code < 500:
            raise ProviderRejected(f"HTTP {response.status_code}: {response.text[:500]}")
        if response.status_code >= 500:
            raise Unavailable(f"HTTP {response.status_code}")
        vector = response.json()["data"][0]["embedding"]
        norm = math.sqrt(sum(v * v for v in vector)) or 1.0
        return tuple(v / norm for v in vector)


class TranscriptRecorder:
    """Wraps a provider, appending every exchange to a JSON-lines transcript."""

    def __init__(self, inner: CompletionProvider, path: str | Path):
        self.inner = inner
        self.path = Path(path)

    def complete(self, request: CompletionRequest) -> str:
        response = self.inner.complete(request)
        entry = {
            "prompt_sha256": hashlib.sha256(request.prompt.encode("utf-8")).hexdigest(),
            "prompt": request.prompt,
            "response": response,
        }
        with open(self.path, "a", encoding="utf-8") as handle:
            handle.write(json.dumps(entry, sort_keys=True) + "\n")
        return response


class TranscriptReplayer:
    """Serves recorded responses by prompt hash; unseen prompts are errors."""

    def __init__(self, path: str | Path):
        self._responses: dict[str, str] = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                entry = json.loads(line)
                self._responses[entry["prompt_sha256"]] = entry["response"]

    def complete(self, request: CompletionRequest) -> str:
        digest = hashlib.sha256(request.prompt.encode("utf-8")).hexdigest()
        if digest not in self._responses:
            raise Unavailable(f"no recorded response for prompt {digest[:12]}")
        return self._responses[digest]


STUB_RULES: dict[Objective, tuple[str, ...]] = {
    Objective.MISSION_TIME: (
        "Assign faster robots to tasks farther away.",
        "Balance the number of tasks per robot so no route dominates the mission clock.",
        "Prefer autonomous capture to avoid waiting on analysis queues.",
    ),
    Objective.TASK_PERFORMANCE: (
        "Assign skilled humans to difficult tasks.",
        "Use robots with high camera quality for image capture.",
        "Keep easy tasks on autonomous robots so analysts stay focused on hard ones.",
    ),
    Objective.HUMAN_WORKLOAD: (
        "Keep tasks in robot autonomous mode whenever possible.",
        "Never queue more analyses to a human than strictly necessary.",
        "Reserve shared control for tasks robots cannot handle alone.",
    ),
}


class StubProvider:
    """Deterministic offline provider.

    Rule-generation prompts get a canned objective-specific rule list,
    refinement prompts echo the rules already in the prompt, and allocation
    prompts are answered by rendering the greedy allocator's plan in the
    plan grammar. This makes the full pipeline runnable with no network.
    """

    def complete(self, request: CompletionRequest) -> str:
        text = request.prompt
        goal = extract_section(text, SECTION_GOAL)
        if GOAL_GENERATE_RULES in goal:
            prefs = parse_objectives_text(extract_section(text, SECTION_OBJECTIVES))
            objective = prefs.weights[0][0]
            return "\n".join(STUB_RULES[objective])
        if GOAL_REFINE_RULES in goal:
            return extract_section(text, SECTION_RULES)
        if GOAL_PERFORM_ITA in goal:
            scenario = MissionScenario.parse(extract_section(text, SECTION_SCENARIO))
            prefs = parse_objectives_text(extract_section(text, SECTION_OBJECTIVES))
            return heuristic_allocate(scenario, prefs).render()
        raise Unavailable("stub provider does not understand this prompt")


def _proxy_accuracy(
    scenario: MissionScenario, robot_id: str, collab: Collaboration, difficulty, cfg: SimConfig
) -> float:
    """Nominal (fresh-operator) success probability for a candidate assignment."""
    robot = scenario.robot(robot_id)
    if collab.mode is CollabMode.ROBOT_AUTONOMOUS:
        return robot_accuracy_probability(robot.camera_quality, difficulty, None, cfg)
    human = scenario.human(collab.human_id)
    return human_accuracy_probability(human, 0.0, 0, difficulty, cfg)


def heuristic_allocate(scenario: MissionScenario, prefs: PreferenceVector) -> ItaPlan:
    """Greedy, preference-aware allocation that always validates.

    Behavior by dominant objective: mission time picks, per task, the robot
    with the smallest projected route completion (all autonomous); human
    workload does the same, guaranteeing zero human involvement; task
    performance routes hard tasks to shared control with the best analysts
    and keeps the rest on the best cameras. Mixed weights score every
    (robot, mode) candidate on weighted normalized proxies. Ties always go
    to the lowest id.
    """
    if not scenario.robots:
        raise ValueError("cannot allocate: scenario has no robots")

    cfg = SimConfig()
    tasks = sorted(scenario.tasks, key=lambda t: natural_key(t.id))
    robots = sorted(scenario.robots, key=lambda r: natural_key(r.id))
    humans = sorted(
        scenario.humans,
        key=lambda h: (-h.skill.rank, -h.cognition.rank, natural_key(h.id)),
    )

    route_end: dict[str, tuple[float, float]] = {r.id: (0.0, 0.0) for r in robots}
    route_time: dict[str, float] = {r.id: 0.0 for r in robots}
    load: dict[str, int] = {r.id: 0 for r in robots}

    def projected_completion(robot, location, speed_scale: float = 1.0) -> float:
        return route_time[robot.id] + travel_time(
            route_end[robot.id], location, robot.speed * speed_scale
        )

    def commit(task_id: str, robot, collab: Collaboration, location) -> None:
        scale = 1.0
        if collab.mode is CollabMode.SHARED_CONTROL:
            scale = cfg.shared_speed_multiplier[scenario.human(collab.human_id).skill]
        route_time[robot.id] = projected_completion(robot, location, scale)
        route_end[robot.id] = location
        load[robot.id] += 1
        assignments[task_id] = ((robot.id, collab),)

    assignments: dict[str, tuple[tuple[str, Collaboration], ...]] = {}
    dominant = prefs.dominant()

    if dominant in (Objective.MISSION_TIME, Objective.HUMAN_WORKLOAD):
        for task in tasks:
            best = min(
                robots, key=lambda r: (projected_completion(r, task.location), natural_key(r.id))
            )
            commit(task.id, best, Collaboration.autonomous(), task.location)
    elif dominant is Objective.TASK_PERFORMANCE:
        analysts = humans[: max(1, min(3, len(humans)))] if humans else []
        hard_index = 0
        for task in tasks:
            if task.difficulty.rank == 2 and analysts:
                analyst = analysts[hard_index % len(analysts)]
                hard_index += 1
                robot = min(
                    robots,
                    key=lambda r: (load[r.id], -r.camera_quality.rank, natural_key(r.id)),
                )
                commit(task.id, robot, Collaboration.shared_control(analyst.id), task.location)
            else:
                robot = min(
                    robots,
                    key=lambda r: (load[r.id], -r.camera_quality.rank, natural_key(r.id)),
                )
                commit(task.id, robot, Collaboration.autonomous(), task.location)
    else:
        # Mixed weights with no single dominant objective: score candidates on
        # normalized proxies for completion time, accuracy, and human load.
        for task in tasks:
            candidates: list[tuple[tuple, object, Collaboration, float, float, float]] = []
            for robot in robots:
                options = [Collaboration.autonomous()]
                options += [Collaboration.shared_control(h.id) for h in humans]
                options += [Collaboration.human_analysis(h.id) for h in humans]
                for collab in options:
                    scale = 1.0
                    extra = 0.0
                    if collab.mode is CollabMode.SHARED_CONTROL:
                        scale = cfg.shared_speed_multiplier[scenario.human(collab.human_id).skill]
                    if collab.mode is not CollabMode.ROBOT_AUTONOMOUS:
                        extra = cfg.analysis_service_s[task.difficulty]
                    t_proxy = projected_completion(robot, task.location, scale) + extra
                    a_proxy = _proxy_accuracy(scenario, robot.id, collab, task.difficulty, cfg)
                    w_proxy = 0.0 if collab.mode is CollabMode.ROBOT_AUTONOMOUS else 1.0
                    tie = (
                        natural_key(robot.id),
                        collab.mode.value,
                        natural_key(collab.human_id or ""),
                    )
                    candidates.append((tie, robot, collab, t_proxy, a_proxy, w_proxy))

            t_values = [c[3] for c in candidates]
            a_values = [c[4] for c in candidates]
            w_values = [c[5] for c in candidates]

            def norm(value: float, values: list[float], maximize: bool) -> float:
                lo, hi = min(values), max(values)
                if hi - lo < 1e-12:
                    return 0.5
                frac = (value - lo) / (hi - lo)
                return frac if maximize else 1.0 - frac

            def score(c) -> float:
                return (
                    prefs.weight(Objective.MISSION_TIME) * norm(c[3], t_values, False)
                    + prefs.weight(Objective.TASK_PERFORMANCE) * norm(c[4], a_values, True)
                    + prefs.weight(Objective.HUMAN_WORKLOAD) * norm(c[5], w_values, False)
                )

            _, robot, collab, _, _, _ = sorted(
                candidates, key=lambda c: (-score(c), c[0])
            )[0]
            commit(task.id, robot, collab, task.location)

    return ItaPlan(assignments)
