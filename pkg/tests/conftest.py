from __future__ import annotations

import pytest

from rebel.core import (
    Collaboration,
    HumanProfile,
    ItaPlan,
    MissionScenario,
    RobotKind,
    RobotProfile,
    TaskSpec,
    Tier,
)


def make_scenario(
    humans=(("H_0", Tier.MED, Tier.MED), ("H_1", Tier.LOW, Tier.HIGH)),
    robots=(("UAV_0", 13.0, Tier.LOW), ("UGV_0", 6.0, Tier.MED)),
    tasks=(("T_0", (900.0, 500.0), Tier.HIGH), ("T_1", (200.0, 700.0), Tier.LOW)),
    arena_side=2000.0,
) -> MissionScenario:
    return MissionScenario(
        humans=tuple(HumanProfile(i, cognition=c, skill=s) for i, c, s in humans),
        robots=tuple(
            RobotProfile(i, RobotKind.from_id(i), speed=v, camera_quality=q) for i, v, q in robots
        ),
        tasks=tuple(TaskSpec(i, loc, d) for i, loc, d in tasks),
        arena_side=arena_side,
    )


@pytest.fixture
def scenario() -> MissionScenario:
    return make_scenario()


@pytest.fixture
def shared_plan(scenario) -> ItaPlan:
    return ItaPlan(
        {
            "T_0": (("UAV_0", Collaboration.shared_control("H_1")),),
            "T_1": (("UGV_0", Collaboration.shared_control("H_0")),),
        }
    )


@pytest.fixture
def autonomous_plan(scenario) -> ItaPlan:
    return ItaPlan(
        {
            "T_0": (("UAV_0", Collaboration.autonomous()),),
            "T_1": (("UGV_0", Collaboration.autonomous()),),
        }
    )
