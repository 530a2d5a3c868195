"""Built-in scenarios.

`consensus-appendix-b`: five planar double integrators reach output consensus,
the fifth joins after step 19 and changes the graph.
`formation-v-b`: three quadcopters stacked above each other form an
equilateral triangle with unit sides at a common altitude. The stacked start
is a stationary point of the planar cooperation cost, so warm starts carry a
small seeded perturbation.
`formation-appendix-c`: the same with slightly perturbed planar initial
positions and no warm-start perturbation.
"""

from __future__ import annotations

from typing import Callable, Dict, List

from .settings import AgentConfig, CooperationConfig, EventConfig, ScenarioConfig


def _rest(position: List[float], dim: int) -> List[float]:
    return position + [0.0] * (dim - len(position))


def consensus_appendix_b() -> ScenarioConfig:
    def agent(i: int, region: str, position: List[float]) -> AgentConfig:
        return AgentConfig(
            id=i,
            model="double_integrator",
            region=region,  # type: ignore[arg-type]
            initial_state=_rest(position, 4),
        )

    return ScenarioConfig(
        name="consensus-appendix-b",
        description="Output consensus of double integrators with an agent joining at t=19.",
        agents=[
            agent(1, "a", [-1.0, 4.0]),
            agent(2, "b", [2.0, 1.8]),
            agent(3, "b", [3.0, -1.5]),
            agent(4, "c", [-2.0, 0.0]),
        ],
        edges=[(1, 2), (1, 4), (3, 4)],
        cooperation=CooperationConfig(kind="consensus"),
        horizon=10,
        steps=40,
        events=[
            EventConfig(
                time=19,
                edges=[(1, 4), (2, 3), (3, 4), (3, 5), (4, 5)],
                joining=[
                    AgentConfig(
                        id=5,
                        model="double_integrator",
                        region="c",
                        initial_state=_rest([0.0, -2.0], 4),
                        initial_coop_output=[0.0, -2.0],
                    )
                ],
            )
        ],
    )


def _formation(name: str, description: str, planar: List[List[float]], steps: int, perturbation: float):
    agents = [
        AgentConfig(
            id=i + 1,
            model="quadcopter",
            initial_state=_rest([p[0], p[1], float(i + 1)], 10),
            initial_coop_output=[p[0], p[1], float(i + 1)],
        )
        for i, p in enumerate(planar)
    ]
    return ScenarioConfig(
        name=name,
        description=description,
        agents=agents,
        edges=[(1, 2), (1, 3), (2, 3)],
        cooperation=CooperationConfig(kind="formation", distance=1.0),
        horizon=10,
        steps=steps,
        perturbation=perturbation,
    )


def formation_v_b() -> ScenarioConfig:
    return _formation(
        "formation-v-b",
        "Quadcopter triangle formation from a vertically stacked start.",
        [[0.0, 0.0], [0.0, 0.0], [0.0, 0.0]],
        steps=600,
        perturbation=1e-3,
    )


def formation_appendix_c() -> ScenarioConfig:
    return _formation(
        "formation-appendix-c",
        "Quadcopter triangle formation from slightly perturbed planar positions.",
        [[1e-5, 0.0], [-1e-5, 1e-5], [-1e-5, -1e-5]],
        steps=300,
        perturbation=0.0,
    )


BUILTIN_SCENARIOS: Dict[str, Callable[[], ScenarioConfig]] = {
    "consensus-appendix-b": consensus_appendix_b,
    "formation-v-b": formation_v_b,
    "formation-appendix-c": formation_appendix_c,
}
