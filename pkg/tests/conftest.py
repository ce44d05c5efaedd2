import numpy as np
import pytest

from tokenplan.geometry import AgentTrack, Polygon, Polyline, Pose2, Scenario, SceneMap
from tokenplan.policy import ModelConfig, init_params
from tokenplan.scenarios import GeneratorConfig, generate_scenarios
from tokenplan.tokenizer import build_vocabularies

TINY = ModelConfig(num_layers=2, model_dim=16, num_heads=2, vocab_size=16, max_steps=3, map_neighbors=6)


@pytest.fixture(scope="session")
def scenarios():
    return generate_scenarios(GeneratorConfig(seed=3, num_scenarios=12))


@pytest.fixture(scope="session")
def short_scenarios():
    """Horizon matching the tiny model, for rollouts."""
    return generate_scenarios(GeneratorConfig(seed=4, num_scenarios=6, horizon_F=TINY.max_steps))


@pytest.fixture(scope="session")
def vocabs16(scenarios):
    return build_vocabularies(scenarios, 16, seed=0)


@pytest.fixture(scope="session")
def tiny_cfg():
    return TINY


@pytest.fixture(scope="session")
def tiny_params():
    return init_params(TINY, seed=1)


def transform_scenario(scn: Scenario, rot: float, shift) -> Scenario:
    """Apply one rigid motion to every geometric field of a scenario."""
    c, s = np.cos(rot), np.sin(rot)
    R = np.array([[c, -s], [s, c]])
    shift = np.asarray(shift, dtype=float)

    def pts(a):
        return np.asarray(a, float) @ R.T + shift

    def poses(a):
        a = np.asarray(a, float)
        return np.c_[pts(a[:, :2]), a[:, 2] + rot]

    m = scn.map
    drv = Polygon(pts(m.drivable.vertices), tuple(pts(h) for h in m.drivable.holes))
    obs = tuple((Pose2.from_array(poses(p.as_array()[None])[0]), d) for p, d in m.static_obstacles)
    new_map = SceneMap(drv, Polyline(pts(m.route_centerline.vertices)), m.speed_limit, obs)
    agents = tuple(AgentTrack(a.category, a.dims, poses(a.history),
                              None if a.future_gt is None else poses(a.future_gt)) for a in scn.agents)
    return Scenario(new_map, agents, scn.dt, scn.horizon_F, scn.scenario_id, dict(scn.meta))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.REPORT:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.REPORT):
            terminalreporter.write_line(line)
