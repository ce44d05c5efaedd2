"""Synthetic driving scenarios with a scripted (and deliberately flawed) expert.

Every vehicle is driven by an IDM-style gap-keeping longitudinal controller and a
pure-pursuit lateral controller on a unicycle model, simulated at ``sim_dt`` and
sampled on the token grid. With probability ``speeding_injection_rate`` the ego
expert targets 1.3x the speed limit, and is already speeding in its recorded history.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import (
    AgentCategory, AgentTrack, BoxDims, Polygon, Polyline, Pose2, SceneMap, Scenario,
    box_corners_batch, boxes_in_polygon_batch, boxes_overlap_batch, project_batch, wrap_angle,
)

TEMPLATES = ("straight", "curve", "intersection")
LANE_W = 3.5
SHOULDER = 0.5
PARK_W = 2.5
SPEEDING_FACTOR = 1.3


@dataclass
class GeneratorConfig:
    seed: int = 0
    num_scenarios: int = 2000
    templates: tuple = TEMPLATES
    num_agents: tuple = (2, 6)  # other agents, inclusive range
    speed_limit: tuple = (8.0, 15.0)
    speeding_injection_rate: float = 0.12
    obstacle_rate: float = 0.4
    eval_fraction: float = 0.1
    history_steps: int = 2
    horizon_F: int = 16
    dt: float = 0.5
    sim_dt: float = 0.1
    # expert controller gains
    time_headway: float = 1.5
    min_gap: float = 3.0
    max_accel: float = 1.2
    comfort_decel: float = 2.0
    max_lat_accel: float = 2.0
    lookahead_time: float = 0.8
    min_lookahead: float = 4.0

    def __post_init__(self):
        for name in ("speeding_injection_rate", "obstacle_rate", "eval_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.num_agents[0] < 0 or self.num_agents[0] > self.num_agents[1]:
            raise ValueError(f"bad num_agents range {self.num_agents}")
        if not 0 < self.speed_limit[0] <= self.speed_limit[1]:
            raise ValueError(f"bad speed_limit range {self.speed_limit}")
        bad = set(self.templates) - set(TEMPLATES)
        if bad or not self.templates:
            raise ValueError(f"unknown road templates {sorted(bad)}")
        if self.history_steps < 1 or self.horizon_F < 1:
            raise ValueError("history_steps and horizon_F must be >= 1")
        if abs(round(self.dt / self.sim_dt) * self.sim_dt - self.dt) > 1e-9:
            raise ValueError("dt must be a multiple of sim_dt")
        self.templates = tuple(self.templates)
        self.num_agents = tuple(self.num_agents)
        self.speed_limit = tuple(self.speed_limit)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# road geometry


def _resample(pts: np.ndarray, step: float) -> np.ndarray:
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    keep = np.r_[True, seg > 1e-9]
    pts = pts[keep]
    cum = np.r_[0, np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))]
    s = np.r_[np.arange(0, cum[-1], step), cum[-1]]
    if len(s) > 2 and s[-1] - s[-2] < 0.25 * step:
        s = np.r_[s[:-2], cum[-1]]
    return np.c_[np.interp(s, cum, pts[:, 0]), np.interp(s, cum, pts[:, 1])]


def _offset(pts: np.ndarray, d: float) -> np.ndarray:
    """Shift a densely sampled polyline ``d`` to the left."""
    t = np.gradient(pts, axis=0)
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    return pts + d * np.c_[-t[:, 1], t[:, 0]]


def _arc(center, radius, a0, a1, step=1.0):
    n = max(2, int(abs(a1 - a0) * radius / step) + 1)
    a = np.linspace(a0, a1, n)
    return np.c_[center[0] + radius * np.cos(a), center[1] + radius * np.sin(a)]


@dataclass
class _Road:
    drivable: Polygon
    paths: dict  # name -> (N, 2) dense points, direction of travel
    obstacles: list = field(default_factory=list)


def _corridor_road(ref: np.ndarray, parking: bool) -> _Road:
    ref = _resample(ref, 1.0)
    right_edge = -(LANE_W + (PARK_W if parking else SHOULDER))
    left_edge = LANE_W + SHOULDER
    coarse = _resample(ref, 4.0)
    right = _offset(coarse, right_edge)
    left = _offset(coarse, left_edge)
    poly = Polygon.ccw(np.r_[right, left[::-1]])
    paths = {
        "ego": _offset(ref, -LANE_W / 2),
        "oncoming": _offset(ref, LANE_W / 2)[::-1],
        "strip": _offset(ref, -(LANE_W + PARK_W / 2 + 0.1)),
        "walk_right": _offset(ref, right_edge - 1.5),
        "walk_left": _offset(ref, left_edge + 1.5)[::-1],
    }
    return _Road(poly, paths)


def _straight(rng) -> _Road:
    ref = np.c_[np.linspace(-80, 260, 341), np.zeros(341)]
    return _corridor_road(ref, parking=bool(rng.random() < 0.7))


def _curve(rng) -> _Road:
    radius = rng.uniform(45, 120)
    sign = rng.choice([-1.0, 1.0])
    angle = rng.uniform(0.5, 1.4)
    x0 = rng.uniform(10, 60)
    lead_in = np.c_[np.linspace(-80, x0, int(x0 + 80) + 1), np.zeros(int(x0 + 80) + 1)]
    center = np.array([x0, sign * radius])
    a0 = -sign * math.pi / 2
    arc = _arc(center, radius, a0, a0 + sign * angle)
    end_dir = np.array([math.cos(sign * angle), math.sin(sign * angle)])
    tail = arc[-1] + np.linspace(1, 200, 200)[:, None] * end_dir
    ref = np.r_[lead_in, arc[1:], tail]
    return _corridor_road(ref, parking=bool(rng.random() < 0.5))


def _intersection(rng) -> _Road:
    h = LANE_W + SHOULDER
    c = 5.0
    X = 160.0
    ring = np.array([
        [X, -h], [X, h], [h + c, h], [h, h + c], [h, X], [-h, X], [-h, h + c], [-h - c, h],
        [-X, h], [-X, -h], [-h - c, -h], [-h, -h - c], [-h, -X], [h, -X], [h, -h - c], [h + c, -h],
    ])
    poly = Polygon.ccw(ring)
    lane = LANE_W / 2
    turn = rng.choice(["straight", "left", "right"])
    approach = np.c_[np.linspace(-100, -h - c - 2, 60), np.full(60, -lane)]
    if turn == "straight":
        ego = np.r_[approach, np.c_[np.linspace(-h - c - 1, X - 5, 200), np.full(200, -lane)]]
    elif turn == "right":
        r = 6.0
        ctr = np.array([-lane - r, -lane - r])
        arc = _arc(ctr, r, math.pi / 2, 0.0, 0.5)
        ego = np.r_[approach[approach[:, 0] < ctr[0] - 0.5], arc,
                    np.c_[np.full(150, -lane), np.linspace(ctr[1] - 1, -X + 5, 150)]]
    else:
        r = 5.75
        ctr = np.array([lane - r, -lane + r])
        arc = _arc(ctr, r, -math.pi / 2, 0.0, 0.5)
        ego = np.r_[approach[approach[:, 0] < ctr[0] - 0.5], arc,
                    np.c_[np.full(150, lane), np.linspace(ctr[1] + 1, X - 5, 150)]]
    ego = _resample(ego, 1.0)
    wait = h + c + 3.0
    paths = {
        "ego": ego,
        "oncoming": np.c_[np.linspace(X - 5, wait, 100), np.full(100, lane)],
        "cross_south": np.c_[np.full(100, lane), np.linspace(-X + 5, -wait, 100)],
        "cross_north": np.c_[np.full(100, -lane), np.linspace(X - 5, wait, 100)],
        "walk_right": np.c_[np.linspace(-100, -h - 2, 60), np.full(60, -h - 1.5)],
        "walk_left": np.c_[np.linspace(-h - 2, -100, 60), np.full(60, h + 1.5)],
    }
    return _Road(poly, {k: _resample(v, 1.0) for k, v in paths.items()})


_BUILDERS = {"straight": _straight, "curve": _curve, "intersection": _intersection}


# ---------------------------------------------------------------------------
# agents and controllers


@dataclass
class _Agent:
    category: AgentCategory
    dims: BoxDims
    path: np.ndarray
    s0: float
    v0: float
    v_target: float
    follows: bool = True  # gap-keeps to agents ahead on the same path
    path_name: str = ""
    states: list = field(default_factory=list)


def _path_speed_cap(path: Polyline, cfg: GeneratorConfig) -> np.ndarray:
    """Max comfortable speed at each path vertex: lateral-accel bound, back-propagated with
    the comfortable deceleration so the expert slows down ahead of a turn."""
    v = path.vertices
    h = np.unwrap(np.arctan2(np.gradient(v[:, 1]), np.gradient(v[:, 0])))
    ds = np.gradient(path.cumulative_arclength)
    kappa = np.abs(np.gradient(h)) / np.maximum(ds, 1e-6)
    kappa = np.convolve(kappa, np.ones(5) / 5, mode="same")
    cap = np.sqrt(cfg.max_lat_accel / np.maximum(kappa, 1e-6))
    cum = path.cumulative_arclength
    out = cap.copy()
    for i in range(len(cap) - 2, -1, -1):
        out[i] = min(out[i], math.sqrt(out[i + 1] ** 2 + 2 * cfg.comfort_decel * (cum[i + 1] - cum[i])))
    return out


def _simulate(agents: list, cfg: GeneratorConfig, n_steps: int) -> None:
    """Joint simulation of all agents; fills ``agent.states`` with (x, y, h, v) per sub-step."""
    lines = [Polyline(a.path) for a in agents]
    caps = [_path_speed_cap(ln, cfg) for ln in lines]
    state = []
    for a, ln in zip(agents, lines):
        p = ln.point_at(a.s0)
        state.append([p[0], p[1], ln.heading_at(a.s0), a.v0])
    state = np.array(state, dtype=float)
    for a, st in zip(agents, state):
        a.states = [st.copy()]
    dt = cfg.sim_dt
    for _ in range(n_steps):
        s_now = np.array([project_batch(st[None, :2], ln)[0][0] for st, ln in zip(state, lines)])
        acc = np.zeros(len(agents))
        curv = np.zeros(len(agents))
        for i, (a, ln) in enumerate(zip(agents, lines)):
            x, y, h, v = state[i]
            if a.v_target <= 0:
                continue
            v0 = min(a.v_target, float(np.interp(s_now[i], ln.cumulative_arclength, caps[i])))
            gap, dv = math.inf, 0.0
            if a.follows:
                fwd = np.array([math.cos(h), math.sin(h)])
                for j, b in enumerate(agents):
                    if j == i:
                        continue
                    rel = state[j, :2] - state[i, :2]
                    ahead = rel @ fwd
                    if ahead <= 0:
                        continue
                    # same lane: lateral distance to the other agent's projection on my path
                    sj, dj = project_batch(state[j, None, :2], ln)
                    if abs(dj[0]) > 1.8 or sj[0] <= s_now[i]:
                        continue
                    g = sj[0] - s_now[i] - 0.5 * (a.dims.length + b.dims.length)
                    if g < gap:
                        gap, dv = g, v - state[j, 3] * math.cos(state[j, 2] - h)
            s_star = cfg.min_gap + max(0.0, v * cfg.time_headway + v * dv / (2 * math.sqrt(cfg.max_accel * cfg.comfort_decel)))
            free = 1.0 - (v / max(v0, 0.1)) ** 4
            inter = (s_star / max(gap, 0.1)) ** 2 if math.isfinite(gap) else 0.0
            acc[i] = float(np.clip(cfg.max_accel * (free - inter), -cfg.comfort_decel * 1.4, cfg.max_accel))
            ld = max(cfg.min_lookahead, cfg.lookahead_time * v)
            target = ln.point_at(min(s_now[i] + ld, ln.length))
            alpha = math.atan2(target[1] - y, target[0] - x) - h
            curv[i] = 2.0 * math.sin(alpha) / ld
        v_new = np.maximum(state[:, 3] + acc * dt, 0.0)
        v_mid = 0.5 * (state[:, 3] + v_new)
        h_new = state[:, 2] + v_mid * curv * dt
        h_mid = 0.5 * (state[:, 2] + h_new)
        state[:, 0] += v_mid * np.cos(h_mid) * dt
        state[:, 1] += v_mid * np.sin(h_mid) * dt
        state[:, 2] = wrap_angle(h_new)
        state[:, 3] = v_new
        for a, st in zip(agents, state):
            a.states.append(st.copy())


def _veh_dims(rng) -> BoxDims:
    return BoxDims(round(rng.uniform(4.2, 5.0), 2), round(rng.uniform(1.8, 2.0), 2))


def _place_agents(road: _Road, template: str, limit: float, ego_target: float, n_others: int,
                  rng, cfg: GeneratorConfig) -> list:
    ego_path = road.paths["ego"]
    ego_s0 = rng.uniform(70, 95) if template != "intersection" else rng.uniform(25, 60)
    ego_v0 = ego_target * rng.uniform(0.9, 1.02)
    if ego_target <= limit:
        ego_v0 = min(ego_v0, limit)
    agents = [_Agent(AgentCategory.VEHICLE, BoxDims(4.6, 1.9), ego_path, ego_s0, ego_v0, ego_target,
                     path_name="ego")]
    used_lead = used_follow = False
    kinds = ["lead", "follow", "oncoming", "oncoming", "ped", "cyclist", "parked_other"]
    for _ in range(n_others):
        kind = kinds[int(rng.integers(len(kinds)))]
        if kind == "lead" and not used_lead:
            used_lead = True
            gap = rng.uniform(20, 50)
            v = min(ego_target * rng.uniform(0.75, 1.05), limit * SPEEDING_FACTOR)
            agents.append(_Agent(AgentCategory.VEHICLE, _veh_dims(rng), ego_path, ego_s0 + gap, v, v, path_name="ego"))
        elif kind == "follow" and not used_follow and ego_s0 > 30:
            used_follow = True
            gap = rng.uniform(12, 25)
            v = ego_v0 * rng.uniform(0.9, 1.0)
            agents.append(_Agent(AgentCategory.VEHICLE, _veh_dims(rng), ego_path, ego_s0 - gap, v,
                                 max(ego_target, limit), path_name="ego"))
        elif kind == "oncoming":
            path = road.paths["oncoming"]
            ln = Polyline(path)
            if template == "intersection":
                agents.append(_Agent(AgentCategory.VEHICLE, _veh_dims(rng), path, ln.length - 0.5 - 8 * rng.integers(0, 3),
                                     0.0, 0.0, follows=False, path_name="oncoming"))
            else:
                s_ego_proj = ln.length - ego_s0
                s = s_ego_proj - rng.uniform(40, 160)
                v = limit * rng.uniform(0.8, 1.0)
                agents.append(_Agent(AgentCategory.VEHICLE, _veh_dims(rng), path, max(s, 1.0), v, v, path_name="oncoming"))
        elif kind == "ped":
            name = "walk_right" if rng.random() < 0.5 else "walk_left"
            path = road.paths[name]
            ln = Polyline(path)
            v = rng.uniform(1.0, 1.6)
            s = float(np.clip(project_batch(Polyline(ego_path).point_at(ego_s0 + rng.uniform(-10, 60))[None], ln)[0][0],
                              1.0, ln.length - 30))
            agents.append(_Agent(AgentCategory.PEDESTRIAN, BoxDims(0.6, 0.6), path, s, v, v, follows=False, path_name=name))
        elif kind == "cyclist" and template != "intersection" and not road.obstacles:
            path = road.paths["strip"]
            ln = Polyline(path)
            v = rng.uniform(3.5, 6.0)
            s = float(project_batch(Polyline(ego_path).point_at(ego_s0 + rng.uniform(15, 60))[None], ln)[0][0])
            agents.append(_Agent(AgentCategory.CYCLIST, BoxDims(1.8, 0.6), path, s, v, v, follows=False, path_name="strip"))
        elif kind == "parked_other" and template == "intersection":
            name = "cross_south" if rng.random() < 0.5 else "cross_north"
            path = road.paths[name]
            ln = Polyline(path)
            agents.append(_Agent(AgentCategory.VEHICLE, _veh_dims(rng), path, ln.length - 0.5 - 8 * rng.integers(0, 3),
                                 0.0, 0.0, follows=False, path_name=name))
    return agents


def _place_obstacles(road: _Road, template: str, ego_s0: float, rng, cfg: GeneratorConfig) -> list:
    if template == "intersection" or rng.random() >= cfg.obstacle_rate:
        return []
    strip = road.paths["strip"]
    ln = Polyline(strip)
    if ln.length < 10:
        return []
    out = []
    s = ego_s0 + rng.uniform(10, 40)
    for _ in range(int(rng.integers(1, 4))):
        if s >= ln.length - 5:
            break
        p = ln.point_at(s)
        out.append((Pose2(p[0], p[1], ln.heading_at(s)), _veh_dims(rng)))
        s += rng.uniform(8, 40)
    return out


def _transform(pts: np.ndarray, rot: float, shift: np.ndarray) -> np.ndarray:
    c, s = math.cos(rot), math.sin(rot)
    out = np.array(pts, dtype=float, copy=True)
    xy = out[..., :2] @ np.array([[c, s], [-s, c]]) + shift
    out[..., :2] = xy
    if out.shape[-1] == 3:
        out[..., 2] = wrap_angle(out[..., 2] + rot)
    return out


def expert_overspeed(scn: Scenario) -> float:
    """Overspeed distance (m) of the ego expert future, speeds by finite difference."""
    p = np.concatenate([scn.ego.history[-1:], scn.ego.future_gt[: scn.horizon_F]])
    v = np.linalg.norm(np.diff(p[:, :2], axis=0), axis=1) / scn.dt
    return float(np.sum(np.maximum(0.0, v - scn.map.speed_limit)) * scn.dt)


def validate_expert(scn: Scenario) -> bool:
    """Ego expert future stays in the drivable area, never touches another box, and
    exceeds the speed limit exactly when speeding was injected."""
    ego = scn.ego
    if (expert_overspeed(scn) > 0) != bool(scn.meta.get("has_injected_speeding", False)):
        return False
    fut = ego.future_gt[: scn.horizon_F]
    ed = np.array([ego.dims.length, ego.dims.width])
    if not boxes_in_polygon_batch(fut, ed, scn.map.drivable).all():
        return False
    ce = box_corners_batch(fut, ed)
    for a in scn.agents[1:]:
        co = box_corners_batch(a.future_gt[: scn.horizon_F], np.array([a.dims.length, a.dims.width]))
        if boxes_overlap_batch(ce, co).any():
            return False
    op, od = scn.map.obstacle_array()
    if len(op):
        co = box_corners_batch(op, od)
        if boxes_overlap_batch(ce[:, None], co[None]).any():
            return False
    return True


def _scenario_rng(index: int, cfg: GeneratorConfig) -> tuple[np.random.Generator, bool]:
    """RNG stream for scenario ``index``; its first draw decides speeding injection."""
    rng = np.random.default_rng([cfg.seed, index])
    return rng, bool(rng.random() < cfg.speeding_injection_rate)


def injection_flags(cfg: GeneratorConfig, count: int | None = None) -> np.ndarray:
    """Which of the first ``count`` scenarios get an injected speeding expert, without generating them."""
    count = cfg.num_scenarios if count is None else count
    return np.array([_scenario_rng(i, cfg)[1] for i in range(count)])


def generate_scenario(index: int, cfg: GeneratorConfig, max_tries: int = 50) -> Scenario:
    """Scenario ``index`` drawn from its own RNG stream (seed, index)."""
    rng, inject = _scenario_rng(index, cfg)
    for attempt in range(max_tries):
        template = cfg.templates[int(rng.integers(len(cfg.templates)))]
        road = _BUILDERS[template](rng)
        limit = round(float(rng.uniform(*cfg.speed_limit)), 2)
        ego_target = limit * (SPEEDING_FACTOR if inject else rng.uniform(0.85, 1.0))
        n_others = int(rng.integers(cfg.num_agents[0], cfg.num_agents[1] + 1))
        ego_s0_hint = 80.0
        road.obstacles = _place_obstacles(road, template, ego_s0_hint, rng, cfg)
        agents = _place_agents(road, template, limit, ego_target, n_others, rng, cfg)
        sub = int(round(cfg.dt / cfg.sim_dt))
        H, F = cfg.history_steps, cfg.horizon_F
        _simulate(agents, cfg, sub * (H + F))
        rot = float(rng.uniform(-math.pi, math.pi))
        shift = rng.uniform(-50, 50, 2)
        tracks = []
        for a in agents:
            poses = np.array(a.states)[::sub, :3]
            poses = _transform(poses, rot, shift)
            tracks.append(AgentTrack(a.category, a.dims, poses[: H + 1], poses[H + 1:]))
        obstacles = tuple((Pose2(*_transform(p.as_array(), rot, shift)), d) for p, d in road.obstacles)
        poly = Polygon(_transform(road.drivable.vertices, rot, shift))
        route = Polyline(_transform(road.paths["ego"], rot, shift))
        smap = SceneMap(poly, route, limit, obstacles)
        scn = Scenario(smap, tracks, cfg.dt, F, scenario_id=f"s{cfg.seed}_{index:05d}",
                       meta={"template": template, "has_injected_speeding": inject})
        if validate_expert(scn):
            return scn
    raise RuntimeError(f"could not generate a valid scenario for index {index} after {max_tries} tries")


def generate_scenarios(cfg: GeneratorConfig, start: int = 0, count: int | None = None) -> list:
    count = cfg.num_scenarios if count is None else count
    return [generate_scenario(i, cfg) for i in range(start, start + count)]
