"""Rule-based rewards: hard safety indicators gating a weighted sum of soft scores.

Pose arrays are ``(..., T, 3)``. Unless noted, ``ego`` sequences passed to the
batch functions start with the pose *before* the first planned step, so a
horizon of F steps is given as F + 1 poses (or more, when extra history is
prepended for finite differences).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import SceneMap, Scenario, box_corners_batch, boxes_in_polygon_batch, boxes_overlap_batch, \
    project_batch, ttc_batch, wrap_angle

SAFETY_KEYS = ("drivable", "dynamic_collision", "static_collision")
SOFT_KEYS = ("comfort", "ttc", "speed", "progress")
FAR_AWAY = 1e7  # parking spot for padded agents in batched collision checks


@dataclass
class RewardConfig:
    w_comfort: float = 2.0
    w_ttc: float = 5.0
    w_speed: float = 2.0
    w_progress: float = 1.0
    max_lon_accel: float = 3.0
    max_lat_accel: float = 4.0
    max_yaw_rate: float = 1.0
    max_yaw_accel: float = 2.0
    ttc_threshold: float = 0.95
    ttc_horizon: float = 3.0
    ttc_dt_sub: float = 0.1
    max_overspeed_integral: float = 10.0
    min_expert_progress: float = 1.0
    normalize_by_weight_sum: bool = True

    def __post_init__(self):
        if min(self.weights) < 0:
            raise ValueError("reward weights must be >= 0")
        for name in ("max_lon_accel", "max_lat_accel", "max_yaw_rate", "max_yaw_accel", "ttc_threshold",
                     "ttc_horizon", "ttc_dt_sub", "max_overspeed_integral", "min_expert_progress"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def weights(self) -> np.ndarray:
        return np.array([self.w_comfort, self.w_ttc, self.w_speed, self.w_progress])

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RewardBreakdown:
    """Per-step arrays of length F. Safety bits are 1 when the rule is satisfied."""

    drivable: np.ndarray
    dynamic_collision: np.ndarray
    static_collision: np.ndarray
    comfort: np.ndarray
    ttc: np.ndarray
    speed: np.ndarray
    progress: np.ndarray
    total: np.ndarray
    extras: dict = field(default_factory=dict)

    @property
    def gate(self) -> np.ndarray:
        return self.drivable * self.dynamic_collision * self.static_collision

    @property
    def is_safe(self) -> bool:
        return bool(np.all(self.gate == 1))

    def to_dict(self) -> dict:
        d = {k: np.asarray(getattr(self, k)).tolist() for k in SAFETY_KEYS + SOFT_KEYS + ("total",)}
        d["extras"] = {k: float(v) for k, v in self.extras.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RewardBreakdown":
        return cls(**{k: np.asarray(d[k], dtype=float) for k in SAFETY_KEYS + SOFT_KEYS + ("total",)},
                   extras=dict(d.get("extras", {})))


# ---------------------------------------------------------------------------
# kinematics


def _velocities(poses: np.ndarray, dt: float) -> np.ndarray:
    """Backward-difference planar velocities (..., T-1, 2)."""
    return np.diff(poses[..., :2], axis=-2) / dt


def kinematics(poses: np.ndarray, dt: float) -> dict:
    """Finite-difference longitudinal/lateral acceleration, yaw rate and yaw acceleration."""
    poses = np.asarray(poses, dtype=float)
    d = np.diff(poses, axis=-2)
    mid_h = poses[..., :-1, 2] + 0.5 * wrap_angle(d[..., 2])
    v_lon = (d[..., 0] * np.cos(mid_h) + d[..., 1] * np.sin(mid_h)) / dt
    yaw_rate = wrap_angle(d[..., 2]) / dt
    return {
        "v_lon": v_lon,
        "a_lon": np.diff(v_lon, axis=-1) / dt,
        "a_lat": v_lon * yaw_rate,
        "yaw_rate": yaw_rate,
        "yaw_accel": np.diff(yaw_rate, axis=-1) / dt,
    }


# ---------------------------------------------------------------------------
# components (batched)


def safety_bits_batch(ego: np.ndarray, ego_dims: np.ndarray, others: np.ndarray, others_dims: np.ndarray,
                      others_valid: np.ndarray, scene_map: SceneMap) -> tuple[np.ndarray, ...]:
    """ego (B, F, 3); others (B, M, F, 3) at the same steps. Returns three (B, F) 0/1 arrays."""
    B, F = ego.shape[:2]
    drivable = boxes_in_polygon_batch(ego, ego_dims[:, None, :], scene_map.drivable)
    ce = box_corners_batch(ego, ego_dims[:, None, :])  # (B, F, 4, 2)
    if others.shape[1]:
        co = box_corners_batch(others, others_dims[:, :, None, :])  # (B, M, F, 4, 2)
        hit = boxes_overlap_batch(ce[:, None], co) & others_valid[:, :, None]
        dyn = ~hit.any(axis=1)
    else:
        dyn = np.ones((B, F), bool)
    if scene_map.static_obstacles:
        op, od = scene_map.obstacle_array()
        cs = box_corners_batch(op, od)  # (S, 4, 2)
        stat = ~boxes_overlap_batch(ce[:, :, None], cs[None, None]).any(axis=-1)
    else:
        stat = np.ones((B, F), bool)
    return drivable.astype(float), dyn.astype(float), stat.astype(float)


def comfort_batch(ego: np.ndarray, dt: float, cfg: RewardConfig) -> np.ndarray:
    """(B,) 0/1: every finite-difference quantity within its (inclusive) bound."""
    k = kinematics(ego, dt)
    ok = np.all(np.abs(k["a_lon"]) <= cfg.max_lon_accel, axis=-1) \
        & np.all(np.abs(k["a_lat"]) <= cfg.max_lat_accel, axis=-1) \
        & np.all(np.abs(k["yaw_rate"]) <= cfg.max_yaw_rate, axis=-1) \
        & np.all(np.abs(k["yaw_accel"]) <= cfg.max_yaw_accel, axis=-1)
    return ok.astype(float)


def ttc_values_batch(ego: np.ndarray, ego_dims: np.ndarray, others: np.ndarray, others_dims: np.ndarray,
                     others_valid: np.ndarray, scene_map: SceneMap | None, dt: float,
                     cfg: RewardConfig) -> np.ndarray:
    """ego (B, F+1, 3), others (B, M, F+1, 3) including the pose before step 1.

    TTC at step t uses poses at t and backward-difference velocities; static obstacles
    take part with zero velocity. Returns (B, F).
    """
    B, T = ego.shape[:2]
    F = T - 1
    ev = _velocities(ego, dt)  # (B, F, 2)
    M = others.shape[1]
    op = others[:, :, 1:].transpose(0, 2, 1, 3)  # (B, F, M, 3)
    ov = _velocities(others, dt).transpose(0, 2, 1, 3)
    od = np.broadcast_to(others_dims[:, None], (B, F, M, 2))
    valid = np.broadcast_to(others_valid[:, None, :], (B, F, M))
    op = np.where(valid[..., None], op, FAR_AWAY)
    ov = np.where(valid[..., None], ov, 0.0)
    if scene_map is not None and scene_map.static_obstacles:
        sp, sd = scene_map.obstacle_array()
        S = len(sp)
        op = np.concatenate([op, np.broadcast_to(sp, (B, F, S, 3))], axis=2)
        ov = np.concatenate([ov, np.zeros((B, F, S, 2))], axis=2)
        od = np.concatenate([od, np.broadcast_to(sd, (B, F, S, 2))], axis=2)
    out = ttc_batch(ego[:, 1:].reshape(B * F, 3), np.repeat(ego_dims, F, axis=0), ev.reshape(B * F, 2),
                    op.reshape(B * F, -1, 3), od.reshape(B * F, -1, 2), ov.reshape(B * F, -1, 2),
                    cfg.ttc_horizon, cfg.ttc_dt_sub)
    return out.reshape(B, F)


def overspeed_integral(ego: np.ndarray, limit: float, dt: float) -> np.ndarray:
    """Sum over steps of max(0, v - limit) * dt, in meters. ego (..., F+1, 3) -> (...)."""
    v = np.linalg.norm(_velocities(ego, dt), axis=-1)
    return np.maximum(0.0, v - limit).sum(axis=-1) * dt


def speed_from_overspeed(o: np.ndarray, cfg: RewardConfig) -> np.ndarray:
    return np.clip(1.0 - np.asarray(o) / cfg.max_overspeed_integral, 0.0, 1.0)


def route_progress(poses: np.ndarray, scene_map: SceneMap) -> np.ndarray:
    """Monotone forward arclength: running maximum of the centerline projection, final minus initial."""
    poses = np.asarray(poses, dtype=float)
    shape = poses.shape[:-2]
    s, _ = project_batch(poses[..., :2].reshape(-1, 2), scene_map.route_centerline)
    s = np.maximum.accumulate(s.reshape(*shape, -1), axis=-1)
    return s[..., -1] - s[..., 0]


def progress_from_lengths(ego_prog: np.ndarray, expert_prog: float, cfg: RewardConfig) -> np.ndarray:
    return np.clip(np.asarray(ego_prog) / max(expert_prog, cfg.min_expert_progress), 0.0, 1.0)


def combine(bits: tuple, soft: tuple, cfg: RewardConfig) -> np.ndarray:
    """R = prod(bits) * sum_j w_j r_j (/ sum w). Arrays broadcast together."""
    gate = np.ones_like(np.asarray(bits[0], dtype=float))
    for b in bits:
        gate = gate * np.asarray(b, dtype=float)
    w = cfg.weights
    s = w[0] * np.asarray(soft[0]) + w[1] * np.asarray(soft[1]) + w[2] * np.asarray(soft[2]) \
        + w[3] * np.asarray(soft[3])
    if cfg.normalize_by_weight_sum:
        s = s / w.sum()
    return gate * s


def evaluate_batch(scenario: Scenario, ego: np.ndarray, others: np.ndarray, others_valid: np.ndarray,
                   cfg: RewardConfig, expert_progress: float | None = None) -> list[RewardBreakdown]:
    """Rewards for B rollouts of one scenario.

    ego (B, H+1+F, 3): full recorded history followed by the planned future.
    others (B, M, F+1, 3): other agents from the last history pose on; dims follow the
    scenario's agent order (agents 1..M).
    """
    ego = np.asarray(ego, dtype=float)
    B = ego.shape[0]
    H1 = len(scenario.ego.history)
    dt = scenario.dt
    fut = ego[:, H1 - 1:]  # (B, F+1, 3)
    F = fut.shape[1] - 1
    ed = np.broadcast_to([scenario.ego.dims.length, scenario.ego.dims.width], (B, 2))
    od = np.array([[a.dims.length, a.dims.width] for a in scenario.agents[1:]]).reshape(-1, 2)
    od = np.broadcast_to(od, (B, len(od), 2))
    M = others.shape[1]
    if M != od.shape[1]:
        raise ValueError(f"expected {od.shape[1]} other agents, got {M}")
    if others.shape[:1] != (B,) or (M and others.shape[2] != F + 1):
        raise ValueError("pose sequences must share the batch size and horizon")
    drv, dyn, stat = safety_bits_batch(fut[:, 1:], ed, others[:, :, 1:], od, others_valid, scenario.map)
    comfort = comfort_batch(ego, dt, cfg)
    ttc_v = ttc_values_batch(fut, ed, others, od, others_valid, scenario.map, dt, cfg)
    ttc = (ttc_v > cfg.ttc_threshold).astype(float)
    over = overspeed_integral(fut, scenario.map.speed_limit, dt)
    speed = speed_from_overspeed(over, cfg)
    if expert_progress is None:
        expert_progress = float(route_progress(expert_future(scenario), scenario.map))
    prog_m = route_progress(fut, scenario.map)
    prog = progress_from_lengths(prog_m, expert_progress, cfg)
    ones = np.ones(F)
    out = []
    for b in range(B):
        soft = (comfort[b] * ones, ttc[b], speed[b] * ones, prog[b] * ones)
        bits = (drv[b], dyn[b], stat[b])
        out.append(RewardBreakdown(drv[b], dyn[b], stat[b], *soft, total=combine(bits, soft, cfg),
                                   extras={"overspeed": over[b], "progress_m": prog_m[b],
                                           "min_ttc": float(ttc_v[b].min())}))
    return out


def expert_future(scenario: Scenario) -> np.ndarray:
    """Recorded ego poses from the last history pose through the horizon."""
    if scenario.ego.future_gt is None:
        raise ValueError("scenario has no recorded ego future")
    return np.concatenate([scenario.ego.history[-1:], scenario.ego.future_gt[:scenario.horizon_F]])


# ---------------------------------------------------------------------------
# single-trajectory convenience API


def safety_indicators(ego_poses, scenario: Scenario, others_poses) -> dict:
    """Per-step bits for ego poses (F, 3) against others (M, F, 3) at equal steps."""
    ego_poses = np.asarray(ego_poses, dtype=float)
    others = np.asarray(others_poses, dtype=float).reshape(-1, *ego_poses.shape) if len(others_poses) \
        else np.zeros((0, *ego_poses.shape))
    if others.shape[1:] != ego_poses.shape:
        raise ValueError("all pose sequences must have length F")
    ed = np.array([[scenario.ego.dims.length, scenario.ego.dims.width]])
    od = np.array([[a.dims.length, a.dims.width] for a in scenario.agents[1:1 + len(others)]]).reshape(1, -1, 2)
    d, dy, st = safety_bits_batch(ego_poses[None], ed, others[None], od, np.ones((1, len(others)), bool),
                                  scenario.map)
    return {"drivable": d[0], "dynamic_collision": dy[0], "static_collision": st[0]}


def comfort_score(ego_poses, dt: float, cfg: RewardConfig | None = None) -> float:
    ego_poses = np.asarray(ego_poses, dtype=float)
    if len(ego_poses) < 3:
        raise ValueError("comfort needs at least 3 poses")
    return float(comfort_batch(ego_poses[None], dt, cfg or RewardConfig())[0])


def ttc_score(ego_poses, others_poses, ego_dims, others_dims, dt: float, cfg: RewardConfig | None = None,
              scene_map: SceneMap | None = None) -> np.ndarray:
    """Per-step 0/1 TTC scores; sequences include the pose before step 1 (F+1 poses)."""
    cfg = cfg or RewardConfig()
    ego_poses = np.asarray(ego_poses, dtype=float)
    others = np.asarray(others_poses, dtype=float).reshape(-1, *ego_poses.shape)
    od = np.asarray(others_dims, dtype=float).reshape(1, -1, 2)
    v = ttc_values_batch(ego_poses[None], np.asarray(ego_dims, float).reshape(1, 2), others[None], od,
                         np.ones((1, len(others)), bool), scene_map, dt, cfg)[0]
    return (v > cfg.ttc_threshold).astype(float)


def speed_score(ego_poses, scene_map: SceneMap, dt: float, cfg: RewardConfig | None = None) -> float:
    cfg = cfg or RewardConfig()
    return float(speed_from_overspeed(overspeed_integral(np.asarray(ego_poses, float), scene_map.speed_limit, dt),
                                      cfg))


def progress_score(ego_poses, expert_poses, scene_map: SceneMap, cfg: RewardConfig | None = None) -> float:
    cfg = cfg or RewardConfig()
    return float(progress_from_lengths(route_progress(np.asarray(ego_poses, float), scene_map),
                                       float(route_progress(np.asarray(expert_poses, float), scene_map)), cfg))


def total_reward(bits: dict, soft: dict, cfg: RewardConfig | None = None) -> np.ndarray:
    cfg = cfg or RewardConfig()
    return combine(tuple(bits[k] for k in SAFETY_KEYS), tuple(soft[k] for k in SOFT_KEYS), cfg)
