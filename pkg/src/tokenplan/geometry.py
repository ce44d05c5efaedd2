"""Planar geometry, scene containers and the collision / containment predicates.

Scalar functions take the small value types defined here. The ``*_batch`` variants
operate on numpy arrays of poses ``(..., 3)`` = (x, y, heading) and are what the
reward code uses in the inner loops; tests pin them to the scalar versions.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np


def wrap_angle(a):
    """Map angles into (-pi, pi]. Works on floats and arrays."""
    w = math.pi - np.mod(math.pi - np.asarray(a, dtype=float), 2.0 * math.pi)
    w = np.where(w <= -math.pi, w + 2.0 * math.pi, w)
    return w if isinstance(a, np.ndarray) else float(w)


@dataclass(frozen=True)
class Pose2:
    x: float
    y: float
    heading: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "heading", float(wrap_angle(float(self.heading))))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading])

    @classmethod
    def from_array(cls, a) -> "Pose2":
        return cls(a[0], a[1], a[2])


@dataclass(frozen=True)
class BoxDims:
    length: float
    width: float

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise ValueError(f"box dims must be positive, got {self.length}x{self.width}")


class AgentCategory(enum.IntEnum):
    VEHICLE = 0
    PEDESTRIAN = 1
    CYCLIST = 2


def _signed_area(pts: np.ndarray) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _segments_cross(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return 0 if abs(v) < 1e-12 else (1 if v > 0 else -1)

    def on_seg(a, b, c):
        return min(a[0], b[0]) - 1e-12 <= c[0] <= max(a[0], b[0]) + 1e-12 and \
            min(a[1], b[1]) - 1e-12 <= c[1] <= max(a[1], b[1]) + 1e-12

    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    if o1 != o2 and o3 != o4:
        return True
    return (o1 == 0 and on_seg(p1, p2, q1)) or (o2 == 0 and on_seg(p1, p2, q2)) or \
        (o3 == 0 and on_seg(q1, q2, p1)) or (o4 == 0 and on_seg(q1, q2, p2))


def is_simple_ring(pts: np.ndarray) -> bool:
    """No two non-adjacent edges touch. Vectorised over edge pairs, exact check on suspects."""
    pts = np.asarray(pts, dtype=float)
    n = len(pts)
    a, b = pts, np.roll(pts, -1, axis=0)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    box = (lo[:, None, 0] <= hi[None, :, 0] + 1e-12) & (lo[None, :, 0] <= hi[:, None, 0] + 1e-12) & \
          (lo[:, None, 1] <= hi[None, :, 1] + 1e-12) & (lo[None, :, 1] <= hi[:, None, 1] + 1e-12)
    i, j = np.nonzero(np.triu(box, k=2))
    keep = ~((i == 0) & (j == n - 1))
    for ii, jj in zip(i[keep], j[keep]):
        if _segments_cross(a[ii], b[ii], a[jj], b[jj]):
            return False
    return True


@dataclass(frozen=True, eq=False)
class Polyline:
    vertices: np.ndarray
    cumulative_arclength: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 2)
        if len(v) < 2:
            raise ValueError("polyline needs at least 2 vertices")
        seg = np.linalg.norm(np.diff(v, axis=0), axis=1)
        if np.any(seg <= 0):
            raise ValueError("polyline has repeated consecutive vertices")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "cumulative_arclength", np.concatenate([[0.0], np.cumsum(seg)]))

    @property
    def length(self) -> float:
        return float(self.cumulative_arclength[-1])

    def __eq__(self, other):
        return isinstance(other, Polyline) and np.array_equal(self.vertices, other.vertices)

    def point_at(self, s: float, d: float = 0.0) -> np.ndarray:
        """Point at arclength ``s`` shifted ``d`` to the left of travel."""
        cum = self.cumulative_arclength
        i = int(np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(cum) - 2))
        a, b = self.vertices[i], self.vertices[i + 1]
        u = (b - a) / (cum[i + 1] - cum[i])
        return a + u * (s - cum[i]) + d * np.array([-u[1], u[0]])

    def heading_at(self, s: float) -> float:
        cum = self.cumulative_arclength
        i = int(np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(cum) - 2))
        d = self.vertices[i + 1] - self.vertices[i]
        return math.atan2(d[1], d[0])


@dataclass(frozen=True, eq=False)
class Polygon:
    """Simple CCW ring, optionally with CW holes."""

    vertices: np.ndarray
    holes: tuple = ()

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 2)
        if len(v) < 3:
            raise ValueError("polygon needs at least 3 vertices")
        if _signed_area(v) <= 0:
            raise ValueError("outer ring must be counter-clockwise")
        if not is_simple_ring(v):
            raise ValueError("outer ring is self-intersecting")
        holes = []
        for h in self.holes:
            h = np.asarray(h, dtype=float).reshape(-1, 2)
            if len(h) < 3 or _signed_area(h) >= 0:
                raise ValueError("holes must be clockwise rings with >= 3 vertices")
            holes.append(h)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "holes", tuple(holes))

    @classmethod
    def ccw(cls, pts, holes=()) -> "Polygon":
        pts = np.asarray(pts, dtype=float)
        if _signed_area(pts) < 0:
            pts = pts[::-1]
        return cls(pts, tuple(h if _signed_area(np.asarray(h, float)) < 0 else np.asarray(h, float)[::-1]
                              for h in holes))

    def __eq__(self, other):
        return isinstance(other, Polygon) and np.array_equal(self.vertices, other.vertices) \
            and len(self.holes) == len(other.holes) \
            and all(np.array_equal(a, b) for a, b in zip(self.holes, other.holes))


@dataclass(frozen=True)
class SceneMap:
    drivable: Polygon
    route_centerline: Polyline
    speed_limit: float
    static_obstacles: tuple = ()  # of (Pose2, BoxDims)

    def __post_init__(self):
        if not self.speed_limit > 0:
            raise ValueError("speed_limit must be positive")
        object.__setattr__(self, "static_obstacles", tuple(self.static_obstacles))

    def obstacle_array(self) -> tuple[np.ndarray, np.ndarray]:
        """(poses (M, 3), dims (M, 2)) of the static obstacles."""
        if not self.static_obstacles:
            return np.zeros((0, 3)), np.zeros((0, 2))
        poses = np.array([p.as_array() for p, _ in self.static_obstacles])
        dims = np.array([[d.length, d.width] for _, d in self.static_obstacles])
        return poses, dims


@dataclass(frozen=True, eq=False)
class AgentTrack:
    """Poses are stored as ``(T, 3)`` arrays on the scenario's dt grid."""

    category: AgentCategory
    dims: BoxDims
    history: np.ndarray
    future_gt: np.ndarray | None = None

    def __post_init__(self):
        h = np.asarray(self.history, dtype=float).reshape(-1, 3)
        if len(h) == 0:
            raise ValueError("agent history must be non-empty")
        h[:, 2] = wrap_angle(h[:, 2])
        object.__setattr__(self, "history", h)
        object.__setattr__(self, "category", AgentCategory(self.category))
        if self.future_gt is not None:
            f = np.asarray(self.future_gt, dtype=float).reshape(-1, 3)
            f[:, 2] = wrap_angle(f[:, 2])
            object.__setattr__(self, "future_gt", f)

    def poses(self) -> np.ndarray:
        """History followed by the ground-truth future, if any."""
        if self.future_gt is None:
            return self.history
        return np.concatenate([self.history, self.future_gt])

    def __eq__(self, other):
        if not isinstance(other, AgentTrack):
            return False
        same_future = (self.future_gt is None and other.future_gt is None) or (
            self.future_gt is not None and other.future_gt is not None
            and np.array_equal(self.future_gt, other.future_gt))
        return self.category == other.category and self.dims == other.dims \
            and np.array_equal(self.history, other.history) and same_future


@dataclass(frozen=True)
class Scenario:
    map: SceneMap
    agents: tuple
    dt: float = 0.5
    horizon_F: int = 16
    scenario_id: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))
        if not self.agents:
            raise ValueError("scenario needs at least the ego agent")
        if self.agents[0].category != AgentCategory.VEHICLE:
            raise ValueError("ego (agent 0) must be a vehicle")
        if self.horizon_F < 1:
            raise ValueError("horizon_F must be >= 1")
        lens = {len(a.history) for a in self.agents}
        if len(lens) != 1:
            raise ValueError("all agents must share the history length")

    @property
    def ego(self) -> AgentTrack:
        return self.agents[0]

    @property
    def has_futures(self) -> bool:
        return all(a.future_gt is not None and len(a.future_gt) >= self.horizon_F for a in self.agents)


# ---------------------------------------------------------------------------
# boxes

_CORNER_SIGNS = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, -1.0], [-1.0, 1.0]])  # FL, FR, RR, RL


def box_corners_batch(poses: np.ndarray, dims: np.ndarray) -> np.ndarray:
    """Corners ``(..., 4, 2)`` for poses ``(..., 3)`` and dims ``(..., 2)`` (broadcast)."""
    poses = np.asarray(poses, dtype=float)
    dims = np.asarray(dims, dtype=float)
    c, s = np.cos(poses[..., 2]), np.sin(poses[..., 2])
    half = 0.5 * dims[..., None, :] * _CORNER_SIGNS  # (..., 4, 2)
    lx, ly = half[..., 0], half[..., 1]
    x = poses[..., 0, None] + c[..., None] * lx - s[..., None] * ly
    y = poses[..., 1, None] + s[..., None] * lx + c[..., None] * ly
    return np.stack([x, y], axis=-1)


def oriented_box_corners(pose: Pose2, dims: BoxDims) -> np.ndarray:
    """World-frame corners in FL, FR, RR, RL order, shape (4, 2)."""
    return box_corners_batch(pose.as_array(), np.array([dims.length, dims.width]))


def boxes_overlap_batch(ca: np.ndarray, cb: np.ndarray) -> np.ndarray:
    """Separating-axis test on corner arrays ``(..., 4, 2)``; touching counts as overlap."""
    ca, cb = np.broadcast_arrays(np.asarray(ca, float), np.asarray(cb, float))
    # edge normals of a rectangle: two distinct axes per box
    axes = np.stack([ca[..., 1, :] - ca[..., 0, :], ca[..., 3, :] - ca[..., 0, :],
                     cb[..., 1, :] - cb[..., 0, :], cb[..., 3, :] - cb[..., 0, :]], axis=-2)
    pa = np.einsum("...kd,...ad->...ka", ca, axes)  # (..., 4 corners, 4 axes)
    pb = np.einsum("...kd,...ad->...ka", cb, axes)
    tol = 1e-9 * (1.0 + np.abs(pa).max(axis=-2) + np.abs(pb).max(axis=-2))
    sep = (pa.max(axis=-2) < pb.min(axis=-2) - tol) | (pb.max(axis=-2) < pa.min(axis=-2) - tol)
    return ~np.any(sep, axis=-1)


def boxes_intersect(a: tuple, b: tuple) -> bool:
    """True iff the closed oriented rectangles ``a = (Pose2, BoxDims)`` and ``b`` overlap."""
    return bool(boxes_overlap_batch(oriented_box_corners(*a), oriented_box_corners(*b)))


# ---------------------------------------------------------------------------
# containment


def _point_on_ring(pts: np.ndarray, ring: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    a = ring
    b = np.roll(ring, -1, axis=0)
    ab = b - a
    ap = pts[:, None, :] - a[None]
    t = np.clip(np.einsum("pkd,kd->pk", ap, ab) / np.einsum("kd,kd->k", ab, ab), 0.0, 1.0)
    foot = a[None] + t[..., None] * ab[None]
    return np.any(np.linalg.norm(pts[:, None, :] - foot, axis=-1) <= tol, axis=1)


def winding_number(pts: np.ndarray, ring: np.ndarray) -> np.ndarray:
    """Winding number of ``ring`` around each point of ``pts`` (P, 2)."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    a = ring[None, :, :] - pts[:, None, :]
    b = np.roll(ring, -1, axis=0)[None, :, :] - pts[:, None, :]
    cross = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    up = (a[..., 1] <= 0) & (b[..., 1] > 0) & (cross > 0)
    down = (a[..., 1] > 0) & (b[..., 1] <= 0) & (cross < 0)
    return up.sum(axis=1) - down.sum(axis=1)


def points_in_polygon(pts: np.ndarray, poly: Polygon) -> np.ndarray:
    """Closed containment: inside (or on) the outer ring and not strictly inside a hole."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    inside = (winding_number(pts, poly.vertices) != 0) | _point_on_ring(pts, poly.vertices)
    for h in poly.holes:
        in_hole = (winding_number(pts, h) != 0) & ~_point_on_ring(pts, h)
        inside &= ~in_hole
    return inside


def boxes_in_polygon_batch(poses: np.ndarray, dims: np.ndarray, poly: Polygon) -> np.ndarray:
    """Corner-based drivable check for poses ``(..., 3)``; returns boolean ``(...)``."""
    corners = box_corners_batch(poses, dims)
    shape = corners.shape[:-2]
    ok = points_in_polygon(corners.reshape(-1, 2), poly).reshape(*shape, 4)
    return ok.all(axis=-1)


def box_in_drivable(pose: Pose2, dims: BoxDims, scene_map: SceneMap) -> bool:
    """True iff all 4 box corners are inside the drivable area."""
    return bool(boxes_in_polygon_batch(pose.as_array(), np.array([dims.length, dims.width]),
                                       scene_map.drivable))


# ---------------------------------------------------------------------------
# centerline projection


def project_batch(pts: np.ndarray, line: Polyline) -> tuple[np.ndarray, np.ndarray]:
    """Arclength ``s`` and signed lateral offset ``d`` (left positive) for points (P, 2)."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    a = line.vertices[:-1]
    ab = np.diff(line.vertices, axis=0)
    seg_len = np.diff(line.cumulative_arclength)
    ap = pts[:, None, :] - a[None]
    t = np.clip(np.einsum("psd,sd->ps", ap, ab) / (seg_len ** 2), 0.0, 1.0)
    foot = a[None] + t[..., None] * ab[None]
    dist = np.linalg.norm(pts[:, None, :] - foot, axis=-1)
    # argmin returns the first minimum, i.e. the smallest arclength among ties
    k = np.argmin(dist, axis=1)
    idx = np.arange(len(pts))
    s = line.cumulative_arclength[k] + t[idx, k] * seg_len[k]
    rel = pts - foot[idx, k]
    u = ab[k]
    sign = np.sign(u[:, 0] * rel[:, 1] - u[:, 1] * rel[:, 0])
    return s, sign * dist[idx, k]


def project_to_centerline(p, line: Polyline) -> tuple[float, float]:
    s, d = project_batch(np.asarray(p, dtype=float)[None, :2], line)
    return float(s[0]), float(d[0])


# ---------------------------------------------------------------------------
# time to collision


def ttc_batch(ego_pose: np.ndarray, ego_dims: np.ndarray, ego_vel: np.ndarray,
              other_poses: np.ndarray, other_dims: np.ndarray, other_vel: np.ndarray,
              t_max: float, dt_sub: float) -> np.ndarray:
    """Constant-velocity TTC for a batch of situations.

    Shapes: ego ``(B, 3)/(B, 2)/(B, 2)``; others ``(B, M, 3)/(B, M, 2)/(B, M, 2)``.
    Returns ``(B,)`` with ``inf`` where nothing is hit within ``t_max``.
    """
    if dt_sub <= 0 or t_max <= 0:
        raise ValueError("dt_sub and t_max must be positive")
    n_sub = int(math.floor(t_max / dt_sub + 1e-9))
    times = dt_sub * np.arange(n_sub + 1)
    ego_pose = np.asarray(ego_pose, float)
    B = ego_pose.shape[0]
    out = np.full(B, np.inf)
    if other_poses.shape[1] == 0:
        return out
    ep = np.repeat(ego_pose[:, None, :], len(times), axis=1).copy()  # (B, K, 3)
    ep[..., :2] += times[None, :, None] * ego_vel[:, None, :]
    op = np.repeat(other_poses[:, None], len(times), axis=1).copy()  # (B, K, M, 3)
    op[..., :2] += times[None, :, None, None] * other_vel[:, None, :, :]
    ce = box_corners_batch(ep, ego_dims[:, None, :])[:, :, None]  # (B, K, 1, 4, 2)
    co = box_corners_batch(op, other_dims[:, None, :, :])  # (B, K, M, 4, 2)
    hit = boxes_overlap_batch(ce, co).any(axis=-1)  # (B, K)
    first = np.argmax(hit, axis=1)
    any_hit = hit.any(axis=1)
    out[any_hit] = times[first[any_hit]]
    return out


def time_to_collision(ego: tuple, others: list, t_max: float = 3.0, dt_sub: float = 0.1) -> float:
    """Smallest ``k * dt_sub <= t_max`` at which the propagated ego box hits another box.

    ``ego`` and each entry of ``others`` is ``(Pose2, BoxDims, (vx, vy))``.
    """
    if dt_sub <= 0 or t_max <= 0:
        raise ValueError("dt_sub and t_max must be positive")
    if not others:
        return math.inf
    pose, dims, vel = ego
    op = np.array([[o[0].as_array() for o in others]])
    od = np.array([[[o[1].length, o[1].width] for o in others]])
    ov = np.array([[np.asarray(o[2], float) for o in others]])
    r = ttc_batch(pose.as_array()[None], np.array([[dims.length, dims.width]]),
                  np.asarray(vel, float)[None], op, od, ov, t_max, dt_sub)
    return float(r[0])
