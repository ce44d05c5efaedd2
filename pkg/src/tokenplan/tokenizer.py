"""Motion tokens: fixed-interval segments clustered with a greedy K-disk cover.

A segment is the next pose expressed in the frame of the current pose,
``(dx, dy, dheading)``. Distances between segments are the mean distance between
the corresponding corners of a reference box placed at each segment's end pose.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import AgentCategory, AgentTrack, BoxDims, Pose2, box_corners_batch, wrap_angle

log = logging.getLogger(__name__)

VOCAB_VERSION = 1


@dataclass(frozen=True)
class MotionSegment:
    dx: float
    dy: float
    dheading: float

    def __post_init__(self):
        object.__setattr__(self, "dheading", wrap_angle(float(self.dheading)))

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dheading])


@dataclass(frozen=True)
class MotionToken:
    id: int
    segment: MotionSegment


@dataclass(frozen=True, eq=False)
class Vocabulary:
    category: AgentCategory
    segments: np.ndarray  # (K, 3) rows of (dx, dy, dheading); row index is the token id
    disk_radius_eps: float
    ref_dims: BoxDims
    dt: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "segments", np.asarray(self.segments, dtype=float).reshape(-1, 3))
        object.__setattr__(self, "category", AgentCategory(self.category))

    def __len__(self) -> int:
        return len(self.segments)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.category == other.category \
            and np.array_equal(self.segments, other.segments) \
            and self.disk_radius_eps == other.disk_radius_eps and self.ref_dims == other.ref_dims \
            and self.dt == other.dt

    @property
    def tokens(self) -> list[MotionToken]:
        return [MotionToken(i, MotionSegment(*s)) for i, s in enumerate(self.segments)]

    @property
    def dims_array(self) -> np.ndarray:
        return np.array([self.ref_dims.length, self.ref_dims.width])

    def to_dict(self) -> dict:
        return {
            "version": VOCAB_VERSION,
            "category": self.category.name,
            "dt": self.dt,
            "ref_dims": [self.ref_dims.length, self.ref_dims.width],
            "eps": self.disk_radius_eps,
            "tokens": [{"id": i, "dx": s[0], "dy": s[1], "dheading": s[2]}
                       for i, s in enumerate(self.segments.tolist())],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        if d.get("version") != VOCAB_VERSION:
            raise ValueError(f"unsupported vocabulary version {d.get('version')!r}")
        toks = sorted(d["tokens"], key=lambda t: t["id"])
        if [t["id"] for t in toks] != list(range(len(toks))):
            raise ValueError("token ids must be dense 0..K-1")
        return cls(AgentCategory[d["category"]], [[t["dx"], t["dy"], t["dheading"]] for t in toks],
                   float(d["eps"]), BoxDims(*d["ref_dims"]), float(d["dt"]))


# ---------------------------------------------------------------------------
# segments and distances


def segments_from_poses(poses: np.ndarray) -> np.ndarray:
    """(T, 3) poses -> (T-1, 3) local-frame segments."""
    poses = np.asarray(poses, dtype=float)
    if len(poses) < 2:
        return np.zeros((0, 3))
    p0, p1 = poses[:-1], poses[1:]
    c, s = np.cos(p0[:, 2]), np.sin(p0[:, 2])
    ddx, ddy = p1[:, 0] - p0[:, 0], p1[:, 1] - p0[:, 1]
    return np.stack([c * ddx + s * ddy, -s * ddx + c * ddy, wrap_angle(p1[:, 2] - p0[:, 2])], axis=1)


def segment_trajectory(track: AgentTrack, dt: float = 0.5) -> list[MotionSegment]:
    """Split a track (history then future) into per-interval motion segments."""
    return [MotionSegment(*row) for row in segments_from_poses(track.poses())]


def _end_corners(seg: np.ndarray, dims: np.ndarray) -> np.ndarray:
    return box_corners_batch(np.asarray(seg, dtype=float), dims)


def corner_distance_matrix(a: np.ndarray, b: np.ndarray, dims: np.ndarray) -> np.ndarray:
    """Pairwise average corner distance between segment arrays (n, 3) and (m, 3)."""
    ca = _end_corners(a, dims)  # (n, 4, 2)
    cb = _end_corners(b, dims)
    out = np.zeros((len(ca), len(cb)))
    for k in range(4):
        d = ca[:, None, k, :] - cb[None, :, k, :]
        out += np.sqrt(d[..., 0] ** 2 + d[..., 1] ** 2)
    return out / 4.0


def corner_distance(a: MotionSegment, b: MotionSegment, dims: BoxDims) -> float:
    d = np.array([dims.length, dims.width])
    return float(corner_distance_matrix(a.as_array()[None], b.as_array()[None], d)[0, 0])


# ---------------------------------------------------------------------------
# vocabulary construction


def _greedy_cover(cover: np.ndarray, K: int, weights: np.ndarray) -> tuple[list[int], float]:
    """Greedy max-coverage on a boolean candidate x sample matrix. Returns (picks, covered fraction)."""
    covm = cover.astype(np.float32)
    uncovered = np.ones(cover.shape[1], dtype=bool)
    total = weights.sum()
    picks: list[int] = []
    while len(picks) < K and uncovered.any():
        gain = covm @ (weights * uncovered).astype(np.float32)
        best = int(np.argmax(gain))
        if gain[best] <= 0:
            break
        picks.append(best)
        uncovered &= ~cover[best]
    return picks, float(weights[~uncovered].sum() / total)


def build_vocabulary(segments, K: int, dims: BoxDims, seed: int = 0, *,
                     category: AgentCategory = AgentCategory.VEHICLE, coverage: float = 0.99,
                     max_samples: int = 3000, dt: float = 0.5, tol: float = 0.01) -> Vocabulary:
    """Greedy K-disk cover of motion segments.

    The radius is bisected to the smallest value (within ``tol`` meters) for which ``K``
    greedily placed disks cover ``coverage`` of the samples. Large corpora are subsampled
    to ``max_samples`` rows (seeded); the final radius is widened if needed so the coverage
    also holds on the full corpus.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    segs = np.array([s.as_array() if isinstance(s, MotionSegment) else s for s in segments], dtype=float)
    segs = segs.reshape(-1, 3)
    if len(segs) == 0:
        raise ValueError("no segments to cluster")
    d = np.array([dims.length, dims.width])
    rng = np.random.default_rng(seed)
    pool = segs
    if len(segs) > max_samples:
        pool = segs[np.sort(rng.choice(len(segs), size=max_samples, replace=False))]
    # duplicates (e.g. standing still) collapse to one candidate carrying their count
    uniq, counts = np.unique(pool, axis=0, return_counts=True)
    w = counts.astype(float)
    D = corner_distance_matrix(uniq, uniq, d)

    def attempt(eps):
        return _greedy_cover(D <= eps, K, w)

    picks, frac = attempt(0.0)
    if frac >= coverage:
        eps = 0.0
    else:
        lo, hi = 0.0, float(D.max())
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if attempt(mid)[1] >= coverage:
                hi = mid
            else:
                lo = mid
        eps = hi
        picks, frac = attempt(eps)
    centers = uniq[picks]
    # coverage on the full corpus, chunked to bound memory
    nearest = np.concatenate([corner_distance_matrix(segs[i:i + 20000], centers, d).min(axis=1)
                              for i in range(0, len(segs), 20000)])
    full_eps = float(np.quantile(nearest, coverage, method="higher"))
    if full_eps > eps:
        log.info("widening eps %.4f -> %.4f for full-corpus coverage", eps, full_eps)
        eps = full_eps
    return Vocabulary(category, centers, eps, dims, dt)


# ---------------------------------------------------------------------------
# encode / decode


def encode_segments(segs: np.ndarray, vocab: Vocabulary) -> np.ndarray:
    if len(vocab) == 0:
        raise ValueError("empty vocabulary")
    segs = np.asarray(segs, dtype=float).reshape(-1, 3)
    if len(segs) == 0:
        return np.zeros(0, dtype=np.int64)
    # argmin picks the first minimum, i.e. the smallest id on ties
    return np.argmin(corner_distance_matrix(segs, vocab.segments, vocab.dims_array), axis=1)


def encode(track: AgentTrack, vocab: Vocabulary) -> list[int]:
    """Nearest token (by corner distance) for every segment of the track."""
    if track.category != vocab.category:
        raise ValueError(f"track category {track.category.name} does not match vocabulary {vocab.category.name}")
    return encode_segments(segments_from_poses(track.poses()), vocab).tolist()


def encode_tracking(poses: np.ndarray, vocab: Vocabulary, beam_width: int = 16) -> np.ndarray:
    """Drift-compensating encoding of one or more tracks.

    Tokens are chosen so that the *decoded* poses stay close to the recorded ones:
    a beam search over token sequences minimizing the summed corner distance between
    each decoded pose and the recorded pose at the same step. ``beam_width = 1`` is
    the greedy variant (each token picked from the previously decoded pose).
    ``poses`` is (T, 3) or (A, T, 3); returns (T-1,) or (A, T-1) ids.
    """
    if len(vocab) == 0:
        raise ValueError("empty vocabulary")
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    poses = np.asarray(poses, dtype=float)
    single = poses.ndim == 2
    if single:
        poses = poses[None]
    A, T = poses.shape[:2]
    n, K = T - 1, len(vocab)
    if n <= 0:
        out = np.zeros((A, 0), dtype=np.int64)
        return out[0] if single else out
    dims = vocab.dims_array
    target = box_corners_batch(poses[:, 1:], dims)  # (A, n, 4, 2)
    cur = poses[:, :1].copy()  # (A, W, 3)
    cost = np.zeros((A, 1))
    ids = np.zeros((A, 1, 0), dtype=np.int64)
    rows = np.arange(A)[:, None]
    for t in range(n):
        W = cur.shape[1]
        nxt = step_poses(cur[:, :, None, :], vocab.segments[None, None])  # (A, W, K, 3)
        c = np.linalg.norm(box_corners_batch(nxt, dims) - target[:, t, None, None], axis=-1).mean(-1)
        tot = (cost[:, :, None] + c).reshape(A, W * K)
        # stable sort: among equal costs, earlier beams and smaller ids win
        keep = np.argsort(tot, axis=1, kind="stable")[:, :beam_width]
        beam, tok = keep // K, keep % K
        cur = nxt.reshape(A, W * K, 3)[rows, keep]
        cost = tot[rows, keep]
        ids = np.concatenate([ids[rows, beam], tok[..., None]], axis=2)
    out = ids[:, 0]
    return out[0] if single else out


def apply_segments(start: np.ndarray, segs: np.ndarray) -> np.ndarray:
    """Chain segments from a start pose; returns (len(segs), 3) poses."""
    out = np.zeros((len(segs), 3))
    x, y, h = (float(v) for v in start)
    for i, (dx, dy, dh) in enumerate(np.asarray(segs, dtype=float)):
        c, s = math.cos(h), math.sin(h)
        x, y = x + c * dx - s * dy, y + s * dx + c * dy
        h = wrap_angle(h + dh)
        out[i] = (x, y, h)
    return out


def step_poses(poses: np.ndarray, segs: np.ndarray) -> np.ndarray:
    """Vectorised single step: apply ``segs (..., 3)`` to ``poses (..., 3)``."""
    c, s = np.cos(poses[..., 2]), np.sin(poses[..., 2])
    x = poses[..., 0] + c * segs[..., 0] - s * segs[..., 1]
    y = poses[..., 1] + s * segs[..., 0] + c * segs[..., 1]
    return np.stack([x, y, wrap_angle(poses[..., 2] + segs[..., 2])], axis=-1)


def decode(start: Pose2, ids, vocab: Vocabulary) -> list[Pose2]:
    """Poses after each token, excluding ``start``."""
    ids = np.asarray(list(ids), dtype=np.int64)
    if len(ids) and (ids.min() < 0 or ids.max() >= len(vocab)):
        raise IndexError(f"token id out of range [0, {len(vocab)})")
    return [Pose2.from_array(p) for p in apply_segments(start.as_array(), vocab.segments[ids])]


def save_vocabularies(vocabs: dict, path) -> None:
    Path(path).write_text(json.dumps({c.name: v.to_dict() for c, v in vocabs.items()}, indent=1))


def load_vocabularies(path) -> dict:
    raw = json.loads(Path(path).read_text())
    return {AgentCategory[k]: Vocabulary.from_dict(v) for k, v in raw.items()}


REF_DIMS = {
    AgentCategory.VEHICLE: BoxDims(4.6, 1.9),
    AgentCategory.PEDESTRIAN: BoxDims(0.6, 0.6),
    AgentCategory.CYCLIST: BoxDims(1.8, 0.6),
}


def build_vocabularies(scenarios, K: int, seed: int = 0, coverage: float = 0.99) -> dict:
    """One vocabulary per agent category from every track (history and future) in ``scenarios``."""
    out = {}
    for c in AgentCategory:
        segs = [segments_from_poses(a.poses()) for s in scenarios for a in s.agents if a.category == c]
        segs = [s for s in segs if len(s)]
        if not segs:
            raise ValueError(f"no {c.name.lower()} tracks in the corpus")
        out[c] = build_vocabulary(np.concatenate(segs), K, REF_DIMS[c], seed, category=c, coverage=coverage)
        log.info("%s vocabulary: K=%d eps=%.3f", c.name.lower(), K, out[c].disk_radius_eps)
    return out
