"""Autoregressive multi-agent token policy with factorized attention.

Every agent contributes one query per step. Each layer runs, in order, temporal
self-attention over the agent's own past steps, cross-attention to nearby map
elements, and cross-attention to nearby agents at the same step. Positions enter
only through relative features between query and key poses (distance, bearing
in the query frame, relative heading, time gap), which a small MLP turns into
vectors added to keys and values. Outputs are therefore invariant to rigid
motions of the whole scene.

Sequence layout: position ``tau`` holds the token that moved an agent from pose
``tau`` to pose ``tau + 1`` together with the resulting pose; its output predicts
token ``tau + 1``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .geometry import AgentCategory, Scenario
from .tokenizer import Vocabulary, encode_tracking, step_poses

DTYPE = torch.float64
NUM_CATEGORIES = len(AgentCategory)
MAP_ROUTE, MAP_BOUNDARY, MAP_OBSTACLE = 0, 1, 2
REL_FEATURES = 6  # dist, bearing (cos, sin), relative heading (cos, sin), time gap
MASKED_LOGIT = -1e9  # ids beyond a category's vocabulary; exp underflows to exactly 0


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    model_dim: int = 32
    num_heads: int = 4
    vocab_size: int = 64
    max_agents: int = 8
    max_steps: int = 16
    neighbor_radius: float = 50.0
    map_radius: float = 50.0
    history_steps: int = 2
    map_neighbors: int = 16
    map_spacing: float = 3.0
    dt: float = 0.5

    def __post_init__(self):
        for name in ("num_layers", "model_dim", "num_heads", "vocab_size", "max_agents", "max_steps",
                     "history_steps", "map_neighbors"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.neighbor_radius <= 0 or self.map_radius <= 0 or self.map_spacing <= 0 or self.dt <= 0:
            raise ValueError("radii, spacing and dt must be positive")
        if self.model_dim % self.num_heads:
            raise ValueError("model_dim must be divisible by num_heads")

    @property
    def seq_len(self) -> int:
        return self.history_steps + self.max_steps

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# parameters


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple]]:
    d, K, C = cfg.model_dim, cfg.vocab_size, NUM_CATEGORIES
    shapes = [
        ("tok_emb", (C * K, d)), ("cat_emb", (C, d)), ("ego_emb", (2, d)),
        ("dims_w", (2, d)), ("limit_w", (1, d)), ("in_b", (d,)),
        ("map_type_emb", (3, d)), ("map_dims_w", (2, d)),
    ]
    for a in ("temporal", "map", "agent"):
        shapes += [(f"rel_{a}.w1", (REL_FEATURES, d)), (f"rel_{a}.b1", (d,)), (f"rel_{a}.w2", (d, d)), (f"rel_{a}.b2", (d,))]
    for layer in range(cfg.num_layers):
        for a in ("temporal", "map", "agent"):
            p = f"l{layer}.{a}"
            shapes += [(f"{p}.ln_w", (d,)), (f"{p}.ln_b", (d,)), (f"{p}.wq", (d, d)), (f"{p}.wk", (d, d)),
                       (f"{p}.wv", (d, d)), (f"{p}.wo", (d, d)), (f"{p}.bo", (d,))]
        p = f"l{layer}.mlp"
        shapes += [(f"{p}.ln_w", (d,)), (f"{p}.ln_b", (d,)), (f"{p}.w1", (d, 2 * d)), (f"{p}.b1", (2 * d,)),
                   (f"{p}.w2", (2 * d, d)), (f"{p}.b2", (d,))]
    shapes += [("out_ln_w", (d,)), ("out_ln_b", (d,)),
               ("head.w1", (C, d, d)), ("head.b1", (C, d)), ("head.w2", (C, d, K)), ("head.b2", (C, K))]
    return shapes


class PolicyParams:
    """Flat float64 parameter vector plus a name -> (offset, shape) table."""

    def __init__(self, cfg: ModelConfig, flat=None):
        self.cfg = cfg
        self.table: dict[str, tuple[int, tuple]] = {}
        off = 0
        for name, shape in param_shapes(cfg):
            self.table[name] = (off, shape)
            off += int(np.prod(shape))
        self.size = off
        if flat is None:
            flat = torch.zeros(off, dtype=DTYPE)
        flat = torch.as_tensor(flat, dtype=DTYPE)
        if flat.shape != (off,):
            raise ValueError(f"expected {off} parameters, got {tuple(flat.shape)}")
        self.flat = flat

    def __getitem__(self, name: str) -> torch.Tensor:
        off, shape = self.table[name]
        return self.flat[off:off + int(np.prod(shape))].view(shape)

    def with_flat(self, flat) -> "PolicyParams":
        return PolicyParams(self.cfg, flat)

    def clone(self) -> "PolicyParams":
        return PolicyParams(self.cfg, self.flat.detach().clone())

    def numpy(self) -> np.ndarray:
        return self.flat.detach().numpy().copy()

    def slice_of(self, name: str) -> slice:
        off, shape = self.table[name]
        return slice(off, off + int(np.prod(shape)))


def init_params(cfg: ModelConfig, seed: int = 0) -> PolicyParams:
    """Weights uniform in +-1/sqrt(fan_in); biases zero; norm gains one."""
    rng = np.random.default_rng(seed)
    p = PolicyParams(cfg)
    flat = np.zeros(p.size)
    for name, (off, shape) in p.table.items():
        n = int(np.prod(shape))
        leaf = name.rsplit(".", 1)[-1]
        if leaf.startswith("ln_w") or name == "out_ln_w":
            flat[off:off + n] = 1.0
        elif leaf.startswith("b") or name.endswith("_b") or name == "in_b":
            continue
        else:
            fan_in = shape[-2] if len(shape) >= 2 and not name.endswith("emb") else 1
            bound = 1.0 / math.sqrt(fan_in)
            flat[off:off + n] = rng.uniform(-bound, bound, n)
    return p.with_flat(torch.from_numpy(flat))


# ---------------------------------------------------------------------------
# scene context and batching


@dataclass
class SceneContext:
    """Static per-scenario inputs in numpy form."""

    scenario_id: str
    categories: np.ndarray  # (N,)
    dims: np.ndarray  # (N, 2)
    hist_poses: np.ndarray  # (N, H+1, 3)
    hist_tokens: np.ndarray  # (N, H)
    map_poses: np.ndarray  # (M, 3)
    map_types: np.ndarray  # (M,)
    map_dims: np.ndarray  # (M, 2)
    speed_limit: float

    @property
    def num_agents(self) -> int:
        return len(self.categories)


def _sample_polyline(pts: np.ndarray, spacing: float, closed: bool = False) -> np.ndarray:
    """Points every ``spacing`` meters along a polyline, with the local tangent heading."""
    pts = np.asarray(pts, dtype=float)
    if closed:
        pts = np.vstack([pts, pts[:1]])
    seg = np.diff(pts, axis=0)
    seglen = np.hypot(seg[:, 0], seg[:, 1])
    keep = seglen > 0
    seg, seglen, starts = seg[keep], seglen[keep], pts[:-1][keep]
    cum = np.r_[0.0, np.cumsum(seglen)]
    # sample count must not flip under rounding when the length is a multiple of the spacing
    n = max(1, int(math.ceil(cum[-1] / spacing - 1e-6)))
    s = spacing * np.arange(n) if closed else np.r_[spacing * np.arange(n), cum[-1]]
    # a sample on a vertex takes the outgoing segment, robustly to rounding
    i = np.clip(np.searchsorted(cum, s + 1e-7, side="right") - 1, 0, len(seg) - 1)
    frac = (s - cum[i]) / seglen[i]
    xy = starts[i] + frac[:, None] * seg[i]
    return np.c_[xy, np.arctan2(seg[i, 1], seg[i, 0])]


def map_elements(scn: Scenario, spacing: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    m = scn.map
    parts, types, dims = [], [], []
    route = _sample_polyline(m.route_centerline.vertices, spacing)
    parts.append(route)
    types.append(np.full(len(route), MAP_ROUTE))
    dims.append(np.zeros((len(route), 2)))
    for ring in (m.drivable.vertices, *m.drivable.holes):
        b = _sample_polyline(ring, spacing, closed=True)
        parts.append(b)
        types.append(np.full(len(b), MAP_BOUNDARY))
        dims.append(np.zeros((len(b), 2)))
    if m.static_obstacles:
        op, od = m.obstacle_array()
        parts.append(op)
        types.append(np.full(len(op), MAP_OBSTACLE))
        dims.append(od)
    return np.concatenate(parts), np.concatenate(types).astype(np.int64), np.concatenate(dims)


def build_context(scn: Scenario, vocabs: dict, cfg: ModelConfig) -> SceneContext:
    H = cfg.history_steps
    if len(scn.agents) > cfg.max_agents:
        raise ValueError(f"scenario has {len(scn.agents)} agents, model supports {cfg.max_agents}")
    hist = np.stack([a.history for a in scn.agents])
    if hist.shape[1] != H + 1:
        raise ValueError(f"model expects {H + 1} history poses, scenario has {hist.shape[1]}")
    toks = encode_agents(hist, np.array([int(a.category) for a in scn.agents]), vocabs)
    mp, mt, md = map_elements(scn, cfg.map_spacing)
    return SceneContext(scn.scenario_id, np.array([int(a.category) for a in scn.agents]),
                        np.array([[a.dims.length, a.dims.width] for a in scn.agents]), hist, toks,
                        mp, mt, md, float(scn.map.speed_limit))


def encode_agents(poses: np.ndarray, categories: np.ndarray, vocabs: dict) -> np.ndarray:
    """Tracking-encode (N, T, 3) poses with each agent's category vocabulary -> (N, T-1)."""
    out = np.zeros((len(poses), poses.shape[1] - 1), dtype=np.int64)
    for c in np.unique(categories):
        sel = categories == c
        out[sel] = encode_tracking(poses[sel], vocabs[AgentCategory(int(c))])
    return out


def future_tokens(scn: Scenario, vocabs: dict, F: int | None = None) -> np.ndarray:
    """Ground-truth future tokens (N, F), chosen so decoded poses track the recorded ones."""
    if not scn.has_futures:
        raise ValueError(f"scenario {scn.scenario_id!r} lacks ground-truth futures")
    F = scn.horizon_F if F is None else F
    H1 = len(scn.ego.history)
    poses = np.stack([a.poses()[H1 - 1:H1 + F] for a in scn.agents])
    return encode_agents(poses, np.array([int(a.category) for a in scn.agents]), vocabs)


@dataclass
class Batch:
    """Padded tensors for B scenes. Future slots beyond what is known may hold anything."""

    categories: torch.Tensor  # (B, N) long
    is_ego: torch.Tensor  # (B, N) long
    dims: torch.Tensor  # (B, N, 2)
    valid: torch.Tensor  # (B, N) bool
    speed_limit: torch.Tensor  # (B,)
    tokens: torch.Tensor  # (B, N, T) long
    poses: torch.Tensor  # (B, N, T, 3) pose after each token
    map_poses: torch.Tensor  # (B, M, 3)
    map_types: torch.Tensor  # (B, M) long
    map_dims: torch.Tensor  # (B, M, 2)
    map_valid: torch.Tensor  # (B, M) bool
    logit_mask: torch.Tensor  # (B, N, K) additive mask for ids outside a category's vocabulary


def collate(contexts: list, cfg: ModelConfig, vocab_sizes: dict) -> Batch:
    B = len(contexts)
    N = max(c.num_agents for c in contexts)
    M = max(len(c.map_types) for c in contexts)
    H, T, K = cfg.history_steps, cfg.seq_len, cfg.vocab_size
    cats = np.zeros((B, N), np.int64)
    valid = np.zeros((B, N), bool)
    dims = np.ones((B, N, 2))
    toks = np.zeros((B, N, T), np.int64)
    poses = np.zeros((B, N, T, 3))
    mp = np.zeros((B, M, 3))
    mt = np.zeros((B, M), np.int64)
    md = np.zeros((B, M, 2))
    mv = np.zeros((B, M), bool)
    lmask = np.zeros((B, N, K))
    for b, c in enumerate(contexts):
        n, m = c.num_agents, len(c.map_types)
        cats[b, :n] = c.categories
        valid[b, :n] = True
        dims[b, :n] = c.dims
        toks[b, :n, :H] = c.hist_tokens
        poses[b, :n, :H] = c.hist_poses[:, 1:]
        # unknown future poses start at the last known pose
        poses[b, :n, H:] = c.hist_poses[:, -1:]
        mp[b, :m], mt[b, :m], md[b, :m], mv[b, :m] = c.map_poses, c.map_types, c.map_dims, True
        for i in range(n):
            size = vocab_sizes[AgentCategory(c.categories[i])]
            if size > K:
                raise ValueError(f"vocabulary of size {size} exceeds model vocab_size {K}")
            lmask[b, i, size:] = MASKED_LOGIT
    is_ego = np.zeros((B, N), np.int64)
    is_ego[:, 0] = 1
    t = torch.from_numpy
    return Batch(t(cats), t(is_ego), t(dims), t(valid),
                 torch.tensor([c.speed_limit for c in contexts], dtype=DTYPE), t(toks), t(poses),
                 t(mp), t(mt), t(md), t(mv), t(lmask))


def repeat_batch(batch: Batch, g: int) -> Batch:
    """Each scene repeated ``g`` times consecutively (scene-major)."""
    return Batch(*(x.repeat_interleave(g, dim=0) for x in
                   (batch.categories, batch.is_ego, batch.dims, batch.valid, batch.speed_limit, batch.tokens,
                    batch.poses, batch.map_poses, batch.map_types, batch.map_dims, batch.map_valid,
                    batch.logit_mask)))


def vocab_segments_tensor(vocabs: dict, K: int) -> torch.Tensor:
    """(C, K, 3) segment table; unused slots are zero motion."""
    out = np.zeros((NUM_CATEGORIES, K, 3))
    for cat, v in vocabs.items():
        out[int(cat), :len(v)] = v.segments
    return torch.from_numpy(out)


def decode_future_poses(start: np.ndarray, tokens: np.ndarray, categories: np.ndarray, seg_table) -> np.ndarray:
    """start (..., N, 3), tokens (..., N, F) -> (..., N, F, 3) poses chained step by step."""
    seg_table = np.asarray(seg_table)
    segs = seg_table[categories[..., None], tokens]
    out = np.zeros(tokens.shape + (3,))
    cur = np.asarray(start, dtype=float)
    for f in range(tokens.shape[-1]):
        cur = step_poses(cur, segs[..., f, :])
        out[..., f, :] = cur
    return out


# ---------------------------------------------------------------------------
# network


def _layer_norm(x, w, b, eps=1e-5):
    mu = x.mean(-1, keepdim=True)
    var = ((x - mu) ** 2).mean(-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * w + b


def _gelu(x):
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def relative_features(q: torch.Tensor, k: torch.Tensor, dtime, scale: float, horizon: float) -> torch.Tensor:
    """Invariant (distance, bearing, relative heading, time gap) of key poses seen from query poses.

    Angles enter as (cos, sin) so the features are continuous across +-pi; a key at the
    query position gets a zero bearing vector. ``q`` and ``k`` broadcast against each
    other; the last dim is (x, y, heading).
    """
    dx = k[..., 0] - q[..., 0]
    dy = k[..., 1] - q[..., 1]
    dist = torch.sqrt(dx * dx + dy * dy)
    c, s = torch.cos(q[..., 2]), torch.sin(q[..., 2])
    inv = 1.0 / torch.clamp(dist, min=1e-9)
    bx, by = (c * dx + s * dy) * inv, (-s * dx + c * dy) * inv
    dh = k[..., 2] - q[..., 2]
    dtime = torch.as_tensor(dtime, dtype=DTYPE).expand_as(dist)
    return torch.stack([dist / scale, bx, by, torch.cos(dh), torch.sin(dh), dtime / horizon], dim=-1)


def _rel_mlp(p: PolicyParams, name: str, feats: torch.Tensor) -> torch.Tensor:
    h = _gelu(feats @ p[f"rel_{name}.w1"] + p[f"rel_{name}.b1"])
    return h @ p[f"rel_{name}.w2"] + p[f"rel_{name}.b2"]


def _attend(p: PolicyParams, prefix: str, x: torch.Tensor, keys: torch.Tensor, rel: torch.Tensor,
            mask: torch.Tensor, heads: int, shared: bool) -> torch.Tensor:
    """Multi-head attention with relative vectors added to keys and values.

    x (..., Lq, d); rel (..., Lq, Lk, d); mask (..., Lq, Lk). ``keys`` is (..., Lk, d) when
    every query sees the same key set (``shared``), else (..., Lq, Lk, d). Rows without
    any valid key produce zeros.
    """
    d = x.shape[-1]
    dh = d // heads
    q = (x @ p[f"{prefix}.wq"]).unflatten(-1, (heads, dh)) / math.sqrt(dh)  # (..., Lq, h, e)
    kb, vb = keys @ p[f"{prefix}.wk"], keys @ p[f"{prefix}.wv"]
    if shared:
        kb, vb = kb.unsqueeze(-3), vb.unsqueeze(-3)
    k = (kb + rel).unflatten(-1, (heads, dh))  # (..., Lq, Lk, h, e)
    v = (vb + rel).unflatten(-1, (heads, dh))
    scores = (q.unsqueeze(-3) * k).sum(-1)  # (..., Lq, Lk, h)
    m = mask.unsqueeze(-1)
    any_valid = m.any(dim=-2, keepdim=True)
    scores = torch.where(m, scores, float("-inf"))
    scores = torch.where(any_valid, scores, 0.0)
    att = torch.softmax(scores, dim=-2) * any_valid
    out = (att.unsqueeze(-1) * v).sum(-3).flatten(-2)  # (..., Lq, d)
    return out @ p[f"{prefix}.wo"] + p[f"{prefix}.bo"]


def forward_batch(p: PolicyParams, batch: Batch, upto: int | None = None) -> torch.Tensor:
    """Logits (B, N, L, K) for the first ``L = upto`` positions (all by default); the output
    at position tau scores the token at tau + 1. Causality makes the prefix outputs
    independent of whatever sits in later slots."""
    cfg = p.cfg
    d, K, heads = cfg.model_dim, cfg.vocab_size, cfg.num_heads
    tokens, poses = batch.tokens, batch.poses
    if upto is not None:
        tokens, poses = tokens[:, :, :upto], poses[:, :, :upto]
    B, N, T = tokens.shape
    horizon = cfg.seq_len * cfg.dt

    # node embeddings (rigid-invariant inputs only)
    tok_idx = batch.categories.unsqueeze(-1) * K + tokens
    x = p["tok_emb"][tok_idx]
    static = p["cat_emb"][batch.categories] + p["ego_emb"][batch.is_ego] + batch.dims @ p["dims_w"] \
        + (batch.speed_limit / 10.0)[:, None, None] * p["limit_w"][0] + p["in_b"]
    x = x + static.unsqueeze(2)

    # temporal: agent's own steps up to the query step
    steps = torch.arange(T)
    causal = steps[None, :] <= steps[:, None]  # (Tq, Tk)
    t_mask = causal.expand(B, N, T, T) & batch.valid[:, :, None, None]
    dtime = (steps[:, None] - steps[None, :]).to(DTYPE) * cfg.dt
    rel_t = _rel_mlp(p, "temporal", relative_features(poses.unsqueeze(3), poses.unsqueeze(2), dtime,
                                                      cfg.neighbor_radius, horizon))

    # map: nearest elements within map_radius
    M = batch.map_poses.shape[1]
    mk = min(cfg.map_neighbors, M)
    mxy = batch.map_poses[:, None, None, :, :2]  # (B,1,1,M,2)
    dist = torch.sqrt(((poses[..., None, :2] - mxy) ** 2).sum(-1))  # (B,N,T,M)
    dist = torch.where(batch.map_valid[:, None, None, :], dist, float("inf"))
    near_d, near_i = torch.topk(dist, mk, dim=-1, largest=False, sorted=True)
    m_mask = (near_d <= cfg.map_radius) & batch.valid[:, :, None, None]
    m_emb = p["map_type_emb"][batch.map_types] + batch.map_dims @ p["map_dims_w"]  # (B,M,d)
    flat_i = near_i.reshape(B, -1)

    m_keys = torch.gather(m_emb, 1, flat_i.unsqueeze(-1).expand(-1, -1, d)).view(B, N, T, mk, d)
    m_pose = torch.gather(batch.map_poses, 1, flat_i.unsqueeze(-1).expand(-1, -1, 3)).view(B, N, T, mk, 3)
    rel_m = _rel_mlp(p, "map", relative_features(poses.unsqueeze(3), m_pose, 0.0, cfg.map_radius, horizon))

    # agent-agent: other agents at the same step within neighbor_radius
    pt = poses.transpose(1, 2)  # (B,T,N,3)
    a_dist = torch.sqrt(((pt[:, :, :, None, :2] - pt[:, :, None, :, :2]) ** 2).sum(-1))  # (B,T,Nq,Nk)
    eye = torch.eye(N, dtype=torch.bool)
    a_mask = (a_dist <= cfg.neighbor_radius) & ~eye & batch.valid[:, None, None, :] & batch.valid[:, None, :, None]
    rel_a = _rel_mlp(p, "agent", relative_features(pt.unsqueeze(3), pt.unsqueeze(2), 0.0,
                                                   cfg.neighbor_radius, horizon))

    for layer in range(cfg.num_layers):
        pre = f"l{layer}"
        h = _layer_norm(x, p[f"{pre}.temporal.ln_w"], p[f"{pre}.temporal.ln_b"])
        x = x + _attend(p, f"{pre}.temporal", h, h, rel_t, t_mask, heads, shared=True)

        h = _layer_norm(x, p[f"{pre}.map.ln_w"], p[f"{pre}.map.ln_b"])
        x = x + _attend(p, f"{pre}.map", h, m_keys, rel_m, m_mask, heads, shared=False)

        h = _layer_norm(x, p[f"{pre}.agent.ln_w"], p[f"{pre}.agent.ln_b"]).transpose(1, 2)  # (B,T,N,d)
        x = x + _attend(p, f"{pre}.agent", h, h, rel_a, a_mask, heads, shared=True).transpose(1, 2)

        h = _layer_norm(x, p[f"{pre}.mlp.ln_w"], p[f"{pre}.mlp.ln_b"])
        x = x + _gelu(h @ p[f"{pre}.mlp.w1"] + p[f"{pre}.mlp.b1"]) @ p[f"{pre}.mlp.w2"] + p[f"{pre}.mlp.b2"]

    h = _layer_norm(x, p["out_ln_w"], p["out_ln_b"])
    cat = batch.categories
    w1, b1 = p["head.w1"][cat], p["head.b1"][cat]  # (B,N,d,d), (B,N,d)
    w2, b2 = p["head.w2"][cat], p["head.b2"][cat]
    h = _gelu(torch.einsum("bntd,bnde->bnte", h, w1) + b1.unsqueeze(2))
    logits = torch.einsum("bntd,bndk->bntk", h, w2) + b2.unsqueeze(2)
    return logits + batch.logit_mask.unsqueeze(2)


def forward(p: PolicyParams, scenario: Scenario, token_history, vocabs: dict) -> np.ndarray:
    """Next-token logits (N, K) for every agent given per-agent token ids so far.

    ``token_history`` is (N, L) including the H history tokens; future poses are
    decoded from the tokens after the last recorded history pose.
    """
    cfg = p.cfg
    H = cfg.history_steps
    th = np.asarray(token_history, dtype=np.int64)
    if th.ndim != 2 or th.shape[0] != len(scenario.agents):
        raise ValueError("token_history must be (num_agents, L) with equal lengths")
    if th.shape[1] < H:
        raise ValueError(f"token_history must include the {H} history tokens")
    t = th.shape[1] - H
    if t > cfg.max_steps:
        raise ValueError(f"history of {t} future steps exceeds F = {cfg.max_steps}")
    if t == cfg.max_steps:
        raise ValueError("no next step: horizon already complete")
    ctx = build_context(scenario, vocabs, cfg)
    batch = collate([ctx], cfg, {c: len(v) for c, v in vocabs.items()})
    batch.tokens[0, :, :H + t] = torch.from_numpy(th)
    if t:
        seg = vocab_segments_tensor(vocabs, cfg.vocab_size).numpy()
        fut = decode_future_poses(ctx.hist_poses[:, -1], th[:, H:], ctx.categories, seg)
        batch.poses[0, :, H:H + t] = torch.from_numpy(fut)
        batch.poses[0, :, H + t:] = torch.from_numpy(fut[:, -1:])
    with torch.no_grad():
        return forward_batch(p, batch, upto=H + t)[0, :, -1].numpy()


# ---------------------------------------------------------------------------
# distributions


def log_softmax(logits):
    """Max-subtracted log-softmax over the last axis (numpy or torch)."""
    if isinstance(logits, torch.Tensor):
        m = logits.max(dim=-1, keepdim=True).values
        z = logits - m
        return z - torch.log(torch.exp(z).sum(-1, keepdim=True))
    logits = np.asarray(logits, dtype=float)
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def log_prob(logits, idx: int) -> float:
    logits = np.asarray(logits, dtype=float)
    if not 0 <= idx < logits.shape[-1]:
        raise IndexError(f"token id {idx} out of range [0, {logits.shape[-1]})")
    return float(log_softmax(logits)[idx])


def sample_from_uniform(logits: np.ndarray, u, temperature: float) -> np.ndarray:
    """Inverse-CDF sampling over the last axis with externally supplied uniforms in [0, 1)."""
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    logits = np.asarray(logits, dtype=float)
    if temperature == 0:
        return np.argmax(logits, axis=-1)  # first maximum, i.e. smallest id
    z = logits / temperature
    pr = np.exp(z - z.max(axis=-1, keepdims=True))
    cdf = np.cumsum(pr, axis=-1)
    target = np.asarray(u)[..., None] * cdf[..., -1:]
    idx = (cdf <= target).sum(axis=-1)
    # never return an id with zero probability
    return np.minimum(idx, logits.shape[-1] - 1)


def sample_token(logits, rng: np.random.Generator, temperature: float = 1.0) -> int:
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    u = 0.0 if temperature == 0 else rng.random()
    return int(sample_from_uniform(np.asarray(logits, dtype=float), u, temperature))


def kl_categorical(logits_p, logits_q):
    """Exact KL(p || q) over the last axis; accepts numpy or torch."""
    lp, lq = log_softmax(logits_p), log_softmax(logits_q)
    if isinstance(lp, torch.Tensor):
        return (torch.exp(lp) * (lp - lq)).sum(-1)
    out = (np.exp(lp) * (lp - lq)).sum(-1)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# gradients


class NonFiniteError(FloatingPointError):
    pass


def grad(params: PolicyParams, loss_closure) -> np.ndarray:
    """Reverse-mode gradient of ``loss_closure(params) -> scalar tensor`` w.r.t. the flat vector."""
    flat = params.flat.detach().clone().requires_grad_(True)
    live = params.with_flat(flat)
    loss = loss_closure(live)
    if not torch.is_tensor(loss) or not loss.requires_grad:
        return np.zeros(params.size)
    if not torch.isfinite(loss):
        raise NonFiniteError(f"loss is not finite: {loss.item()}")
    (g,) = torch.autograd.grad(loss, flat, allow_unused=True)
    if g is None:
        return np.zeros(params.size)
    g = g.numpy()
    if not np.all(np.isfinite(g)):
        bad = next(n for n in params.table if not np.all(np.isfinite(g[params.slice_of(n)])))
        raise NonFiniteError(f"non-finite gradient in tensor {bad!r}")
    return g
