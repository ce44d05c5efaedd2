"""Closed-loop rollouts: a trainable ego policy plus a frozen model driving everyone else."""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .geometry import Scenario
from .policy import Batch, PolicyParams, build_context, collate, forward_batch, future_tokens, log_softmax, \
    sample_from_uniform, vocab_segments_tensor
from .rewards import RewardBreakdown, RewardConfig, evaluate_batch, expert_future, route_progress
from .tokenizer import step_poses


class RolloutError(RuntimeError):
    pass


@dataclass
class Rollout:
    scenario_id: str
    tokens: np.ndarray  # (N, F) future token ids, agent 0 is ego
    poses: np.ndarray  # (N, F, 3) pose after each token
    logp: np.ndarray  # (N, F) log-prob of each chosen token under the model that chose it
    ego_logits: np.ndarray  # (F, K) ego logits at each step under the sampling policy
    reward: RewardBreakdown | None = None
    seed: tuple = ()

    @property
    def ego_logp(self) -> np.ndarray:
        return self.logp[0]

    def joint_logp(self) -> float:
        """Sum over steps of the per-step sums over agents."""
        total = 0.0
        for t in range(self.logp.shape[1]):
            step = 0.0
            for n in range(self.logp.shape[0]):
                step += float(self.logp[n, t])
            total += step
        return total

    def to_dict(self) -> dict:
        return {"scenario_id": self.scenario_id, "seed": list(self.seed), "tokens": self.tokens.tolist(),
                "poses": self.poses.tolist(), "logp": self.logp.tolist(),
                "reward": None if self.reward is None else self.reward.to_dict()}


@dataclass
class RolloutGroup:
    scenario_id: str
    rollouts: list
    seed: int
    batch_rows: list = field(default_factory=list)  # rows of the simulation batch holding each rollout

    @property
    def rewards(self) -> np.ndarray:
        """(G, F) per-token rewards."""
        return np.stack([r.reward.total for r in self.rollouts])

    @property
    def is_unsafe(self) -> bool:
        return any(not r.reward.is_safe for r in self.rollouts)


def rollout_rng(seed: int, scenario_id: str, index: int) -> np.random.Generator:
    """Private stream for one rollout, derived from (seed, scenario id, group index)."""
    return np.random.default_rng([seed, zlib.crc32(scenario_id.encode()), index])


@dataclass
class SimResult:
    batch: Batch  # final tokens and poses filled in for all steps
    tokens: np.ndarray  # (B, N, F)
    poses: np.ndarray  # (B, N, F, 3)
    logp: np.ndarray  # (B, N, F)
    ego_logits: np.ndarray  # (B, F, K)
    valid: np.ndarray  # (B, N)


def _check_finite(logits: torch.Tensor, who: str, t: int):
    if not torch.isfinite(logits).all():
        bad = torch.nonzero(~torch.isfinite(logits))[0].tolist()
        raise RolloutError(f"non-finite {who} logits at step {t}, index {bad}")


def simulate(ego_params: PolicyParams, world_params: PolicyParams, scenarios: list, vocabs: dict,
             rngs: list, ego_temperature: float = 1.0, mode: str = "reactive",
             contexts: list | None = None) -> SimResult:
    """Roll out one joint future per entry of ``scenarios`` (entries may repeat).

    reactive: non-ego agents sample from ``world_params`` at temperature 1.
    replay: non-ego agents follow their recorded futures.
    """
    if mode not in ("reactive", "replay"):
        raise ValueError(f"unknown mode {mode!r}")
    if ego_params.cfg != world_params.cfg:
        raise ValueError("ego and world models must share a ModelConfig")
    cfg = ego_params.cfg
    H, F = cfg.history_steps, cfg.max_steps
    for s in scenarios:
        if s.horizon_F != F:
            raise ValueError(f"scenario horizon {s.horizon_F} differs from model F = {F}")
        if mode == "replay" and not s.has_futures:
            raise ValueError(f"replay mode needs recorded futures (scenario {s.scenario_id!r})")
    if contexts is None:
        contexts = [build_context(s, vocabs, cfg) for s in scenarios]
    batch = collate(contexts, cfg, {c: len(v) for c, v in vocabs.items()})
    B, N = batch.categories.shape
    valid = batch.valid.numpy()
    cats = batch.categories.numpy()
    seg = vocab_segments_tensor(vocabs, cfg.vocab_size).numpy()
    same = ego_params is world_params

    if mode == "replay":
        gt_tok = np.zeros((B, N, F), np.int64)
        gt_pose = np.zeros((B, N, F, 3))
        for b, s in enumerate(scenarios):
            n = len(s.agents)
            gt_tok[b, :n] = future_tokens(s, vocabs, F)
            gt_pose[b, :n] = np.stack([a.future_gt[:F] for a in s.agents])

    cur = batch.poses[:, :, H - 1].numpy().copy()  # (B, N, 3)
    tokens = np.zeros((B, N, F), np.int64)
    poses = np.zeros((B, N, F, 3))
    logp = np.zeros((B, N, F))
    ego_logits = np.zeros((B, F, cfg.vocab_size))
    with torch.no_grad():
        for t in range(F):
            L = H + t
            le = forward_batch(ego_params, batch, upto=L)[:, :, L - 1]  # (B, N, K)
            _check_finite(le[:, 0], "ego", t)
            if mode == "reactive":
                lw = le if same else forward_batch(world_params, batch, upto=L)[:, :, L - 1]
                _check_finite(lw[:, 1:][batch.valid[:, 1:]], "world", t)
            else:
                lw = le
            le_np, lw_np = le.numpy(), lw.numpy()
            u = np.stack([r.random(N) for r in rngs])  # (B, N): ego draw then one per agent slot
            tok = np.zeros((B, N), np.int64)
            tok[:, 0] = sample_from_uniform(le_np[:, 0], u[:, 0], ego_temperature)
            if mode == "reactive":
                tok[:, 1:] = sample_from_uniform(lw_np[:, 1:], u[:, 1:], 1.0)
                new = step_poses(cur, seg[cats, tok])
            else:
                tok[:, 1:] = gt_tok[:, 1:, t]
                new = step_poses(cur, seg[cats, tok])
                new[:, 1:] = gt_pose[:, 1:, t]
            tok[~valid] = 0
            new[~valid] = cur[~valid]
            lp = np.concatenate([log_softmax(le_np[:, :1]), log_softmax(lw_np[:, 1:])], axis=1)
            logp[:, :, t] = np.take_along_axis(lp, tok[..., None], axis=-1)[..., 0] * valid
            if mode == "replay":
                logp[:, 1:, t] = 0.0  # recorded, not sampled
            ego_logits[:, t] = le_np[:, 0]
            tokens[:, :, t] = tok
            poses[:, :, t] = new
            cur = new
            batch.tokens[:, :, L] = torch.from_numpy(tok)
            batch.poses[:, :, L:] = torch.from_numpy(new)[:, :, None, :]
    return SimResult(batch, tokens, poses, logp, ego_logits, valid)


def _score(scenarios: list, sim: SimResult, rows_by_scn: list, reward_cfg: RewardConfig,
           expert_progress: dict | None = None) -> list:
    """RewardBreakdown for every row, evaluated per scenario in batches."""
    out = [None] * len(sim.tokens)
    for scn, rows in rows_by_scn:
        n = len(scn.agents)
        hist = np.broadcast_to(scn.ego.history, (len(rows),) + scn.ego.history.shape)
        ego = np.concatenate([hist, sim.poses[rows, 0]], axis=1)
        last = np.array([a.history[-1] for a in scn.agents[1:]]).reshape(n - 1, 3)
        others = np.concatenate([np.broadcast_to(last[None, :, None], (len(rows), n - 1, 1, 3)),
                                 sim.poses[rows, 1:n]], axis=2)
        ep = None
        if expert_progress is not None:
            ep = expert_progress.get(scn.scenario_id)
        for r, br in zip(rows, evaluate_batch(scn, ego, others, np.ones((len(rows), n - 1), bool), reward_cfg, ep)):
            out[r] = br
    return out


def _expert_progress(scn: Scenario) -> float | None:
    return float(route_progress(expert_future(scn), scn.map)) if scn.has_futures else None


def _make_rollouts(scenarios: list, sim: SimResult, rewards: list, seeds: list) -> list:
    out = []
    for b, scn in enumerate(scenarios):
        n = len(scn.agents)
        out.append(Rollout(scn.scenario_id, sim.tokens[b, :n], sim.poses[b, :n], sim.logp[b, :n],
                           sim.ego_logits[b], rewards[b], seeds[b]))
    return out


def dual_rollout(ego_params: PolicyParams, world_params: PolicyParams, scenario: Scenario, vocabs: dict,
                 rng: np.random.Generator, temperature: float = 1.0,
                 reward_cfg: RewardConfig | None = None) -> Rollout:
    sim = simulate(ego_params, world_params, [scenario], vocabs, [rng], temperature, "reactive")
    rewards = _score([scenario], sim, [(scenario, [0])], reward_cfg or RewardConfig(),
                     {scenario.scenario_id: _expert_progress(scenario)} if scenario.has_futures else None)
    return _make_rollouts([scenario], sim, rewards, [()])[0]


def sample_groups(ego_params: PolicyParams, world_params: PolicyParams, scenarios: list, vocabs: dict,
                  G: int, seed: int, reward_cfg: RewardConfig | None = None,
                  contexts: list | None = None) -> tuple[list, SimResult]:
    """G rollouts per scenario (ego temperature 1), simulated as one batch.

    Rollout g of scenario s draws from ``rollout_rng(seed, s.scenario_id, g)``.
    """
    if G < 2:
        raise ValueError("group size G must be >= 2")
    reward_cfg = reward_cfg or RewardConfig()
    rep = [s for s in scenarios for _ in range(G)]
    seeds = [(seed, s.scenario_id, g) for s in scenarios for g in range(G)]
    rngs = [rollout_rng(*sd) for sd in seeds]
    rep_ctx = None if contexts is None else [c for c in contexts for _ in range(G)]
    sim = simulate(ego_params, world_params, rep, vocabs, rngs, 1.0, "reactive", rep_ctx)
    rows = [(s, list(range(i * G, (i + 1) * G))) for i, s in enumerate(scenarios)]
    ep = {s.scenario_id: _expert_progress(s) for s in scenarios if s.has_futures}
    rewards = _score(rep, sim, rows, reward_cfg, ep)
    rolls = _make_rollouts(rep, sim, rewards, seeds)
    groups = [RolloutGroup(s.scenario_id, rolls[i * G:(i + 1) * G], seed, list(range(i * G, (i + 1) * G)))
              for i, s in enumerate(scenarios)]
    return groups, sim


def sample_group(ego_params: PolicyParams, world_params: PolicyParams, scenario: Scenario, vocabs: dict,
                 G: int, seed: int, reward_cfg: RewardConfig | None = None) -> RolloutGroup:
    return sample_groups(ego_params, world_params, [scenario], vocabs, G, seed, reward_cfg)[0][0]


def closed_loop_eval(ego_params: PolicyParams, world_params: PolicyParams, scenarios: list, vocabs: dict,
                     mode: str = "reactive", reward_cfg: RewardConfig | None = None, batch_size: int = 32,
                     seed: int = 0) -> tuple[list, "object"]:
    """Greedy (temperature 0) ego in closed loop. Returns (rollouts, CompositeScore)."""
    from .analysis import composite_score

    reward_cfg = reward_cfg or RewardConfig()
    rolls = []
    for i in range(0, len(scenarios), batch_size):
        chunk = scenarios[i:i + batch_size]
        seeds = [(seed, s.scenario_id, 0) for s in chunk]
        sim = simulate(ego_params, world_params, chunk, vocabs, [rollout_rng(*sd) for sd in seeds], 0.0, mode)
        ep = {s.scenario_id: _expert_progress(s) for s in chunk if s.has_futures}
        rewards = _score(chunk, sim, [(s, [j]) for j, s in enumerate(chunk)], reward_cfg, ep)
        rolls += _make_rollouts(chunk, sim, rewards, seeds)
    return rolls, composite_score([r.reward for r in rolls], reward_cfg,
                                  scenario_ids=[r.scenario_id for r in rolls])


def recompute_ego_logp(params: PolicyParams, sim: SimResult, rows=None) -> torch.Tensor:
    """Teacher-forced ego log-probs (B, F) of the sampled tokens through ``params`` (differentiable)."""
    cfg = params.cfg
    H, F = cfg.history_steps, cfg.max_steps
    logits = forward_batch(params, sim.batch)[:, 0, H - 1:H + F - 1]  # (B, F, K)
    if rows is not None:
        logits = logits[rows]
    tok = torch.from_numpy(sim.tokens[:, 0] if rows is None else sim.tokens[rows, 0])
    return torch.gather(log_softmax(logits), -1, tok.unsqueeze(-1)).squeeze(-1), logits


def write_rollouts_jsonl(rollouts: list, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for r in rollouts:
            f.write(json.dumps(r.to_dict()) + "\n")


def read_rollouts_jsonl(path) -> list[dict]:
    out = []
    with open(path) as f:
        for i, line in enumerate(f, 1):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError as e:
                    raise ValueError(f"{path}:{i}: {e.msg}") from None
    return out
