"""Pre-training by teacher forcing and group-relative policy-gradient fine-tuning."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .analysis import group_is_unsafe
from .policy import Batch, PolicyParams, build_context, collate, decode_future_poses, forward_batch, \
    future_tokens, grad, kl_categorical, log_softmax, vocab_segments_tensor
from .rewards import SOFT_KEYS, RewardConfig
from .rollout import SimResult, sample_groups

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    stage: str = "pretrain"  # pretrain | finetune
    advantage_mode: str = "vd_grpo"  # grpo | vd_grpo
    G: int = 4
    beta: float = 0.1
    c: float = 0.1
    sigma_floor: float = 1e-6
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 1
    batch_size: int = 16
    seed: int = 0
    max_scenarios: int | None = None  # fine-tune on the first n training scenarios only

    def __post_init__(self):
        self.advantage_mode = self.advantage_mode.replace("-", "_")
        if self.stage not in ("pretrain", "finetune"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.advantage_mode not in ("grpo", "vd_grpo"):
            raise ValueError(f"unknown advantage_mode {self.advantage_mode!r}")
        if self.c <= 0:
            raise ValueError("c must be > 0")
        if self.sigma_floor <= 0:
            raise ValueError("sigma_floor must be > 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.stage == "finetune" and self.G < 2:
            raise ValueError("fine-tuning needs G >= 2")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# advantages


@dataclass
class AdvantageTensor:
    shaped: np.ndarray  # (G, F)
    adv: np.ndarray  # (G, F) reward-to-go of ``shaped``
    mu: float
    sigma: float | None = None


def _pooled_mean(R: np.ndarray) -> float:
    # shifted by the first entry so a constant group centres to exactly zero
    r0 = float(R.flat[0])
    return r0 + float((R - r0).mean())


def reward_to_go(shaped: np.ndarray) -> np.ndarray:
    """A_t = R_t + A_{t+1}, accumulated from the last step backwards."""
    shaped = np.asarray(shaped, dtype=float)
    adv = np.empty_like(shaped)
    adv[:, -1] = shaped[:, -1]
    for t in range(shaped.shape[1] - 2, -1, -1):
        adv[:, t] = shaped[:, t] + adv[:, t + 1]
    return adv


def shape_rewards_grpo(R, sigma_floor: float = 1e-6) -> AdvantageTensor:
    """Centre and divide by the population std, both pooled over all G*F token rewards."""
    R = np.asarray(R, dtype=float)
    if R.ndim != 2 or R.shape[0] < 2:
        raise ValueError("rewards must be (G, F) with G >= 2")
    mu = _pooled_mean(R)
    sigma = float(np.sqrt(((R - mu) ** 2).mean()))
    shaped = (R - mu) / max(sigma, sigma_floor)
    return AdvantageTensor(shaped, reward_to_go(shaped), mu, sigma)


def shape_rewards_vdgrpo(R, c: float = 0.1) -> AdvantageTensor:
    """Centre on the pooled group mean and divide by the fixed constant ``c``."""
    if c <= 0:
        raise ValueError("c must be > 0")
    R = np.asarray(R, dtype=float)
    if R.ndim != 2:
        raise ValueError("rewards must be (G, F)")
    mu = _pooled_mean(R)
    shaped = (R - mu) / c
    return AdvantageTensor(shaped, reward_to_go(shaped), mu, None)


def shape_rewards(R, cfg: TrainConfig) -> AdvantageTensor:
    if cfg.advantage_mode == "grpo":
        return shape_rewards_grpo(R, cfg.sigma_floor)
    return shape_rewards_vdgrpo(R, cfg.c)


def dominance_fixture(F: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic (safe, unsafe) reward groups of shape (4, F).

    Safe: every rollout keeps a per-step reward of 0.9 +- 0.01. Unsafe: three rollouts at
    0.9 and one whose reward is gated to zero from mid-horizon on.
    """
    safe = np.repeat(np.array([[0.89], [0.90], [0.91], [0.90]]), F, axis=1)
    unsafe = np.full((4, F), 0.9)
    unsafe[3, F // 2:] = 0.0
    return safe, unsafe


# ---------------------------------------------------------------------------
# losses


@dataclass
class PretrainBatch:
    batch: Batch  # tokens/poses filled with history and ground-truth futures
    targets: torch.Tensor  # (B, N, F) token ids
    weights: torch.Tensor  # (B, N, F) 1 / (F * n_agents) for valid agents, 0 for padding


def make_pretrain_batch(scenarios: list, vocabs: dict, cfg, contexts=None, gt=None) -> PretrainBatch:
    """Teacher-forcing inputs: future poses are decoded from the ground-truth tokens."""
    H, F = cfg.history_steps, cfg.max_steps
    contexts = contexts or [build_context(s, vocabs, cfg) for s in scenarios]
    gt = gt or [future_tokens(s, vocabs, F) for s in scenarios]
    batch = collate(contexts, cfg, {c: len(v) for c, v in vocabs.items()})
    B, N = batch.categories.shape
    seg = vocab_segments_tensor(vocabs, cfg.vocab_size).numpy()
    targets = np.zeros((B, N, F), np.int64)
    weights = np.zeros((B, N, F))
    for b, (ctx, tok) in enumerate(zip(contexts, gt)):
        n = ctx.num_agents
        if tok.shape != (n, F):
            raise ValueError(f"ground-truth tokens for {ctx.scenario_id!r} must be ({n}, {F})")
        targets[b, :n] = tok
        weights[b, :n] = 1.0 / (F * n)
        fut = decode_future_poses(ctx.hist_poses[:, -1], tok, ctx.categories, seg)
        batch.poses[b, :n, H:] = torch.from_numpy(fut)
    batch.tokens[:, :, H:] = torch.from_numpy(targets)
    return PretrainBatch(batch, torch.from_numpy(targets), torch.from_numpy(weights))


def pretrain_loss_batch(params: PolicyParams, pb: PretrainBatch) -> torch.Tensor:
    """Mean over scenarios of each scenario's mean token negative log-likelihood."""
    H, F = params.cfg.history_steps, params.cfg.max_steps
    logits = forward_batch(params, pb.batch)[:, :, H - 1:H + F - 1]  # (B, N, F, K)
    lp = torch.gather(log_softmax(logits), -1, pb.targets.unsqueeze(-1)).squeeze(-1)
    return -(lp * pb.weights).sum() / pb.targets.shape[0]


def pretrain_loss(params: PolicyParams, scenario, gt_tokens, vocabs: dict) -> torch.Tensor:
    """-1/(F(N+1)) sum_t sum_n log p(gt token | gt history, context) for one scenario."""
    if not scenario.has_futures:
        raise ValueError(f"scenario {scenario.scenario_id!r} is missing ground-truth futures")
    return pretrain_loss_batch(params, make_pretrain_batch([scenario], vocabs, params.cfg,
                                                           gt=[np.asarray(gt_tokens, dtype=np.int64)]))


@dataclass
class FinetuneBatch:
    sim: SimResult
    old_logp: torch.Tensor  # (B, F) ego log-probs stored at sampling time
    ref_logits: torch.Tensor  # (B, F, K) reference-policy logits at the visited steps
    adv: torch.Tensor  # (B, F)
    rows: list  # row groups, one list per rollout group


def finetune_loss(params: PolicyParams, fb: FinetuneBatch, beta: float, return_parts: bool = False):
    """-(1/GF) sum_g sum_t [ratio * A - beta * KL(pi || pi_ref)], averaged over groups.

    The ratio is recomputed through ``params`` against the stored sampling log-probs;
    no clipping is applied.
    """
    cfg = params.cfg
    H, F = cfg.history_steps, cfg.max_steps
    logits = forward_batch(params, fb.sim.batch)[:, 0, H - 1:H + F - 1]  # (B, F, K)
    lp_all = log_softmax(logits)
    tok = torch.from_numpy(fb.sim.tokens[:, 0])
    lp = torch.gather(lp_all, -1, tok.unsqueeze(-1)).squeeze(-1)
    ratio = torch.exp(lp - fb.old_logp)
    if not torch.isfinite(ratio).all():
        b, t = torch.nonzero(~torch.isfinite(ratio))[0].tolist()
        raise FloatingPointError(f"non-finite importance ratio at rollout {b}, step {t}")
    kl = kl_categorical(logits, fb.ref_logits) if beta else torch.zeros_like(ratio)
    per_token = ratio * fb.adv - beta * kl
    # per-group mean over G*F tokens, then mean over groups
    loss = -torch.stack([per_token[r].mean() for r in fb.rows]).mean()
    if return_parts:
        return loss, {"kl_mean": float(kl.detach().mean()), "ratio_mean": float(ratio.detach().mean())}
    return loss


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int) -> "AdamWState":
        return cls(np.zeros(n), np.zeros(n))


def optimizer_step(params: np.ndarray, grads: np.ndarray, state: AdamWState, lr: float,
                   weight_decay: float = 0.0) -> np.ndarray:
    """One AdamW update with decoupled weight decay; updates ``state`` in place."""
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("params, grads and optimizer state must have equal shapes")
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
    m_hat = state.m / (1 - state.beta1 ** state.step)
    v_hat = state.v / (1 - state.beta2 ** state.step)
    return params - lr * weight_decay * params - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def cosine_lr(base: float, step: int, total: int) -> float:
    """Cosine annealing from ``base`` at step 0 to zero at ``total``."""
    if total <= 0:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * min(step, total) / total))


# ---------------------------------------------------------------------------
# training loops


@dataclass
class RunState:
    params: PolicyParams
    log: list = field(default_factory=list)
    group_labels: list = field(default_factory=list)  # per epoch: list of unsafe flags
    advantages: list = field(default_factory=list)  # last epoch: (adv array, unsafe flag) per group


def _checkpoint(out_dir, name: str, params: PolicyParams, provenance: dict):
    if out_dir is None:
        return
    from .io import save_checkpoint

    save_checkpoint(Path(out_dir) / name, params.cfg.to_dict(), params.numpy(), provenance)


def _append_log(out_dir, entry: dict):
    if out_dir is None:
        return
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    with open(Path(out_dir) / "run_log.jsonl", "a") as f:
        f.write(json.dumps(entry, sort_keys=True) + "\n")


def run_pretraining(params: PolicyParams, scenarios: list, vocabs: dict, cfg: TrainConfig,
                    out_dir=None) -> RunState:
    """Teacher-forced NLL with AdamW and cosine decay to zero over all steps."""
    if not scenarios:
        raise ValueError("empty dataset")
    mcfg = params.cfg
    state = RunState(params.clone())
    if cfg.epochs == 0:
        _checkpoint(out_dir, "final.ckpt", state.params, {"stage": "pretrain", "seed": cfg.seed, "epochs": 0})
        return state
    contexts = [build_context(s, vocabs, mcfg) for s in scenarios]
    gts = [future_tokens(s, vocabs, mcfg.max_steps) for s in scenarios]
    rng = np.random.default_rng(cfg.seed)
    n_batches = math.ceil(len(scenarios) / cfg.batch_size)
    total = cfg.epochs * n_batches
    opt = AdamWState.zeros(params.size)
    flat = state.params.numpy()
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(scenarios))
        losses = []
        for i in range(n_batches):
            idx = order[i * cfg.batch_size:(i + 1) * cfg.batch_size]
            pb = make_pretrain_batch([scenarios[j] for j in idx], vocabs, mcfg,
                                     [contexts[j] for j in idx], [gts[j] for j in idx])
            holder = {}

            def closure(p):
                loss = pretrain_loss_batch(p, pb)
                holder["loss"] = float(loss.detach())
                return loss
            g = grad(state.params.with_flat(torch.from_numpy(flat)), closure)
            lr = cosine_lr(cfg.learning_rate, step, total)
            flat = optimizer_step(flat, g, opt, lr, cfg.weight_decay)
            step += 1
            losses.append(holder["loss"])
        state.params = state.params.with_flat(torch.from_numpy(flat.copy()))
        entry = {"epoch": epoch, "stage": "pretrain", "loss": float(np.mean(losses)), "mean_reward": None,
                 "unsafe_group_ratio": None, "kl_mean": None, "lr": cosine_lr(cfg.learning_rate, step, total)}
        state.log.append(entry)
        _append_log(out_dir, entry)
        _checkpoint(out_dir, f"epoch{epoch}.ckpt", state.params, {"stage": "pretrain", "seed": cfg.seed,
                                                                  "epoch": epoch})
        log.info("pretrain epoch %d loss %.4f", epoch, entry["loss"])
    _checkpoint(out_dir, "final.ckpt", state.params, {"stage": "pretrain", "seed": cfg.seed, "epochs": cfg.epochs})
    return state


def finetune_batch(live: PolicyParams, ref: PolicyParams, world: PolicyParams, scenarios: list, vocabs: dict,
                   cfg: TrainConfig, seed: int, reward_cfg: RewardConfig, contexts=None):
    """Sample groups under a snapshot of ``live`` and build the loss inputs."""
    old = live.clone()
    groups, sim = sample_groups(old, world, scenarios, vocabs, cfg.G, seed, reward_cfg, contexts)
    H, F = live.cfg.history_steps, live.cfg.max_steps
    with torch.no_grad():
        ref_logits = forward_batch(ref, sim.batch)[:, 0, H - 1:H + F - 1]
    advs = [shape_rewards(g.rewards, cfg) for g in groups]
    adv = torch.from_numpy(np.concatenate([a.adv for a in advs]))
    old_logp = torch.from_numpy(sim.logp[:, 0].copy())
    fb = FinetuneBatch(sim, old_logp, ref_logits, adv, [g.batch_rows for g in groups])
    return fb, groups, advs


def run_finetuning(params: PolicyParams, ref: PolicyParams, world: PolicyParams, scenarios: list, vocabs: dict,
                   cfg: TrainConfig, reward_cfg: RewardConfig | None = None, out_dir=None) -> RunState:
    """Per batch: snapshot, sample G rollouts per scenario, shape rewards, one gradient step."""
    if not scenarios:
        raise ValueError("empty dataset")
    reward_cfg = reward_cfg or RewardConfig()
    world_before = world.numpy()
    if cfg.max_scenarios is not None:
        scenarios = scenarios[:cfg.max_scenarios]
    mcfg = params.cfg
    state = RunState(params.clone())
    contexts = [build_context(s, vocabs, mcfg) for s in scenarios]
    rng = np.random.default_rng(cfg.seed)
    opt = AdamWState.zeros(params.size)
    flat = state.params.numpy()
    n_batches = math.ceil(len(scenarios) / cfg.batch_size)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(scenarios))
        stats = {"loss": [], "kl": [], "reward": [], "labels": [], **{k: [] for k in SOFT_KEYS}}
        state.advantages = []
        for i in range(n_batches):
            idx = order[i * cfg.batch_size:(i + 1) * cfg.batch_size]
            batch_seed = int(cfg.seed * 1_000_003 + epoch * 10_007 + i)
            live = state.params.with_flat(torch.from_numpy(flat))
            fb, groups, advs = finetune_batch(live, ref, world, [scenarios[j] for j in idx], vocabs, cfg,
                                              batch_seed, reward_cfg, [contexts[j] for j in idx])
            parts = {}

            def closure(p):
                loss, extra = finetune_loss(p, fb, cfg.beta, return_parts=True)
                parts.update(extra, loss=float(loss.detach()))
                return loss
            g = grad(live, closure)
            flat = optimizer_step(flat, g, opt, cfg.learning_rate, cfg.weight_decay)
            stats["loss"].append(parts["loss"])
            stats["kl"].append(parts["kl_mean"])
            for grp, a in zip(groups, advs):
                unsafe = group_is_unsafe([r.reward for r in grp.rollouts])
                stats["labels"].append(unsafe)
                state.advantages.append((a.adv, unsafe))
                stats["reward"].append(float(grp.rewards.mean()))
                for k in SOFT_KEYS:
                    stats[k].append(float(np.mean([getattr(r.reward, k).mean() for r in grp.rollouts])))
        state.params = state.params.with_flat(torch.from_numpy(flat.copy()))
        state.group_labels.append(stats["labels"])
        entry = {"epoch": epoch, "stage": "finetune", "mode": cfg.advantage_mode,
                 "loss": float(np.mean(stats["loss"])), "mean_reward": float(np.mean(stats["reward"])),
                 "unsafe_group_ratio": float(np.mean(stats["labels"])), "kl_mean": float(np.mean(stats["kl"])),
                 "lr": cfg.learning_rate, **{f"{k}_mean": float(np.mean(stats[k])) for k in SOFT_KEYS}}
        state.log.append(entry)
        _append_log(out_dir, entry)
        _checkpoint(out_dir, f"epoch{epoch}.ckpt", state.params,
                    {"stage": "finetune", "mode": cfg.advantage_mode, "seed": cfg.seed, "epoch": epoch})
        log.info("finetune[%s] epoch %d loss %.4f reward %.4f unsafe %.3f", cfg.advantage_mode, epoch,
                 entry["loss"], entry["mean_reward"], entry["unsafe_group_ratio"])
    if not np.array_equal(world.numpy(), world_before):
        raise RuntimeError("world model parameters changed during fine-tuning")
    _checkpoint(out_dir, "final.ckpt", state.params,
                {"stage": "finetune", "mode": cfg.advantage_mode, "seed": cfg.seed, "epochs": cfg.epochs})
    return state
