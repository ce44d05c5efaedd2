"""Evaluation summaries: composite closed-loop score, advantage histograms, unsafe ratio, pass@k."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rewards import RewardConfig

log = logging.getLogger(__name__)

HIST_BINS = np.logspace(-4, 2, 51)  # 50 log-spaced bins for |A|


@dataclass
class CompositeScore:
    scenario_ids: list
    safety_gate: np.ndarray  # (S,) 0/1
    soft_mean: np.ndarray  # (S,)
    score: np.ndarray  # (S,) in [0, 100]
    aggregate: float
    speed_mean: float
    components: dict  # mean of each soft score across scenarios

    def rows(self) -> list[dict]:
        return [{"scenario_id": s, "safety_gate": int(g), "soft_mean": float(m), "score": float(c)}
                for s, g, m, c in zip(self.scenario_ids, self.safety_gate, self.soft_mean, self.score)]

    def summary(self) -> dict:
        return {"aggregate": self.aggregate, "num_scenarios": len(self.score),
                "gate_pass_rate": float(self.safety_gate.mean()), "speed_mean": self.speed_mean,
                **{f"{k}_mean": v for k, v in self.components.items()}}


def composite_score(breakdowns: list, cfg: RewardConfig | None = None,
                    scenario_ids: list | None = None) -> CompositeScore:
    """score = 100 * gate * soft_mean per scenario; the gate needs no collision, drivable area
    and TTC above threshold at every step; the soft mean reuses the reward weights."""
    if not breakdowns:
        raise ValueError("composite_score needs at least one breakdown")
    cfg = cfg or RewardConfig()
    w = cfg.weights
    gate = np.array([float(np.all(b.drivable == 1) and np.all(b.dynamic_collision == 1)
                           and np.all(b.static_collision == 1) and np.all(b.ttc == 1)) for b in breakdowns])
    comps = {k: np.array([float(np.mean(getattr(b, k))) for b in breakdowns])
             for k in ("comfort", "ttc", "speed", "progress")}
    soft = (w[0] * comps["comfort"] + w[1] * comps["ttc"] + w[2] * comps["speed"] + w[3] * comps["progress"]) \
        / w.sum()
    score = 100.0 * gate * soft
    ids = list(scenario_ids) if scenario_ids is not None else [str(i) for i in range(len(breakdowns))]
    # order-independent aggregate: sum in sorted-id order
    order = np.argsort(np.array(ids, dtype=object), kind="stable")
    aggregate = float(np.sum(score[order]) / len(score))
    return CompositeScore(ids, gate, soft, score, aggregate, float(np.sum(comps["speed"][order]) / len(score)),
                          {k: float(np.sum(v[order]) / len(v)) for k, v in comps.items()})


def group_is_unsafe(breakdowns: list) -> bool:
    """A group is unsafe iff some member breaks any safety bit at any step."""
    return any(not (np.all(b.drivable == 1) and np.all(b.dynamic_collision == 1) and np.all(b.static_collision == 1))
               for b in breakdowns)


def advantage_distribution(advantages: list, unsafe: list) -> dict:
    """Histogram summary of |A| for safe and unsafe groups.

    ``advantages`` holds one (G, F) array per group, ``unsafe`` the matching labels.
    A label without groups is omitted with a warning.
    """
    out = {}
    for label, want in (("safe", False), ("unsafe", True)):
        vals = [np.abs(np.asarray(a, dtype=float)).ravel() for a, u in zip(advantages, unsafe) if bool(u) == want]
        if not vals:
            log.warning("no %s groups; omitting from the advantage table", label)
            continue
        v = np.concatenate(vals)
        counts, _ = np.histogram(np.clip(v, HIST_BINS[0], HIST_BINS[-1]), bins=HIST_BINS)
        out[label] = {"num_groups": len(vals), "median": float(np.median(v)), "max": float(v.max()),
                      "counts": counts.tolist()}
    return out


def advantage_table_rows(dist: dict) -> list[dict]:
    rows = []
    for label, d in dist.items():
        for i, c in enumerate(d["counts"]):
            rows.append({"label": label, "bin_lo": HIST_BINS[i], "bin_hi": HIST_BINS[i + 1], "count": c})
    return rows


def unsafe_ratio(source) -> list[float]:
    """Per-epoch fraction of unsafe groups.

    ``source`` is a run log (list of dicts with ``unsafe_group_ratio``) or a list of
    per-epoch label lists.
    """
    out = []
    for entry in source:
        if isinstance(entry, dict):
            out.append(float(entry["unsafe_group_ratio"]))
        else:
            labels = list(entry)
            out.append(float(sum(bool(x) for x in labels) / len(labels)) if labels else 0.0)
    return out


# ---------------------------------------------------------------------------
# pass@k


def rollout_passes(b, speed_min: float = 0.9) -> bool:
    """Drivable, collision-free, comfortable, and speed score at least ``speed_min``."""
    return bool(np.all(b.drivable == 1) and np.all(b.dynamic_collision == 1) and np.all(b.static_collision == 1)
                and np.all(b.comfort == 1) and float(np.min(b.speed)) >= speed_min)


def pass_at_k_from_counts(n: int, c: np.ndarray, k_max: int) -> np.ndarray:
    """Unbiased pass@k for k = 1..k_max, averaged over scenarios with c successes out of n."""
    c = np.asarray(c, dtype=int)
    if k_max > n:
        raise ValueError("k_max cannot exceed the pool size")
    fail = np.ones(len(c))
    out = np.zeros(k_max)
    for k in range(1, k_max + 1):
        # P(first k draws all fail) = prod_{i<k} (n - c - i) / (n - i)
        fail = fail * np.clip((n - c - (k - 1)) / (n - (k - 1)), 0.0, 1.0)
        out[k - 1] = float(np.sum(1.0 - fail) / len(c))
    return out


def pass_at_k(params, world_params, scenarios: list, vocabs: dict, k_max: int, seed: int = 0,
              reward_cfg: RewardConfig | None = None, batch_scenarios: int = 4, speed_min: float = 0.9) -> dict:
    """Sample ``k_max`` rollouts per scenario at temperature 1 and estimate pass@k, k = 1..k_max."""
    from .rollout import sample_groups

    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    pool = max(k_max, 2)
    counts = []
    for i in range(0, len(scenarios), batch_scenarios):
        groups, _ = sample_groups(params, world_params, scenarios[i:i + batch_scenarios], vocabs, pool, seed,
                                  reward_cfg)
        counts += [sum(rollout_passes(r.reward, speed_min) for r in g.rollouts) for g in groups]
    curve = pass_at_k_from_counts(pool, np.array(counts), k_max)
    return {"k": list(range(1, k_max + 1)), "pass_at_k": curve.tolist(), "successes": counts, "pool": pool}


# ---------------------------------------------------------------------------
# tables


def write_csv(path, rows: list[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        if not rows:
            return
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True))
