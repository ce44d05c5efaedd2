"""Desk-scale headline pipeline driven through the command line entry points.

generate data -> token vocabularies -> pretrain -> fine-tune with GRPO and VD-GRPO from the
same checkpoint and seeds -> closed-loop evaluation of all three models.
"""
from __future__ import annotations

import json
import logging
import time
from pathlib import Path

from .cli import main

log = logging.getLogger(__name__)

HEADLINE = {
    "num_scenarios": 2000,
    "speeding_injection_rate": 0.12,
    "data_seed": 0,
    "K": 64,
    "pretrain_epochs": 6,
    "pretrain_lr": 2e-3,
    "finetune_scenarios": 320,
    "finetune_epochs": 2,
    "finetune_lr": 3e-4,
    "group_size": 4,
    "beta": 0.1,
    "c": 0.1,
    "seed": 0,
    "eval_mode": "replay",
}

MODELS = ("pretrained", "grpo", "vd_grpo")


def _run(argv):
    log.info("tokenplan %s", " ".join(argv))
    code = main(argv)
    if code != 0:
        raise RuntimeError(f"`tokenplan {' '.join(argv)}` exited with {code}")


def _last_log(path: Path) -> dict:
    return json.loads(path.read_text().splitlines()[-1])


def run_headline(root, overrides: dict | None = None, evaluate: bool = True) -> dict:
    """Run the pipeline under ``root``; returns per-model metrics and timings."""
    cfg = dict(HEADLINE, **(overrides or {}))
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    data, vocab = str(root / "data"), str(root / "vocab.json")
    common = ["--data", data, "--vocab", vocab]
    times = {}

    t = time.perf_counter()
    _run(["gen-data", "--out", data, "--num-scenarios", str(cfg["num_scenarios"]),
          "--speeding-injection-rate", str(cfg["speeding_injection_rate"]), "--seed", str(cfg["data_seed"])])
    _run(["build-vocab", "--data", data, "--out", vocab, "--K", str(cfg["K"]), "--seed", str(cfg["seed"])])
    times["data"] = time.perf_counter() - t

    t = time.perf_counter()
    _run(["pretrain", *common, "--out", str(root / "pretrain"), "--epochs", str(cfg["pretrain_epochs"]),
          "--lr", str(cfg["pretrain_lr"]), "--seed", str(cfg["seed"])])
    times["pretrain"] = time.perf_counter() - t
    pre = str(root / "pretrain" / "final.ckpt")

    ckpts = {"pretrained": pre}
    ft_logs = {}
    for mode in ("grpo", "vd_grpo"):
        t = time.perf_counter()
        out = root / f"finetune_{mode}"
        _run(["finetune", *common, "--init", pre, "--world", pre, "--out", str(out), "--mode", mode,
              "--group-size", str(cfg["group_size"]), "--beta", str(cfg["beta"]), "--c", str(cfg["c"]),
              "--epochs", str(cfg["finetune_epochs"]), "--lr", str(cfg["finetune_lr"]),
              "--seed", str(cfg["seed"]), "--max-scenarios", str(cfg["finetune_scenarios"])])
        times[f"finetune_{mode}"] = time.perf_counter() - t
        ckpts[mode] = str(out / "final.ckpt")
        ft_logs[mode] = _last_log(out / "run_log.jsonl")

    result = {"config": cfg, "checkpoints": ckpts, "finetune_log": ft_logs, "times": times, "eval": {}}
    if evaluate:
        for name in MODELS:
            t = time.perf_counter()
            out = root / "eval" / f"{name}.csv"
            _run(["eval", *common, "--ckpt", ckpts[name], "--world", pre, "--mode", cfg["eval_mode"],
                  "--out", str(out)])
            times[f"eval_{name}"] = time.perf_counter() - t
            result["eval"][name] = json.loads(out.with_suffix(".summary.json").read_text())
    (root / "headline.json").write_text(json.dumps(result, indent=1))
    return result

