"""Command line entry points.

Every subcommand accepts ``--config file.json``; keys in that file use the flag names
(dashes or underscores) and explicit flags override them. Relative output paths are
resolved against ``$TOKENPLAN_OUT`` when it is set.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

log = logging.getLogger("tokenplan")

OUT_ENV = "TOKENPLAN_OUT"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _out_path(p) -> Path:
    p = Path(p)
    root = os.environ.get(OUT_ENV)
    return p if p.is_absolute() or not root else Path(root) / p


def _in_path(p) -> Path:
    """Inputs are looked up as given first, then under the output root."""
    p = Path(p)
    if p.exists() or p.is_absolute():
        return p
    return _out_path(p)


# ---------------------------------------------------------------------------
# shared loaders


def _load_model(path):
    from .io import load_checkpoint
    from .policy import ModelConfig, PolicyParams

    mc, flat, prov = load_checkpoint(_in_path(path))
    return PolicyParams(ModelConfig.from_dict(mc), torch.from_numpy(flat)), prov


def _load_split(data, split):
    from .io import DatasetManifest

    return DatasetManifest.load(_in_path(data)).load_split(split)


def _load_vocab(path):
    from .tokenizer import load_vocabularies

    return load_vocabularies(_in_path(path))


def _reward_cfg(opts):
    from .rewards import RewardConfig

    return RewardConfig(**(opts.get("reward") or {}))


def _limit(scenarios, n):
    return scenarios if n is None else scenarios[:n]


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(o):
    from .io import generate_dataset
    from .scenarios import GeneratorConfig

    names = {f.name for f in fields(GeneratorConfig)}
    gc = {k: v for k, v in (o.get("generator") or {}).items() if k in names}
    for k in ("seed", "num_scenarios", "speeding_injection_rate", "eval_fraction"):
        if o.get(k) is not None:
            gc[k] = o[k]
    man = generate_dataset(GeneratorConfig(**gc), _out_path(o["out"]))
    print(json.dumps({k: len(v) for k, v in man.splits.items()}))


def cmd_build_vocab(o):
    from .tokenizer import build_vocabularies, save_vocabularies

    scns = _limit(_load_split(o["data"], o["split"]), o.get("max_scenarios"))
    vocabs = build_vocabularies(scns, o["K"], o["seed"], o["coverage"])
    out = _out_path(o["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_vocabularies(vocabs, out)
    for c, v in vocabs.items():
        print(f"{c.name.lower():<11} K={len(v)} eps={v.disk_radius_eps:.4f}")


def _train_cfg(o, stage):
    from .trainer import TrainConfig

    kw = dict(stage=stage, epochs=o["epochs"], batch_size=o["batch_size"], seed=o["seed"],
              learning_rate=o["lr"], weight_decay=o["weight_decay"])
    if stage == "finetune":
        kw.update(advantage_mode=o["mode"], G=o["group_size"], beta=o["beta"], c=o["c"],
                  max_scenarios=o.get("max_scenarios"))
    return TrainConfig(**kw)


def cmd_pretrain(o):
    from .io import save_checkpoint
    from .policy import ModelConfig, init_params
    from .trainer import run_pretraining

    vocabs = _load_vocab(o["vocab"])
    if o.get("init"):
        params, _ = _load_model(o["init"])
    else:
        mc = dict(o.get("model") or {})
        mc["vocab_size"] = max(len(v) for v in vocabs.values())
        params = init_params(ModelConfig(**mc), o["model_seed"])
    out = _out_path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_log.jsonl").unlink(missing_ok=True)
    cfg = _train_cfg(o, "pretrain")
    save_checkpoint(out / "init.ckpt", params.cfg.to_dict(), params.numpy(), {"stage": "init"})
    scns = _limit(_load_split(o["data"], o["split"]), o.get("max_scenarios"))
    state = run_pretraining(params, scns, vocabs, cfg, out)
    print(json.dumps(state.log[-1] if state.log else {"epochs": 0}))


def cmd_finetune(o):
    from .analysis import advantage_distribution, advantage_table_rows, write_csv, write_json
    from .trainer import run_finetuning

    vocabs = _load_vocab(o["vocab"])
    params, _ = _load_model(o["init"])
    ref = params.clone()
    world = _load_model(o["world"])[0] if o.get("world") else params.clone()
    cfg = _train_cfg(o, "finetune")
    out = _out_path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_log.jsonl").unlink(missing_ok=True)
    scns = _load_split(o["data"], o["split"])
    state = run_finetuning(params, ref, world, scns, vocabs, cfg, _reward_cfg(o), out)
    if state.advantages:
        dist = advantage_distribution([a for a, _ in state.advantages], [u for _, u in state.advantages])
        write_json(out / "advantages_last_epoch.json", dist)
        write_csv(out / "advantages_last_epoch.csv", advantage_table_rows(dist))
    print(json.dumps(state.log[-1] if state.log else {"epochs": 0}))


def cmd_eval(o):
    from .analysis import write_csv, write_json
    from .rollout import closed_loop_eval

    vocabs = _load_vocab(o["vocab"])
    params, _ = _load_model(o["ckpt"])
    world = _load_model(o["world"])[0] if o.get("world") else params
    scns = _limit(_load_split(o["data"], o["split"]), o.get("max_scenarios"))
    _, cs = closed_loop_eval(params, world, scns, vocabs, o["mode"], _reward_cfg(o), seed=o["seed"])
    if o.get("out"):
        out = _out_path(o["out"])
        write_csv(out, cs.rows())
        write_json(out.with_suffix(".summary.json"), cs.summary())
    s = cs.summary()
    print(f"{'metric':<20}{'value':>10}")
    for k in sorted(s):
        print(f"{k:<20}{s[k]:>10.4f}")


def cmd_pass_at_k(o):
    from .analysis import pass_at_k, write_csv, write_json

    vocabs = _load_vocab(o["vocab"])
    params, _ = _load_model(o["ckpt"])
    world = _load_model(o["world"])[0] if o.get("world") else params
    scns = _limit(_load_split(o["data"], o["split"]), o.get("max_scenarios"))
    res = pass_at_k(params, world, scns, vocabs, o["k_max"], o["seed"], _reward_cfg(o))
    if o.get("out"):
        out = _out_path(o["out"])
        write_csv(out, [{"k": k, "pass_at_k": v} for k, v in zip(res["k"], res["pass_at_k"])])
        write_json(out.with_suffix(".json"), res)
    for k, v in zip(res["k"], res["pass_at_k"]):
        print(f"{k:>3} {v:.4f}")


def cmd_analyze_advantages(o):
    """Sample groups under a checkpoint and summarize |A| for safe and unsafe groups."""
    from .analysis import advantage_distribution, advantage_table_rows, group_is_unsafe, write_csv, write_json
    from .rollout import sample_groups
    from .trainer import TrainConfig, shape_rewards

    vocabs = _load_vocab(o["vocab"])
    params, _ = _load_model(o["ckpt"])
    world = _load_model(o["world"])[0] if o.get("world") else params
    scns = _limit(_load_split(o["data"], o["split"]), o.get("max_scenarios"))
    tc = TrainConfig(stage="finetune", advantage_mode=o["mode"], G=o["group_size"], c=o["c"])
    advs, labels = [], []
    for i in range(0, len(scns), 8):
        groups, _ = sample_groups(params, world, scns[i:i + 8], vocabs, tc.G, o["seed"], _reward_cfg(o))
        for g in groups:
            advs.append(shape_rewards(g.rewards, tc).adv)
            labels.append(group_is_unsafe([r.reward for r in g.rollouts]))
    dist = advantage_distribution(advs, labels)
    out = _out_path(o["out"])
    write_csv(out, advantage_table_rows(dist))
    write_json(out.with_suffix(".json"), dist)
    for label, d in dist.items():
        print(f"{label:<7} groups={d['num_groups']:<5} median={d['median']:.4g} max={d['max']:.4g}")


def cmd_dump_rollouts(o):
    from .rollout import sample_groups, write_rollouts_jsonl

    vocabs = _load_vocab(o["vocab"])
    params, _ = _load_model(o["ckpt"])
    world = _load_model(o["world"])[0] if o.get("world") else params
    scns = _limit(_load_split(o["data"], o["split"]), o.get("max_scenarios"))
    rolls = []
    for i in range(0, len(scns), 8):
        groups, _ = sample_groups(params, world, scns[i:i + 8], vocabs, o["group_size"], o["seed"],
                                  _reward_cfg(o))
        rolls += [r for g in groups for r in g.rollouts]
    write_rollouts_jsonl(rolls, _out_path(o["out"]))
    print(f"wrote {len(rolls)} rollouts")


# ---------------------------------------------------------------------------
# argument parsing

DEFAULTS = {
    "gen-data": {"out": "data"},
    "build-vocab": {"data": "data", "split": "train", "out": "vocab.json", "K": 64, "seed": 0,
                    "coverage": 0.99},
    "pretrain": {"data": "data", "split": "train", "vocab": "vocab.json", "out": "pretrain", "epochs": 6,
                 "batch_size": 16, "lr": 2e-3, "weight_decay": 1e-4, "seed": 0, "model_seed": 0},
    "finetune": {"data": "data", "split": "train", "vocab": "vocab.json", "init": "pretrain/final.ckpt",
                 "out": "finetune", "mode": "vd-grpo", "c": 0.1, "beta": 0.1, "group_size": 4, "epochs": 1,
                 "batch_size": 16, "lr": 1e-4, "weight_decay": 0.0, "seed": 0},
    "eval": {"data": "data", "split": "eval", "vocab": "vocab.json", "mode": "replay", "seed": 0},
    "pass-at-k": {"data": "data", "split": "eval", "vocab": "vocab.json", "k_max": 16, "seed": 0},
    "analyze-advantages": {"data": "data", "split": "train", "vocab": "vocab.json", "mode": "vd-grpo",
                           "c": 0.1, "group_size": 4, "seed": 0, "out": "advantages.csv"},
    "dump-rollouts": {"data": "data", "split": "eval", "vocab": "vocab.json", "group_size": 4, "seed": 0,
                      "out": "rollouts.jsonl"},
}
REQUIRED = {"eval": ["ckpt"], "pass-at-k": ["ckpt"], "analyze-advantages": ["ckpt"], "dump-rollouts": ["ckpt"]}
COMMANDS = {"gen-data": cmd_gen_data, "build-vocab": cmd_build_vocab, "pretrain": cmd_pretrain,
            "finetune": cmd_finetune, "eval": cmd_eval, "pass-at-k": cmd_pass_at_k,
            "analyze-advantages": cmd_analyze_advantages, "dump-rollouts": cmd_dump_rollouts}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tokenplan", description="token-based planner: data, training and evaluation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, *flags):
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON file with option values")
        for flag, kw in flags:
            sp.add_argument(flag, default=None, **kw)
        return sp

    data = [("--data", {"help": "dataset directory"}), ("--split", {}),
            ("--max-scenarios", {"type": int})]
    seed = [("--seed", {"type": int})]
    add("gen-data", ("--out", {}), ("--num-scenarios", {"type": int}),
        ("--speeding-injection-rate", {"type": float}), ("--eval-fraction", {"type": float}), *seed)
    add("build-vocab", *data, ("--out", {}), ("--K", {"type": int}), ("--coverage", {"type": float}), *seed)
    train = [("--vocab", {}), ("--out", {}), ("--epochs", {"type": int}), ("--batch-size", {"type": int}),
             ("--lr", {"type": float}), ("--weight-decay", {"type": float})]
    add("pretrain", *data, *train, *seed, ("--model-seed", {"type": int}), ("--init", {}))
    add("finetune", *data, *train, *seed, ("--init", {}), ("--world", {}),
        ("--mode", {"choices": ["grpo", "vd-grpo", "vd_grpo"]}), ("--c", {"type": float}),
        ("--beta", {"type": float}), ("--group-size", {"type": int}))
    model = [("--vocab", {}), ("--ckpt", {}), ("--world", {}), ("--out", {})]
    add("eval", *data, *model, *seed, ("--mode", {"choices": ["replay", "reactive"]}))
    add("pass-at-k", *data, *model, *seed, ("--k-max", {"type": int}))
    add("analyze-advantages", *data, *model, *seed, ("--mode", {"choices": ["grpo", "vd-grpo", "vd_grpo"]}),
        ("--c", {"type": float}), ("--group-size", {"type": int}))
    add("dump-rollouts", *data, *model, *seed, ("--group-size", {"type": int}))
    return p


def resolve_options(command: str, ns: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    opts = dict(DEFAULTS[command])
    if ns.config:
        try:
            cfg = json.loads(Path(ns.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {ns.config}: {e}") from None
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        opts.update({k.replace("-", "_"): v for k, v in cfg.items()})
    for k, v in vars(ns).items():
        if k not in ("command", "config", "verbose") and v is not None:
            opts[k] = v
    missing = [k for k in REQUIRED.get(command, []) if not opts.get(k)]
    if missing:
        raise UsageError(f"tokenplan {command}: missing required option(s): "
                         + ", ".join("--" + m.replace("_", "-") for m in missing))
    return opts


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if not ns.command:
            raise UsageError(parser.format_usage().strip())
        opts = resolve_options(ns.command, ns)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return 0 if not e.code else 1
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        COMMANDS[ns.command](opts)
    except (UsageError, FileNotFoundError, KeyError, ValueError, RuntimeError, OSError) as e:
        print(f"tokenplan {ns.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
