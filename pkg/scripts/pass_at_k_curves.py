"""pass@k curves for every model of a finished headline run.

usage: python scripts/pass_at_k_curves.py RUN_DIR [--k-max 16]
"""
import argparse
import json
from pathlib import Path

from tokenplan.cli import main as cli

MODELS = {"pretrained": "pretrain", "grpo": "finetune_grpo", "vd_grpo": "finetune_vd_grpo"}


def main():
    p = argparse.ArgumentParser()
    p.add_argument("run")
    p.add_argument("--k-max", type=int, default=16)
    args = p.parse_args()
    run = Path(args.run)
    pre = str(run / "pretrain" / "final.ckpt")
    curves = {}
    for name, sub in MODELS.items():
        out = run / "pass_at_k" / f"{name}.csv"
        code = cli(["pass-at-k", "--data", str(run / "data"), "--vocab", str(run / "vocab.json"),
                    "--ckpt", str(run / sub / "final.ckpt"), "--world", pre, "--k-max", str(args.k_max),
                    "--out", str(out)])
        if code:
            raise SystemExit(code)
        curves[name] = json.loads(out.with_suffix(".json").read_text())["pass_at_k"]
    print("k   " + "".join(f"{n:>12}" for n in curves))
    for i in range(args.k_max):
        print(f"{i + 1:<4}" + "".join(f"{c[i]:>12.4f}" for c in curves.values()))


if __name__ == "__main__":
    main()
