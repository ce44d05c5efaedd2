"""Desk-scale headline experiment: pretrain, fine-tune with GRPO and VD-GRPO, evaluate.

usage: python scripts/run_headline.py OUT_DIR [--finetune-scenarios N] [--finetune-epochs E] [--finetune-lr LR]
"""
import argparse
import json
import logging

from tokenplan.experiment import HEADLINE, MODELS, run_headline


def main():
    p = argparse.ArgumentParser()
    p.add_argument("out")
    for k, v in HEADLINE.items():
        p.add_argument("--" + k.replace("_", "-"), type=type(v), default=None)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    overrides = {k: v for k, v in vars(args).items() if k != "out" and v is not None}
    res = run_headline(args.out, overrides)
    print(f"{'model':<12}{'composite':>10}{'gate':>8}{'speed':>8}{'comfort':>9}{'ttc':>7}{'progress':>10}")
    for name in MODELS:
        e = res["eval"][name]
        print(f"{name:<12}{e['aggregate']:>10.2f}{e['gate_pass_rate']:>8.3f}{e['speed_mean']:>8.3f}"
              f"{e['comfort_mean']:>9.3f}{e['ttc_mean']:>7.3f}{e['progress_mean']:>10.3f}")
    for mode, entry in res["finetune_log"].items():
        print(f"{mode} final-epoch unsafe-group ratio {entry['unsafe_group_ratio']:.3f}")
    print(json.dumps(res["times"]))


if __name__ == "__main__":
    main()
