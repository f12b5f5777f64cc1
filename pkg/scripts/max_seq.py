"""Largest trainable S under a byte budget for vanilla, recompute and
recompute + mini-sequences, with and without gradient accumulation."""

import argparse

from mstrain.miniseq import MiniSeqConfig
from mstrain.model import ModelConfig
from mstrain.optim import OptimConfig
from mstrain.recompute import CheckpointPolicy
from mstrain.train import max_seq


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--budget-bytes", type=int, default=2_000_000)
    ap.add_argument("--quantum", type=int, default=32)
    args = ap.parse_args()
    base = ModelConfig(d=16, I=56, V=64, heads=4, G=2, layers=2)
    cfgs = {
        "vanilla": base,
        "recompute": base.replace(recompute=CheckpointPolicy(True)),
        "recompute+mst": base.replace(recompute=CheckpointPolicy(True), miniseq=MiniSeqConfig(4, 16)),
    }
    for accum in (1, 2):
        for name, cfg in cfgs.items():
            res = max_seq(cfg, OptimConfig(accum_steps=accum), args.budget_bytes, quantum=args.quantum)
            print(f"accum={accum} {name:<14} S* = {res.S:>6} (peak {res.peak})")


if __name__ == "__main__":
    main()
