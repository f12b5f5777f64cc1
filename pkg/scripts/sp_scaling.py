"""Per-worker max sequence length for P simulated sequence-parallel workers."""

import argparse

from mstrain.miniseq import MiniSeqConfig
from mstrain.model import ModelConfig
from mstrain.recompute import CheckpointPolicy
from mstrain.seqpar import sp_max_seq


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--budget-bytes", type=int, default=2_500_000)
    ap.add_argument("--workers", type=int, nargs="+", default=[1, 2, 4])
    args = ap.parse_args()
    cfg = ModelConfig(d=32, I=112, V=512, heads=4, G=1, layers=1, recompute=CheckpointPolicy(True), miniseq=MiniSeqConfig(4, 16))
    base = None
    for p in args.workers:
        res = sp_max_seq(cfg, p, args.budget_bytes, quantum=32)
        base = base or res.S
        print(f"P={p}: S* = {res.S:>6} ({res.S / base:.2f}x)")


if __name__ == "__main__":
    main()
