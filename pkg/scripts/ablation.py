"""Memory ablation on the desk config: vanilla, + recompute, + mini-sequences.

Prints tracked step peaks and the intermediate footprint for each S.
"""

import argparse
import csv
from pathlib import Path

from mstrain.memtrack import Tracker
from mstrain.miniseq import MiniSeqConfig
from mstrain.model import ModelConfig
from mstrain.optim import OptimConfig
from mstrain.recompute import CheckpointPolicy
from mstrain.train import Trainer, random_batch

SETTINGS = {
    "vanilla": dict(),
    "recompute": dict(recompute=CheckpointPolicy(True)),
    "recompute+mst": dict(recompute=CheckpointPolicy(True), miniseq=MiniSeqConfig(4, 16)),
    "recompute+mst+inbwd": dict(recompute=CheckpointPolicy(True), miniseq=MiniSeqConfig(4, 16)),
}


def tracked(cfg, ocfg):
    tr = Trainer(cfg, ocfg, tracker=Tracker())
    with tr.tracker.region("step") as res:
        tr.step([random_batch(cfg, 0)])
    rep = res.report
    return rep.abs_peak_bytes, rep.class_peak("inter/"), rep.class_peak("act/")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seq", type=int, nargs="+", default=[256, 512, 1024])
    ap.add_argument("--out", type=Path, default=Path("runs/ablation.csv"))
    args = ap.parse_args()
    args.out.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in args.seq:
        for name, kw in SETTINGS.items():
            ocfg = OptimConfig(in_backward=name.endswith("inbwd"))
            peak, inter, act = tracked(ModelConfig(S=s, **kw), ocfg)
            rows.append((s, name, peak, inter, act))
            print(f"S={s:>5} {name:<20} peak {peak:>10} inter {inter:>10} act {act:>10}")
    with args.out.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("S", "setting", "peak_bytes", "intermediate_bytes", "activation_bytes"))
        w.writerows(rows)


if __name__ == "__main__":
    main()
