"""Train (1, 1) and (4, 16) side by side on the same synthetic stream and
compare per-step losses."""

import argparse
import tempfile
from pathlib import Path

import numpy as np

from mstrain.data import next_batch, synth_corpus
from mstrain.miniseq import MiniSeqConfig
from mstrain.model import ModelConfig
from mstrain.optim import OptimConfig
from mstrain.train import Trainer


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=50)
    ap.add_argument("--lr", type=float, default=3e-3)
    args = ap.parse_args()
    cfg = ModelConfig(S=64, B=4)
    with tempfile.TemporaryDirectory() as tmp:
        tf = synth_corpus(0, cfg.V, args.steps * cfg.B * cfg.S, Path(tmp) / "c.bin")
        curves = []
        for ms in ((1, 1), (4, 16)):
            tr = Trainer(cfg.replace(miniseq=MiniSeqConfig(*ms)), OptimConfig(lr=args.lr))
            cur, losses = 0, []
            for _ in range(args.steps):
                b, cur = next_batch(tf, cur, cfg.B, cfg.S)
                losses.append(tr.step([b.as_tuple()]).loss)
            curves.append(np.array(losses))
    for i, (a, b) in enumerate(zip(*curves), 1):
        print(f"{i:>3} {a:.10f} {b:.10f} {abs(a - b):.1e}")
    print(f"max |diff| = {np.abs(curves[0] - curves[1]).max():.2e}")


if __name__ == "__main__":
    main()
