"""Sweep the mini-sequence count for the MLP and the LM-Head.

Thin wrapper over ``mstrain sweep-m`` for both components.
"""

import argparse

from mstrain.cli import main as cli


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seq", default="1024")
    ap.add_argument("--m-list", default="1,2,4,8,16,32")
    ap.add_argument("--out", default="runs/m_sweep")
    args = ap.parse_args()
    for comp in ("mlp", "head"):
        print(f"-- {comp}")
        cli(["sweep-m", "--component", comp, "--seq", args.seq, "--m-list", args.m_list, "--out", f"{args.out}/{comp}"])


if __name__ == "__main__":
    main()
