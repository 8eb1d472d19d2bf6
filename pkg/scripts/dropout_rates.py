"""Population dropout rates of the simulation constructs, estimated from one large draw.

Usage: python3 scripts/dropout_rates.py [--n 200000] [--seed 1]
"""
import argparse

import numpy as np

from drimpute.data import validate_monotone
from drimpute.simulation import CONSTRUCTS, DropoutConfig, GeneratorConfig, apply_dropout, generate_full


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=200_000)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()
    full = generate_full(GeneratorConfig(n=args.n), np.random.default_rng(args.seed))
    x2 = full.dataset.baseline[:, 1] == 1
    for construct in CONSTRUCTS:
        ds = apply_dropout(full, DropoutConfig.named(construct), np.random.default_rng(args.seed + 1))
        R = validate_monotone(ds).R
        miss = 100 * (1 - R.mean(axis=0))
        print(f"{construct}: missing at visit 2 {miss[1]:.1f}%, visit 3 {miss[2]:.1f}% "
              f"(x2=1: {100 * (1 - R[x2, 2].mean()):.1f}%, x2=0: {100 * (1 - R[~x2, 2].mean()):.1f}%)")


if __name__ == "__main__":
    main()
