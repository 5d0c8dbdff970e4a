#!/usr/bin/env python3
"""Ablation on the head-on avoidance suite: full model vs no-social-attention
vs no-goal-conditioning, trained per seed and scored on held-out windows.

The expectation is directional: the full model's mean collision rate stays at
or below the no-social variant's, and the no-goal variant's minADE exceeds
the full model's.
"""

import argparse

import numpy as np

from vista.experiments import ABLATION_VARIANTS, run_ablation


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", default="0,1,2")
    parser.add_argument("--train-windows", type=int, default=50)
    parser.add_argument("--test-windows", type=int, default=20)
    args = parser.parse_args()

    seeds = [int(s) for s in args.seeds.split(",")]
    rows = {v: {"min_ade": [], "cr": []} for v in ABLATION_VARIANTS}
    for seed in seeds:
        res = run_ablation(seed, n_train=args.train_windows, n_test=args.test_windows)
        print(f"seed {seed} (epsilon {res['epsilon']:.3f}):")
        for v in ABLATION_VARIANTS:
            print(f"  {v:10s} minADE={res[v]['min_ade']:.4f}  CR={res[v]['cr']:.4%}")
            rows[v]["min_ade"].append(res[v]["min_ade"])
            rows[v]["cr"].append(res[v]["cr"])

    print("\nmeans over seeds:")
    for v in ABLATION_VARIANTS:
        print(
            f"  {v:10s} minADE={np.mean(rows[v]['min_ade']):.4f}  "
            f"CR={np.mean(rows[v]['cr']):.4%}"
        )
    cr_ok = np.mean(rows["full"]["cr"]) <= np.mean(rows["no-social"]["cr"])
    ade_ok = np.mean(rows["no-goal"]["min_ade"]) > np.mean(rows["full"]["min_ade"])
    print(f"\nfull CR <= no-social CR: {cr_ok}")
    print(f"no-goal minADE > full minADE: {ade_ok}")


if __name__ == "__main__":
    main()
