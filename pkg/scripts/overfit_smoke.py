#!/usr/bin/env python3
"""Overfit smoke experiment: 20 mixed synthetic windows, up to 300 epochs.

Reports the total-loss drop and the best train-set minADE_20 per seed.
"""

import argparse

from vista.experiments import run_overfit


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    args = parser.parse_args()

    print(f"{'seed':>4} {'epochs':>6} {'time':>7} {'drop':>7} {'minADE20':>9}  stop")
    for seed in (int(s) for s in args.seeds.split(",")):
        r = run_overfit(seed)
        print(
            f"{r['seed']:>4} {r['epochs']:>6} {r['seconds']:>6.0f}s "
            f"{r['loss_drop']:>6.1%} {r['min_ade_20']:>9.4f}  {r['stop']}"
        )


if __name__ == "__main__":
    main()
