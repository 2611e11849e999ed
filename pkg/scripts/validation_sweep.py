"""Sweep the validation ratio with baseline, regret and adjusted arms.

For each ratio v the sweep runs three arms: the baseline (v=0, beta frozen), the
regret arm (v routed away but beta frozen) and the adjusted arm (v routed away and
beta learned). Per-run CSVs and summary.csv land under --out.

    python scripts/validation_sweep.py --config configs/tabular_smoke.json --values 0.03125,0.125 --seeds 1..3
"""

import argparse
import json

from pessilab.harness import ExperimentConfig, parse_seeds, sweep


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", default="configs/tabular_smoke.json")
    parser.add_argument("--values", default="0.0078125,0.03125,0.125,0.5")
    parser.add_argument("--seeds", default="1..3")
    parser.add_argument("--out", default="runs/validation_sweep")
    parser.add_argument("--workers", type=int)
    args = parser.parse_args()
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    summary = sweep(ExperimentConfig.load(args.config), "validation_ratio", values, parse_seeds(args.seeds),
                    args.out, workers=args.workers)
    for s in summary:
        print(json.dumps({k: s[k] for k in ("arm", "value", "n_seeds", "mean", "ci", "n_failed")}))


if __name__ == "__main__":
    main()
