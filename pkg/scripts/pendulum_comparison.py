"""Fixed beta=1 (clipped double Q) versus VPL on the pendulum, several seeds each.

Writes per-run CSVs plus summary.csv under --out/<arm>/ and prints the final
returns with bootstrap intervals.

    python scripts/pendulum_comparison.py --seeds 1..5 --out runs/pendulum
"""

import argparse
import json
from pathlib import Path

from pessilab.harness import ExperimentConfig, parse_seeds, sweep

ROOT = Path(__file__).resolve().parent.parent


def compare(seeds, out_dir, steps=None, workers=None):
    results = {}
    for arm, config in (("fixed", "pendulum_fixed.json"), ("vpl", "pendulum_vpl.json")):
        cfg = ExperimentConfig.load(ROOT / "configs" / config)
        if steps is not None:
            cfg = cfg.replace(total_steps=steps)
        (summary,) = sweep(cfg, "adjuster", [arm], seeds, Path(out_dir) / arm, workers=workers)
        results[arm] = summary
    return results


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", default="1..5")
    parser.add_argument("--out", default="runs/pendulum")
    parser.add_argument("--steps", type=int)
    parser.add_argument("--workers", type=int)
    args = parser.parse_args()
    results = compare(parse_seeds(args.seeds), args.out, args.steps, args.workers)
    for arm, s in results.items():
        print(json.dumps({"arm": arm, "mean": s["mean"], "ci": s["ci"], "finals": s["finals"], "failed": s["n_failed"]}))


if __name__ == "__main__":
    main()
