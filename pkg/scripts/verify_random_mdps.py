"""Run the error-operator certificates on a batch of random tabular MDPs.

    python scripts/verify_random_mdps.py --count 20 --trials 1000
"""

import argparse
import json

import numpy as np

from pessilab.errorlab import verify_mdp
from pessilab.mdp import make_random_mdp


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--count", type=int, default=20)
    parser.add_argument("--trials", type=int, default=1000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    rng = np.random.default_rng(args.seed)
    worst = {"shift_gap": 0.0, "fixedpoint_gap": 0.0, "ratio_minus_gamma": -np.inf}
    for i in range(args.count):
        mdp = make_random_mdp(int(rng.integers(2, 11)), int(rng.integers(1, 5)), float(rng.uniform(0.5, 0.99)), i)
        rep = verify_mdp(mdp, seed=i, trials=args.trials)
        worst["shift_gap"] = max(worst["shift_gap"], rep["lemma1_max_gap"])
        worst["fixedpoint_gap"] = max(worst["fixedpoint_gap"], rep["fixedpoint_max_gap"])
        worst["ratio_minus_gamma"] = max(worst["ratio_minus_gamma"], rep["contraction_max_ratio"] - mdp.gamma)
    print(json.dumps({"mdps": args.count, **worst}))


if __name__ == "__main__":
    main()
