"""Convergence of the sampling backend across schedule, damping and reuse threshold.

Each cell runs the desk-scale experiment on the given seeds and counts the
seeds that converge within the iteration budget.
"""

import argparse
import itertools

from tiltedep.cli import run_experiment
from tiltedep.config import ExperimentConfig
from tiltedep.models import simulate_hlogit


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=list(range(5)))
    p.add_argument("--schedules", nargs="+", default=["serial", "parallel"])
    p.add_argument("--deltas", type=float, nargs="+", default=[1.0, 0.7])
    p.add_argument("--thresholds", type=float, nargs="+", default=[0.5, 0.3])
    args = p.parse_args(argv)
    data = {s: simulate_hlogit(20, 40, 10, s) for s in args.seeds}
    print(f"{'schedule':>9} {'delta':>6} {'threshold':>9} {'converged':>10}")
    for schedule, delta, thr in itertools.product(args.schedules, args.deltas, args.thresholds):
        ok = 0
        for s in args.seeds:
            cfg = ExperimentConfig(seed=s, schedule=schedule, delta0=delta, threshold_frac=thr).validate()
            res, _ = run_experiment(cfg, data[s])
            ok += res.converged
        print(f"{schedule:>9} {delta:>6.2f} {thr:>9.2f} {ok:>6}/{len(args.seeds)}")


if __name__ == "__main__":
    main()
