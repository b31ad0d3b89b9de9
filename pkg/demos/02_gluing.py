"""Transfer of a plan to a perturbed first marginal by gluing.

Run with ``python3 demos/02_gluing.py``.  The transferred plan keeps the
second marginal, takes the new first marginal, and moves no farther in W1
than the first marginal itself moved.
"""

import numpy as np

from bilevel_ot import DiscreteMeasure, Grid, monotone_plan_1d, plan_w1, transfer_plan, w1_1d


def main(seed=0, trials=5, m=10):
    rng = np.random.default_rng(seed)
    g = Grid(0.0, 1.0, m)
    print(f"{'W1(pi_n, pi)':>13} {'W1(mu1_n, mu1)':>15} {'row defect':>11} {'col defect':>11}")
    for _ in range(trials):
        a, an, b = (rng.random(m) + 0.05 for _ in range(3))
        mu1, mu1n = DiscreteMeasure(g, a / a.sum()), DiscreteMeasure(g, an / an.sum())
        mu2 = DiscreteMeasure(g, b / b.sum())
        pi = monotone_plan_1d(mu1, mu2)
        pin = transfer_plan(mu1n, mu1, pi)
        row = np.abs(pin.P.sum(axis=1) - mu1n.w).max()
        col = np.abs(pin.P.sum(axis=0) - mu2.w).max()
        print(f"{plan_w1(pin, pi):13.6f} {w1_1d(mu1n, mu1):15.6f} {row:11.1e} {col:11.1e}")


if __name__ == "__main__":
    main()
