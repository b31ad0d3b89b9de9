"""Regularized bilevel solutions of the 1-D control problem along a schedule.

Run with ``python3 demos/03_convergence_study.py [n_max]`` (default 4, about
half a minute; 6 reproduces the full study).  The objective tail approaches
the convex-reformulation oracle, while the plan tracks the monotone coupling
of its own smoothed marginals.  Its distance to the coupling of the raw
marginals shrinks only like delta.
"""

import sys
from pathlib import Path

from bilevel_ot import make_schedule, monotone_plan_1d, mollify_shift, plan_w1, run_convergence_study
from bilevel_ot.instance_io import bilevel_instance, read_json

INSTANCE = Path(__file__).resolve().parents[1] / "instances" / "ocp.json"


def main(n_max=4):
    doc = read_json(INSTANCE)
    inst = bilevel_instance(doc)
    # d = 2: the plan lives on the product of two intervals
    sched = make_schedule(doc["gamma0"], doc["ratio"], n_max, 2, inst.rho)
    rec = run_convergence_study(inst, sched)
    print(f"oracle J* = {rec.oracle_value:.6e}, verdict {rec.verdict}")
    print(f"{'n':>2} {'gamma':>9} {'delta':>7} {'J - J*':>10} {'feas_gap':>10} {'W1 raw':>8} {'W1 smoothed':>12}")
    for r in rec.ok_rows:
        smooth = monotone_plan_1d(
            mollify_shift(r.mu1, r.delta).normalize(), mollify_shift(inst.mu2_d, r.delta).normalize()
        )
        w1s = plan_w1(r.plan.normalize(), smooth)
        print(
            f"{r.n:2d} {r.gamma:9.2e} {r.delta:7.4f} {r.J - rec.oracle_value:10.2e} "
            f"{r.feas_gap:10.2e} {r.limit_w1:8.4f} {w1s:12.2e}"
        )


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 4)
