"""Command-line entry point.

Exit codes: 0 on success (and, for ``study --require``, on the requested
verdict), 1 when the study verdict falls short of ``--require``, 2 on solver
or file errors, 3 on configuration errors (bad flags or instance files; no
artifact is written in that case).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import instance_io
from .bilevel import (
    VERDICTS,
    BKOptions,
    ConvergenceRecord,
    StudyOptions,
    make_schedule,
    run_convergence_study,
    solve_bk_n,
    solve_ocp_convex,
)
from .errors import BilevelOTError, ConfigError, IoError
from .exact_ot import TransportPlan, monotone_plan_1d, plan_w1, solve_kp
from .gluing import transfer_plan
from .measure_core import DiscreteMeasure, Grid, w1_1d
from .reg_ot import SolverOptions, reg_objective, solve_reg

log = logging.getLogger(__name__)

CSV_HEADER = ["n", "gamma", "delta", "J", "feas_gap", "w1_drift", "mass", "ssn_iters"]
COMMANDS = ("kp", "kpreg", "bilevel", "ocp", "study", "glue-demo")


@dataclass
class RunConfig:
    command: str
    instance_path: str | None
    overrides: dict = field(default_factory=dict)
    seed: int = 0
    out_dir: str | None = None

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}", field="command")


# ---------------------------------------------------------------------------
# reports


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return "%.12g" % x


def _num(x):
    # JSON has no NaN
    if x is None or (isinstance(x, float) and not math.isfinite(x)):
        return None
    return x


def study_csv(record: ConvergenceRecord) -> str:
    failed = any(r.status != "OK" for r in record.rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER + (["status"] if failed else []))
    for r in record.rows:
        vals = [r.n, r.gamma, r.delta, r.J, r.feas_gap, r.w1_drift, r.mass, r.ssn_iters]
        row = [_fmt(v) for v in vals]
        w.writerow(row + ([r.status] if failed else []))
    return buf.getvalue()


def study_json(record: ConvergenceRecord) -> dict:
    rows = []
    for r in record.rows:
        rows.append(
            {
                "n": r.n,
                "gamma": r.gamma,
                "delta": r.delta,
                "J": _num(r.J),
                "feas_gap": _num(r.feas_gap),
                "w1_drift": _num(r.w1_drift),
                "mass": _num(r.mass),
                "ssn_iters": r.ssn_iters,
                "stationarity": _num(r.stationarity),
                "limit_w1": _num(r.limit_w1),
                "status": r.status,
                "error": r.error,
                "mu1": r.mu1.w.tolist() if r.mu1 is not None else None,
                "plan": r.plan.to_dict() if r.plan is not None else None,
            }
        )
    return {
        "verdict": record.verdict,
        "hypotheses": record.hypotheses,
        "oracle_value": _num(record.oracle_value),
        "notes": record.notes,
        "rows": rows,
    }


def _write_atomic(path: Path, text: str):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def emit_report(record: ConvergenceRecord, out_dir) -> list[Path]:
    """Write ``study.csv`` and ``study.json`` into ``out_dir`` (overwriting)."""
    if not record.rows:
        raise ValueError("empty record")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / "study.csv", out / "study.json"]
        _write_atomic(paths[0], study_csv(record))
        _write_atomic(paths[1], json.dumps(study_json(record), indent=1) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write report to {out}: {exc}") from exc
    return paths


def _write_text(out_dir, name, text) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        path = out / name
        _write_atomic(path, text)
    except OSError as exc:
        raise IoError(f"cannot write {name} to {out}: {exc}") from exc
    return path


def plan_csv(plan: TransportPlan) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["i", "j", "x_i", "y_j", "mass"])
    for i, j, x, y, m in plan.csv_rows():
        w.writerow([i, j, _fmt(x), _fmt(y), _fmt(m)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# subcommands


def _cmd_kp(cfg: RunConfig, out):
    mu1, mu2, c = instance_io.marginals(instance_io.read_json(cfg.instance_path))
    plan, value = solve_kp(c, mu1, mu2)
    out.write(f"value={_fmt(value)}\n")
    out.write(plan_csv(plan))
    if cfg.out_dir:
        _write_text(cfg.out_dir, "kp_plan.csv", plan_csv(plan))
    return 0


def _cmd_kpreg(cfg: RunConfig, out):
    doc = instance_io.read_json(cfg.instance_path)
    mu1, mu2, c = instance_io.marginals(doc)
    ov = cfg.overrides
    gamma = ov.get("gamma") or doc.get("gamma")
    if gamma is None:
        raise ConfigError("--gamma is required (flag or instance field)", field="gamma")
    opts = SolverOptions(tol=ov.get("tol", 1e-10), max_iter=ov.get("max_iter", 100), method=ov.get("method", "ssn"))
    sol = solve_reg(c, mu1, mu2, gamma, opts)
    summary = {
        "value": reg_objective(sol.plan, c, gamma),
        "iterations": sol.iterations,
        "residual_norm": sol.residual_norm,
        "nnz": sol.plan.nnz,
        "method": sol.method,
    }
    out.write(json.dumps(summary) + "\n")
    if ov.get("plan_csv"):
        path = Path(ov["plan_csv"])
        _write_text(path.parent if str(path.parent) else ".", path.name, plan_csv(sol.plan))
    return 0


def _bk_options(cfg):
    return BKOptions(seed=cfg.seed)


def _cmd_bilevel(cfg: RunConfig, out):
    doc = instance_io.read_json(cfg.instance_path)
    inst = instance_io.bilevel_instance(doc)
    gamma = cfg.overrides.get("gamma") or doc.get("gamma")
    if gamma is None:
        raise ConfigError("--gamma is required (flag or instance field)", field="gamma")
    delta = cfg.overrides.get("delta") or doc.get("delta") or min(inst.rho, gamma ** 0.25)
    if delta > inst.rho:
        raise ConfigError(f"delta={delta} exceeds rho={inst.rho}", field="delta")
    res = solve_bk_n(inst, gamma, delta, _bk_options(cfg))
    summary = {
        "J": res.J,
        "stationarity": res.stationarity,
        "gamma": gamma,
        "delta": delta,
        "plan_mass": res.plan.mass,
        "ssn_iters": res.ssn_iters,
        "mu1": res.mu1.w.tolist(),
    }
    out.write(json.dumps(summary) + "\n")
    if cfg.out_dir:
        summary["plan"] = res.plan.to_dict()
        _write_text(cfg.out_dir, "bilevel.json", json.dumps(summary, indent=1) + "\n")
    return 0


def _cmd_ocp(cfg: RunConfig, out):
    inst = instance_io.bilevel_instance(instance_io.read_json(cfg.instance_path))
    if inst.objective.variant != "OCP":
        raise ConfigError("ocp needs an OCP objective", field="objective.variant")
    res = solve_ocp_convex(inst)
    summary = {"J": res.J, "stationarity": res.stationarity, "iterations": res.iterations, "mu1": res.mu1.w.tolist()}
    out.write(json.dumps(summary) + "\n")
    if cfg.out_dir:
        summary["plan"] = res.plan.to_dict()
        _write_text(cfg.out_dir, "ocp.json", json.dumps(summary, indent=1) + "\n")
    return 0


def _cmd_study(cfg: RunConfig, out):
    doc = instance_io.read_json(cfg.instance_path)
    inst = instance_io.bilevel_instance(doc)
    ov = cfg.overrides
    params = {}
    for key in ("gamma0", "ratio", "n_max"):
        val = ov.get(key, doc.get(key))
        if val is None:
            raise ConfigError(f"--{key.replace('_', '-')} is required (flag or instance field)", field=key)
        params[key] = val
    try:
        sched = make_schedule(params["gamma0"], params["ratio"], int(params["n_max"]), 2, inst.rho)
    except (ValueError, BilevelOTError) as exc:
        raise ConfigError(f"schedule: {exc}", field="ratio") from exc
    require = ov.get("require")
    record = run_convergence_study(inst, sched, StudyOptions(bk=_bk_options(cfg)))
    paths = emit_report(record, cfg.out_dir or ".")
    ok = [r for r in record.rows if r.status == "OK"]
    out.write(f"rows={len(record.rows)} ok={len(ok)} report={paths[0]}\n")
    out.write(f"VERDICT={record.verdict}\n")
    failed = len(ok) < len(record.rows)
    if require is not None:
        rank = {"INCONCLUSIVE": 0, "FEASIBLE_LIMIT": 1, "OPTIMAL_LIMIT": 2}
        return 0 if rank[record.verdict] >= rank[require] else 1
    return 2 if failed else 0


def _cmd_glue_demo(cfg: RunConfig, out):
    rng = np.random.default_rng(cfg.seed)
    m = int(cfg.overrides.get("m") or 8)
    g1, g2 = Grid(0.0, 1.0, m), Grid(0.0, 1.0, m)
    a, an, b = (rng.random(m) + 0.05 for _ in range(3))
    mu1 = DiscreteMeasure(g1, a / a.sum())
    mu1n = DiscreteMeasure(g1, an / an.sum())
    mu2 = DiscreteMeasure(g2, b / b.sum())
    pi = monotone_plan_1d(mu1, mu2)
    pin = transfer_plan(mu1n, mu1, pi)
    lhs, rhs = plan_w1(pin, pi), w1_1d(mu1n, mu1)
    out.write(f"W1(pi_n, pi)={_fmt(lhs)} W1(mu1_n, mu1)={_fmt(rhs)} holds={lhs <= rhs + 1e-10}\n")
    return 0


HANDLERS = {
    "kp": _cmd_kp,
    "kpreg": _cmd_kpreg,
    "bilevel": _cmd_bilevel,
    "ocp": _cmd_ocp,
    "study": _cmd_study,
    "glue-demo": _cmd_glue_demo,
}


def run(config: RunConfig, out=None) -> int:
    """Execute one subcommand; returns the process exit code."""
    out = out or sys.stdout
    try:
        return HANDLERS[config.command](config, out)
    except ConfigError as exc:
        print(f"config error [{exc.field}]: {exc}", file=sys.stderr)
        return 3
    except (BilevelOTError, OSError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message, field="flags")


def _positive(text):
    try:
        val = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not val > 0:
        raise argparse.ArgumentTypeError(f"must be positive: {text!r}")
    return val


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bilevel-ot", description="Regularized optimal transport and bilevel experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, instance=True):
        if instance:
            sp.add_argument("--instance", required=True, help="instance JSON file")
        sp.add_argument("--seed", type=int, default=0, help="seed of the single random generator (default 0)")
        sp.add_argument("--out-dir", default=None, help="directory for report files")
        sp.add_argument("-v", "--verbose", action="store_true", help="log solver progress")
        return sp

    common(sub.add_parser("kp", help="exact Kantorovich problem between mu1 and mu2_d"))
    sp = common(sub.add_parser("kpreg", help="quadratically regularized Kantorovich problem"))
    sp.add_argument("--gamma", type=_positive)
    sp.add_argument("--tol", type=_positive, default=1e-10)
    sp.add_argument("--max-iter", type=int, default=100)
    sp.add_argument("--method", choices=["ssn", "pg"], default="ssn")
    sp.add_argument("--plan-csv", default=None, help="write the plan's nonzero entries here")
    sp = common(sub.add_parser("bilevel", help="regularized bilevel problem at one (gamma, delta)"))
    sp.add_argument("--gamma", type=_positive)
    sp.add_argument("--delta", type=_positive)
    common(sub.add_parser("ocp", help="convex-reformulation oracle of the control problem"))
    sp = common(sub.add_parser("study", help="convergence study along a (gamma, delta) schedule"))
    sp.add_argument("--gamma0", type=_positive)
    sp.add_argument("--ratio", type=_positive)
    sp.add_argument("--n-max", type=int)
    sp.add_argument("--require", choices=list(VERDICTS), default=None, help="exit 1 unless this verdict (or a stronger one) is reached")
    sp = common(sub.add_parser("glue-demo", help="contraction inequality on a seeded random instance"), instance=False)
    sp.add_argument("--m", type=int, default=8, help="cells per axis (<= 16)")
    return p


def parse_config(argv) -> RunConfig:
    args = build_parser().parse_args(argv)
    ns = vars(args).copy()
    overrides = {
        k: v
        for k, v in ns.items()
        if k not in ("command", "instance", "seed", "out_dir", "verbose") and v is not None
    }
    if ns.get("verbose"):
        logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    return RunConfig(args.command, ns.get("instance"), overrides, args.seed, args.out_dir)


def main(argv=None) -> int:
    try:
        cfg = parse_config(sys.argv[1:] if argv is None else argv)
    except ConfigError as exc:
        print(f"config error [{exc.field}]: {exc}", file=sys.stderr)
        return 3
    return run(cfg)
