"""Post-hoc verification of simulated runs.

Each check returns pass/fail/skipped together with its worst-case numeric
margin, so a report never hides how close a run came to violating a
property.  The audits re-derive everything from the recorded trajectory and
event log; nothing is trusted from the simulation loop itself.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .dynamics import FlowKind
from .problem import NetworkProblem, boxes_to_arrays
from .simulate import FEAS_TOL, SimConfig, Trajectory
from .triggers import miet_constrained, miet_unconstrained, miet_unconstrained_affine

DESCENT_SLACK_FACTOR = 10.0  # times step^2, covers Euler truncation error
RATIO_TOL = 1e-6
CONVERGENCE_TOL = 1e-3


@dataclass(frozen=True)
class CheckResult:
    name: str
    status: str  # "pass" | "fail" | "skipped"
    margin: float | None = None
    tolerance: float | None = None
    detail: str = ""


@dataclass(frozen=True)
class VerificationReport:
    checks: dict

    @property
    def all_pass(self) -> bool:
        return all(c.status != "fail" for c in self.checks.values())

    def to_dict(self) -> dict:
        return {
            "all_pass": self.all_pass,
            "checks": {
                name: {"status": c.status, "margin": c.margin,
                       "tolerance": c.tolerance, "detail": c.detail}
                for name, c in self.checks.items()
            },
        }

    def format_text(self) -> str:
        lines = []
        for name, c in self.checks.items():
            extra = ""
            if c.margin is not None:
                extra = f" (worst margin {c.margin:.3e}, tolerance {c.tolerance:.3e})"
            if c.detail and c.status == "skipped":
                extra = f" ({c.detail})"
            lines.append(f"{name}: {c.status.upper()}{extra}")
        lines.append(f"overall: {'PASS' if self.all_pass else 'FAIL'}")
        return "\n".join(lines)


def _forced_indices(records):
    """Event-log indices of broadcasts nobody requested (disturbances)."""
    return [i for i, r in enumerate(records) if not r.initiators and r.index > 0]


def _check_descent(traj: Trajectory, records, step: float) -> CheckResult:
    if traj.times.shape[0] < 2:
        return CheckResult("monotone_descent", "skipped", detail="fewer than 2 samples")
    slack = DESCENT_SLACK_FACTOR * step * step
    diffs = np.diff(traj.objective)
    # a forced refresh changes the objective function itself; the diff
    # spanning it compares apples to oranges
    forced_times = [records[i].time for i in _forced_indices(records)]
    for t in forced_times:
        j = int(np.searchsorted(traj.times, t))
        if 0 <= j < diffs.shape[0]:
            diffs[j] = -np.inf
    worst = float(np.max(diffs)) if diffs.size else 0.0
    status = "pass" if worst <= slack else "fail"
    return CheckResult("monotone_descent", status, margin=worst, tolerance=slack)


def _check_feasibility(traj: Trajectory, problem: NetworkProblem,
                       flow: FlowKind) -> CheckResult:
    if problem.boxes is None or not flow.constrained:
        return CheckResult("feasibility", "skipped",
                           detail="no boxes or unconstrained flow")
    lo, hi = boxes_to_arrays(problem.boxes)
    viol = np.maximum(lo - traj.states, traj.states - hi)
    worst = float(np.max(viol))
    status = "pass" if worst <= FEAS_TOL else "fail"
    return CheckResult("feasibility", status, margin=worst, tolerance=FEAS_TOL)


def _check_miet(records, cfg: SimConfig) -> CheckResult:
    if not cfg.flow.event_triggered:
        return CheckResult("miet", "skipped", detail="continuous flow")
    params = cfg.trigger_params
    if params.lipschitz <= 0.0:
        return CheckResult("miet", "skipped", detail="zero coupling bound")
    if cfg.flow.constrained:
        if params.hessian_bound > 0.0 and params.lam >= 1.0 / params.hessian_bound:
            return CheckResult("miet", "skipped",
                               detail="lam >= 1/H, bound not guaranteed")
        bound = miet_constrained(params)
    else:
        if params.hessian_bound > 0.0:
            bound = miet_unconstrained(params)
        else:
            bound = miet_unconstrained_affine(params)
    # disturbance-forced refreshes are not governed by the trigger; gaps
    # ending at one are excluded
    gaps = []
    for prev, cur in zip(records, records[1:]):
        if cur.initiators:
            gaps.append(cur.time - prev.time)
    if not gaps:
        return CheckResult("miet", "skipped", detail="fewer than 2 trigger events")
    floor = bound - cfg.step
    worst = float(np.min(gaps)) - floor
    status = "pass" if worst >= 0.0 else "fail"
    return CheckResult("miet", status, margin=worst, tolerance=floor,
                       detail=f"formula bound {bound:.6g}")


def _check_ratio_bound(traj: Trajectory, records, problem: NetworkProblem,
                       cfg: SimConfig) -> CheckResult:
    if cfg.flow is not FlowKind.EVENT_UNCONSTRAINED:
        return CheckResult("ratio_bound", "skipped",
                           detail="audit applies to the unconstrained event flow")
    if not problem.constant_local_hessian:
        return CheckResult("ratio_bound", "skipped",
                           detail="needs exact curvature (quadratic costs)")
    params = cfg.trigger_params
    H = params.hessian_bound
    if H <= 0.0 or not records:
        return CheckResult("ratio_bound", "skipped", detail="needs H > 0 and events")
    a = params.lam * H
    worst = -math.inf
    bounds_t = traj.times
    for rec, nxt in zip(records, list(records[1:]) + [None]):
        t_end = bounds_t[-1] if nxt is None else nxt.time
        sel = (bounds_t > rec.time + 1e-15) & (bounds_t < t_end - 1e-15)
        if not np.any(sel):
            continue
        xs = traj.states[sel]
        dts = bounds_t[sel] - rec.time
        z0 = problem.local_grad(rec.snapshot.anchor_state) + rec.snapshot.held_gradient
        live = np.abs(z0) > params.zero_tol
        if not live.any():
            continue
        if problem._bank is not None:
            from numpy.polynomial import polynomial as npoly
            grads = npoly.polyval(xs, problem._bank[1], tensor=False)
        else:
            grads = np.array([problem.local_grad(row) for row in xs])
        z = grads + rec.snapshot.held_gradient
        drift = np.abs(xs - rec.snapshot.anchor_state)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(np.abs(z) > 0, drift / np.abs(z), np.inf)
        bound = ((np.exp(a * dts) - 1.0) / a)[:, None]
        excess = (ratio - bound)[:, live]
        if excess.size:
            worst = max(worst, float(np.max(excess)))
    if worst == -math.inf:
        return CheckResult("ratio_bound", "skipped", detail="no inter-event samples")
    status = "pass" if worst <= RATIO_TOL else "fail"
    return CheckResult("ratio_bound", status, margin=worst, tolerance=RATIO_TOL)


def _check_convergence(traj: Trajectory, oracle_x) -> CheckResult:
    if oracle_x is None:
        return CheckResult("convergence", "skipped", detail="no oracle provided")
    err = float(np.linalg.norm(traj.states[-1] - np.asarray(oracle_x, dtype=float)))
    status = "pass" if err <= CONVERGENCE_TOL else "fail"
    return CheckResult("convergence", status, margin=err, tolerance=CONVERGENCE_TOL)


def verify(traj: Trajectory, records, problem: NetworkProblem, cfg: SimConfig,
           oracle_x=None) -> VerificationReport:
    """Audit a run against the descent, feasibility, inter-event, ratio and
    convergence properties.  Deterministic: identical inputs give identical
    reports."""
    checks = {}
    for c in (
        _check_descent(traj, records, cfg.step),
        _check_feasibility(traj, problem, cfg.flow),
        _check_miet(records, cfg),
        _check_ratio_bound(traj, records, problem, cfg),
        _check_convergence(traj, oracle_x),
    ):
        checks[c.name] = c
    return VerificationReport(checks=checks)


def interevent_histogram(records, bins=20):
    """Histogram (counts, edges) of consecutive event gaps; empty with < 2."""
    times = [r.time for r in records]
    if len(times) < 2:
        return np.array([], dtype=float), np.array([], dtype=float)
    gaps = np.diff(times)
    counts, edges = np.histogram(gaps, bins=bins)
    return counts.astype(float), edges


def write_report_json(report: VerificationReport, path) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
