"""Fixed-step simulation of the coordination flows.

The trigger predicates are evaluated once per integration step, after the
state update; an event fires at the step boundary, so the step size is also
the resolution of every event-time measurement.  Load-step disturbances
rebuild the coupling constant and force an immediate broadcast, since the
held gradient would otherwise refer to a stale demand.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DomainError, NumericError
from .problem import (AggregatorCoupling, NetworkProblem, boxes_to_arrays,
                      reference_optimizer)
from .dynamics import FlowKind, SupervisorSnapshot
from .triggers import TriggerParams, fired_mask
from .coordinator import (CoordinationMode, MessageStats, f17, initial_record,
                          process_step, summarize)

FEAS_TOL = 1e-9


@dataclass(frozen=True)
class Disturbance:
    """Additive change of the aggregator constant c at a given time."""

    time: float
    dc: float


@dataclass(frozen=True)
class SimConfig:
    flow: FlowKind
    lam: float
    sigma: float
    lipschitz: float
    hessian_bound: float
    x0: np.ndarray
    step: float = 1e-2
    horizon: float = 60.0
    zero_tol: float = 1e-12
    mode: CoordinationMode = CoordinationMode.SENSING
    disturbances: tuple = ()
    scheme: str = "euler"
    stop_tol: float = 1e-8
    record_lyapunov: bool = False

    def __post_init__(self):
        if self.step <= 0.0:
            raise ConfigError("step must be positive")
        if self.horizon <= 0.0:
            raise ConfigError("horizon must be positive")
        if self.scheme not in ("euler", "rk4"):
            raise ConfigError(f"unknown integrator scheme '{self.scheme}'")
        if self.stop_tol < 0.0:
            raise ConfigError("stop tolerance must be nonnegative")
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float))
        object.__setattr__(self, "disturbances",
                           tuple(sorted(self.disturbances, key=lambda d: d.time)))

    @property
    def trigger_params(self) -> TriggerParams:
        return TriggerParams(sigma=self.sigma, lam=self.lam,
                             lipschitz=self.lipschitz,
                             hessian_bound=self.hessian_bound,
                             zero_tol=self.zero_tol)


@dataclass(frozen=True)
class Trajectory:
    """Uniformly sampled run history."""

    times: np.ndarray
    states: np.ndarray
    objective: np.ndarray
    feasible: np.ndarray
    lyapunov: np.ndarray | None = None


@dataclass(frozen=True)
class SimResult:
    trajectory: Trajectory
    events: list
    stats: MessageStats
    problem_final: NetworkProblem
    config: SimConfig


def _rk4_step(fun, x, h):
    k1 = fun(x)
    k2 = fun(x + 0.5 * h * k1)
    k3 = fun(x + 0.5 * h * k2)
    k4 = fun(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def run(problem: NetworkProblem, cfg: SimConfig) -> SimResult:
    """Simulate one flow; returns the trajectory, event log and statistics.

    Terminates at the horizon or as soon as the residual norm drops below
    the stop tolerance.  Raises DomainError for an infeasible start of a
    constrained flow and NumericError if the state stops being finite.
    """
    n = problem.n
    x0 = cfg.x0
    if x0.shape != (n,):
        raise ConfigError(f"x0 must have shape ({n},), got {x0.shape}")
    constrained = cfg.flow.constrained
    event = cfg.flow.event_triggered
    if constrained:
        if problem.boxes is None:
            raise DomainError("constrained flow requires box constraints")
        if not problem.feasible(x0):
            raise DomainError("x(0) violates the box constraints; constrained "
                              "flows must start feasible")
    lo, hi = (None, None)
    if problem.boxes is not None:
        lo, hi = boxes_to_arrays(problem.boxes)

    n_steps = int(round(cfg.horizon / cfg.step))
    if n_steps < 1:
        raise ConfigError("horizon shorter than one step")
    lam = cfg.lam
    params = cfg.trigger_params

    times = cfg.step * np.arange(n_steps + 1)
    states = np.empty((n_steps + 1, n))
    objective = np.empty(n_steps + 1)
    feasible = np.ones(n_steps + 1, dtype=bool)
    lyap = np.empty(n_steps + 1) if cfg.record_lyapunov else None

    prob = problem
    x = x0.astype(float).copy()
    records = []
    snapshot = None
    if event:
        rec0 = initial_record(prob, x, cfg.mode)
        snapshot = rec0.snapshot
        records.append(rec0)

    opt_value = None
    if cfg.record_lyapunov:
        opt_value = prob.objective(reference_optimizer(prob))

    def sample(j, x_j):
        states[j] = x_j
        objective[j] = prob.objective(x_j)
        if lo is not None:
            feasible[j] = bool(np.all(x_j >= lo - FEAS_TOL) and np.all(x_j <= hi + FEAS_TOL))
        if lyap is not None:
            lyap[j] = objective[j] - opt_value

    sample(0, x)
    g_loc = prob.local_grad(x)
    pending = list(cfg.disturbances)
    end = n_steps

    for j in range(n_steps):
        t = times[j]
        while pending and pending[0].time <= t + 1e-12:
            d = pending.pop(0)
            if not isinstance(prob.coupling, AggregatorCoupling):
                raise DomainError("load-step disturbances require an aggregator coupling")
            prob = prob.with_coupling(prob.coupling.with_constant(prob.coupling.c + d.dc))
            if event:
                snapshot, rec = process_step(prob, t, x, None, cfg.mode, snapshot,
                                             force=True)
                records.append(rec)
            if cfg.record_lyapunov:
                opt_value = prob.objective(reference_optimizer(prob))

        # advance one step with the held (or fresh) coupling gradient
        if cfg.scheme == "euler":
            if event:
                z_dyn = g_loc + snapshot.held_gradient
            else:
                z_dyn = g_loc + prob.grad_coupling(x)
            if constrained:
                x_new = x + (np.clip(x - lam * z_dyn, lo, hi) - x) * cfg.step
            else:
                x_new = x - cfg.step * lam * z_dyn
        else:
            if event:
                held = snapshot.held_gradient
                def fun(y):
                    z = prob.local_grad(y) + held
                    if constrained:
                        return np.clip(y - lam * z, lo, hi) - y
                    return -lam * z
            else:
                def fun(y):
                    z = prob.local_grad(y) + prob.grad_coupling(y)
                    if constrained:
                        return np.clip(y - lam * z, lo, hi) - y
                    return -lam * z
            x_new = _rk4_step(fun, x, cfg.step)

        t_new = times[j + 1]
        if not np.all(np.isfinite(x_new)):
            raise NumericError(f"state became non-finite at t = {t_new:.6g}; "
                               "integration blew up")
        g_loc_new = prob.local_grad(x_new)

        if event:
            mask = fired_mask(x_new, snapshot.anchor_state, snapshot.held_gradient,
                              g_loc_new, params,
                              lo if constrained else None,
                              hi if constrained else None)
            if mask.any():
                snapshot, rec = process_step(prob, t_new, x_new, mask, cfg.mode,
                                             snapshot)
                records.append(rec)

        sample(j + 1, x_new)

        # residual with the currently held information
        if event:
            z_stop = g_loc_new + snapshot.held_gradient
        else:
            z_stop = g_loc_new + prob.grad_coupling(x_new)
        if constrained:
            z_stop = np.clip(x_new - lam * z_stop, lo, hi) - x_new
        x, g_loc = x_new, g_loc_new
        if float(np.linalg.norm(z_stop)) < cfg.stop_tol:
            end = j + 1
            break

    traj = Trajectory(times=times[: end + 1], states=states[: end + 1],
                      objective=objective[: end + 1], feasible=feasible[: end + 1],
                      lyapunov=None if lyap is None else lyap[: end + 1])
    stats = summarize(records, horizon=float(times[end]))
    return SimResult(trajectory=traj, events=records, stats=stats,
                     problem_final=prob, config=cfg)


def run_baseline(problem: NetworkProblem, cfg: SimConfig) -> Trajectory:
    """Same loop with the coupling gradient refreshed every step."""
    base = replace(cfg, flow=cfg.flow.continuous_counterpart)
    return run(problem, base).trajectory


# ---------------------------------------------------------------------------
# initial-condition sweeps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UniformBoxSampler:
    """Picklable sampler drawing uniformly from a box."""

    lower: np.ndarray
    upper: np.ndarray

    def __call__(self, rng) -> np.ndarray:
        return rng.uniform(np.asarray(self.lower, dtype=float),
                           np.asarray(self.upper, dtype=float))


@dataclass(frozen=True)
class SweepRun:
    index: int
    x0: np.ndarray
    stats: MessageStats | None
    error: str | None = None


@dataclass(frozen=True)
class SweepResult:
    runs: list
    count: int
    failures: int
    miet_mean: float | None
    miet_std: float | None
    updates_mean: float | None


def _sweep_worker(args):
    problem, cfg, x0 = args
    try:
        res = run(problem, replace(cfg, x0=x0))
        return res.stats, None
    except Exception as exc:  # propagate per-run, sweep continues
        return None, f"{type(exc).__name__}: {exc}"


def sweep(problem: NetworkProblem, cfg: SimConfig, sampler, count: int,
          seed: int, jobs: int = 1) -> SweepResult:
    """Run ``count`` simulations from seeded initial conditions.

    The sampler receives a per-run numpy Generator spawned from ``seed``, so
    results are reproducible regardless of ``jobs``.  Failed runs are
    reported by index and excluded from the aggregate.
    """
    if count < 1:
        raise ConfigError("sweep count must be >= 1")
    seqs = np.random.SeedSequence(seed).spawn(count)
    x0s = [np.asarray(sampler(np.random.default_rng(s)), dtype=float) for s in seqs]
    tasks = [(problem, cfg, x0) for x0 in x0s]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_sweep_worker, tasks))
    else:
        outcomes = [_sweep_worker(t) for t in tasks]

    runs = [SweepRun(index=i, x0=x0s[i], stats=s, error=e)
            for i, (s, e) in enumerate(outcomes)]
    ok = [r.stats for r in runs if r.stats is not None]
    miets = [s.min_interevent for s in ok if s.min_interevent is not None]
    return SweepResult(
        runs=runs,
        count=count,
        failures=sum(1 for r in runs if r.error is not None),
        miet_mean=float(np.mean(miets)) if miets else None,
        miet_std=float(np.std(miets)) if miets else None,
        updates_mean=float(np.mean([s.total_events for s in ok])) if ok else None,
    )


def sweep_to_dict(result: SweepResult) -> dict:
    from .coordinator import stats_to_dict
    return {
        "count": result.count,
        "failures": result.failures,
        "miet_mean": result.miet_mean,
        "miet_std": result.miet_std,
        "updates_mean": result.updates_mean,
        "runs": [
            {"index": r.index, "x0": r.x0.tolist(),
             "stats": None if r.stats is None else stats_to_dict(r.stats),
             "error": r.error}
            for r in result.runs
        ],
    }


# ---------------------------------------------------------------------------
# trajectory export
# ---------------------------------------------------------------------------

def write_trajectory_csv(traj: Trajectory, path) -> None:
    """Columns: t, x_1..x_n, objective, feasible (floats at 17 digits)."""
    n = traj.states.shape[1]
    header = "t," + ",".join(f"x_{i + 1}" for i in range(n)) + ",objective,feasible"
    with open(path, "w", newline="") as fh:
        fh.write(header + "\n")
        for j in range(traj.times.shape[0]):
            row = [f17(traj.times[j])]
            row.extend(f17(v) for v in traj.states[j])
            row.append(f17(traj.objective[j]))
            row.append("1" if traj.feasible[j] else "0")
            fh.write(",".join(row) + "\n")
