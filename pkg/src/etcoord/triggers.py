"""Decentralized trigger rules, inter-event time bounds, and the
self-triggered scheduler.

Each agent monitors the drift of its own state since the last broadcast
against a fraction sigma of its local residual.  Crossing the threshold
requests a supervisor update; the residual's "not yet converged" clause is
realized with a zero tolerance suited to floating point.

The closed-form lower bounds on the inter-event time are

    unconstrained:  tau  = (1 / (lam * H)) * ln(sigma * lam * H / L + 1)
    constrained:    tau' = ln(sigma / (lam * L') + 1)   valid for lam < 1 / H'

with L (L') the Lipschitz bound on the coupling gradient and H (H') the
curvature bound of the local costs over the relevant domain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.integrate import solve_ivp

from .errors import ConfigError, DomainError
from .problem import BoxConstraint, LocalCost
from .dynamics import SupervisorSnapshot


@dataclass(frozen=True)
class TriggerParams:
    """Parameters shared by every agent's trigger predicate."""

    sigma: float
    lam: float
    lipschitz: float
    hessian_bound: float
    zero_tol: float = 1e-12

    def __post_init__(self):
        if not 0.0 < self.sigma < 1.0:
            raise ConfigError(f"sigma must lie in (0, 1), got {self.sigma}")
        if self.lam <= 0.0:
            raise ConfigError(f"lam must be positive, got {self.lam}")
        if self.lipschitz < 0.0:
            raise ConfigError("lipschitz bound must be nonnegative")
        if self.hessian_bound < 0.0:
            raise ConfigError("hessian bound must be nonnegative")
        if self.zero_tol <= 0.0:
            raise ConfigError("zero tolerance must be positive")


# ---------------------------------------------------------------------------
# per-agent predicates
# ---------------------------------------------------------------------------

def check_unconstrained(x_i: float, anchor_i: float, held_i: float,
                        grad_i: float, params: TriggerParams) -> bool:
    """True when agent i should request an update (unconstrained rule).

    Fires on L * |x_i - anchor_i| >= sigma * |z_i| with z_i = grad_i + held_i,
    provided the residual is meaningfully nonzero.
    """
    z = grad_i + held_i
    if abs(z) <= params.zero_tol:
        return False
    return params.lipschitz * abs(x_i - anchor_i) >= params.sigma * abs(z)


def check_constrained(x_i: float, anchor_i: float, held_i: float, grad_i: float,
                      box: BoxConstraint, params: TriggerParams) -> bool:
    """Constrained rule: drift is weighed against the projected residual
    zbar_i = proj(x_i - lam * (grad_i + held_i)) - x_i.
    """
    zbar = float(box.project(x_i - params.lam * (grad_i + held_i))) - x_i
    if abs(zbar) <= params.zero_tol:
        return False
    return (params.lam * params.lipschitz * abs(x_i - anchor_i)
            >= params.sigma * abs(zbar))


def fired_mask(x, anchor, held, local_grad, params: TriggerParams,
               box_lower=None, box_upper=None) -> np.ndarray:
    """Vectorized predicate over all agents; the simulation hot path.

    Equivalent to calling check_unconstrained / check_constrained per agent.
    """
    x = np.asarray(x, dtype=float)
    drift = np.abs(x - anchor)
    z = local_grad + held
    if box_lower is None:
        return ((params.lipschitz * drift >= params.sigma * np.abs(z))
                & (np.abs(z) > params.zero_tol))
    zbar = np.clip(x - params.lam * z, box_lower, box_upper) - x
    return ((params.lam * params.lipschitz * drift >= params.sigma * np.abs(zbar))
            & (np.abs(zbar) > params.zero_tol))


# ---------------------------------------------------------------------------
# inter-event time bounds
# ---------------------------------------------------------------------------

def miet_unconstrained(params: TriggerParams) -> float:
    """(1/(lam H)) * ln(sigma lam H / L + 1); requires H > 0 and L > 0."""
    if params.hessian_bound <= 0.0:
        raise DomainError("formula undefined for H <= 0; "
                          "use miet_unconstrained_affine for the H -> 0 limit")
    if params.lipschitz <= 0.0:
        raise DomainError("formula undefined for L <= 0 (no coupling, no events)")
    a = params.lam * params.hessian_bound
    return math.log(params.sigma * a / params.lipschitz + 1.0) / a


def miet_unconstrained_affine(params: TriggerParams) -> float:
    """H -> 0 limit of the unconstrained bound: sigma / L (all-affine costs)."""
    if params.lipschitz <= 0.0:
        raise DomainError("limit undefined for L <= 0 (no coupling, no events)")
    return params.sigma / params.lipschitz


def miet_constrained(params: TriggerParams) -> float:
    """ln(sigma / (lam L) + 1); valid only for lam < 1 / H.

    Outside that range the trigger may still be well behaved, but the bound
    is not guaranteed, so the precondition is enforced.
    """
    if params.hessian_bound > 0.0 and params.lam >= 1.0 / params.hessian_bound:
        raise DomainError(
            f"constrained bound requires lam < 1/H = {1.0 / params.hessian_bound:.6g}, "
            f"got lam = {params.lam}")
    if params.lipschitz <= 0.0:
        raise DomainError("formula undefined for L <= 0 (no coupling, no events)")
    return math.log(params.sigma / (params.lam * params.lipschitz) + 1.0)


# ---------------------------------------------------------------------------
# self-triggered scheduler
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IntegrationConfig:
    """How an agent solves its own scalar closed-loop dynamics.

    ``scheme`` "euler" / "rk4" march on a fixed grid and report the first
    grid time whose predicate fires, matching the simulator's semantics;
    "rk45" uses adaptive integration with event localization for
    near-analytic crossing times.
    """

    scheme: str = "rk45"
    step: float = 1e-2
    horizon: float = 60.0
    rtol: float = 1e-10
    atol: float = 1e-12

    def __post_init__(self):
        if self.scheme not in ("euler", "rk4", "rk45"):
            raise ConfigError(f"unknown integration scheme '{self.scheme}'")
        if self.step <= 0.0 or self.horizon <= 0.0:
            raise ConfigError("step and horizon must be positive")


class ScheduledEvent(NamedTuple):
    time: float
    truncated: bool


def self_triggered_next(cost: LocalCost, i: int, snap: SupervisorSnapshot,
                        params: TriggerParams, config: IntegrationConfig,
                        box: BoxConstraint | None = None) -> ScheduledEvent:
    """Agent i's next request time, computed from the snapshot alone.

    Integrates the agent's scalar dynamics from its anchor component and
    returns the first time the trigger condition holds.  Returns +inf when
    the residual dies out below the zero tolerance first (the agent never
    schedules), and the horizon with ``truncated=True`` when no crossing is
    found within it.
    """
    x0 = float(snap.anchor_state[i])
    held = float(snap.held_gradient[i])
    t0 = float(snap.time)
    lam, sig, L, tol = params.lam, params.sigma, params.lipschitz, params.zero_tol

    def residual(x):
        z = float(cost.grad(x)) + held
        if box is None:
            return z
        return float(box.project(x - lam * z)) - x

    def velocity(x):
        if box is None:
            return -lam * (float(cost.grad(x)) + held)
        return residual(x)

    def gap(x):
        # positive before the crossing, zero at it
        drift = abs(x - x0)
        if box is None:
            return sig * abs(residual(x)) - L * drift
        return sig * abs(residual(x)) - lam * L * drift

    if abs(residual(x0)) <= tol:
        return ScheduledEvent(math.inf, False)

    if config.scheme in ("euler", "rk4"):
        h = config.step
        n_steps = int(round(config.horizon / h))
        x = x0
        for j in range(1, n_steps + 1):
            if config.scheme == "euler":
                x = x + h * velocity(x)
            else:
                k1 = velocity(x)
                k2 = velocity(x + 0.5 * h * k1)
                k3 = velocity(x + 0.5 * h * k2)
                k4 = velocity(x + h * k3)
                x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            r = residual(x)
            if abs(r) > tol and gap(x) <= 0.0:
                return ScheduledEvent(t0 + j * h, False)
            if abs(r) <= tol:
                return ScheduledEvent(math.inf, False)
        return ScheduledEvent(t0 + config.horizon, True)

    def crossing_event(t, y):
        return gap(float(y[0]))

    crossing_event.terminal = True
    crossing_event.direction = -1

    def dead_event(t, y):
        return abs(residual(float(y[0]))) - tol

    dead_event.terminal = True
    dead_event.direction = -1

    sol = solve_ivp(lambda t, y: [velocity(float(y[0]))], (t0, t0 + config.horizon),
                    [x0], events=[crossing_event, dead_event],
                    rtol=config.rtol, atol=config.atol,
                    max_step=max(config.horizon / 64.0, 10 * config.step))
    crossed = sol.t_events[0]
    died = sol.t_events[1]
    if crossed.size and (not died.size or crossed[0] <= died[0]):
        return ScheduledEvent(float(crossed[0]), False)
    if died.size:
        return ScheduledEvent(math.inf, False)
    return ScheduledEvent(t0 + config.horizon, True)
