"""Vector fields of the coordination flows.

Four flows are simulated: plain gradient descent and its projected variant,
each either with a continuously refreshed coupling gradient or with the
sample-and-hold value broadcast by the supervisor at the last event.  Local
gradients are always evaluated fresh; only the coupling gradient is held.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DimensionError, DomainError
from .problem import NetworkProblem, boxes_to_arrays


@dataclass(frozen=True)
class SupervisorSnapshot:
    """Coupling-gradient broadcast: the held vector, its anchor state and time."""

    anchor_state: np.ndarray
    held_gradient: np.ndarray
    time: float
    index: int

    @classmethod
    def take(cls, problem: NetworkProblem, x, t: float, k: int) -> "SupervisorSnapshot":
        x = np.asarray(x, dtype=float).copy()
        return cls(anchor_state=x, held_gradient=problem.grad_coupling(x),
                   time=float(t), index=int(k))


class FlowKind(Enum):
    CONTINUOUS_UNCONSTRAINED = "continuous-unconstrained"
    EVENT_UNCONSTRAINED = "event-unconstrained"
    CONTINUOUS_CONSTRAINED = "continuous-constrained"
    EVENT_CONSTRAINED = "event-constrained"

    @property
    def constrained(self) -> bool:
        return self in (FlowKind.CONTINUOUS_CONSTRAINED, FlowKind.EVENT_CONSTRAINED)

    @property
    def event_triggered(self) -> bool:
        return self in (FlowKind.EVENT_UNCONSTRAINED, FlowKind.EVENT_CONSTRAINED)

    @property
    def continuous_counterpart(self) -> "FlowKind":
        if self.constrained:
            return FlowKind.CONTINUOUS_CONSTRAINED
        return FlowKind.CONTINUOUS_UNCONSTRAINED


def _check_pair(p: NetworkProblem, x, snap: SupervisorSnapshot):
    x = np.asarray(x, dtype=float)
    if x.shape != (p.n,):
        raise DimensionError(f"state must have shape ({p.n},), got {x.shape}")
    if snap.held_gradient.shape != (p.n,):
        raise DimensionError("snapshot dimension does not match the problem")
    return x


def field_unconstrained_event(p: NetworkProblem, x, snap: SupervisorSnapshot,
                              lam: float) -> np.ndarray:
    """-lam * (grad f(x) + held coupling gradient)."""
    x = _check_pair(p, x, snap)
    return -lam * (p.local_grad(x) + snap.held_gradient)


def field_constrained_event(p: NetworkProblem, x, snap: SupervisorSnapshot,
                            lam: float) -> np.ndarray:
    """proj(x - lam * (grad f(x) + held)) - x, componentwise over the boxes."""
    if p.boxes is None:
        raise DomainError("constrained flow requires box constraints")
    x = _check_pair(p, x, snap)
    lo, hi = boxes_to_arrays(p.boxes)
    inner = x - lam * (p.local_grad(x) + snap.held_gradient)
    return np.clip(inner, lo, hi) - x


def field_continuous(p: NetworkProblem, x, lam: float, kind: FlowKind) -> np.ndarray:
    """Flow with the coupling gradient evaluated fresh at x."""
    x = np.asarray(x, dtype=float)
    if x.shape != (p.n,):
        raise DimensionError(f"state must have shape ({p.n},), got {x.shape}")
    g = p.local_grad(x) + p.grad_coupling(x)
    if kind.constrained:
        if p.boxes is None:
            raise DomainError("constrained flow requires box constraints")
        lo, hi = boxes_to_arrays(p.boxes)
        return np.clip(x - lam * g, lo, hi) - x
    return -lam * g


def flow_field(p: NetworkProblem, x, lam: float, kind: FlowKind,
               snap: SupervisorSnapshot | None = None) -> np.ndarray:
    """Dispatch to the field of the requested flow kind."""
    if kind.event_triggered:
        if snap is None:
            raise DomainError("event-triggered flows need a supervisor snapshot")
        if kind.constrained:
            return field_constrained_event(p, x, snap, lam)
        return field_unconstrained_event(p, x, snap, lam)
    return field_continuous(p, x, lam, kind)
