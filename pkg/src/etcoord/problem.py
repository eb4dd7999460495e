"""Problem data for agent-supervisor network optimization.

A network of ``n`` agents minimizes ``sum_i f_i(x_i) + g(x)`` over a box (or
all of R^n).  The local costs ``f_i`` are scalar, twice differentiable and
private to each agent; the coupling ``g`` needs network-wide information and
is served by a supervisor.  This module holds the cost representations, box
projections, the curvature/Lipschitz bounds the trigger rules consume, and an
independent reference optimizer used as a test oracle.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import polynomial as npoly

from .errors import ConfigError, DimensionError, DomainError, NumericError

# Fixed inner step used to define the stationarity residual of the oracle:
# residual(x) = || proj(x - RESIDUAL_STEP * grad(x)) - x ||.
RESIDUAL_STEP = 1e-2


def _as_vector(x, n, what="x"):
    x = np.asarray(x, dtype=float)
    if x.shape != (n,):
        raise DimensionError(f"{what} must have shape ({n},), got {x.shape}")
    return x


# ---------------------------------------------------------------------------
# local costs
# ---------------------------------------------------------------------------

class LocalCost:
    """Scalar cost of a single agent.

    Implementations provide the value and its first two derivatives; all
    three accept scalars or numpy arrays.  ``has_constant_hess`` lets bound
    estimation treat sampled maxima as exact.
    """

    has_constant_hess = False

    def value(self, x):
        raise NotImplementedError

    def grad(self, x):
        raise NotImplementedError

    def hess(self, x):
        raise NotImplementedError


class PolynomialCost(LocalCost):
    """Polynomial cost with ascending coefficients [c0, c1, c2, ...]."""

    def __init__(self, coeffs):
        c = np.atleast_1d(np.asarray(coeffs, dtype=float))
        if c.ndim != 1 or c.size < 1:
            raise ConfigError("polynomial coefficients must be a 1-d sequence")
        if not np.all(np.isfinite(c)):
            raise ConfigError("polynomial coefficients must be finite")
        self.coeffs = c
        self._dc = npoly.polyder(c) if c.size > 1 else np.zeros(1)
        self._ddc = npoly.polyder(c, 2) if c.size > 2 else np.zeros(1)

    @property
    def degree(self) -> int:
        return self.coeffs.size - 1

    @property
    def has_constant_hess(self) -> bool:
        return self.coeffs.size <= 3

    def value(self, x):
        return npoly.polyval(x, self.coeffs)

    def grad(self, x):
        return npoly.polyval(x, self._dc)

    def hess(self, x):
        return npoly.polyval(x, self._ddc)

    def is_convex_on(self, lower: float, upper: float, samples: int = 101) -> bool:
        """Sampled convexity check on [lower, upper]."""
        ts = np.linspace(lower, upper, samples)
        return bool(np.all(self.hess(ts) >= -1e-12))

    def __repr__(self):
        return f"PolynomialCost({self.coeffs.tolist()})"

    def __eq__(self, other):
        return isinstance(other, PolynomialCost) and np.array_equal(self.coeffs, other.coeffs)


# ---------------------------------------------------------------------------
# coupling costs
# ---------------------------------------------------------------------------

class CouplingCost:
    """Network-wide cost g(x) served by the supervisor."""

    def value(self, x) -> float:
        raise NotImplementedError

    def grad(self, x) -> np.ndarray:
        raise NotImplementedError

    def hess(self, x) -> np.ndarray:
        raise NotImplementedError

    def as_quadratic(self, n):
        """Return (Q, q) with grad(x) = Q x + q when g is quadratic, else None."""
        return None

    def lipschitz_grad(self, n, lower, upper, samples):
        """Bound on the Lipschitz constant of grad g over the box [lower, upper].

        Returns (bound, exact); ``exact`` is False when the bound came from
        sampling a non-constant quantity and should be inflated by the caller.
        """
        raise NotImplementedError


class QuadraticCoupling(CouplingCost):
    """g(x) = x'Qx/2 + q'x with Q symmetric positive semidefinite."""

    def __init__(self, Q, q=None):
        Q = np.asarray(Q, dtype=float)
        if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
            raise ConfigError("Q must be a square matrix")
        if not np.all(np.isfinite(Q)):
            raise ConfigError("Q must be finite")
        if not np.allclose(Q, Q.T, atol=1e-9):
            raise ConfigError("Q must be symmetric")
        self.Q = (Q + Q.T) / 2.0
        n = Q.shape[0]
        self.q = np.zeros(n) if q is None else _as_vector(q, n, "q")
        if n > 0:
            lo = float(np.linalg.eigvalsh(self.Q)[0])
            if lo < -1e-8:
                raise ConfigError(f"Q must be positive semidefinite (min eig {lo:.3e})")

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    def value(self, x) -> float:
        x = _as_vector(x, self.n)
        return float(0.5 * x @ self.Q @ x + self.q @ x)

    def grad(self, x) -> np.ndarray:
        x = _as_vector(x, self.n)
        return self.Q @ x + self.q

    def hess(self, x) -> np.ndarray:
        return self.Q.copy()

    def as_quadratic(self, n):
        if n != self.n:
            raise DimensionError(f"coupling is {self.n}-dimensional, problem has n={n}")
        return self.Q, self.q

    def lipschitz_grad(self, n, lower, upper, samples):
        # Exact: the gradient map is linear with Jacobian Q.
        return float(max(np.max(np.linalg.eigvalsh(self.Q)), 0.0)), True


class AggregatorCoupling(CouplingCost):
    """g(x) = f0(c - sum(x)): a shared resource priced at the residual demand.

    Every component of the gradient equals -f0'(c - sum(x)), so one broadcast
    value serves all agents.
    """

    def __init__(self, f0: LocalCost, c: float):
        if not isinstance(f0, LocalCost):
            raise ConfigError("f0 must be a LocalCost")
        c = float(c)
        if not np.isfinite(c):
            raise ConfigError("aggregator constant c must be finite")
        self.f0 = f0
        self.c = c

    def residual(self, x) -> float:
        return self.c - float(np.sum(x))

    def value(self, x) -> float:
        return float(self.f0.value(self.residual(x)))

    def grad(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.full(x.shape[0], -float(self.f0.grad(self.residual(x))))

    def hess(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        n = x.shape[0]
        return float(self.f0.hess(self.residual(x))) * np.ones((n, n))

    def with_constant(self, c: float) -> "AggregatorCoupling":
        return AggregatorCoupling(self.f0, c)

    def as_quadratic(self, n):
        if isinstance(self.f0, PolynomialCost) and self.f0.degree <= 2:
            d1 = float(self.f0.grad(0.0))
            d2 = float(self.f0.hess(0.0))
            Q = d2 * np.ones((n, n))
            q = -(d2 * self.c + d1) * np.ones(n)
            return Q, q
        return None

    def lipschitz_grad(self, n, lower, upper, samples):
        # The Jacobian of grad g is f0''(c - sum(x)) * ones(n, n), whose
        # spectral norm is n * |f0''|; maximize |f0''| over the induced
        # interval of c - sum(x).
        y_lo = self.c - float(np.sum(upper))
        y_hi = self.c - float(np.sum(lower))
        ys = np.linspace(y_lo, y_hi, samples)
        vals = np.abs(np.asarray([float(self.f0.hess(y)) for y in ys]))
        if not np.all(np.isfinite(vals)):
            raise NumericError("non-finite coupling curvature samples")
        exact = bool(np.ptp(vals) == 0.0)
        return n * float(np.max(vals)), exact


def zero_coupling(n: int) -> QuadraticCoupling:
    """Coupling that is identically zero (fully separable problem)."""
    return QuadraticCoupling(np.zeros((n, n)))


# ---------------------------------------------------------------------------
# boxes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoxConstraint:
    """Closed interval [lower, upper] constraining one agent's decision."""

    lower: float
    upper: float

    def __post_init__(self):
        if not (np.isfinite(self.lower) and np.isfinite(self.upper)):
            raise ConfigError("box bounds must be finite (compact constraint sets)")
        if self.lower > self.upper:
            raise ConfigError(f"empty box: [{self.lower}, {self.upper}]")

    def project(self, y):
        return np.clip(y, self.lower, self.upper)

    def contains(self, y, tol: float = 0.0) -> bool:
        return bool(self.lower - tol <= y <= self.upper + tol)


def project_box(box: BoxConstraint, y: float) -> float:
    """Nearest point of the box to y (scalar clamp)."""
    return float(box.project(y))


def boxes_to_arrays(boxes):
    lo = np.array([b.lower for b in boxes], dtype=float)
    hi = np.array([b.upper for b in boxes], dtype=float)
    return lo, hi


def project_all(boxes, y) -> np.ndarray:
    """Componentwise projection onto the product of boxes."""
    y = _as_vector(y, len(boxes), "y")
    lo, hi = boxes_to_arrays(boxes)
    return np.clip(y, lo, hi)


def box_active_set(boxes, x, tol: float = 1e-7):
    """Indices whose component sits at a bound of its box (within tol)."""
    x = _as_vector(x, len(boxes), "x")
    out = []
    for i, b in enumerate(boxes):
        if x[i] <= b.lower + tol or x[i] >= b.upper - tol:
            out.append(i)
    return out


# ---------------------------------------------------------------------------
# network problem
# ---------------------------------------------------------------------------

class NetworkProblem:
    """Immutable bundle of local costs, coupling cost and optional boxes.

    Safe to share read-only across concurrent simulation runs.  When every
    local cost is polynomial the per-agent evaluations are vectorized through
    a stacked coefficient bank.
    """

    def __init__(self, costs, coupling: CouplingCost, boxes=None):
        costs = list(costs)
        if len(costs) < 1:
            raise ConfigError("need at least one agent")
        for f in costs:
            if not isinstance(f, LocalCost):
                raise ConfigError("costs must be LocalCost instances")
        if not isinstance(coupling, CouplingCost):
            raise ConfigError("coupling must be a CouplingCost")
        if isinstance(coupling, QuadraticCoupling) and coupling.n != len(costs):
            raise DimensionError(
                f"coupling dimension {coupling.n} != agent count {len(costs)}")
        if boxes is not None:
            boxes = list(boxes)
            if len(boxes) != len(costs):
                raise DimensionError("boxes must match the agent count")
            for b in boxes:
                if not isinstance(b, BoxConstraint):
                    raise ConfigError("boxes must be BoxConstraint instances")
        self.costs = costs
        self.coupling = coupling
        self.boxes = boxes
        self._bank = None
        if all(isinstance(f, PolynomialCost) for f in costs):
            deg = max(f.coeffs.size for f in costs)
            C = np.zeros((deg, len(costs)))
            for i, f in enumerate(costs):
                C[: f.coeffs.size, i] = f.coeffs
            dC = npoly.polyder(C, axis=0) if deg > 1 else np.zeros((1, len(costs)))
            ddC = npoly.polyder(C, 2, axis=0) if deg > 2 else np.zeros((1, len(costs)))
            self._bank = (C, dC, ddC)

    @property
    def n(self) -> int:
        return len(self.costs)

    @property
    def constant_local_hessian(self) -> bool:
        return all(f.has_constant_hess for f in self.costs)

    def _check(self, x):
        return _as_vector(x, self.n)

    # -- evaluations --------------------------------------------------------

    def local_value(self, x) -> float:
        """sum_i f_i(x_i)."""
        x = self._check(x)
        if self._bank is not None:
            return float(np.sum(npoly.polyval(x, self._bank[0], tensor=False)))
        return float(sum(f.value(xi) for f, xi in zip(self.costs, x)))

    def local_grad(self, x) -> np.ndarray:
        """Vector of per-agent derivatives (f_1'(x_1), ..., f_n'(x_n))."""
        x = self._check(x)
        if self._bank is not None:
            return np.atleast_1d(npoly.polyval(x, self._bank[1], tensor=False))
        return np.array([float(f.grad(xi)) for f, xi in zip(self.costs, x)])

    def local_hess(self, x) -> np.ndarray:
        x = self._check(x)
        if self._bank is not None:
            return np.atleast_1d(npoly.polyval(x, self._bank[2], tensor=False))
        return np.array([float(f.hess(xi)) for f, xi in zip(self.costs, x)])

    def grad_local(self, i: int, x_i: float) -> float:
        """Derivative of agent i's cost at x_i (0-based index)."""
        if not 0 <= i < self.n:
            raise DimensionError(f"agent index {i} out of range [0, {self.n})")
        return float(self.costs[i].grad(x_i))

    def hess_local(self, i: int, x_i: float) -> float:
        if not 0 <= i < self.n:
            raise DimensionError(f"agent index {i} out of range [0, {self.n})")
        return float(self.costs[i].hess(x_i))

    def grad_coupling(self, x) -> np.ndarray:
        x = self._check(x)
        return np.asarray(self.coupling.grad(x), dtype=float)

    def objective(self, x) -> float:
        """f(x) + g(x)."""
        x = self._check(x)
        return self.local_value(x) + self.coupling.value(x)

    def full_grad(self, x) -> np.ndarray:
        x = self._check(x)
        return self.local_grad(x) + self.grad_coupling(x)

    # -- feasible set --------------------------------------------------------

    def box_arrays(self):
        if self.boxes is None:
            return None
        return boxes_to_arrays(self.boxes)

    def project(self, x) -> np.ndarray:
        x = self._check(x)
        if self.boxes is None:
            return x.copy()
        lo, hi = boxes_to_arrays(self.boxes)
        return np.clip(x, lo, hi)

    def feasible(self, x, tol: float = 0.0) -> bool:
        x = self._check(x)
        if self.boxes is None:
            return True
        lo, hi = boxes_to_arrays(self.boxes)
        return bool(np.all(x >= lo - tol) and np.all(x <= hi + tol))

    # -- structure -----------------------------------------------------------

    def as_quadratic_gradient(self):
        """Return (A, b) with full_grad(x) = A x + b for all-quadratic problems."""
        quad = self.coupling.as_quadratic(self.n)
        if quad is None:
            return None
        if not all(isinstance(f, PolynomialCost) and f.degree <= 2 for f in self.costs):
            return None
        Q, q = quad
        D = np.diag([float(f.hess(0.0)) for f in self.costs])
        b = np.array([float(f.grad(0.0)) for f in self.costs])
        return D + Q, b + q

    def with_coupling(self, coupling: CouplingCost) -> "NetworkProblem":
        return NetworkProblem(self.costs, coupling, self.boxes)


# ---------------------------------------------------------------------------
# curvature / Lipschitz bounds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoundEstimates:
    """Bounds consumed by the trigger rules, valid over the stated box.

    ``lipschitz_grad_g`` bounds the variation of grad g; ``hessian_bound``
    dominates every local second derivative on the box.  Supplying a box that
    contains all states the run will visit is the caller's responsibility.
    """

    lipschitz_grad_g: float
    hessian_bound: float
    domain_lower: np.ndarray
    domain_upper: np.ndarray


def estimate_bounds(p: NetworkProblem, lower, upper, samples: int = 201,
                    inflation: float = 1.1) -> BoundEstimates:
    """Estimate the coupling-gradient Lipschitz constant and the local
    curvature bound over the box [lower, upper].

    Quantities that are provably constant (quadratic couplings, quadratic
    local costs) are computed exactly; sampled maxima of non-constant
    quantities are multiplied by ``inflation`` to hedge the discretization.
    """
    lower = _as_vector(lower, p.n, "lower")
    upper = _as_vector(upper, p.n, "upper")
    if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
        raise ConfigError("bound-estimation domain must be finite")
    if np.any(lower > upper):
        raise DomainError("empty bound-estimation domain (lower > upper)")
    if samples < 2:
        raise ConfigError("need at least 2 samples")
    if inflation < 1.0:
        raise ConfigError("inflation factor must be >= 1")

    lip, exact = p.coupling.lipschitz_grad(p.n, lower, upper, samples)
    if not exact:
        lip *= inflation

    hbound = 0.0
    for i, f in enumerate(p.costs):
        ts = np.linspace(lower[i], upper[i], samples)
        vals = np.asarray([float(f.hess(t)) for t in ts])
        if not np.all(np.isfinite(vals)):
            raise NumericError(f"non-finite curvature samples for agent {i}")
        hmax = float(np.max(vals))
        if np.ptp(vals) != 0.0 and hmax > 0.0:
            hmax *= inflation
        hbound = max(hbound, hmax)

    return BoundEstimates(float(lip), float(hbound), lower, upper)


# ---------------------------------------------------------------------------
# reference optimizer (test oracle)
# ---------------------------------------------------------------------------

def stationarity_residual(p: NetworkProblem, x, step: float = RESIDUAL_STEP) -> float:
    """|| proj(x - step * grad(x)) - x ||, zero exactly at a minimizer."""
    x = _as_vector(x, p.n)
    return float(np.linalg.norm(p.project(x - step * p.full_grad(x)) - x))


def _active_newton_polish(p, x, rounds):
    """Fix components at their bounds, solve the free block exactly.

    Newton on the free variables is exact for quadratic problems and a fast
    polish otherwise; falls back silently on singular systems.
    """
    lo, hi = (None, None) if p.boxes is None else boxes_to_arrays(p.boxes)
    for _ in range(rounds):
        g = p.full_grad(x)
        H = np.diag(p.local_hess(x)) + p.coupling.hess(x)
        if lo is None:
            free = np.ones(p.n, dtype=bool)
        else:
            at_lo = (x <= lo + 1e-12) & (g > 0)
            at_hi = (x >= hi - 1e-12) & (g < 0)
            free = ~(at_lo | at_hi)
        if not free.any():
            return x
        try:
            dx = np.linalg.solve(H[np.ix_(free, free)], -g[free])
        except np.linalg.LinAlgError:
            return x
        x_new = x.copy()
        x_new[free] += dx
        x_new = p.project(x_new)
        if not np.all(np.isfinite(x_new)):
            return x
        if p.objective(x_new) > p.objective(x) + 1e-12:
            return x
        x = x_new
    return x


def reference_optimizer(p: NetworkProblem, tol: float = 1e-10,
                        max_iter: int = 200_000) -> np.ndarray:
    """Independent minimizer of f + g over the feasible set.

    Unconstrained all-quadratic problems are solved by a direct linear solve;
    everything else runs projected gradient descent with backtracking plus an
    active-set Newton polish.  Raises NumericError if the posted residual
    bound ``stationarity_residual(p, x) <= tol`` cannot be met.
    """
    quad = p.as_quadratic_gradient()
    if quad is not None and p.boxes is None:
        A, b = quad
        try:
            x = np.linalg.solve(A, -b)
        except np.linalg.LinAlgError as exc:
            raise NumericError(f"singular stationarity system: {exc}") from None
        if stationarity_residual(p, x) <= tol:
            return x
        raise NumericError("direct solve did not meet the residual tolerance")

    # Warm start: clamped solution of the unconstrained quadratic when available.
    if quad is not None:
        A, b = quad
        try:
            x = p.project(np.linalg.solve(A, -b))
        except np.linalg.LinAlgError:
            x = p.project(np.zeros(p.n))
        step = 1.0 / max(float(np.max(np.linalg.eigvalsh(A))), 1e-12)
    else:
        x = p.project(np.zeros(p.n))
        step = 1.0

    fx = p.objective(x)
    for it in range(max_iter):
        g = p.full_grad(x)
        # backtracking on the projected step
        for _ in range(60):
            x_new = p.project(x - step * g)
            d = x_new - x
            f_new = p.objective(x_new)
            if f_new <= fx + g @ d + (d @ d) / (2.0 * step) + 1e-15:
                break
            step *= 0.5
        if not np.all(np.isfinite(x_new)):
            raise NumericError("reference optimizer produced non-finite iterate")
        moved = float(np.linalg.norm(x_new - x))
        x, fx = x_new, f_new
        if it % 50 == 0 or moved < 1e-14:
            x = _active_newton_polish(p, x, rounds=3)
            fx = p.objective(x)
            if stationarity_residual(p, x) <= tol:
                return x
        step = min(step * 2.0, 1e6)

    x = _active_newton_polish(p, x, rounds=3 * p.n + 5)
    if stationarity_residual(p, x) <= tol:
        return x
    raise NumericError(
        f"reference optimizer stalled at residual {stationarity_residual(p, x):.3e} "
        f"(tolerance {tol:.1e})")


# ---------------------------------------------------------------------------
# JSON problem files
# ---------------------------------------------------------------------------

def problem_to_dict(p: NetworkProblem) -> dict:
    costs = []
    for f in p.costs:
        if not isinstance(f, PolynomialCost):
            raise ConfigError("only polynomial costs are serializable")
        costs.append({"poly": f.coeffs.tolist()})
    if isinstance(p.coupling, QuadraticCoupling):
        coupling = {"quadratic": {"Q": p.coupling.Q.tolist(), "q": p.coupling.q.tolist()}}
    elif isinstance(p.coupling, AggregatorCoupling):
        if not isinstance(p.coupling.f0, PolynomialCost):
            raise ConfigError("only polynomial aggregator costs are serializable")
        coupling = {"aggregator": {"f0_poly": p.coupling.f0.coeffs.tolist(),
                                   "c": p.coupling.c}}
    else:
        raise ConfigError(f"unsupported coupling type {type(p.coupling).__name__}")
    boxes = None
    if p.boxes is not None:
        boxes = [[b.lower, b.upper] for b in p.boxes]
    return {"n": p.n, "costs": costs, "coupling": coupling, "boxes": boxes}


def problem_from_dict(d: dict) -> NetworkProblem:
    try:
        n = int(d["n"])
        costs = [PolynomialCost(c["poly"]) for c in d["costs"]]
        spec = d["coupling"]
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed problem definition: {exc}") from None
    if len(costs) != n:
        raise ConfigError(f"'n' is {n} but {len(costs)} costs were given")
    if "quadratic" in spec:
        coupling = QuadraticCoupling(np.asarray(spec["quadratic"]["Q"], dtype=float),
                                     spec["quadratic"].get("q"))
    elif "aggregator" in spec:
        coupling = AggregatorCoupling(PolynomialCost(spec["aggregator"]["f0_poly"]),
                                      spec["aggregator"]["c"])
    else:
        raise ConfigError("coupling must be 'quadratic' or 'aggregator'")
    boxes = d.get("boxes")
    if boxes is not None:
        boxes = [BoxConstraint(float(lo), float(hi)) for lo, hi in boxes]
    return NetworkProblem(costs, coupling, boxes)


def load_problem(path) -> NetworkProblem:
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}") from None
    return problem_from_dict(d)


def save_problem(p: NetworkProblem, path) -> None:
    with open(path, "w") as fh:
        json.dump(problem_to_dict(p), fh, indent=2, sort_keys=True)
        fh.write("\n")
