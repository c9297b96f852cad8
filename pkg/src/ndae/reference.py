"""Ground-truth simulators for the tank systems and generic algebraic solvers.

Both systems are reduced analytically: the equal-height constraint is
differentiated once, which turns it into a flow-split law, and the
resulting ODE in the independent heights is integrated with classical RK4.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Callable, NamedTuple

import numpy as np

from .data import Trajectory


class Index1Violation(np.linalg.LinAlgError):
    """The algebraic Jacobian is singular, so the DAE is not index-1 here."""


class ConvergenceError(RuntimeError):
    pass


class NegativeHeightError(ValueError):
    pass


@dataclass
class SemiExplicitDae:
    """``dx/dt = f(x, y, u)``, ``0 = g(x, y, u)`` with ``len(g) == n_y``."""

    f: Callable
    g: Callable
    n_x: int
    n_y: int
    n_u: int


# -- algebraic solvers -----------------------------------------------------------

def fd_jacobian_y(g: Callable, x, y, u, step: float = 1e-7) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    cols = []
    for j in range(y.size):
        e = np.zeros_like(y)
        e[j] = step
        cols.append((np.asarray(g(x, y + e, u)) - np.asarray(g(x, y - e, u))) / (2 * step))
    return np.column_stack(cols)


class NewtonResult(NamedTuple):
    y: np.ndarray
    iterations: int
    residual: float


def newton_solve_algebraic(g: Callable, x, u, y_guess, tol: float = 1e-12,
                           max_iter: int = 50, fd_step: float = 1e-7,
                           singular_cond: float = 1e12) -> NewtonResult:
    """Solve ``g(x, y, u) = 0`` for ``y`` by damped Newton iteration.

    The Jacobian ``dg/dy`` is formed by central differences. A step is
    halved until the residual norm decreases (at most 30 halvings).
    """
    y = np.array(y_guess, dtype=np.float64)
    r = np.asarray(g(x, y, u), dtype=np.float64)
    if r.shape != y.shape:
        raise ValueError(f"g returns {r.shape[0]} residuals for {y.size} unknowns")
    norm = float(np.linalg.norm(r))
    it = 0
    while norm > tol:
        if it >= max_iter:
            raise ConvergenceError(
                f"Newton did not converge in {max_iter} iterations (residual {norm:.3e})")
        J = fd_jacobian_y(g, x, y, u, fd_step)
        if not np.all(np.isfinite(J)) or np.linalg.cond(J) > singular_cond:
            raise Index1Violation("index-1 assumption violated: dg/dy is singular")
        dy = np.linalg.solve(J, -r)
        lam = 1.0
        for _ in range(30):
            y_new = y + lam * dy
            r_new = np.asarray(g(x, y_new, u), dtype=np.float64)
            n_new = float(np.linalg.norm(r_new))
            if np.isfinite(n_new) and n_new < norm:
                break
            lam *= 0.5
        else:
            raise ConvergenceError(f"line search failed (residual {norm:.3e})")
        y, r, norm = y_new, r_new, n_new
        it += 1
    return NewtonResult(y, it, norm)


class Index1Check(NamedTuple):
    ok: bool
    condition_number: float


def check_index1(g: Callable, x, y, u, cond_threshold: float = 1e8,
                 fd_step: float = 1e-7) -> Index1Check:
    J = fd_jacobian_y(g, x, y, u, fd_step)
    if not np.all(np.isfinite(J)):
        return Index1Check(False, math.inf)
    cond = float(np.linalg.cond(J))
    if not np.isfinite(cond):
        cond = math.inf
    return Index1Check(cond < cond_threshold, cond)


# -- integration ---------------------------------------------------------------

def rk4(rhs: Callable, x: np.ndarray, dt: float, substeps: int) -> np.ndarray:
    h = dt / substeps
    for _ in range(substeps):
        k1 = rhs(x)
        k2 = rhs(x + 0.5 * h * k1)
        k3 = rhs(x + 0.5 * h * k2)
        k4 = rhs(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


@dataclass(frozen=True)
class Inflow:
    """Inlet flow ``u(t)``: constant ``level`` or ``level + amplitude*sin(t/period)``."""

    kind: str = "constant"
    level: float = 0.5
    amplitude: float = 0.25
    period: float = 100.0

    def __post_init__(self):
        if self.kind not in ("constant", "sinusoid"):
            raise ValueError(f"inflow kind must be 'constant' or 'sinusoid', got {self.kind!r}")
        if self.kind == "sinusoid" and self.period == 0:
            raise ValueError("sinusoid period must be nonzero")

    def __call__(self, t: float) -> float:
        if self.kind == "constant":
            return self.level
        return self.level + self.amplitude * math.sin(t / self.period)


def _check_heights(x: np.ndarray, t: float) -> None:
    if np.any(x < 0) or not np.all(np.isfinite(x)):
        raise NegativeHeightError(f"height left the physical domain at t={t:g}: {x}")


# -- tank manifold ---------------------------------------------------------------

def area_tank1(x) -> float:
    return 3.0


def area_tank2(x):
    return np.sqrt(x) + 0.1


@dataclass(frozen=True)
class ManifoldSpec:
    """Two tanks sharing a datum, fed through a manifold by the inflow ``u``.

    Tank 1 has constant area ``phi1``; tank 2 has area ``sqrt(x) + phi2_offset``.
    """

    phi1: float = 3.0
    phi2_offset: float = 0.1
    inflow: Inflow = field(default_factory=Inflow)
    dt: float = 1.0
    horizon: float = 500.0
    x0: float = 0.2
    substeps: int = 10

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if not self.x0 >= 0:
            raise ValueError("x0 must be nonnegative")
        if self.phi1 <= 0 or self.phi2_offset <= 0:
            raise ValueError("tank areas must be positive")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    def phi_1(self, x):
        return self.phi1 + 0.0 * np.asarray(x, dtype=float)

    def phi_2(self, x):
        return np.sqrt(x) + self.phi2_offset

    def volume(self, x):
        """Total stored volume at common height ``x`` (both tanks)."""
        x = np.asarray(x, dtype=float)
        return self.phi1 * x + (2.0 / 3.0) * x ** 1.5 + self.phi2_offset * x


def manifold_algebra_oracle(x1, u, phi1, phi2) -> tuple[float, float]:
    """Manifold split keeping the two heights equal.

    ``phi1``/``phi2`` are either area values at ``x1`` or callables.
    """
    a1 = phi1(x1) if callable(phi1) else phi1
    a2 = phi2(x1) if callable(phi2) else phi2
    total = a1 + a2
    if total == 0:
        raise ZeroDivisionError("manifold oracle: zero total tank area")
    y1 = u * a1 / total
    return float(y1), float(u - y1)


def manifold_dae(spec: ManifoldSpec = ManifoldSpec()) -> SemiExplicitDae:
    """Index-1 form: conservation plus the differentiated height constraint."""

    def f(x, y, u):
        return np.array([y[0] / spec.phi_1(x[0]), y[1] / spec.phi_2(x[1])])

    def g(x, y, u):
        u = np.atleast_1d(u)[0]
        return np.array([u - y[0] - y[1],
                         y[0] / spec.phi_1(x[0]) - y[1] / spec.phi_2(x[1])])

    return SemiExplicitDae(f, g, 2, 2, 1)


def manifold_constraints(x, y, u) -> np.ndarray:
    """Original (undifferentiated) manifold constraints."""
    return np.array([np.atleast_1d(u)[0] - y[0] - y[1], x[0] - x[1]])


def simulate_manifold(spec: ManifoldSpec = ManifoldSpec()) -> Trajectory:
    N = spec.n_steps
    times = spec.dt * np.arange(N + 1)
    U = np.array([spec.inflow(t) for t in times])
    h = np.empty(N + 1)
    h[0] = spec.x0
    x = np.array([spec.x0])
    _check_heights(x, 0.0)
    for k in range(N):
        uk = U[k]
        x = rk4(lambda z: uk / (spec.phi_1(z) + spec.phi_2(np.maximum(z, 0.0))), x,
                spec.dt, spec.substeps)
        _check_heights(x, times[k + 1])
        h[k + 1] = x[0]
    Y = np.array([manifold_algebra_oracle(h[k], U[k], spec.phi_1, spec.phi_2)
                  for k in range(N + 1)])
    meta = {"system": "manifold", "dt": spec.dt, "spec": _spec_dict(spec)}
    return Trajectory(times, np.column_stack([h, h]), Y, U[:, None], meta)


# -- closed tank network ----------------------------------------------------------

@dataclass(frozen=True)
class NetworkSpec:
    """Closed loop: pump -> manifold -> tanks 1/2, tank 1 -> tank 3 -> reservoir 4."""

    phi: tuple[float, float, float, float] = (2.0, 1.0, 1.0, 10.0)
    pump_gain: float = 0.1
    alpha1: float = 0.1
    alpha2: float = 0.1
    dt: float = 0.1
    horizon: float = 20.0
    x0: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 2.0)
    substeps: int = 10

    def __post_init__(self):
        object.__setattr__(self, "phi", tuple(float(p) for p in self.phi))
        object.__setattr__(self, "x0", tuple(float(p) for p in self.x0))
        if len(self.phi) != 4 or len(self.x0) != 4:
            raise ValueError("network needs four areas and four initial heights")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if any(p <= 0 for p in self.phi):
            raise ValueError("tank areas must be positive")
        if any(h < 0 for h in self.x0):
            raise ValueError("initial heights must be nonnegative")
        if self.x0[0] != self.x0[1]:
            raise ValueError("tanks 1 and 2 share a datum: x0[0] must equal x0[1]")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    def pump(self, x1, x4):
        return self.pump_gain * x1 * x4

    def volume(self, X) -> np.ndarray:
        return np.asarray(X) @ np.asarray(self.phi)


def _safe_sqrt(v: float, what: str) -> float:
    if v < 0:
        raise NegativeHeightError(f"negative height under square root ({what} = {v})")
    return math.sqrt(v)


def network_algebra_oracle(x, spec: NetworkSpec = NetworkSpec()) -> np.ndarray:
    """Flows ``(y0, y1, y2, y3, y4)`` consistent with the network constraints.

    Backflow (``y2 < 0``) is allowed.
    """
    x1, _, x3, x4 = (float(v) for v in x)
    p1, p2 = spec.phi[0], spec.phi[1]
    y0 = spec.pump(x1, x4)
    y3 = spec.alpha1 * _safe_sqrt(x1, "x1")
    y4 = spec.alpha2 * _safe_sqrt(x3, "x3")
    y1 = (p1 * y0 + p2 * y3) / (p1 + p2)
    return np.array([y0, y1, y0 - y1, y3, y4])


def network_dae(spec: NetworkSpec = NetworkSpec()) -> SemiExplicitDae:
    phi = np.asarray(spec.phi)

    def f(x, y, u=None):
        return np.array([y[1] - y[3], y[2], y[3] - y[4], y[4] - y[0]]) / phi

    def g(x, y, u=None):
        return np.array([
            y[0] - spec.pump(x[0], x[3]),
            y[0] - y[1] - y[2],
            y[3] - spec.alpha1 * np.sqrt(x[0]),
            y[4] - spec.alpha2 * np.sqrt(x[2]),
            (y[1] - y[3]) / phi[0] - y[2] / phi[1],
        ])

    return SemiExplicitDae(f, g, 4, 5, 0)


def network_constraints(x, y, u=None) -> np.ndarray:
    """Original network constraints that do not involve the pump law."""
    return np.array([y[0] - y[1] - y[2], x[0] - x[1]])


def simulate_network(spec: NetworkSpec = NetworkSpec()) -> Trajectory:
    N = spec.n_steps
    times = spec.dt * np.arange(N + 1)
    phi = np.asarray(spec.phi)

    def rhs(z):
        # reduced state (x1 = x2, x3, x4)
        y = network_algebra_oracle((z[0], z[0], z[1], z[2]), spec)
        return np.array([(y[0] - y[3]) / (phi[0] + phi[1]), (y[3] - y[4]) / phi[2],
                         (y[4] - y[0]) / phi[3]])

    z = np.array([spec.x0[0], spec.x0[2], spec.x0[3]])
    X = np.empty((N + 1, 4))
    X[0] = spec.x0
    _check_heights(X[0], 0.0)
    for k in range(N):
        z = rk4(rhs, z, spec.dt, spec.substeps)
        X[k + 1] = (z[0], z[0], z[1], z[2])
        _check_heights(X[k + 1], times[k + 1])
    Y = np.array([network_algebra_oracle(x, spec) for x in X])
    meta = {"system": "network", "dt": spec.dt, "spec": _spec_dict(spec)}
    return Trajectory(times, X, Y, np.zeros((N + 1, 0)), meta)


def _spec_dict(spec) -> dict:
    return json_safe(asdict(spec))


def json_safe(d):
    if isinstance(d, dict):
        return {k: json_safe(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [json_safe(v) for v in d]
    return d
