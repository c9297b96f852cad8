"""Explicit steppers, Lie-Trotter splitting and the algebra-first DAE timestepper.

Vector fields take ``(x, y, u)`` and may return either numpy arrays or
tape ``Value`` objects; the steppers only use ``+`` and scalar ``*`` so
the same code serves plain simulation and differentiable rollouts.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Value

OdeFunction = Callable  # (x, y, u) -> dx/dt
AlgebraSurrogate = Callable  # (x, y, u) -> y at the next instant


class NonFiniteStateError(FloatingPointError):
    pass


def _data(v) -> np.ndarray:
    return v.data if isinstance(v, Value) else np.asarray(v, dtype=np.float64)


def _require_finite(v, what: str) -> None:
    d = _data(v)
    # a sum is finite whenever all entries are (barring overflow, caught below)
    if not math.isfinite(d.sum()) and not np.all(np.isfinite(d)):
        bad = np.flatnonzero(~np.isfinite(np.atleast_1d(d)))
        raise NonFiniteStateError(f"{what}: non-finite entries at component(s) {bad.tolist()}")


def euler_step(f: OdeFunction, x, y, u, dt: float):
    if not dt > 0:
        raise ValueError("dt must be positive")
    dx = f(x, y, u)
    if isinstance(dx, Value) or isinstance(x, Value):
        return ad.axpy(dt, dx, x)
    return x + dt * dx


def rk4_step(f: OdeFunction, x, y, u, dt: float):
    """Classical RK4 with ``y`` and ``u`` frozen over the step."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    k1 = f(x, y, u)
    _require_finite(k1, "rk4_step derivative")
    k2 = f(x + (0.5 * dt) * k1, y, u)
    k3 = f(x + (0.5 * dt) * k2, y, u)
    k4 = f(x + dt * k3, y, u)
    _require_finite(k4, "rk4_step derivative")
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


STEPPERS = {"euler": euler_step, "rk4": rk4_step}


def lie_trotter_step(A: Callable, B: Callable, x, dt: float, stepper: str = "euler",
                     substeps: int = 1):
    """Advance ``dx/dt = A(x) + B(x)`` by solving ``A`` then ``B`` over ``dt``.

    ``A`` and ``B`` take the state only. Each sub-flow is integrated with
    ``substeps`` steps of ``stepper``.
    """
    step = STEPPERS[stepper]
    h = dt / substeps

    def solve(F, z):
        fz = lambda z_, _y, _u: F(z_)
        for _ in range(substeps):
            z = step(fz, z, None, None, h)
        return z

    return solve(B, solve(A, x))


@dataclass
class NeuralDaeModel:
    """One-step map: ``y+ = h(x, y, u)`` first, then ``x+ = ODESolve(f, x, y+, u)``."""

    f: OdeFunction
    h: AlgebraSurrogate
    dt: float
    stepper: str = "euler"

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.stepper not in STEPPERS:
            raise ValueError(f"unknown stepper {self.stepper!r}")


def dae_step(model: NeuralDaeModel, x, y, u):
    """Return ``(x_next, y_next)``. The algebraic update always runs first."""
    y_next = model.h(x, y, u)
    _require_finite(y_next, "algebraic surrogate output")
    x_next = STEPPERS[model.stepper](model.f, x, y_next, u, model.dt)
    return x_next, y_next


@dataclass
class Rollout:
    """States of an N-step rollout, kept as tape values for backpropagation."""

    xs: list
    ys: list
    us: list

    def X(self):
        return ad.stack(self.xs)

    def Y(self):
        return ad.stack(self.ys)

    def x_data(self) -> np.ndarray:
        return np.array([_data(x) for x in self.xs])

    def y_data(self) -> np.ndarray:
        return np.array([_data(y) for y in self.ys])

    def u_data(self) -> np.ndarray:
        return np.array([np.atleast_1d(_data(u)) for u in self.us]).reshape(len(self.us), -1)


def rollout(model: NeuralDaeModel, x0, y0, u_sequence: Sequence, N: int) -> Rollout:
    """Simulate ``N`` steps from ``(x0, y0)``; ``u_sequence[k]`` is held over step k.

    The returned input list is aligned with the algebraic states: entry k
    is the input ``h`` saw when producing ``ys[k]`` (entry 0 is
    ``u_sequence[0]``, the input the initial state is consistent with).
    """
    if N < 0:
        raise ValueError("N must be nonnegative")
    if len(u_sequence) < N:
        raise ValueError(f"need at least {N} inputs, got {len(u_sequence)}")
    xs, ys = [x0], [y0]
    x, y = x0, y0
    for k in range(N):
        try:
            x, y = dae_step(model, x, y, u_sequence[k])
            _require_finite(x, "differential state")
        except (NonFiniteStateError, ad.DomainError) as exc:
            raise NonFiniteStateError(f"rollout failed at step {k + 1}: {exc}") from exc
        xs.append(x)
        ys.append(y)
    if len(u_sequence):
        us = [u_sequence[0]] + list(u_sequence[:N])
    else:
        us = [np.zeros(0)]
    return Rollout(xs, ys, us)
