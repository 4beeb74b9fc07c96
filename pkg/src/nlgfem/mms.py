"""Manufactured solutions of the incompressible Navier-Stokes equations.

``mms1`` uses the stream function psi = sin^2(pi x) sin^2(pi y) g(t) with
g(t) = 1 + exp(-t)/2, so u = curl psi is divergence free and vanishes on the
boundary, and p = cos(pi x) cos(pi y) g(t) has zero mean. The forcing is the
closed-form momentum residual, checked against symbolic differentiation
in the tests.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .fem import VelocitySpace, assemble_mass, assemble_stiffness, error_norms

PI = np.pi


def sinpi(x):
    """sin(pi x), exactly zero at integers."""
    r = np.remainder(x, 2.0)
    sign = np.where(r > 1.0, -1.0, 1.0)
    r = np.where(r > 1.0, r - 1.0, r)
    return sign * np.sin(PI * np.minimum(r, 1.0 - r))


@dataclass(frozen=True)
class ExactSolution:
    name: str
    nu: float
    velocity: Callable  # (x, y, t) -> (u1, u2)
    velocity_gradient: Callable  # (x, y, t) -> ((u1_x, u1_y), (u2_x, u2_y))
    pressure: Callable
    forcing: Callable
    time_profile: Callable
    convection: bool = True
    forcing_depends_on_time: bool = True

    def initial_velocity(self, x, y, t=0.0):
        return self.velocity(x, y, t)


def _stream_family(name: str, nu: float, g, dg, convection: bool, with_time: bool) -> ExactSolution:
    """Fields for psi = sin^2(pi x) sin^2(pi y) g(t) and p = cos(pi x) cos(pi y) g(t)."""

    def velocity(x, y, t):
        gt = g(t)
        return (
            PI * gt * sinpi(x) ** 2 * sinpi(2 * y),
            -PI * gt * sinpi(2 * x) * sinpi(y) ** 2,
        )

    def velocity_gradient(x, y, t):
        gt = g(t)
        s2x, s2y = np.sin(2 * PI * x), np.sin(2 * PI * y)
        return (
            (PI**2 * gt * s2x * s2y, 2 * PI**2 * gt * np.sin(PI * x) ** 2 * np.cos(2 * PI * y)),
            (-2 * PI**2 * gt * np.cos(2 * PI * x) * np.sin(PI * y) ** 2, -PI**2 * gt * s2x * s2y),
        )

    def pressure(x, y, t):
        return np.cos(PI * x) * np.cos(PI * y) * g(t)

    def forcing(x, y, t):
        gt, dgt = g(t), dg(t)
        sx, sy = np.sin(PI * x), np.sin(PI * y)
        cx, cy = np.cos(PI * x), np.cos(PI * y)
        s2x, s2y = np.sin(2 * PI * x), np.sin(2 * PI * y)
        c2x, c2y = np.cos(2 * PI * x), np.cos(2 * PI * y)
        lap1 = 2 * PI**3 * gt * (2 * c2x - 1) * s2y
        lap2 = -2 * PI**3 * gt * (2 * c2y - 1) * s2x
        f1 = -nu * lap1 - PI * gt * sx * cy
        f2 = -nu * lap2 - PI * gt * cx * sy
        if with_time:
            f1 = f1 + PI * dgt * sx**2 * s2y
            f2 = f2 - PI * dgt * s2x * sy**2
        if convection:
            f1 = f1 + 4 * PI**3 * gt**2 * sx**3 * cx * sy**2
            f2 = f2 + 4 * PI**3 * gt**2 * sx**2 * sy**3 * cy
        return f1, f2

    return ExactSolution(
        name, nu, velocity, velocity_gradient, pressure, forcing, g,
        convection=convection, forcing_depends_on_time=with_time,
    )


def mms1(nu: float = 1.0) -> ExactSolution:
    """Time-dependent manufactured flow with g(t) = 1 + exp(-t)/2."""
    if not nu > 0:
        raise ValueError("nu must be positive")
    return _stream_family(
        "mms1", nu, lambda t: 1.0 + 0.5 * np.exp(-t), lambda t: -0.5 * np.exp(-t), convection=True, with_time=True
    )


def stokes1(nu: float = 1.0) -> ExactSolution:
    """Steady Stokes flow (g = 1, no convection): the steady state of its forcing is the exact field."""
    if not nu > 0:
        raise ValueError("nu must be positive")
    return _stream_family("stokes1", nu, lambda t: 1.0, lambda t: 0.0, convection=False, with_time=False)


def decay1(nu: float = 1.0) -> ExactSolution:
    """Unforced flow started from the mms1 velocity; no closed form after t = 0."""
    base = mms1(nu)

    def forcing(x, y, t):
        z = np.zeros(np.broadcast(x, y).shape)
        return z, z

    return ExactSolution(
        "decay1", nu, base.velocity, base.velocity_gradient, base.pressure, forcing, base.time_profile,
        convection=True, forcing_depends_on_time=False,
    )


PROBLEMS = {"mms1": mms1, "stokes1": stokes1, "decay1": decay1}


def get_problem(name: str, nu: float) -> ExactSolution:
    try:
        return PROBLEMS[name](nu)
    except KeyError:
        raise ValueError(f"unknown problem {name!r}; choose from {sorted(PROBLEMS)}") from None


def evaluate_errors(V: VelocitySpace, state, exact: ExactSolution, t: float) -> tuple[float, float]:
    """L2 and H1-seminorm errors of ``state.u`` against the exact velocity at time t."""
    if not np.isclose(state.t, t, rtol=0, atol=1e-12):
        raise ValueError(f"state is at t={state.t}, requested t={t}")
    return error_norms(V, state.u, exact, t)


def scheme_gap(V: VelocitySpace, galerkin_state, nlgm_state, M=None, A=None) -> tuple[float, float]:
    """(||u_h - u^h||, ||grad(u_h - u^h)||) from the coefficient difference."""
    if not np.isclose(galerkin_state.t, nlgm_state.t, rtol=0, atol=1e-12):
        raise ValueError("states are at different times")
    e = np.asarray(galerkin_state.u) - np.asarray(nlgm_state.u)
    if e.shape != (V.n_dofs,):
        raise ValueError("states do not live on the given space")
    M = assemble_mass(V) if M is None else M
    A = assemble_stiffness(V) if A is None else A
    return float(np.sqrt(max(e @ (M @ e), 0.0))), float(np.sqrt(max(e @ (A @ e), 0.0)))
