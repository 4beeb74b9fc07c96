"""Time stepping for Galerkin and the nonlinear Galerkin (two-grid) schemes.

Every step solves a nonlinear saddle-point system. The fixed point of the
Picard (lagged-transport) iteration is reached by defect correction: the
linearized step matrix is factored once and reused while it keeps
contracting, and refactored at the current iterate when it stops doing so.

Complement-tested equations use the representer form: the fine static
residual must equal M P mu for some coarse mu, which is the same as
vanishing against every fine function L2-orthogonal to the coarse space.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from . import fem
from .fem import DirichletReduction, ElementKind, VelocitySpace, PressureSpace
from .linsolve import BlockLayout, Factorization, LowRankUpdate
from .mesh import MeshFamily
from .twogrid import TwoGridHierarchy

log = logging.getLogger(__name__)


class Scheme(str, Enum):
    GALERKIN_FINE = "galerkin-fine"
    GALERKIN_COARSE = "galerkin-coarse"
    NLGM1 = "nlgm1"
    NLGM2 = "nlgm2"
    NLGM_LIN = "nlgm-lin"

    @property
    def is_nlgm(self) -> bool:
        return self in (Scheme.NLGM1, Scheme.NLGM2, Scheme.NLGM_LIN)


class TimeRule(str, Enum):
    BACKWARD_EULER = "be"
    CRANK_NICOLSON = "cn"

    @property
    def theta(self) -> float:
        return 1.0 if self is TimeRule.BACKWARD_EULER else 0.5


class PicardDiverged(RuntimeError):
    pass


class StepError(RuntimeError):
    def __init__(self, step: int, t: float, cause: Exception):
        super().__init__(f"step {step} (t={t:.6g}): {type(cause).__name__}: {cause}")
        self.step = step
        self.t = t
        self.cause = cause


@dataclass(frozen=True)
class SchemeConfig:
    nu: float = 1.0
    dt: float = 1.0 / 512
    t0: float = 1.0 / 16
    t_end: float = 0.25
    scheme: Scheme = Scheme.NLGM1
    time_rule: TimeRule = TimeRule.BACKWARD_EULER
    picard_tol: float = 1e-10
    picard_max: int = 50
    convection: bool = True
    handoff: str = "static"  # or "projection": z(t0) = (I - P_H) u_h(t0)

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        object.__setattr__(self, "time_rule", TimeRule(self.time_rule))
        if not self.nu > 0:
            raise ValueError("nu must be positive")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not 0 <= self.t0 <= self.t_end:
            raise ValueError("need 0 <= t0 <= t_end")
        if not 0 < self.picard_tol < 1:
            raise ValueError("picard_tol must lie in (0, 1)")
        if self.picard_max < 1:
            raise ValueError("picard_max must be >= 1")
        if self.scheme.is_nlgm and self.t0 <= 0 and self.t_end > 0:
            raise ValueError("nonlinear Galerkin schemes start at t0 > 0")
        if self.handoff not in ("static", "projection"):
            raise ValueError("handoff must be 'static' or 'projection'")
        for name in ("t0", "t_end"):
            k = getattr(self, name) / self.dt
            if abs(k - round(k)) > 1e-9 * max(1.0, k):
                raise ValueError(f"{name} must be a multiple of dt")

    @property
    def n0(self) -> int:
        return int(round(self.t0 / self.dt))

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))


@dataclass
class FlowState:
    t: float
    u: np.ndarray  # full velocity coefficients
    p: np.ndarray
    y: Optional[np.ndarray] = None  # reduced coarse coefficients (NLGM)
    z: Optional[np.ndarray] = None  # full fine coefficients of the complement part (NLGM)
    mu: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)


class FlowSystem:
    """Assembled, Dirichlet-reduced operators of one velocity/pressure pair."""

    def __init__(self, V: VelocitySpace, Q: PressureSpace):
        self.V = V
        self.Q = Q
        self.red = DirichletReduction(V.n_dofs, V.dirichlet_dofs)
        self.M = self.red.matrix(fem.assemble_mass(V))
        self.A = self.red.matrix(fem.assemble_stiffness(V))
        self.B = self.red.columns(fem.assemble_divergence(V, Q))
        self.m = fem.pressure_mean_vector(Q)
        self.n = self.red.n_free
        self.np = Q.n_dofs
        self._M_full = None
        self._A_full = None

    @classmethod
    def build(cls, family: MeshFamily, level: int, kind=ElementKind.P1ISOP2) -> "FlowSystem":
        return cls(fem.build_velocity_space(family, level, kind), fem.build_pressure_space(family, level, kind))

    @property
    def M_full(self):
        if self._M_full is None:
            self._M_full = fem.assemble_mass(self.V)
        return self._M_full

    @property
    def A_full(self):
        if self._A_full is None:
            self._A_full = fem.assemble_stiffness(self.V)
        return self._A_full

    def convection_matrix(self, w_red) -> sp.csr_matrix:
        return self.red.matrix(fem.assemble_convection(self.V, self.red.expand(w_red)))

    def convection(self, w_red, u_red) -> np.ndarray:
        """Reduced vector of b(w, u, phi_i)."""
        return self.red.vector(fem.convection_vector(self.V, self.red.expand(w_red), self.red.expand(u_red)))

    def load(self, forcing, t: float) -> np.ndarray:
        return self.red.vector(fem.load_vector(self.V, forcing, t))

    def divergence_residual(self, u_red) -> float:
        return float(np.max(np.abs(self.B @ u_red), initial=0.0))

    def stokes_block(self, K) -> sp.spmatrix:
        """[[K, -B^T, 0], [-B, 0, m], [0, m^T, 0]]."""
        m = sp.csr_matrix(self.m[:, None])
        return sp.bmat([[K, -self.B.T, None], [-self.B, None, m], [None, m.T, None]], format="csc")

    def l2_projection(self, field, t: float = 0.0) -> np.ndarray:
        """Reduced coefficients of the L2 projection onto discretely divergence-free fields."""
        rhs = np.concatenate([self.load(field, t), np.zeros(self.np + 1)])
        x = Factorization(self.stokes_block(self.M)).solve(rhs)
        return x[: self.n]

    def steady_stokes(self, forcing, nu: float, t: float = 0.0):
        """Direct solve of nu A u - B^T p = F, B u = 0; returns (u_red, p)."""
        rhs = np.concatenate([self.load(forcing, t), np.zeros(self.np + 1)])
        x = Factorization(self.stokes_block(nu * self.A)).solve(rhs)
        return x[: self.n], x[self.n : self.n + self.np]


class _Chord:
    """Defect-correction solver with a reusable factorization of an approximate Jacobian."""

    def __init__(self):
        self.F: Optional[Factorization] = None
        self.key = None
        self.factorizations = 0

    def invalidate(self):
        self.F = None
        self.key = None

    def solve(self, residual: Callable, jacobian: Callable, x0, n_u: int, cfg: SchemeConfig, key=None):
        x = np.array(x0, dtype=float)
        if self.F is None or self.key != key:
            self.F = _factor(jacobian(x))
            self.key = key
            self.factorizations += 1
            fresh = True
        else:
            fresh = False
        prev = None
        for k in range(1, cfg.picard_max + 1):
            dx = -self.F.solve(residual(x))
            x = x + dx
            nx = np.linalg.norm(x[:n_u])
            upd = np.linalg.norm(dx[:n_u]) / nx if nx > 0 else np.linalg.norm(dx[:n_u])
            if upd <= cfg.picard_tol:
                return x, k
            if prev is not None and upd > 0.25 * prev and not fresh:
                self.F = _factor(jacobian(x))
                self.factorizations += 1
                fresh = True
            prev = upd
        raise PicardDiverged(
            f"no convergence in {cfg.picard_max} iterations (last relative update {upd:.3e}, "
            f"{'growing' if prev is not None and upd > prev else 'stalled'})"
        )


def _factor(J):
    """Factor a sparse matrix, or a (matrix, U, S, V^T) low-rank-updated one."""
    if isinstance(J, tuple):
        return LowRankUpdate(Factorization(J[0]), *J[1:])
    return Factorization(J)


def _zero_forcing(x, y, t):
    z = np.zeros(np.shape(x))
    return z, z


class GalerkinStepper:
    """Mixed Galerkin step: M(u+ - u)/dt + nu A u* + N(u*) u* - B^T p = F*, B u+ = 0."""

    def __init__(self, system: FlowSystem, cfg: SchemeConfig, forcing=None):
        self.sys = system
        self.cfg = cfg
        self.forcing = forcing or _zero_forcing
        self.chord = _Chord()
        n, npp = system.n, system.np
        self.layout = BlockLayout.from_sizes(u=n, p=npp, lam=1)

    def _conv(self, w, u):
        return self.sys.convection(w, u) if self.cfg.convection else np.zeros_like(u)

    def step(self, state: FlowState) -> FlowState:
        s, cfg = self.sys, self.cfg
        th, dt = cfg.time_rule.theta, cfg.dt
        t1 = state.t + dt
        u0 = s.red.vector(state.u)
        F = th * s.load(self.forcing, t1) + (1 - th) * s.load(self.forcing, state.t)
        n, npp = s.n, s.np
        Mu0 = s.M @ u0

        def residual(x):
            u, p, lam = x[:n], x[n : n + npp], x[n + npp]
            us = th * u + (1 - th) * u0
            r1 = (s.M @ u - Mu0) / dt + cfg.nu * (s.A @ us) + self._conv(us, us) - s.B.T @ p - F
            r2 = -(s.B @ u) + s.m * lam
            r3 = np.array([s.m @ p])
            return np.concatenate([r1, r2, r3])

        def jacobian(x):
            us = th * x[:n] + (1 - th) * u0
            K = s.M / dt + th * cfg.nu * s.A
            if cfg.convection:
                K = K + th * s.convection_matrix(us)
            return s.stokes_block(K)

        x0 = np.concatenate([u0, state.p, [0.0]])
        x, iters = self.chord.solve(residual, jacobian, x0, n, cfg, key=("galerkin", dt))
        u = s.red.expand(x[:n])
        out = FlowState(t1, u, x[n : n + npp].copy())
        out.diagnostics = {
            "picard_iters": iters,
            "div_residual": s.divergence_residual(x[:n]),
            "residual": _relative(residual(x), F, Mu0 / dt),
        }
        return out


def _relative(r, *scales) -> float:
    scale = sum(np.linalg.norm(v) for v in scales)
    nr = np.linalg.norm(r)
    return float(nr / scale) if scale > 0 else float(nr)


class NLGMStepper:
    """Nonlinear Galerkin step on a two-grid hierarchy.

    Unknowns (u+, p+, lambda, mu). Row blocks:
      (1) nu A u+ + c_f(u+) - B^T p - F+ - M P mu = 0        (complement-tested)
      (2) P^T [M (u+ - u)/dt + nu A u* + c(u*, u*) - B^T p - F*] = 0   (coarse-tested)
      (3) -B u+ + m lambda = 0,  (4) m^T p = 0.
    c_f is the full convection for NLGM I, drops b(z, z, .) for NLGM II and
    keeps only b(y, y, .) for NLGM-lin, with y = P_H u+ and z = u+ - y. With a
    degenerate hierarchy (P = I) block (2) is the Galerkin step and (1) merely
    defines mu.

    The lagged-transport matrix of (1) contains the dense projector
    P_H = P G^{-1} P^T M for NLGM II and NLGM-lin; it is applied as a rank
    n_H correction to a sparse factorization instead of being assembled.
    """

    def __init__(self, system: FlowSystem, hier: TwoGridHierarchy, cfg: SchemeConfig, forcing=None):
        if not cfg.scheme.is_nlgm:
            raise ValueError(f"{cfg.scheme} is not a nonlinear Galerkin scheme")
        if hier.fine is not system.V:
            raise ValueError("hierarchy fine space differs from the flow system space")
        self.sys = system
        self.hier = hier
        self.cfg = cfg
        self.forcing = forcing or _zero_forcing
        self.chord = _Chord()
        self.layout = BlockLayout.from_sizes(u=system.n, p=system.np, lam=1, mu=hier.n_coarse)
        self.PT = sp.csr_matrix(hier.P.T)
        self.PTM = sp.csr_matrix(self.PT @ system.M)
        self.PTA = sp.csr_matrix(self.PT @ system.A)
        self.PTBT = sp.csr_matrix(self.PT @ system.B.T)

    def _conv(self, w, u):
        return self.sys.convection(w, u) if self.cfg.convection else np.zeros_like(u)

    def _convections(self, u):
        """(complement-tested convection, full convection b(u, u, .))."""
        if not self.cfg.convection:
            z = np.zeros_like(u)
            return z, z
        full = self._conv(u, u)
        scheme = self.cfg.scheme
        if scheme is Scheme.NLGM1:
            return full, full
        yf = self.hier.project(u)
        if scheme is Scheme.NLGM2:
            z = u - yf
            return full - self._conv(z, z), full
        return self._conv(yf, yf), full

    def complement_convection(self, u) -> np.ndarray:
        """Convection vector tested against the complement, per scheme."""
        return self._convections(u)[0]

    def _k1(self, u):
        """Sparse part of the row (1) matrix and the factor W of its correction W G^{-1} P^T M."""
        s, cfg = self.sys, self.cfg
        K1 = cfg.nu * s.A
        if not cfg.convection:
            return K1, None
        if cfg.scheme is Scheme.NLGM1:
            return K1 + s.convection_matrix(u), None
        yf = self.hier.project(u)
        if cfg.scheme is Scheme.NLGM2:
            # b(u, u) - b(z, z) lagged: N(u) - N(z) (I - P_H)
            Nz = s.convection_matrix(u - yf)
            return K1 + s.convection_matrix(u) - Nz, Nz @ self.hier.P
        # b(y, y) lagged: N(y) P_H
        return K1, s.convection_matrix(yf) @ self.hier.P

    def _matrix(self, rows2, u):
        s, h = self.sys, self.hier
        K1, W = self._k1(u)
        m = sp.csr_matrix(s.m[:, None])
        J = sp.bmat(
            [
                [K1, -s.B.T, None, -h.MP],
                rows2,
                [-s.B, None, m, None],
                [None, m.T, None, None],
            ],
            format="csc",
        )
        if W is None:
            return J
        N = J.shape[0]
        U = sp.vstack([sp.csr_matrix(W), sp.csr_matrix((N - s.n, h.n_coarse))], format="csc")
        Vt = sp.hstack([self.PTM, sp.csr_matrix((h.n_coarse, N - s.n))], format="csr")
        return J, U, h.G, Vt

    def _unpack(self, x):
        n, npp = self.sys.n, self.sys.np
        return x[:n], x[n : n + npp], x[n + npp], x[n + npp + 1 :]

    def _static_rows(self, x, F1):
        """Row blocks (1), (3), (4) and the full convection at u."""
        s, h, cfg = self.sys, self.hier, self.cfg
        u, p, lam, mu = self._unpack(x)
        cf, cu = self._convections(u)
        r1 = cfg.nu * (s.A @ u) + cf - s.B.T @ p - F1 - h.MP @ mu
        r3 = -(s.B @ u) + s.m * lam
        return r1, r3, np.array([s.m @ p]), cu

    def _finish(self, t1, x, iters, residual_value) -> FlowState:
        s, h = self.sys, self.hier
        u, p, _, mu = self._unpack(x)
        split = h.split(u)
        out = FlowState(t1, s.red.expand(u), p.copy(), split.y, s.red.expand(split.z), mu.copy())
        out.diagnostics = {
            "picard_iters": iters,
            "div_residual": s.divergence_residual(u),
            "complement_residual": split.orthogonality_residual(),
            "residual": residual_value,
        }
        return out

    def step(self, state: FlowState) -> FlowState:
        s, h, cfg = self.sys, self.hier, self.cfg
        th, dt = cfg.time_rule.theta, cfg.dt
        t1 = state.t + dt
        u0 = s.red.vector(state.u)
        F1 = s.load(self.forcing, t1)
        Fs = F1 if th == 1.0 else th * F1 + (1 - th) * s.load(self.forcing, state.t)
        PTMu0 = self.PTM @ u0
        PTFs = self.PT @ Fs

        def residual(x):
            u, p = x[: s.n], x[s.n : s.n + s.np]
            r1, r3, r4, cu = self._static_rows(x, F1)
            us = th * u + (1 - th) * u0
            cs = cu if th == 1.0 else self._conv(us, us)
            r2 = (self.PTM @ u - PTMu0) / dt + cfg.nu * (self.PTA @ us) + self.PT @ cs - self.PTBT @ p - PTFs
            return np.concatenate([r1, r2, r3, r4])

        def jacobian(x):
            us = th * x[: s.n] + (1 - th) * u0
            K2 = self.PTM / dt + th * cfg.nu * self.PTA
            if cfg.convection:
                K2 = K2 + th * (self.PT @ s.convection_matrix(us))
            return self._matrix([K2, -self.PTBT, None, None], x[: s.n])

        mu0 = np.zeros(h.n_coarse) if state.mu is None else state.mu
        x0 = np.concatenate([u0, state.p, [0.0], mu0])
        x, iters = self.chord.solve(residual, jacobian, x0, s.n, cfg, key=("nlgm", dt))
        return self._finish(t1, x, iters, _relative(residual(x), F1, PTMu0 / dt))

    def handoff(self, galerkin_state: FlowState) -> FlowState:
        """Start state at t0: y = P_H u_h(t0) and z from the scheme's static complement equation."""
        s, h, cfg = self.sys, self.hier, self.cfg
        uh = s.red.vector(galerkin_state.u)
        # an empty complement leaves the static pressure undetermined; both choices give z = 0 there
        if cfg.handoff == "projection" or h.degenerate or h.n_fine == h.n_coarse:
            split = h.split(uh)
            out = FlowState(galerkin_state.t, galerkin_state.u.copy(), galerkin_state.p.copy(),
                            split.y, s.red.expand(split.z), np.zeros(h.n_coarse))
            out.diagnostics = {"picard_iters": 0, "div_residual": s.divergence_residual(uh),
                               "complement_residual": split.orthogonality_residual(), "residual": 0.0}
            return out
        F = s.load(self.forcing, galerkin_state.t)
        target = self.PTM @ uh

        def residual(x):
            r1, r3, r4, _ = self._static_rows(x, F)
            return np.concatenate([r1, self.PTM @ x[: s.n] - target, r3, r4])

        def jacobian(x):
            return self._matrix([self.PTM, None, None, None], x[: s.n])

        x0 = np.concatenate([uh, galerkin_state.p, [0.0], np.zeros(h.n_coarse)])
        x, iters = _Chord().solve(residual, jacobian, x0, s.n, cfg)
        return self._finish(galerkin_state.t, x, iters, _relative(residual(x), F, target))


def make_stepper(system: FlowSystem, cfg: SchemeConfig, forcing=None, hier: Optional[TwoGridHierarchy] = None):
    if cfg.scheme.is_nlgm:
        if hier is None:
            raise ValueError("nonlinear Galerkin schemes need a two-grid hierarchy")
        return NLGMStepper(system, hier, cfg, forcing)
    return GalerkinStepper(system, cfg, forcing)


def step_galerkin(state: FlowState, cfg: SchemeConfig, system: FlowSystem, forcing=None) -> FlowState:
    return GalerkinStepper(system, cfg, forcing).step(state)


def _nlgm_step(scheme: Scheme):
    def step(state: FlowState, cfg: SchemeConfig, system: FlowSystem, hier: TwoGridHierarchy, forcing=None):
        return NLGMStepper(system, hier, replace(cfg, scheme=scheme), forcing).step(state)

    step.__name__ = f"step_{scheme.value.replace('-', '_')}"
    return step


step_nlgm1 = _nlgm_step(Scheme.NLGM1)
step_nlgm2 = _nlgm_step(Scheme.NLGM2)
step_nlgm_lin = _nlgm_step(Scheme.NLGM_LIN)


def handoff(cfg: SchemeConfig, galerkin_state: FlowState, system: FlowSystem, hier: TwoGridHierarchy,
            forcing=None) -> FlowState:
    return NLGMStepper(system, hier, cfg, forcing).handoff(galerkin_state)


# ---------------------------------------------------------------- trajectories


@dataclass
class Trajectory:
    states: list  # FlowState; only the last one unless keep_states
    diagnostics: list  # one dict per accepted step

    @property
    def final(self) -> FlowState:
        return self.states[-1]


def initial_state(system: FlowSystem, problem) -> FlowState:
    """u_h(0): L2 projection of the initial velocity onto discretely divergence-free fields."""
    u = system.l2_projection(problem.initial_velocity, 0.0)
    return FlowState(0.0, system.red.expand(u), np.zeros(system.np))


def _record(system: FlowSystem, state: FlowState, step: int, hier=None) -> dict:
    u = state.u
    row = {
        "step": step,
        "t": state.t,
        "energy": float(np.sqrt(max(u @ (system.M_full @ u), 0.0))),
        "grad_norm": float(np.sqrt(max(u @ (system.A_full @ u), 0.0))),
        "z_norm": float(np.sqrt(max(state.z @ (system.M_full @ state.z), 0.0))) if state.z is not None else 0.0,
        "y_norm": hier.coarse_norm(state.y) if (hier is not None and state.y is not None) else None,
    }
    row.update(state.diagnostics)
    return row


def advance(stepper, state: FlowState, n_steps: int, start_step: int, cfg: SchemeConfig,
            keep_states: bool = False, hier=None, check: bool = True) -> Trajectory:
    """Take ``n_steps`` steps from ``state``; times are start_step*dt + k*dt, not accumulated."""
    states = [state]
    diags = []
    for k in range(n_steps):
        idx = start_step + k + 1
        try:
            new = stepper.step(state)
        except Exception as exc:  # noqa: BLE001 - re-raised with step context
            raise StepError(idx, state.t, exc) from exc
        new.t = idx * cfg.dt
        if check:
            _check_constraints(new, idx)
        diags.append(_record(stepper.sys, new, idx, hier))
        state = new
        if keep_states:
            states.append(new)
        else:
            states = [new]
    return Trajectory(states, diags)


def _check_constraints(state: FlowState, idx: int):
    d = state.diagnostics
    if d.get("div_residual", 0.0) > 1e-9:
        raise StepError(idx, state.t, ArithmeticError(f"divergence residual {d['div_residual']:.3e}"))
    if d.get("complement_residual", 0.0) > 1e-9:
        raise StepError(idx, state.t, ArithmeticError(f"complement residual {d['complement_residual']:.3e}"))


def run(cfg: SchemeConfig, problem, system: FlowSystem, hier: Optional[TwoGridHierarchy] = None,
        keep_states: bool = False, start: Optional[FlowState] = None) -> Trajectory:
    """Galerkin on (0, t0], handoff, then the configured scheme up to t_end.

    For Galerkin schemes the whole interval uses ``system`` (pass the coarse
    system for GalerkinCoarse). ``start`` overrides the initial state at t=0.
    """
    if getattr(problem, "nu", cfg.nu) != cfg.nu:
        raise ValueError(f"problem was built for nu={problem.nu}, config has nu={cfg.nu}")
    forcing = problem.forcing
    state = initial_state(system, problem) if start is None else start
    if not cfg.scheme.is_nlgm or cfg.n0 == cfg.n_steps:
        return advance(GalerkinStepper(system, cfg, forcing), state, cfg.n_steps, 0, cfg, keep_states)
    gal = GalerkinStepper(system, cfg, forcing)
    first = advance(gal, state, cfg.n0, 0, cfg, keep_states)
    nl = NLGMStepper(system, hier, cfg, forcing)
    return continue_nlgm(nl, first.final, cfg, keep_states, prefix=first)


def continue_nlgm(stepper: NLGMStepper, galerkin_t0: FlowState, cfg: SchemeConfig, keep_states: bool = False,
                  prefix: Optional[Trajectory] = None) -> Trajectory:
    """Handoff from a Galerkin state at t0, then NLGM steps to t_end."""
    try:
        s0 = stepper.handoff(galerkin_t0)
    except Exception as exc:  # noqa: BLE001
        raise StepError(cfg.n0, galerkin_t0.t, exc) from exc
    s0.t = cfg.n0 * cfg.dt
    rest = advance(stepper, s0, cfg.n_steps - cfg.n0, cfg.n0, cfg, keep_states, hier=stepper.hier)
    if prefix is None:
        return rest
    states = (prefix.states + rest.states) if keep_states else rest.states
    return Trajectory(states, prefix.diagnostics + rest.diagnostics)
