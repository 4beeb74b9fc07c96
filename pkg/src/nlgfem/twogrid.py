"""L2-orthogonal splitting of a fine velocity space into coarse and complement parts.

All vectors here are *reduced* coefficient vectors (Dirichlet dofs removed).
The coarse space enters only through the prolongation P, and the complement
is never given a basis: membership is the algebraic constraint P^T M z = 0.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import DirichletReduction, VelocitySpace, assemble_mass, assemble_stiffness
from .linsolve import Factorization


class NonNestedSpaces(ValueError):
    pass


class NonConverged(RuntimeError):
    pass


def prolongation(coarse: VelocitySpace, fine: VelocitySpace) -> sp.csr_matrix:
    """Full (unreduced) nodal interpolation of coarse basis functions at fine dofs."""
    if coarse.kind != fine.kind or coarse.degree != fine.degree:
        raise NonNestedSpaces("coarse and fine spaces use different elements")
    if not fine.mesh.is_refinement_of(coarse.mesh):
        raise NonNestedSpaces("fine mesh is not a refinement of the coarse mesh")
    fs, cs = fine.scalar, coarse.scalar
    cell_dofs = fs.cell_dofs
    # first cell listing each fine dof
    flat = cell_dofs.ravel()
    first = np.unique(flat, return_index=True)[1]
    cells = first // cell_dofs.shape[1]
    pts = fs.dof_coords[np.arange(fs.n_dofs)][:, None, :]
    cdofs, vals = cs.evaluate_basis_at(fine.mesh, pts, cells)
    vals = vals[:, 0, :]
    vals[np.abs(vals) < 1e-13] = 0.0
    rows = np.repeat(np.arange(fs.n_dofs), cdofs.shape[1])
    S = sp.csr_matrix((vals.ravel(), (rows, cdofs.ravel())), shape=(fs.n_dofs, cs.n_dofs))
    S.eliminate_zeros()
    S.sort_indices()
    return sp.block_diag([S, S], format="csr")


@dataclass
class SplitField:
    hierarchy: "TwoGridHierarchy"
    y: np.ndarray  # coarse coefficients
    z: np.ndarray  # fine coefficients of the complement part

    @property
    def u(self) -> np.ndarray:
        return self.hierarchy.P @ self.y + self.z

    def orthogonality_residual(self) -> float:
        return float(np.max(np.abs(self.hierarchy.P.T @ (self.hierarchy.M @ self.z)), initial=0.0))


class TwoGridHierarchy:
    """Coarse/fine velocity pair with the L2 projector onto the coarse space.

    Attributes (reduced)
    --------------------
    P : prolongation, n_h x n_H
    M, A : fine mass and stiffness
    G : coarse Gram matrix P^T M P (equals the coarse mass matrix)
    """

    def __init__(self, coarse: VelocitySpace, fine: VelocitySpace, M=None, A=None):
        self.coarse = coarse
        self.fine = fine
        self.fine_red = DirichletReduction(fine.n_dofs, fine.dirichlet_dofs)
        self.coarse_red = DirichletReduction(coarse.n_dofs, coarse.dirichlet_dofs)
        P = prolongation(coarse, fine)
        self.P_full = P
        self.P = sp.csr_matrix(P[self.fine_red.free][:, self.coarse_red.free])
        self.M = self.fine_red.matrix(assemble_mass(fine)) if M is None else M
        self.A = self.fine_red.matrix(assemble_stiffness(fine)) if A is None else A
        self.MP = sp.csr_matrix(self.M @ self.P)
        self.G = sp.csr_matrix(self.P.T @ self.MP)
        self._G = Factorization(self.G)

    @property
    def H(self) -> float:
        return self.coarse.mesh.spacing

    @property
    def h(self) -> float:
        return self.fine.mesh.spacing

    @property
    def n_coarse(self) -> int:
        return self.P.shape[1]

    @property
    def n_fine(self) -> int:
        return self.P.shape[0]

    @property
    def degenerate(self) -> bool:
        return self.coarse.mesh is self.fine.mesh

    def project_coarse(self, v) -> np.ndarray:
        """Coarse coefficients of the L2 projection of the fine function ``v``."""
        v = np.asarray(v, dtype=float)
        if v.shape != (self.n_fine,):
            raise ValueError(f"expected a reduced fine vector of length {self.n_fine}")
        return self._G.solve(self.P.T @ (self.M @ v))

    def solve_gram(self, r) -> np.ndarray:
        return self._G.solve(r)

    def project(self, v) -> np.ndarray:
        """Fine coefficients of P_H v."""
        return self.P @ self.project_coarse(v)

    def split(self, v) -> SplitField:
        v = np.asarray(v, dtype=float)
        y = self.project_coarse(v)
        return SplitField(self, y, v - self.P @ y)

    def norm(self, v) -> float:
        return float(np.sqrt(max(v @ (self.M @ v), 0.0)))

    def coarse_norm(self, y) -> float:
        return float(np.sqrt(max(y @ (self.G @ y), 0.0)))

    @cached_property
    def _constrained(self) -> Factorization:
        """[[A, MP], [(MP)^T, 0]]: A-type solves restricted to the complement."""
        K = sp.bmat([[self.A, self.MP], [self.MP.T, None]], format="csc")
        return Factorization(K)

    def complement_solve(self, r) -> np.ndarray:
        """w in the complement with a(w, chi) = (r, chi) for all complement chi."""
        n = self.n_fine
        rhs = np.zeros((n + self.n_coarse,) + np.shape(r)[1:])
        rhs[:n] = r
        return self._constrained.solve(rhs)[:n]


def probe_complement_poincare(hier: TwoGridHierarchy, maxiter: int = 10_000) -> float:
    """max ||chi|| / |chi|_1 over the complement, by Arnoldi on the complement operator.

    The operator maps x to w with a(w, chi) = (x, chi) for complement chi; its
    dominant eigenvalue is max ||chi||^2 / |chi|_1^2.
    """
    if hier.degenerate or hier.n_fine == hier.n_coarse:
        return 0.0
    n = hier.n_fine
    op = spla.LinearOperator((n, n), matvec=lambda x: hier.complement_solve(hier.M @ x), dtype=float)
    v0 = np.ones(n)
    v0 -= hier.project(v0)
    try:
        vals = spla.eigs(op, k=1, which="LM", v0=v0, maxiter=maxiter, tol=1e-12, return_eigenvectors=False)
    except spla.ArpackNoConvergence as exc:
        raise NonConverged("complement Poincare probe did not converge") from exc
    return float(np.sqrt(np.max(vals.real)))


def probe_full_poincare(hier: TwoGridHierarchy) -> float:
    """max ||v|| / |v|_1 over the whole fine space (discrete Poincare constant)."""
    n = hier.n_fine
    F = Factorization(hier.A)
    op = spla.LinearOperator((n, n), matvec=lambda x: F.solve(hier.M @ x), dtype=float)
    vals = spla.eigs(op, k=1, which="LM", v0=np.ones(n), maxiter=10_000, tol=1e-12, return_eigenvectors=False)
    return float(np.sqrt(np.max(vals.real)))


def probe_strengthened_cs(hier: TwoGridHierarchy) -> float:
    """sup |a(phi, chi)| / (|phi|_1 |chi|_1) over coarse phi and complement chi.

    For a coarse phi, its A-orthogonal projection w onto the complement gives
    sup_chi a(phi, chi)/|chi|_1 = |w|_1, so the squared constant is the largest
    eigenvalue of (P^T A W, P^T A P) with W the projections of all coarse basis
    functions. Returns 1 - rho.
    """
    if hier.degenerate or hier.n_fine == hier.n_coarse:
        return 0.0
    AP = (hier.A @ hier.P).toarray()
    W = hier.complement_solve(AP)
    K = hier.P.T @ (hier.A @ W)
    K = 0.5 * (K + K.T)
    AH = (hier.P.T @ hier.A @ hier.P).toarray()
    lam = sla.eigh(K, AH, eigvals_only=True)
    return float(np.sqrt(max(lam[-1], 0.0)))


@dataclass(frozen=True)
class SmallnessReport:
    H: float
    L_H: float
    y_norm: float
    product: float
    nu: float


def smallness_report(hier: TwoGridHierarchy, y, nu: float, H: float | None = None) -> SmallnessReport:
    """Monitoring quantity L_H ||y|| with L_H = |log H|^(1/2); not a pass/fail gate."""
    H = hier.H if H is None else H
    L = float(np.sqrt(abs(np.log(H))))
    yn = hier.coarse_norm(np.asarray(y, dtype=float))
    return SmallnessReport(H, L, yn, L * yn, nu)
