"""Lagrange finite element spaces and assembly of the Navier-Stokes forms.

Velocity dofs are blocked by component: all x-components, then all
y-components. Scalar bases are evaluated through barycentric coordinates of
the triangle of the *host* mesh that contains each quadrature point, so a
basis living on a coarser ancestor mesh (the P1isoP2 pressure, or a coarse
velocity space in a two-grid pair) is integrated exactly on the fine mesh.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .mesh import MeshFamily, TriMesh


# Symmetric triangle rules: barycentric points and weights summing to 1.
def _rule_deg2():
    a, b = 1.0 / 6.0, 2.0 / 3.0
    pts = np.array([[b, a, a], [a, b, a], [a, a, b]])
    return pts, np.full(3, 1.0 / 3.0)


def _rule_deg5():
    s15 = np.sqrt(15.0)
    a1 = (6.0 - s15) / 21.0
    a2 = (6.0 + s15) / 21.0
    w1 = (155.0 - s15) / 1200.0
    w2 = (155.0 + s15) / 1200.0
    pts = [[1 / 3, 1 / 3, 1 / 3]]
    wts = [9.0 / 40.0]
    for a, w in ((a1, w1), (a2, w2)):
        c = 1.0 - 2.0 * a
        pts += [[c, a, a], [a, c, a], [a, a, c]]
        wts += [w, w, w]
    return np.array(pts), np.array(wts)


QUAD2 = _rule_deg2()
QUAD5 = _rule_deg5()


class ElementKind(str, Enum):
    P1ISOP2 = "p1isop2"
    TAYLOR_HOOD = "th"


def _basis(degree: int, lam: np.ndarray) -> np.ndarray:
    if degree == 1:
        return lam.copy()
    l0, l1, l2 = lam[..., 0], lam[..., 1], lam[..., 2]
    return np.stack(
        [l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1), 4 * l0 * l1, 4 * l1 * l2, 4 * l2 * l0],
        axis=-1,
    )


def _basis_dlam(degree: int, lam: np.ndarray) -> np.ndarray:
    """Derivatives with respect to (l0, l1, l2); shape (..., n_loc, 3)."""
    shape = lam.shape[:-1]
    if degree == 1:
        return np.broadcast_to(np.eye(3), shape + (3, 3)).copy()
    l0, l1, l2 = lam[..., 0], lam[..., 1], lam[..., 2]
    z = np.zeros(shape)
    rows = [
        [4 * l0 - 1, z, z],
        [z, 4 * l1 - 1, z],
        [z, z, 4 * l2 - 1],
        [4 * l1, 4 * l0, z],
        [z, 4 * l2, 4 * l1],
        [4 * l2, z, 4 * l0],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


@dataclass
class Tabulation:
    """Basis data at the quadrature points of an integration mesh."""

    dofs: np.ndarray  # (n_e, n_loc)
    values: np.ndarray  # (n_e, n_q, n_loc)
    grads: np.ndarray  # (n_e, n_q, n_loc, 2)
    weights: np.ndarray  # (n_e, n_q), physical
    points: np.ndarray  # (n_e, n_q, 2)

    def __post_init__(self):
        n_e, n_q, n_loc = self.values.shape
        self.grads_rows = np.ascontiguousarray(self.grads.transpose(0, 1, 3, 2)).reshape(n_e, n_q * 2, n_loc)
        self.values_t = np.ascontiguousarray(self.values.transpose(0, 2, 1))


class LagrangeSpace:
    """Continuous scalar P1 or P2 space on a host mesh."""

    def __init__(self, mesh: TriMesh, degree: int):
        if degree not in (1, 2):
            raise ValueError("degree must be 1 or 2")
        self.mesh = mesh
        self.degree = degree
        if degree == 1:
            self.cell_dofs = np.asarray(mesh.triangles)
            self.dof_coords = np.asarray(mesh.vertices)
        else:
            self.cell_dofs = np.hstack([mesh.triangles, mesh.n_vertices + mesh.triangle_edges])
            mid = 0.5 * (mesh.vertices[mesh.edges[:, 0]] + mesh.vertices[mesh.edges[:, 1]])
            self.dof_coords = np.vstack([mesh.vertices, mid])
        x = self.dof_coords
        on = (x[:, 0] == 0.0) | (x[:, 0] == 1.0) | (x[:, 1] == 0.0) | (x[:, 1] == 1.0)
        self.boundary_dofs = np.flatnonzero(on)
        self._tab_cache: dict = {}

    @property
    def n_dofs(self) -> int:
        return self.dof_coords.shape[0]

    def locate(self, mesh: TriMesh, points: np.ndarray, cells: np.ndarray):
        """Barycentrics of ``points[e, ...]`` in the host triangle containing ``mesh`` cell ``cells[e]``.

        Returns host triangle indices, barycentrics ``(n_e, ..., 3)`` and
        barycentric gradients ``(n_e, 3, 2)``.
        """
        host = mesh.ancestor_triangles(self.mesh)[cells]
        p = self.mesh.vertices[self.mesh.triangles[host]]
        jac = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=-1)  # columns
        inv = np.linalg.inv(jac)
        extra = points.ndim - 2
        d = points - p[:, 0].reshape((-1,) + (1,) * extra + (2,))
        l12 = np.einsum("eij,e...j->e...i", inv, d)
        lam = np.concatenate([1.0 - l12.sum(axis=-1, keepdims=True), l12], axis=-1)
        dlam = np.concatenate([-inv.sum(axis=1, keepdims=True), inv], axis=1)
        return host, lam, dlam

    def tabulate(self, mesh: TriMesh, rule=QUAD5) -> Tabulation:
        """Basis values/gradients at ``rule`` points of every triangle of ``mesh``.

        ``mesh`` must be the host mesh or one of its refinements.
        """
        key = (id(mesh), id(rule))
        hit = self._tab_cache.get(key)
        if hit is not None and hit[0] is mesh:
            return hit[1]
        if not mesh.is_refinement_of(self.mesh):
            raise ValueError("integration mesh does not refine the space's mesh")
        bary, w = rule
        tri = mesh.vertices[mesh.triangles]  # (n_e, 3, 2)
        points = np.einsum("qk,ekd->eqd", bary, tri)
        cells = np.arange(mesh.n_triangles)
        host, lam, dlam = self.locate(mesh, points, cells)
        values = _basis(self.degree, lam)
        grads = np.einsum("eqik,ekd->eqid", _basis_dlam(self.degree, lam), dlam)
        weights = np.abs(mesh.signed_areas)[:, None] * w[None, :]
        tab = Tabulation(self.cell_dofs[host], values, grads, weights, points)
        self._tab_cache[key] = (mesh, tab)
        return tab

    def evaluate_basis_at(self, mesh: TriMesh, points: np.ndarray, cells: np.ndarray):
        """Basis values at points lying in ``mesh`` cells; returns (dofs, values)."""
        host, lam, _ = self.locate(mesh, points, cells)
        return self.cell_dofs[host], _basis(self.degree, lam)


class Pattern:
    """Fixed CSR sparsity for element-by-element assembly.

    Summation into each entry follows element order, so results are
    bit-reproducible.
    """

    def __init__(self, row_dofs: np.ndarray, col_dofs: np.ndarray, shape: tuple[int, int]):
        self.shape = shape
        r = np.repeat(row_dofs[:, :, None], col_dofs.shape[1], axis=2)
        c = np.repeat(col_dofs[:, None, :], row_dofs.shape[1], axis=1)
        keys = r.ravel().astype(np.int64) * shape[1] + c.ravel()
        uniq, self.scatter = np.unique(keys, return_inverse=True)
        self.rows = (uniq // shape[1]).astype(np.int32)
        self.indices = (uniq % shape[1]).astype(np.int32)
        self.indptr = np.searchsorted(self.rows, np.arange(shape[0] + 1)).astype(np.int32)

    def matrix(self, local: np.ndarray) -> sp.csr_matrix:
        data = np.bincount(self.scatter, weights=local.ravel(), minlength=self.indices.size)
        return sp.csr_matrix((data, self.indices.copy(), self.indptr.copy()), shape=self.shape)


class VelocitySpace:
    """Two-component velocity space, blocked layout (all x then all y)."""

    def __init__(self, scalar: LagrangeSpace, kind: ElementKind):
        self.scalar = scalar
        self.kind = ElementKind(kind)
        self.mesh = scalar.mesh
        ns = scalar.n_dofs
        bd = scalar.boundary_dofs
        self.dirichlet_dofs = np.concatenate([bd, bd + ns])
        mask = np.ones(2 * ns, dtype=bool)
        mask[self.dirichlet_dofs] = False
        self.free_dofs = np.flatnonzero(mask)
        self.dof_coords = np.vstack([scalar.dof_coords, scalar.dof_coords])

    @property
    def n_dofs(self) -> int:
        return 2 * self.scalar.n_dofs

    @property
    def n_scalar(self) -> int:
        return self.scalar.n_dofs

    @property
    def degree(self) -> int:
        return self.scalar.degree

    @property
    def mass_rule(self):
        return QUAD2 if self.degree == 1 else QUAD5

    @property
    def convection_rule(self):
        # integrand degree is 3k - 1: 2 for P1, 5 for P2
        return QUAD2 if self.degree == 1 else QUAD5

    def tabulate(self, rule=None) -> Tabulation:
        return self.scalar.tabulate(self.mesh, rule or self.mass_rule)

    @cached_property
    def _pattern(self) -> Pattern:
        d = self.scalar.cell_dofs
        return Pattern(d, d, (self.n_scalar, self.n_scalar))

    def interpolate(self, field, t: float = 0.0) -> np.ndarray:
        """Nodal interpolant of ``field(x, y, t) -> (u1, u2)``."""
        x = self.scalar.dof_coords
        u1, u2 = field(x[:, 0], x[:, 1], t)
        return np.concatenate([np.broadcast_to(u1, x[:, 0].shape), np.broadcast_to(u2, x[:, 0].shape)]).astype(float)

    def block(self, scalar_matrix: sp.spmatrix) -> sp.csr_matrix:
        return sp.block_diag([scalar_matrix, scalar_matrix], format="csr")


class PressureSpace:
    """Continuous P1 pressure, zero mean enforced through a multiplier."""

    zero_mean = True

    def __init__(self, mesh: TriMesh):
        self.scalar = LagrangeSpace(mesh, 1)
        self.mesh = mesh

    @property
    def n_dofs(self) -> int:
        return self.scalar.n_dofs


def build_velocity_space(family: MeshFamily, level: int, kind=ElementKind.P1ISOP2) -> VelocitySpace:
    """Velocity space whose mesh is ``family[level]``.

    For P1isoP2 the velocity mesh is the once-refined pressure mesh, so the
    matching pressure lives on ``family[level - 1]``.
    """
    kind = ElementKind(kind)
    if kind is ElementKind.P1ISOP2:
        if level < 1:
            raise ValueError("P1isoP2 needs velocity level >= 1 (pressure mesh one level coarser)")
        return VelocitySpace(LagrangeSpace(family[level], 1), kind)
    return VelocitySpace(LagrangeSpace(family[level], 2), kind)


def build_pressure_space(family: MeshFamily, level: int, kind=ElementKind.P1ISOP2) -> PressureSpace:
    kind = ElementKind(kind)
    plevel = level - 1 if kind is ElementKind.P1ISOP2 else level
    if plevel < 0:
        raise ValueError("pressure level must be nonnegative")
    return PressureSpace(family[plevel])


# ---------------------------------------------------------------- assembly


def assemble_scalar_mass(V: VelocitySpace) -> sp.csr_matrix:
    tab = V.tabulate()
    local = (tab.values * tab.weights[..., None]).transpose(0, 2, 1) @ tab.values
    return V._pattern.matrix(local)


def assemble_scalar_stiffness(V: VelocitySpace) -> sp.csr_matrix:
    tab = V.tabulate()
    local = np.einsum("eq,eqid,eqjd->eij", tab.weights, tab.grads, tab.grads)
    return V._pattern.matrix(local)


def assemble_mass(V: VelocitySpace) -> sp.csr_matrix:
    """Full (unreduced) vector mass matrix, M[i, j] = (phi_j, phi_i)."""
    return V.block(assemble_scalar_mass(V))


def assemble_stiffness(V: VelocitySpace) -> sp.csr_matrix:
    """Full vector stiffness matrix, A[i, j] = (grad phi_j, grad phi_i)."""
    return V.block(assemble_scalar_stiffness(V))


def assemble_divergence(V: VelocitySpace, Q: PressureSpace) -> sp.csr_matrix:
    """B[q, v] = (div phi_v, psi_q), integrated on the velocity mesh."""
    if not V.mesh.is_refinement_of(Q.mesh):
        raise ValueError("velocity mesh must equal or refine the pressure mesh")
    rule = V.mass_rule
    tv = V.scalar.tabulate(V.mesh, rule)
    tq = Q.scalar.tabulate(V.mesh, rule)
    blocks = []
    for d in range(2):
        local = np.einsum("eq,eqi,eqj->eij", tv.weights, tq.values, tv.grads[..., d])
        blocks.append(Pattern(tq.dofs, tv.dofs, (Q.n_dofs, V.n_scalar)).matrix(local))
    return sp.hstack(blocks, format="csr")


def pressure_mean_vector(Q: PressureSpace) -> np.ndarray:
    """m[q] = integral of psi_q."""
    tab = Q.scalar.tabulate(Q.mesh, QUAD2)
    return np.bincount(
        tab.dofs.ravel(), weights=np.einsum("eq,eqi->ei", tab.weights, tab.values).ravel(), minlength=Q.n_dofs
    )


def _split(V: VelocitySpace, c: np.ndarray):
    c = np.asarray(c, dtype=float)
    if c.shape != (V.n_dofs,):
        raise ValueError(f"coefficient vector has shape {c.shape}, expected ({V.n_dofs},)")
    return c[: V.n_scalar], c[V.n_scalar :]


def _at_quad(tab: Tabulation, V: VelocitySpace, c: np.ndarray):
    """Field values (n_e, n_q, 2) and gradients (n_e, n_q, 2, 2) [component, direction]."""
    comps = _split(V, c)
    n_e, n_q, n_loc = tab.values.shape
    coef = np.stack([ck[tab.dofs] for ck in comps], axis=-1)  # (e, i, 2)
    vals = tab.values @ coef
    grads = (tab.grads_rows @ coef).reshape(n_e, n_q, 2, 2)
    return vals, grads.transpose(0, 1, 3, 2)


def trilinear_b(V: VelocitySpace, v, w, phi) -> float:
    """Skew-symmetrized b(v, w, phi) = 1/2 (v.grad w, phi) - 1/2 (v.grad phi, w)."""
    tab = V.tabulate(QUAD5)
    vv, _ = _at_quad(tab, V, v)
    wv, wg = _at_quad(tab, V, w)
    pv, pg = _at_quad(tab, V, phi)
    t1 = np.sum(np.sum(wg * vv[:, :, None, :], axis=-1) * pv, axis=-1)
    t2 = np.sum(np.sum(pg * vv[:, :, None, :], axis=-1) * wv, axis=-1)
    return float(0.5 * np.sum(tab.weights * (t1 - t2)))


def _transport_grads(tab: Tabulation, wv: np.ndarray) -> np.ndarray:
    """(w . grad psi_i) at quadrature points, shape (n_e, n_q, n_loc)."""
    return tab.grads[..., 0] * wv[..., 0:1] + tab.grads[..., 1] * wv[..., 1:2]


def assemble_scalar_convection(V: VelocitySpace, w) -> sp.csr_matrix:
    """Scalar skew block C with C[i, j] = b(w, psi_j, psi_i) for scalar bases."""
    tab = V.tabulate(V.convection_rule)
    wv, _ = _at_quad(tab, V, w)
    gw = _transport_grads(tab, wv)
    s = (tab.values_t * tab.weights[:, None, :]) @ gw
    local = 0.5 * (s - s.transpose(0, 2, 1))
    return V._pattern.matrix(local)


def assemble_convection(V: VelocitySpace, w) -> sp.csr_matrix:
    """N(w)[i, j] = b(w, phi_j, phi_i); exactly skew-symmetric."""
    return V.block(assemble_scalar_convection(V, w))


def convection_vector(V: VelocitySpace, w, u) -> np.ndarray:
    """Vector with entries b(w, u, phi_i), without forming the matrix."""
    tab = V.tabulate(V.convection_rule)
    wv, _ = _at_quad(tab, V, w)
    uv, ug = _at_quad(tab, V, u)
    gw_t = _transport_grads(tab, wv).transpose(0, 2, 1)
    W = tab.weights
    w0, w1 = wv[..., 0], wv[..., 1]
    out = []
    for c in range(2):
        adv = W * (ug[:, :, c, 0] * w0 + ug[:, :, c, 1] * w1)
        loc = tab.values_t @ adv[..., None] - gw_t @ (W * uv[..., c])[..., None]
        out.append(np.bincount(tab.dofs.ravel(), weights=0.5 * loc.ravel(), minlength=V.n_scalar))
    return np.concatenate(out)


def load_vector(V: VelocitySpace, f, t: float) -> np.ndarray:
    """F[i] = (f(., t), phi_i) with the degree-5 rule; ``f(x, y, t) -> (f1, f2)``."""
    tab = V.tabulate(QUAD5)
    x, y = tab.points[..., 0], tab.points[..., 1]
    f1, f2 = f(x, y, t)
    out = []
    for fk in (f1, f2):
        fk = np.broadcast_to(fk, x.shape)
        loc = np.einsum("eq,eq,eqi->ei", tab.weights, fk, tab.values)
        out.append(np.bincount(tab.dofs.ravel(), weights=loc.ravel(), minlength=V.n_scalar))
    return np.concatenate(out)


# ---------------------------------------------------------------- boundary conditions


class DirichletReduction:
    """Symmetric elimination of homogeneous Dirichlet dofs."""

    def __init__(self, n: int, dirichlet):
        self.n = n
        mask = np.ones(n, dtype=bool)
        mask[np.asarray(dirichlet, dtype=int)] = False
        self.free = np.flatnonzero(mask)
        self.dirichlet = np.flatnonzero(~mask)

    @property
    def n_free(self) -> int:
        return self.free.size

    def matrix(self, A) -> sp.csr_matrix:
        return sp.csr_matrix(A)[self.free][:, self.free]

    def columns(self, B) -> sp.csr_matrix:
        return sp.csr_matrix(B)[:, self.free]

    def vector(self, x) -> np.ndarray:
        return np.asarray(x)[self.free]

    def expand(self, x) -> np.ndarray:
        out = np.zeros(self.n)
        out[self.free] = x
        return out


def apply_dirichlet(A, dirichlet, rhs=None):
    """Eliminate Dirichlet rows/columns; returns ``(A_red, rhs_red, reduction)``."""
    red = DirichletReduction(A.shape[0], dirichlet)
    return red.matrix(A), None if rhs is None else red.vector(rhs), red


# ---------------------------------------------------------------- norms


def l2_norm(V: VelocitySpace, f) -> float:
    """||f|| by quadrature of the field itself (no quadratic-form cancellation)."""
    tab = V.tabulate(V.mass_rule)
    vals, _ = _at_quad(tab, V, f)
    return float(np.sqrt(np.sum(tab.weights * np.sum(vals**2, axis=-1))))


def h1_seminorm(V: VelocitySpace, f) -> float:
    tab = V.tabulate(V.mass_rule)
    _, grads = _at_quad(tab, V, f)
    return float(np.sqrt(np.sum(tab.weights * np.sum(grads**2, axis=(-1, -2)))))


def error_norms(V: VelocitySpace, f, exact, t: float) -> tuple[float, float]:
    """(||u_h - u||, ||grad(u_h - u)||) with the degree-5 rule.

    ``exact`` needs ``velocity(x, y, t)`` and ``velocity_gradient(x, y, t)``;
    the gradient is returned as ((du1/dx, du1/dy), (du2/dx, du2/dy)).
    """
    tab = V.tabulate(QUAD5)
    vals, grads = _at_quad(tab, V, f)
    x, y = tab.points[..., 0], tab.points[..., 1]
    u1, u2 = exact.velocity(x, y, t)
    g = exact.velocity_gradient(x, y, t)
    ev = vals - np.stack([np.broadcast_to(u1, x.shape), np.broadcast_to(u2, x.shape)], axis=-1)
    eg = grads - np.array([[np.broadcast_to(g[i][j], x.shape) for j in range(2)] for i in range(2)]).transpose(2, 3, 0, 1)
    l2 = np.sum(tab.weights * np.sum(ev**2, axis=-1))
    h1 = np.sum(tab.weights * np.sum(eg**2, axis=(-1, -2)))
    return float(np.sqrt(l2)), float(np.sqrt(h1))
