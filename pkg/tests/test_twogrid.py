import numpy as np
import pytest

from nlgfem import fem, twogrid as tg
from nlgfem.fem import DirichletReduction
from nlgfem.mesh import MeshFamily, unit_square_mesh


@pytest.fixture(scope="module")
def fam():
    return MeshFamily()


def hierarchy(fam, coarse, fine, kind="p1isop2"):
    return tg.TwoGridHierarchy(fem.build_velocity_space(fam, coarse, kind), fem.build_velocity_space(fam, fine, kind))


@pytest.fixture(scope="module")
def h24(fam):
    return hierarchy(fam, 2, 4)


@pytest.mark.parametrize("kind", ["p1isop2", "th"])
def test_prolongation_reproduces_coarse_functions(fam, kind):
    cV, fV = (fem.build_velocity_space(fam, k, kind) for k in (2, 4))
    P = tg.prolongation(cV, fV)
    quad = lambda x, y, t: (1 + 2 * x - y + (x * y if kind == "th" else 0), x - 3 * y)  # noqa: E731
    np.testing.assert_allclose(P @ cV.interpolate(quad), fV.interpolate(quad), atol=1e-14)
    np.testing.assert_allclose(P @ np.ones(cV.n_dofs), np.ones(fV.n_dofs), atol=1e-14)


def test_prolongation_pointwise_exact(fam, rng):
    cV, fV = (fem.build_velocity_space(fam, k, "th") for k in (1, 3))
    y = rng.standard_normal(cV.n_dofs)
    u = tg.prolongation(cV, fV) @ y
    # compare at the fine quadrature points
    tc = cV.scalar.tabulate(fV.mesh, fem.QUAD5)
    tf = fV.scalar.tabulate(fV.mesh, fem.QUAD5)
    for c in range(2):
        vc = np.einsum("eqi,ei->eq", tc.values, y[c * cV.n_scalar :][tc.dofs])
        vf = np.einsum("eqi,ei->eq", tf.values, u[c * fV.n_scalar :][tf.dofs])
        np.testing.assert_allclose(vf, vc, atol=1e-13)


def test_gram_equals_coarse_mass(fam, h24):
    cV = h24.coarse
    Mc = DirichletReduction(cV.n_dofs, cV.dirichlet_dofs).matrix(fem.assemble_mass(cV))
    assert abs(h24.G - Mc).max() <= 1e-13
    np.linalg.cholesky(h24.G.toarray())


def test_non_nested_rejected(fam):
    V = fem.build_velocity_space(fam, 2)
    other = fem.VelocitySpace(fem.LagrangeSpace(unit_square_mesh(8), 1), "p1isop2")
    with pytest.raises(tg.NonNestedSpaces):
        tg.TwoGridHierarchy(V, other)
    with pytest.raises(tg.NonNestedSpaces):
        tg.TwoGridHierarchy(fem.build_velocity_space(fam, 1, "th"), fem.build_velocity_space(fam, 3, "p1isop2"))


def test_projector_properties(h24, rng):
    n = h24.n_fine
    v, w = rng.standard_normal((2, n))
    Pv = h24.project(v)
    assert h24.norm(h24.project(Pv) - Pv) <= 1e-10 * h24.norm(v)
    # M-self-adjoint
    lhs, rhs = Pv @ (h24.M @ w), v @ (h24.M @ h24.project(w))
    assert abs(lhs - rhs) <= 1e-10 * h24.norm(v) * h24.norm(w)
    sf = h24.split(v)
    assert sf.orthogonality_residual() <= 1e-10
    np.testing.assert_array_equal(sf.u, h24.P @ sf.y + sf.z)
    np.testing.assert_allclose(sf.u, v, atol=1e-14)
    total = h24.norm(v) ** 2
    assert abs(total - h24.norm(h24.P @ sf.y) ** 2 - h24.norm(sf.z) ** 2) <= 1e-9 * total


def test_project_coarse_fixes_subspace(h24, rng):
    y0 = rng.standard_normal(h24.n_coarse)
    np.testing.assert_allclose(h24.project_coarse(h24.P @ y0), y0, atol=1e-11)
    assert np.max(np.abs(h24.split(h24.P @ y0).z)) <= 1e-11
    assert np.all(h24.project_coarse(np.zeros(h24.n_fine)) == 0)
    with pytest.raises(ValueError):
        h24.project_coarse(np.zeros(3))


def test_project_coarse_matches_dense_oracle(fam):
    hier = hierarchy(fam, 2, 4)
    fV = hier.fine
    field = lambda x, y, t: (np.sin(2 * np.pi * x) * np.sin(2 * np.pi * y), 0 * x)  # noqa: E731
    v = hier.fine_red.vector(fV.interpolate(field))
    P, M = hier.P.toarray(), hier.M.toarray()
    y_ref = np.linalg.solve(P.T @ M @ P, P.T @ M @ v)
    y = hier.project_coarse(v)
    np.testing.assert_allclose(y, y_ref, atol=1e-12 * np.abs(y_ref).max())
    # (v - P y, phi_H) = 0 for every coarse basis function
    assert np.max(np.abs(P.T @ M @ (v - P @ y))) <= 1e-10
    rep = tg.smallness_report(hier, y, nu=1.0)
    assert rep.y_norm == pytest.approx(np.sqrt(y_ref @ (P.T @ M @ P) @ y_ref), rel=1e-12)


def test_complement_shrinks_under_coarse_refinement(fam):
    field = lambda x, y, t: (np.sin(np.pi * x) * np.sin(2 * np.pi * y), x * y * (1 - x) * (1 - y))  # noqa: E731
    zs = []
    for c in (2, 3):
        h = hierarchy(fam, c, 5)
        zs.append(h.norm(h.split(h.fine_red.vector(h.fine.interpolate(field))).z))
    assert zs[1] < zs[0] / 3


def test_degenerate_hierarchy(fam, rng):
    V = fem.build_velocity_space(fam, 3)
    h = tg.TwoGridHierarchy(V, V)
    assert h.degenerate and h.n_coarse == h.n_fine
    v = rng.standard_normal(h.n_fine)
    np.testing.assert_allclose(h.project(v), v, atol=1e-12)
    assert tg.probe_complement_poincare(h) == 0.0
    assert tg.probe_strengthened_cs(h) == 0.0


def test_probes_bounded(fam, h24):
    c = tg.probe_complement_poincare(h24)
    assert 0 < c <= tg.probe_full_poincare(h24)
    assert 0 < tg.probe_strengthened_cs(h24) < 1


def test_strengthened_cs_bounds_energy_of_sum(h24, rng):
    omr = tg.probe_strengthened_cs(h24)
    rho = 1 - omr
    A = h24.A
    for _ in range(5):
        phi = h24.P @ rng.standard_normal(h24.n_coarse)
        chi = h24.split(rng.standard_normal(h24.n_fine)).z
        a = lambda u, v: u @ (A @ v)  # noqa: E731
        assert abs(a(phi, chi)) <= omr * np.sqrt(a(phi, phi) * a(chi, chi)) * (1 + 1e-10)
        s = phi + chi
        assert rho * (a(phi, phi) + a(chi, chi)) <= a(s, s) * (1 + 1e-10)


def test_probes_deterministic(h24):
    assert tg.probe_complement_poincare(h24) == tg.probe_complement_poincare(h24)


def test_smallness_report():
    fam = MeshFamily()
    h = hierarchy(fam, 1, 2)
    assert tg.smallness_report(h, np.zeros(h.n_coarse), 1.0).product == 0.0
    assert tg.smallness_report(h, np.ones(h.n_coarse), 1.0, H=np.exp(-1.0)).L_H == pytest.approx(1.0, rel=1e-15)
