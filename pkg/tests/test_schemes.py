from dataclasses import replace

import numpy as np
import pytest

from nlgfem import fem, mms, twogrid as tg
from nlgfem.mesh import MeshFamily
from nlgfem.schemes import (
    FlowState, FlowSystem, GalerkinStepper, NLGMStepper, PicardDiverged, Scheme, SchemeConfig, StepError,
    TimeRule, advance, handoff, initial_state, run, step_galerkin, step_nlgm1, step_nlgm2, step_nlgm_lin,
)

NLGM = ["nlgm1", "nlgm2", "nlgm-lin"]
STEPS = {"nlgm1": step_nlgm1, "nlgm2": step_nlgm2, "nlgm-lin": step_nlgm_lin}


@pytest.fixture(scope="module")
def fam():
    return MeshFamily()


@pytest.fixture(scope="module")
def fine(fam):
    return FlowSystem.build(fam, 4)


@pytest.fixture(scope="module")
def hier(fam, fine):
    return tg.TwoGridHierarchy(fem.build_velocity_space(fam, 2), fine.V, fine.M, fine.A)


def zero_state(system, hier=None):
    s = FlowState(0.0, np.zeros(system.V.n_dofs), np.zeros(system.np))
    if hier is not None:
        s.y, s.z, s.mu = np.zeros(hier.n_coarse), np.zeros(system.V.n_dofs), np.zeros(hier.n_coarse)
    return s


def m_norm(system, u):
    return float(np.sqrt(u @ (system.M_full @ u)))


# -- configuration


@pytest.mark.parametrize(
    "kwargs",
    [dict(nu=0), dict(dt=-1), dict(t0=0.5, t_end=0.25), dict(picard_tol=1.0), dict(picard_max=0),
     dict(scheme="nlgm1", t0=0.0), dict(handoff="guess"), dict(dt=0.3), dict(scheme="nlgm3")],
)
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        SchemeConfig(**kwargs)


def test_config_steps():
    cfg = SchemeConfig()
    assert (cfg.n0, cfg.n_steps) == (32, 128)
    assert cfg.scheme is Scheme.NLGM1 and cfg.time_rule is TimeRule.BACKWARD_EULER
    assert TimeRule("cn").theta == 0.5


# -- zero fixed point and energy


def test_galerkin_zero_fixed_point(fine):
    out = step_galerkin(zero_state(fine), SchemeConfig(scheme="galerkin-fine"), fine)
    assert np.all(out.u == 0) and out.t == pytest.approx(1 / 512)


@pytest.mark.parametrize("scheme", NLGM)
def test_nlgm_zero_fixed_point(fine, hier, scheme):
    out = STEPS[scheme](zero_state(fine, hier), SchemeConfig(), fine, hier)
    assert np.all(out.u == 0) and np.all(out.z == 0)


@pytest.mark.parametrize("rule", ["be", "cn"])
def test_galerkin_energy_dissipation(fine, rule):
    prob = mms.decay1(1.0)
    cfg = SchemeConfig(scheme="galerkin-fine", dt=1 / 64, t0=0.0, t_end=10 / 64, time_rule=rule)
    tr = run(cfg, prob, fine)
    e = [m_norm(fine, initial_state(fine, prob).u)] + [d["energy"] for d in tr.diagnostics]
    assert np.all(np.diff(e) <= 1e-14 * e[0])


# -- steady Stokes limit


@pytest.fixture(scope="module")
def stokes_ref(fine):
    prob = mms.stokes1(1.0)
    u, p = fine.steady_stokes(prob.forcing, 1.0)
    return prob, u, p


def test_galerkin_step_keeps_steady_stokes(fine, stokes_ref):
    prob, u, p = stokes_ref
    cfg = SchemeConfig(scheme="galerkin-fine", convection=False)
    st = FlowState(0.0, fine.red.expand(u), p)
    out = GalerkinStepper(fine, cfg, prob.forcing).step(st)
    assert np.max(np.abs(out.u - st.u)) <= 1e-10


@pytest.mark.parametrize("scheme", NLGM)
def test_nlgm_steady_stokes_fixed_point(fine, hier, stokes_ref, scheme):
    prob, u, p = stokes_ref
    cfg = SchemeConfig(scheme=scheme, convection=False, dt=1.0, t0=1.0, t_end=12.0)
    tr = run(cfg, prob, fine, hier)
    assert np.max(np.abs(fine.red.vector(tr.final.u) - u)) <= 1e-10


# -- degenerate hierarchy: NLGM collapses to Galerkin


@pytest.mark.parametrize("scheme", NLGM)
@pytest.mark.parametrize("rule", ["be", "cn"])
def test_degenerate_hierarchy_is_galerkin(fam, scheme, rule):
    coarse = FlowSystem.build(fam, 3)
    h = tg.TwoGridHierarchy(coarse.V, coarse.V, coarse.M, coarse.A)
    prob = mms.mms1(1.0)
    cfg = SchemeConfig(scheme=scheme, dt=1 / 128, t0=1 / 128, t_end=4 / 128, time_rule=rule, picard_tol=1e-13)
    a = run(cfg, prob, coarse, h).final
    b = run(replace(cfg, scheme="galerkin-coarse"), prob, coarse).final
    assert np.max(np.abs(a.u - b.u)) <= 1e-10 * np.max(np.abs(b.u))
    assert np.max(np.abs(a.z)) <= 1e-10


# -- handoff and NLGM steps from a Galerkin state


@pytest.fixture(scope="module")
def galerkin_t0(fine):
    cfg = SchemeConfig(scheme="galerkin-fine", dt=1 / 64, t0=0.0, t_end=4 / 64)
    return run(cfg, mms.mms1(1.0), fine).final


@pytest.mark.parametrize("mode", ["static", "projection"])
@pytest.mark.parametrize("scheme", NLGM)
def test_handoff(fine, hier, galerkin_t0, scheme, mode):
    cfg = SchemeConfig(scheme=scheme, dt=1 / 64, t0=4 / 64, t_end=8 / 64, handoff=mode)
    s0 = handoff(cfg, galerkin_t0, fine, hier, mms.mms1(1.0).forcing)
    u0 = fine.red.vector(s0.u)
    y_ref = hier.project_coarse(fine.red.vector(galerkin_t0.u))
    np.testing.assert_allclose(s0.y, y_ref, atol=1e-10 * np.abs(y_ref).max())
    np.testing.assert_allclose(hier.project_coarse(u0), s0.y, atol=1e-10 * np.abs(y_ref).max())
    np.testing.assert_allclose(s0.u, fine.red.expand(hier.P @ s0.y) + s0.z, atol=1e-14)
    assert s0.diagnostics["complement_residual"] <= 1e-9 and s0.diagnostics["div_residual"] <= 1e-9
    z_ref = hier.split(fine.red.vector(galerkin_t0.u)).z
    if mode == "projection":
        np.testing.assert_allclose(fine.red.vector(s0.z), z_ref, atol=1e-12)
    else:
        # the static complement is of the same size as the true small scales
        ratio = hier.norm(fine.red.vector(s0.z)) / hier.norm(z_ref)
        assert 0.3 < ratio < 3
        assert s0.diagnostics["residual"] <= 1e-10


@pytest.mark.parametrize("scheme", NLGM)
@pytest.mark.parametrize("rule", ["be", "cn"])
def test_nlgm_constraints_every_step(fine, hier, galerkin_t0, scheme, rule):
    cfg = SchemeConfig(scheme=scheme, dt=1 / 64, t0=4 / 64, t_end=8 / 64, time_rule=rule)
    nl = NLGMStepper(fine, hier, cfg, mms.mms1(1.0).forcing)
    from nlgfem.schemes import continue_nlgm

    tr = continue_nlgm(nl, galerkin_t0, cfg, keep_states=True)
    assert len(tr.states) == 5 and len(tr.diagnostics) == 4
    for st, d in zip(tr.states[1:], tr.diagnostics):
        assert d["div_residual"] <= 1e-9 and d["complement_residual"] <= 1e-9
        assert d["picard_iters"] <= cfg.picard_max and d["residual"] <= 1e-9
        np.testing.assert_allclose(st.u, fine.red.expand(hier.P @ st.y) + st.z, atol=1e-13)
        assert np.all(st.u[fine.V.dirichlet_dofs] == 0)
    assert [d["step"] for d in tr.diagnostics] == [5, 6, 7, 8]
    assert tr.final.t == 8 / 64


def test_nlgm1_nlgm2_difference_bounded_by_dropped_term(fine, hier, galerkin_t0):
    cfg = SchemeConfig(dt=1 / 64, t0=4 / 64, t_end=8 / 64)
    prob = mms.mms1(1.0)
    s0 = NLGMStepper(fine, hier, cfg, prob.forcing).handoff(galerkin_t0)
    u1 = step_nlgm1(s0, cfg, fine, hier, prob.forcing).u
    u2 = step_nlgm2(s0, cfg, fine, hier, prob.forcing).u
    z = fine.red.vector(s0.z)
    d = fine.red.vector(u1 - u2)
    assert 0 < hier.norm(d) <= hier.norm(z) * np.sqrt(z @ (fine.A @ z))


# -- run protocol and failure handling


def test_t0_equal_t_end_is_pure_galerkin(fine, hier):
    prob = mms.mms1(1.0)
    cfg = SchemeConfig(scheme="nlgm2", dt=1 / 64, t0=2 / 64, t_end=2 / 64)
    a = run(cfg, prob, fine, hier)
    b = run(replace(cfg, scheme="galerkin-fine"), prob, fine)
    np.testing.assert_array_equal(a.final.u, b.final.u)
    assert a.final.z is None


def test_keep_states_layout(fine, hier):
    cfg = SchemeConfig(scheme="nlgm1", dt=1 / 64, t0=2 / 64, t_end=4 / 64)
    tr = run(cfg, mms.mms1(1.0), fine, hier, keep_states=True)
    # Galerkin states up to t0, then the handoff state at t0, then NLGM states
    assert [s.t for s in tr.states] == [k / 64 for k in (0, 1, 2, 2, 3, 4)]
    assert tr.states[2].z is None and tr.states[3].z is not None
    assert [d["step"] for d in tr.diagnostics] == [1, 2, 3, 4]


def test_energy_bounded_under_forcing(fine):
    cfg = SchemeConfig(scheme="galerkin-fine", dt=1 / 32, t0=0.0, t_end=2.0)
    e = [d["energy"] for d in run(cfg, mms.mms1(1.0), fine).diagnostics]
    assert np.all(np.isfinite(e)) and max(e) < 2 * e[0]


def test_picard_cap_reported(fine):
    cfg = SchemeConfig(scheme="galerkin-fine", dt=1 / 64, t_end=1 / 64, t0=0.0, picard_max=1)
    with pytest.raises(StepError) as info:
        run(cfg, mms.mms1(1.0), fine)
    assert isinstance(info.value.cause, PicardDiverged) and info.value.step == 1


def test_nlgm_needs_hierarchy(fine):
    from nlgfem.schemes import make_stepper

    with pytest.raises(ValueError):
        make_stepper(fine, SchemeConfig(), None)
    with pytest.raises(ValueError):
        NLGMStepper(fine, tg.TwoGridHierarchy(fine.V, fine.V), SchemeConfig(scheme="galerkin-fine"))


def test_l2_projection_is_divergence_free(fine):
    st = initial_state(fine, mms.mms1(1.0))
    assert fine.divergence_residual(fine.red.vector(st.u)) <= 1e-12
    assert np.all(st.u[fine.V.dirichlet_dofs] == 0)


def test_trajectory_deterministic(fine, hier):
    cfg = SchemeConfig(scheme="nlgm2", dt=1 / 64, t0=1 / 64, t_end=3 / 64)
    a = run(cfg, mms.mms1(1.0), fine, hier).final.u
    b = run(cfg, mms.mms1(1.0), fine, hier).final.u
    assert a.tobytes() == b.tobytes()


def test_advance_times_not_accumulated(fine):
    cfg = SchemeConfig(scheme="galerkin-fine", dt=0.1, t0=0.0, t_end=0.3)
    st = zero_state(fine)
    tr = advance(GalerkinStepper(fine, cfg), st, 3, 0, cfg, keep_states=True)
    assert [s.t for s in tr.states] == [0.0, 0.1, 0.2, 0.30000000000000004]
