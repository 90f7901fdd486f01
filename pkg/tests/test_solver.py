import math

import numpy as np
import pytest

from sipflow import comm as cm
from sipflow import mesh
from sipflow import solver as sv
from sipflow.solver import CaseSetup


def block_solver(setup, precision="double"):
    dec = setup.decomposition()
    tables = mesh.build_transfer_tables(dec)
    ctx = cm.ExchangeContext(cm.solo_rank(), dec, tables[0])
    return sv.BlockSolver(setup, dec, dec.blocks[0], ctx, precision)


def periodic_state(grid, u=None, v=None, w=None, p=None):
    block = mesh.decompose(grid, 1, 1, 1).blocks[0]
    geom = sv.BlockGeometry.of(grid, block)
    s = sv.FlowState.zeros(block, geom)
    for f, vals in zip((s.u, s.v, s.w, s.p), (u, v, w, p)):
        if vals is not None:
            f.interior[...] = vals
        f.data[...] = np.pad(f.interior, 1, mode="wrap")
    return s


# --- Runge-Kutta ------------------------------------------------------------

def test_williamson_weights_and_stage_times():
    w = sv.WILLIAMSON3.effective_weights()
    assert math.isclose(sum(w), 1.0, abs_tol=1e-15)
    np.testing.assert_allclose(sv.WILLIAMSON3.stage_times(), [1 / 3, 3 / 4, 1.0], atol=1e-15)


@pytest.mark.parametrize("A, B", [((0.0, 0.5), (0.5, 0.6)), ((1.0,), (1.0,)), ((), ())])
def test_inconsistent_schemes_are_rejected(A, B):
    with pytest.raises(ValueError):
        sv.RKScheme(A, B)


def rk_step(scheme, lam, dt, u0=1.0):
    s = periodic_state(mesh.GridSpec(2, 2, 2), u=u0)
    dq = [np.zeros((2, 2, 2)) for _ in range(3)]
    for stage in range(scheme.stages):
        res = [lam * f.interior for f in s.velocity]
        sv.rk_stage(s, res, dq, scheme, stage, dt)
    return float(s.u.interior[0, 0, 0])


def test_three_stage_scheme_is_third_order():
    lam = -1.3
    errs = [abs(rk_step(sv.WILLIAMSON3, lam, dt) - math.exp(lam * dt)) for dt in (0.1, 0.05)]
    # local error of a third-order scheme scales with dt^4
    assert math.log2(errs[0] / errs[1]) > 3.8


def test_single_stage_scheme_is_forward_euler():
    assert rk_step(sv.FORWARD_EULER, -2.0, 0.1) == pytest.approx(1.0 - 0.2, abs=1e-15)


def test_zero_residual_leaves_state():
    s = periodic_state(mesh.GridSpec(3, 3, 3), u=np.arange(27.0).reshape(3, 3, 3))
    before = s.u.data.copy()
    dq = [np.zeros((3, 3, 3)) for _ in range(3)]
    for stage in range(3):
        sv.rk_stage(s, [np.zeros((3, 3, 3))] * 3, dq, sv.WILLIAMSON3, stage, 0.1)
    np.testing.assert_array_equal(s.u.data, before)


def test_rk_stage_range():
    s = periodic_state(mesh.GridSpec(2, 2, 2))
    with pytest.raises(ValueError):
        sv.rk_stage(s, [0, 0, 0], [0, 0, 0], sv.WILLIAMSON3, 3, 0.1)


# --- fluxes -----------------------------------------------------------------

def test_uniform_flow_has_zero_residual():
    s = periodic_state(mesh.GridSpec(6, 5, 4), u=2.5, v=-1.0)
    sv.interpolate_faces(s)
    for r in sv.compute_fluxes(s, 0.1):
        assert np.abs(r).max() < 1e-13


def diffusion_error(n, nu=0.05):
    grid = mesh.GridSpec(n, 4, 2)
    x, _, _ = mesh.cell_centers(grid)
    u = np.sin(2 * np.pi * x)
    s = periodic_state(grid, u=u)
    # faces stay at zero, which switches convection off
    r = sv.compute_fluxes(s, nu)[0]
    return np.abs(r + nu * (2 * np.pi) ** 2 * u).max()


def test_pure_diffusion_converges_at_second_order():
    errs = [diffusion_error(n) for n in (16, 32, 64)]
    orders = [math.log2(a / b) for a, b in zip(errs, errs[1:])]
    assert min(orders) > 1.95


def taylor_green_rhs_error(n, nu=0.01):
    grid = mesh.GridSpec(n, n, 2, 2 * np.pi, 2 * np.pi, 2 * np.pi * 2 / n)
    x, y, _ = mesh.cell_centers(grid)
    u, v = np.sin(x) * np.cos(y), -np.cos(x) * np.sin(y)
    p = 0.25 * (np.cos(2 * x) + np.cos(2 * y))
    s = periodic_state(grid, u=u, v=v, p=p)
    sv.interpolate_faces(s)
    ru, rv, rw = sv.compute_fluxes(s, nu)
    # the exact field decays as exp(-2 nu t) without changing shape
    return max(np.abs(ru + 2 * nu * u).max(), np.abs(rv + 2 * nu * v).max(), np.abs(rw).max())


def test_taylor_green_initial_rhs():
    errs = [taylor_green_rhs_error(n) for n in (32, 64, 128)]
    assert errs[-1] < 5e-4
    assert all(math.log2(a / b) > 1.9 for a, b in zip(errs, errs[1:]))


# --- boundaries -------------------------------------------------------------

def test_wall_and_symmetry_ghosts():
    grid = mesh.GridSpec(3, 3, 2, bc=(("wall", "wall"), ("symmetry", "symmetry"),
                                      ("periodic", "periodic")))
    block = mesh.decompose(grid, 1, 1, 1).blocks[0]
    s = sv.FlowState.zeros(block, sv.BlockGeometry.of(grid, block))
    for f in (*s.velocity, s.p):
        f.interior[...] = np.random.default_rng(0).normal(size=(3, 3, 2))
    sv.apply_wall_ghosts(s.geom, s.velocity, (s.p,))
    for f in s.velocity:
        np.testing.assert_array_equal(f.data[0, 1:-1, 1:-1], -f.data[1, 1:-1, 1:-1])
    np.testing.assert_array_equal(s.v.data[1:-1, 0, 1:-1], -s.v.data[1:-1, 1, 1:-1])
    np.testing.assert_array_equal(s.u.data[1:-1, -1, 1:-1], s.u.data[1:-1, -2, 1:-1])
    np.testing.assert_array_equal(s.p.data[-1, 1:-1, 1:-1], s.p.data[-2, 1:-1, 1:-1])


# --- projection -------------------------------------------------------------

def test_projection_removes_injected_divergence():
    setup = CaseSetup.taylor_green(16, mass_threshold=1e-11, t_end=0.1)
    bs = block_solver(setup)
    rng = np.random.default_rng(2)
    for f in bs.state.velocity[:2]:
        f.interior[...] = rng.normal(size=f.shape)
    bs.refresh(list(bs.state.velocity), velocity=True)
    sv.interpolate_faces(bs.state)
    before = bs.divergence_l1(sv.net_outflow(bs.state))
    info = sv.pressure_correct(bs, tau=setup.dt, stage=0)
    after = bs.divergence_l1(sv.net_outflow(bs.state))
    assert before > 1.0
    assert info.outer > 0 and info.divergence == pytest.approx(after, rel=1e-6)
    assert after < 1e-10


def test_divergence_free_input_needs_no_correction():
    setup = CaseSetup.taylor_green(8, t_end=0.1)
    bs = block_solver(setup)
    bs.state.u.interior[...] = 1.0
    bs.refresh(list(bs.state.velocity), velocity=True)
    sv.interpolate_faces(bs.state)
    info = bs.project(tau=setup.dt, converge=True, stage=0)
    assert info.outer == 0 and info.divergence == 0.0
    assert not bs.state.p.data.any()


def test_outer_cap_raises_non_convergence():
    setup = CaseSetup.taylor_green(8, t_end=0.1, mass_threshold=1e-15, max_outer=1)
    bs = block_solver(setup)
    bs.state.u.interior[...] = np.random.default_rng(3).normal(size=(8, 8, 2))
    bs.refresh(list(bs.state.velocity), velocity=True)
    sv.interpolate_faces(bs.state)
    with pytest.raises(sv.NonConvergence) as err:
        bs.project(tau=setup.dt, converge=True, stage=0)
    assert err.value.defect > 1e-15


def test_non_finite_state_is_detected():
    bs = block_solver(CaseSetup.taylor_green(8, t_end=0.1))
    bs.state.u.interior[0, 0, 0] = np.nan
    with pytest.raises(sv.FlowDiverged):
        bs.diagnostics(sv.ProjectionInfo())


# --- whole runs ---------------------------------------------------------------

def test_every_step_is_mass_conserving_and_factorizes_once():
    setup = CaseSetup.taylor_green(16, t_end=1.0, mass_threshold=1e-10)
    res = sv.run_case(setup)
    assert res.factorizations == [1]
    assert len(res.rows) == setup.nsteps + 1
    assert all(r[3] <= setup.mass_threshold for r in res.rows)
    ke = res.kinetic_energy
    assert np.all(np.diff(ke) < 0)


def test_taylor_green_short_decay():
    setup = CaseSetup.taylor_green(32, t_end=1.0)
    res = sv.run_case(setup)
    exact = res.kinetic_energy[0] * np.exp(-4 * setup.nu * res.times)
    assert np.abs(res.kinetic_energy / exact - 1).max() < 0.01


def test_channel_reaches_poiseuille_profile():
    setup = CaseSetup.channel_laminar(ny=64)
    res = sv.run_case(setup, record_events=False)
    u = res.fields["u"].mean(axis=(0, 2))
    exact = sv.poiseuille_profile(setup)
    assert np.abs(u - exact).max() / exact.max() < 0.02
    assert np.abs(res.fields["v"]).max() < 1e-8


def test_manufactured_case_skips_time_stepping():
    res = sv.run_case(CaseSetup.manufactured_poisson(8))
    assert res.step_times == [] and len(res.rows) == 1
    assert res.extra["reduction"] <= 1e-8 and res.extra["iterations"] > 0


def test_diagnostics_csv_header_names_precision():
    res = sv.run_case(CaseSetup.taylor_green(8, t_end=0.2), precision="single")
    lines = res.diagnostics_csv().splitlines()
    assert "precision=single" in lines[0]
    assert lines[1].split(",") == list(sv.DIAGNOSTIC_COLUMNS)


def test_checkerboard_diagnostic_is_small_for_smooth_flow():
    res = sv.run_case(CaseSetup.taylor_green(16, t_end=0.5))
    assert max(r[6] for r in res.rows) < 1e-3


@pytest.mark.parametrize("kw, field", [(dict(dt=2.0), "dt"), (dict(nu=10.0), "dt")])
def test_unstable_time_step_is_rejected(kw, field):
    with pytest.raises(ValueError, match=field):
        CaseSetup.taylor_green(32, **kw).validate()


@pytest.mark.parametrize("kw", [dict(nu=0.0), dict(dt=-1.0), dict(mass_threshold=0.0),
                                dict(fixed_outer=0), dict(converge_stages="some")])
def test_setup_validation(kw):
    with pytest.raises(ValueError):
        CaseSetup.taylor_green(8, **kw)


def test_run_rejects_rank_block_mismatch():
    setup = CaseSetup.taylor_green(8, t_end=0.1, blocks=(2, 1, 1))
    with pytest.raises(ValueError, match="ranks"):
        sv.run_case(setup, net=cm.NetConfig(nranks=3))
