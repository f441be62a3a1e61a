import numpy as np
import pytest

import oracles
from twolevel_ns.assembly import assemble_bilinear, convection_apply
from twolevel_ns.femspace import MINI, TAYLOR_HOOD, FieldPair, build_space, quadrature
from twolevel_ns.mesh import build_structured_mesh
from twolevel_ns.saddle import Factorization
from twolevel_ns.stepper import (DiscreteLoad, FrozenStokesStepper, GalerkinStepper,
                                 NewtonError, SolverConfig, TimeGrid, project_initial_data,
                                 run_one_level, step_galerkin, step_stokes_frozen)
from twolevel_ns.verification import make_smooth_solution


def _vortex(x):
    X, Y = x[:, 0], x[:, 1]
    return np.column_stack([np.sin(np.pi * X) ** 2 * np.sin(2 * np.pi * Y),
                            -np.sin(2 * np.pi * X) * np.sin(np.pi * Y) ** 2])


def _setup(n, pair=MINI):
    s = build_space(build_structured_mesh(n), pair)
    return s, assemble_bilinear(s)


def _mass_norm(sys, u):
    return float(np.sqrt(u @ (sys.M @ u)))


def test_time_grid():
    g = TimeGrid.uniform(1.0, 0.25)
    assert g.n_steps == 4 and not g.adjusted
    assert g.index_of(0.5) == 2
    with pytest.raises(ValueError):
        g.index_of(0.3)
    g = TimeGrid.uniform(1.0, 0.3)
    assert g.n_steps == 4 and g.adjusted and g.dt == 0.25
    assert TimeGrid.uniform(0.0, 0.1).n_steps == 0
    with pytest.raises(ValueError):
        TimeGrid.uniform(1.0, 0.0)


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(nu=-1.0)
    with pytest.raises(ValueError):
        SolverConfig(newton_tol=0.0)


@pytest.mark.parametrize("pair", [MINI, TAYLOR_HOOD])
def test_projection(pair):
    s, sys = _setup(4, pair)
    p0 = project_initial_data(_vortex, s, sys)
    assert np.abs(sys.B @ p0.velocity_coeffs).max() <= 1e-9
    assert not p0.velocity_coeffs[s.dirichlet_dofs].any()
    assert np.isnan(p0.pressure_coeffs).all()
    # idempotent: projecting the discrete field again changes nothing
    ii = s.interior_dofs
    rhs = sys.M @ p0.velocity_coeffs
    u2, _, _ = Factorization(sys.M_ii, -sys.B_i, sys.c).solve(rhs[ii])
    assert np.abs(u2 - p0.velocity_coeffs[ii]).max() < 1e-10
    assert not project_initial_data(None, s, sys).velocity_coeffs.any()


def test_zero_stays_zero():
    s, sys = _setup(3)
    traj = run_one_level(None, None, s, TimeGrid.uniform(0.25, 1 / 16), SolverConfig())
    assert all(not f.velocity_coeffs.any() for f in traj.fields)
    assert not traj.fields[-1].pressure_coeffs.any()


def test_t_final_zero_returns_projection():
    s, sys = _setup(3)
    traj = run_one_level(_vortex, None, s, TimeGrid.uniform(0.0, 0.1), SolverConfig())
    assert traj.sample_times == [0.0] and len(traj.fields) == 1
    assert traj.newton_iterations == 0


def test_steady_fixed_point():
    s, sys = _setup(4)
    nu = 0.5
    u_star = project_initial_data(_vortex, s, sys).velocity_coeffs
    F = nu * (sys.A @ u_star) + convection_apply(u_star, u_star, s)
    cfg = SolverConfig(nu=nu, newton_tol=1e-12)
    stepper = GalerkinStepper(sys, cfg, DiscreteLoad(lambda t: F))
    state = FieldPair(u_star.copy(), np.zeros(s.pressure_dof_count), s, 0.0)
    for n in range(1, 4):
        state = stepper.step(state, 0.1 * n)
    assert np.abs(state.velocity_coeffs - u_star).max() < 1e-9
    assert np.abs(state.pressure_coeffs).max() < 1e-8


def test_newton_converges_quadratically():
    s, sys = _setup(8)
    cfg = SolverConfig(nu=0.01, newton_tol=1e-13)
    stepper = GalerkinStepper(sys, cfg, None, extrapolate=False)
    state = project_initial_data(lambda x: 20 * _vortex(x), s, sys)
    stepper.step(state, 0.05)
    rec = stepper.records[-1]
    assert rec.mode == "newton" and rec.iterations >= 3
    r = rec.residuals
    # once in the asymptotic range the exponent of the residual roughly doubles
    i = next(k for k in range(1, len(r) - 1) if r[k] < 1e-3 * r[0])
    assert np.log(r[i + 1]) / np.log(r[i]) > 1.6 or r[i + 1] < 1e-13 * r[0]


def test_newton_failure_reports_history():
    s, sys = _setup(4)
    cfg = SolverConfig(nu=1e-3, newton_tol=1e-16, newton_max_iters=1)
    state = project_initial_data(lambda x: 50 * _vortex(x), s, sys)
    with pytest.raises(NewtonError) as info:
        step_galerkin(state, 0.1, sys, cfg)
    assert len(info.value.history) >= 1


def test_energy_dissipation():
    s, sys = _setup(6)
    traj = run_one_level(_vortex, None, s, TimeGrid.uniform(0.5, 1 / 32), SolverConfig(nu=0.05),
                         keep_all=True)
    e = [_mass_norm(sys, f.velocity_coeffs) for f in traj.fields]
    assert all(b <= a * (1 + 1e-12) for a, b in zip(e, e[1:]))
    assert traj.max_divergence <= 1e-9


def _dense_stokes_step(s, sys, u_n, dt, nu, w, f, t):
    ii = s.interior_dofs
    q = quadrature(5)
    rule = (q.points, q.weights)
    K = (sys.M_ii / dt + nu * sys.A_ii).toarray()
    rhs = sys.M_ii @ u_n[ii] / dt + oracles.slow_load(s, f, t, rule)[ii]
    if w is not None:
        rhs -= oracles.slow_convection(s, w, w, rule)[ii]
    u, p = oracles.dense_saddle_solve(K, -sys.B_i.toarray(), sys.c, rhs)
    return u, p - sys.c @ p / sys.c.sum()


@pytest.mark.parametrize("with_w", [False, True])
def test_frozen_step_matches_dense_oracle(with_w):
    s, sys = _setup(2)
    rng = np.random.default_rng(2)
    u_n = project_initial_data(_vortex, s, sys)
    w = rng.standard_normal(s.velocity_dof_count) if with_w else None
    f = lambda x, t: np.column_stack([np.sin(x[:, 1] + t), x[:, 0] ** 2])
    cfg = SolverConfig(nu=0.7)
    got = step_stokes_frozen(u_n, w, 0.125, sys, cfg, forcing=f)
    u, p = _dense_stokes_step(s, sys, u_n.velocity_coeffs, 0.125, 0.7, w, f, 0.125)
    assert np.abs(got.velocity_coeffs[s.interior_dofs] - u).max() < 1e-10
    assert np.abs(got.pressure_coeffs - p).max() < 1e-10


def test_frozen_zero_convection_equals_drop():
    s, sys = _setup(4)
    state = project_initial_data(_vortex, s, sys)
    st = FrozenStokesStepper(sys, SolverConfig())
    a = st.step(state, np.zeros(s.velocity_dof_count), 0.1)
    b = st.step(state, _vortex(s.nodes).T.ravel(), 0.1, drop_convection=True)
    assert np.array_equal(a.velocity_coeffs, b.velocity_coeffs)
    assert st.n_factorizations == 1


def test_frozen_with_own_solution_reproduces_galerkin():
    s, sys = _setup(4)
    ex = make_smooth_solution(1.0)
    grid = TimeGrid.uniform(0.25, 1 / 16)
    cfg = SolverConfig(newton_tol=1e-13)
    traj = run_one_level(ex.initial, ex.forcing, s, grid, cfg, sys=sys, keep_all=True)
    st = FrozenStokesStepper(sys, cfg, ex.forcing)
    state = traj.fields[0]
    for n in range(1, grid.n_steps + 1):
        state = st.step(state, traj.fields[n].velocity_coeffs, grid.time(n))
    assert np.abs(state.velocity_coeffs - traj.fields[-1].velocity_coeffs).max() < 1e-9
    assert st.n_factorizations == 1


def test_determinism():
    s, sys = _setup(4)
    ex = make_smooth_solution(1.0)
    grid = TimeGrid.uniform(0.125, 1 / 32)
    a = run_one_level(ex.initial, ex.forcing, s, grid, SolverConfig())
    b = run_one_level(ex.initial, ex.forcing, s, grid, SolverConfig())
    assert np.array_equal(a.fields[-1].velocity_coeffs, b.fields[-1].velocity_coeffs)
    assert np.array_equal(a.fields[-1].pressure_coeffs, b.fields[-1].pressure_coeffs)


def test_step_rejects_backwards_time():
    s, sys = _setup(2)
    state = FieldPair.zeros(s, 0.5)
    with pytest.raises(ValueError):
        step_galerkin(state, 0.25, sys, SolverConfig())
