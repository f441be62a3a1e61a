import dataclasses
import math

import numpy as np
import pytest

import oracles
from twolevel_ns.assembly import assemble_bilinear, assemble_load
from twolevel_ns.femspace import MINI, TAYLOR_HOOD, FieldPair, build_space
from twolevel_ns.mesh import build_structured_mesh
from twolevel_ns.saddle import (Factorization, Ordering, SaddleProblem, SingularSystemError,
                                augmented_matrix, factorize, solve)
from twolevel_ns.verification import compute_errors, make_smooth_solution, steady_stokes_forcing


def _stokes(n, pair=MINI, nu=1.0):
    s = build_space(build_structured_mesh(n), pair)
    sys = assemble_bilinear(s)
    return s, sys, SaddleProblem(nu * sys.A_ii, -sys.B_i, sys.c)


def test_augmented_layout():
    s, sys, prob = _stokes(2)
    A = augmented_matrix(prob.K, prob.B, prob.c)
    nu, npr = prob.K.shape[0], prob.B.shape[0]
    assert A.shape == (nu + npr + 1,) * 2
    assert abs(A - A.T).max() == 0.0


def test_factorize_n4_and_zero_rhs():
    s, sys, prob = _stokes(4)
    fact = factorize(prob)
    u, p, stats = solve(fact, np.zeros(prob.K.shape[0]))
    assert not u.any() and not p.any()
    assert not stats.factorization_reused
    _, _, stats = fact.solve(np.ones(prob.K.shape[0]))
    assert stats.factorization_reused


@pytest.mark.parametrize("pair", [MINI, TAYLOR_HOOD])
def test_matches_dense_solve(pair):
    s, sys, prob = _stokes(2, pair)
    rng = np.random.default_rng(0)
    K = prob.K + sys.M_ii * 8.0
    f = rng.standard_normal(K.shape[0])
    g = rng.standard_normal(prob.B.shape[0])
    g -= g.mean()
    u, p, stats = Factorization(K, prob.B, prob.c).solve(f, g)
    ud, pd = oracles.dense_saddle_solve(K, prob.B, prob.c, f, g)
    scale = 1 + np.abs(np.r_[ud, pd]).max()
    assert np.abs(u - ud).max() < 1e-10 * scale
    assert np.abs(p - pd).max() < 1e-10 * scale
    assert stats.residual_norm <= 1e-10 * (1 + np.abs(np.r_[f, g]).max())


@pytest.mark.parametrize("pair", [MINI, TAYLOR_HOOD])
def test_reused_ordering_matches_fresh_factorization(pair):
    s, sys, prob = _stokes(4, pair)
    rng = np.random.default_rng(1)
    first = Factorization(prob.K, prob.B, prob.c)
    ordering = Ordering(first.matrix, first.column_order())
    # same pattern, different values: a nonsymmetric perturbation of K
    K = prob.K.tocsc(copy=True)
    K.data *= 1.0 + 0.1 * rng.random(K.nnz)
    fresh = Factorization(K, prob.B, prob.c)
    reused = Factorization(K, prob.B, prob.c, ordering=ordering)
    assert reused.ordering is ordering
    f = rng.standard_normal(K.shape[0])
    u1, p1, _ = fresh.solve(f)
    u2, p2, _ = reused.solve(f)
    assert np.allclose(u1, u2, rtol=0, atol=1e-10) and np.allclose(p1, p2, rtol=0, atol=1e-10)


def test_ordering_ignored_for_other_pattern():
    _, _, small = _stokes(2)
    _, _, prob = _stokes(4)
    f2 = Factorization(small.K, small.B, small.c)
    fact = Factorization(prob.K, prob.B, prob.c,
                         ordering=Ordering(f2.matrix, f2.column_order()))
    assert fact.ordering is None


def test_pressure_has_zero_mean():
    s, sys, prob = _stokes(4)
    F = assemble_load(lambda x, t: np.column_stack([x[:, 1], x[:, 0] ** 2]), 0.0, s)
    _, p, _ = factorize(prob).solve(F[s.interior_dofs])
    assert abs(sys.c @ p) < 1e-12


def test_missing_mean_constraint_is_diagnosed():
    s, sys, prob = _stokes(3)
    with pytest.raises(SingularSystemError, match="pressure"):
        factorize(prob, include_mean_constraint=False)


def test_singular_velocity_block_is_diagnosed():
    s, sys, prob = _stokes(3)
    # no viscosity and no mass: more velocity unknowns than constraints
    with pytest.raises(SingularSystemError, match="velocity"):
        Factorization(0.0 * prob.K, prob.B, prob.c)


def test_gradient_forcing_gives_exact_pressure():
    # f = grad(x - 1/2): u = 0, p = x - 1/2, both in the discrete spaces
    s, sys, prob = _stokes(4)
    F = assemble_load(lambda x, t: np.column_stack([np.ones(len(x)), np.zeros(len(x))]), 0.0, s)
    u, p, _ = factorize(prob).solve(F[s.interior_dofs])
    assert np.abs(u).max() < 1e-12
    assert np.abs(p - (s.mesh.vertices[:, 0] - 0.5)).max() < 1e-12


@pytest.mark.slow
def test_steady_stokes_convergence():
    profile = dataclasses.replace(make_smooth_solution(1.0),
                                  p=lambda x, t: np.zeros(len(x)))
    f = steady_stokes_forcing(1.0)
    errs = []
    for n in (4, 8, 16):
        s, sys, prob = _stokes(n)
        F = assemble_load(f, 0.0, s)
        u_i, p, _ = factorize(prob).solve(F[s.interior_dofs])
        u = np.zeros(s.velocity_dof_count)
        u[s.interior_dofs] = u_i
        errs.append(compute_errors(FieldPair(u, p, s), profile, 0.0))
    rates = [math.log2(a[0] / b[0]) for a, b in zip(errs, errs[1:])]
    assert rates[-1] > 1.8
    h1 = [math.log2(a[1] / b[1]) for a, b in zip(errs, errs[1:])]
    assert h1[-1] > 0.9
