import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from twolevel_ns.assembly import (SeparableForcing, assemble_bilinear, assemble_load,
                                  convection_apply, convection_jacobian, convection_matrix)
from twolevel_ns.femspace import MINI, TAYLOR_HOOD, build_space, quadrature
from twolevel_ns.mesh import build_structured_mesh

PAIRS = [MINI, TAYLOR_HOOD]


def _space(n=2, pair=MINI):
    return build_space(build_structured_mesh(n), pair)


def _random_field(space, rng, boundary=False):
    v = rng.standard_normal(space.velocity_dof_count)
    if not boundary:
        v[space.dirichlet_dofs] = 0.0
    return v


@pytest.mark.parametrize("pair", PAIRS)
def test_bilinear_identities(pair):
    s = _space(3, pair)
    sys = assemble_bilinear(s)
    ns = s.n_scalar
    one = np.zeros(s.velocity_dof_count)
    one[:ns] = 1.0 if pair is TAYLOR_HOOD else np.r_[np.ones(s.mesh.n_vertices),
                                                       np.zeros(ns - s.mesh.n_vertices)]
    one[ns:] = one[:ns]
    assert abs(one @ sys.M @ one - 2.0) < 1e-13
    assert np.abs(sys.A @ one).max() < 1e-12
    assert abs((sys.M - sys.M.T)).max() == 0.0
    assert abs((sys.A - sys.A.T)).max() == 0.0
    assert abs(sys.c.sum() - 1.0) < 1e-14
    # (y, x) is divergence free and lies in the P1 part of both spaces
    nodes = np.r_[s.nodes[:, 1], s.nodes[:, 0]]
    if pair is MINI:
        nodes[s.mesh.n_vertices:ns] = 0.0
        nodes[ns + s.mesh.n_vertices:] = 0.0
    assert np.abs(sys.B @ nodes).max() < 1e-14


@pytest.mark.parametrize("pair", PAIRS)
def test_bilinear_matches_slow_oracle(pair):
    s = _space(2, pair)
    sys = assemble_bilinear(s)
    rule = oracles.duffy_rule(6)
    M, A = oracles.slow_mass_stiffness(s, rule)
    ns = s.n_scalar
    assert np.abs(sys.M.toarray()[:ns, :ns] - M).max() < 1e-14
    assert np.abs(sys.A.toarray()[:ns, :ns] - A).max() < 1e-12
    B = oracles.slow_divergence(s, rule)
    assert np.abs(sys.B.toarray() - B).max() < 1e-14


def test_stiffness_positive_definite_on_interior():
    sys = assemble_bilinear(_space(3))
    ev = np.linalg.eigvalsh(sys.A_ii.toarray())
    assert ev.min() > 0


@pytest.mark.parametrize("pair", PAIRS)
@given(seed=st.integers(0, 10 ** 6))
def test_convection_antisymmetric(pair, seed):
    s = _space(2, pair)
    rng = np.random.default_rng(seed)
    w, u, v = (_random_field(s, rng, boundary=True) for _ in range(3))
    a = convection_apply(w, u, s) @ v
    b = convection_apply(w, v, s) @ u
    scale = np.linalg.norm(w) * np.linalg.norm(u) * np.linalg.norm(v)
    assert abs(a + b) <= 1e-12 * scale
    assert abs(convection_apply(w, u, s) @ u) <= 1e-12 * scale


def test_convection_zero_transport():
    s = _space(2)
    u = _random_field(s, np.random.default_rng(0))
    assert not convection_apply(np.zeros_like(u), u, s).any()
    assert abs(convection_jacobian(np.zeros_like(u), s)).max() == 0.0


@pytest.mark.parametrize("pair", PAIRS)
def test_convection_matches_slow_oracle(pair):
    s = _space(2, pair)
    rng = np.random.default_rng(5)
    w, u = _random_field(s, rng, True), _random_field(s, rng, True)
    q = quadrature(5)
    ref = oracles.slow_convection(s, w, u, (q.points, q.weights))
    assert np.abs(convection_apply(w, u, s) - ref).max() <= 1e-12 * max(1.0, np.abs(ref).max())


@pytest.mark.parametrize("pair", PAIRS)
def test_matrices_reproduce_apply(pair):
    s = _space(3, pair)
    rng = np.random.default_rng(7)
    u, v = _random_field(s, rng, True), _random_field(s, rng, True)
    C = convection_matrix(u, s)
    L = convection_jacobian(u, s)
    assert np.allclose(C @ v, convection_apply(u, v, s), atol=1e-13)
    assert np.allclose(L @ v, convection_apply(u, v, s) + convection_apply(v, u, s), atol=1e-13)
    assert np.allclose(L @ u, 2 * convection_apply(u, u, s), atol=1e-13)


def test_jacobian_finite_differences():
    s = _space(3)
    rng = np.random.default_rng(11)
    u, v = _random_field(s, rng), _random_field(s, rng)
    eps = 1e-6
    fd = (convection_apply(u + eps * v, u + eps * v, s)
          - convection_apply(u - eps * v, u - eps * v, s)) / (2 * eps)
    jv = convection_jacobian(u, s) @ v
    assert np.linalg.norm(fd - jv) < 1e-5 * np.linalg.norm(jv)


def test_load():
    s = _space(2)
    assert not assemble_load(lambda x, t: np.zeros_like(x), 0.0, s).any()
    assert not assemble_load(None, 0.0, s).any()
    F = assemble_load(lambda x, t: np.column_stack([np.ones(len(x)), np.zeros(len(x))]), 0.0, s)
    nv = s.mesh.n_vertices
    assert abs(F[:nv].sum() - 1.0) < 1e-14
    assert not F[s.n_scalar:].any()


@pytest.mark.parametrize("refined", [False, True])
def test_load_matches_slow_oracle(refined):
    s = _space(2)
    f = lambda x, t: np.column_stack([np.sin(3 * x[:, 0] + t), np.exp(x[:, 1]) * x[:, 0]])
    q = quadrature(5)
    rule = oracles.refine_rule(q.points, q.weights) if refined else (q.points, q.weights)
    ref = oracles.slow_load(s, f, 0.3, rule)
    got = assemble_load(f, 0.3, s, refined=refined)
    assert np.abs(got - ref).max() < 1e-13


def test_rejects_wrong_shape():
    s = _space(2)
    with pytest.raises(ValueError):
        convection_apply(np.zeros(3), np.zeros(s.velocity_dof_count), s)


@pytest.mark.parametrize("pair", [MINI, TAYLOR_HOOD])
def test_separable_load_matches_pointwise_assembly(pair):
    s = build_space(build_structured_mesh(4), pair)
    f = SeparableForcing([(np.cos, lambda x: np.column_stack([x[:, 1] ** 2, x[:, 0]])),
                          (lambda t: t ** 3, lambda x: np.sin(x) * x[:, ::-1])])
    t = 0.7
    generic = assemble_load(lambda x, tt: f(x, tt), t, s)
    parts = f.spatial_loads(s)
    combined = sum(a(t) * b for (a, _), b in zip(f.terms, parts))
    assert np.abs(combined - generic).max() < 1e-14


@pytest.mark.parametrize("pair", [MINI, TAYLOR_HOOD])
def test_dual_norm_matches_dense_mass_solve(pair):
    s = build_space(build_structured_mesh(4), pair)
    sys = assemble_bilinear(s)
    r = np.random.default_rng(3).standard_normal(len(s.interior_dofs))
    dense = np.sqrt(r @ np.linalg.solve(sys.M_ii.toarray(), r))
    assert abs(sys.dual_norm(r) - dense) < 1e-12 * dense
