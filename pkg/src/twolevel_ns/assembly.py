"""Discrete operators of the mixed Navier-Stokes formulation.

Bilinear blocks are assembled once per space. The skew-symmetric convection
form ``b(w, u, phi) = 1/2 (w.grad u, phi) - 1/2 (w.grad phi, u)`` is applied
matrix-free; its Jacobian is assembled only when Newton asks for it.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .femspace import FieldPair, MixedSpace, quadrature, refined_quadrature

MASS_DEGREE = 6
BILINEAR_DEGREE = 4
NONLINEAR_DEGREE = 5


def _coeffs(field, space: MixedSpace) -> np.ndarray:
    if isinstance(field, FieldPair):
        if field.space is not space:
            raise ValueError("field lives on a different space")
        return field.velocity_coeffs
    c = np.asarray(field, dtype=float)
    if c.shape != (space.velocity_dof_count,):
        raise ValueError(f"velocity vector has shape {c.shape}, "
                         f"expected ({space.velocity_dof_count},)")
    return c


def _scalar_matrix(space, local):
    dofs = space.velocity_dof_map
    nloc = dofs.shape[1]
    rows = np.repeat(dofs, nloc, axis=1).ravel()
    cols = np.tile(dofs, (1, nloc)).ravel()
    n = space.n_scalar
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def _symmetrize(local):
    return 0.5 * (local + local.transpose(0, 2, 1))


def _block_diag2(S):
    return sp.block_diag([S, S], format="csr")


@dataclass(eq=False)
class DiscreteSystem:
    """Assembled mass ``M``, stiffness ``A`` (without nu), divergence ``B`` and
    pressure-mean vector ``c`` on ``space``.

    ``B[q, j] = (chi_q, div phi_j)``. The ``*_ii`` blocks have the Dirichlet
    rows and columns eliminated.
    """

    M: sp.csr_matrix
    A: sp.csr_matrix
    B: sp.csr_matrix
    c: np.ndarray
    space: MixedSpace
    _cache: dict = field(default_factory=dict, repr=False)

    @cached_property
    def M_ii(self):
        i = self.space.interior_dofs
        return self.M[i][:, i].tocsc()

    @cached_property
    def A_ii(self):
        i = self.space.interior_dofs
        return self.A[i][:, i].tocsc()

    @cached_property
    def B_i(self):
        return self.B[:, self.space.interior_dofs].tocsc()

    @cached_property
    def mass_lu(self):
        """Factor of one scalar block of ``M_ii``; the interior DOFs list all x
        components before the matching y components, so ``M_ii`` is two copies."""
        k = self.M_ii.shape[0] // 2
        # M is symmetric positive definite: symmetric ordering, diagonal pivots
        return splu(self.M_ii[:k, :k].tocsc(), permc_spec="MMD_AT_PLUS_A",
                    diag_pivot_thresh=0.0, options=dict(SymmetricMode=True))

    def dual_norm(self, r_interior) -> float:
        """Discrete L2 dual norm ``sqrt(r^T M^{-1} r)`` of an interior residual."""
        r = np.asarray(r_interior, dtype=float).reshape(2, -1)
        z = self.mass_lu.solve(np.ascontiguousarray(r.T))
        return float(np.sqrt(max(np.sum(r.T * z), 0.0)))

    def velocity_divergence(self, velocity_coeffs) -> np.ndarray:
        """Entries ``(div u_h, chi_q)`` for every pressure basis function."""
        return self.B @ velocity_coeffs


def assemble_bilinear(space: MixedSpace) -> DiscreteSystem:
    tab_m = space.tabulate(quadrature(MASS_DEGREE))
    tab_a = space.tabulate(quadrature(BILINEAR_DEGREE))

    m_loc = _symmetrize(np.einsum("eq,qa,qb->eab", tab_m.jxw, tab_m.vphi, tab_m.vphi))
    a_loc = _symmetrize(np.einsum("eq,eqad,eqbd->eab", tab_a.jxw, tab_a.vgrad, tab_a.vgrad))
    M = _block_diag2(_scalar_matrix(space, m_loc))
    A = _block_diag2(_scalar_matrix(space, a_loc))

    # (chi_k, d phi_j / d x_c) for c = 0, 1
    b_loc = np.einsum("eq,qk,eqjc->ckej", tab_a.jxw, tab_a.pphi, tab_a.vgrad)
    pdofs = space.pressure_dof_map
    vdofs = space.velocity_dof_map
    nloc = vdofs.shape[1]
    rows, cols, vals = [], [], []
    for c in range(2):
        rows.append(np.repeat(pdofs[:, :, None], nloc, axis=2).ravel())
        cols.append(np.repeat(vdofs[:, None, :], 3, axis=1).ravel() + c * space.n_scalar)
        vals.append(b_loc[c].transpose(1, 0, 2).ravel())
    B = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(space.pressure_dof_count, space.velocity_dof_count)).tocsr()

    c = np.bincount(pdofs.ravel(), weights=np.repeat(space.areas / 3.0, 3),
                    minlength=space.pressure_dof_count)
    return DiscreteSystem(M, A, B, c, space)


# ---------------------------------------------------------------------------
# convection

def _at_quadrature(space, coeffs, tab):
    dofs = space.velocity_dof_map
    C = np.stack([coeffs[dofs], coeffs[dofs + space.n_scalar]], axis=1)  # (ne, comp, nloc)
    u = (C @ tab.vphi.T).transpose(0, 2, 1)  # (ne, nq, comp)
    ne, nq, nloc, _ = tab.vgrad.shape
    gu = C @ tab.vgrad.transpose(0, 2, 1, 3).reshape(ne, nloc, nq * 2)
    return u, gu.reshape(ne, 2, nq, 2).transpose(0, 2, 1, 3)  # (ne, nq, comp, deriv)


def _directional(W, vgrad):
    return W[:, :, None, 0] * vgrad[..., 0] + W[:, :, None, 1] * vgrad[..., 1]


def _scatter_vector(space, local):
    """``local[e, a, c]`` summed into a global velocity vector."""
    dofs = space.velocity_dof_map
    idx = np.concatenate([dofs.ravel(), dofs.ravel() + space.n_scalar])
    w = np.concatenate([local[:, :, 0].ravel(), local[:, :, 1].ravel()])
    return np.bincount(idx, weights=w, minlength=space.velocity_dof_count)


def convection_apply(w, u, space: MixedSpace) -> np.ndarray:
    """Vector with entries ``b(w, u, phi_i)`` over all velocity basis functions."""
    wc = _coeffs(w, space)
    uc = _coeffs(u, space)
    tab = space.tabulate(quadrature(NONLINEAR_DEGREE))
    U, GU = _at_quadrature(space, uc, tab)
    W = U if w is u else _at_quadrature(space, wc, tab)[0]
    adv = W[:, :, None, 0] * GU[..., 0] + W[:, :, None, 1] * GU[..., 1]  # (w.grad) u
    t1 = tab.vphi.T @ (tab.jxw[..., None] * adv)
    wgphi = _directional(W, tab.vgrad)  # (w.grad) phi_a
    t2 = wgphi.transpose(0, 2, 1) @ (tab.jxw[..., None] * U)
    return _scatter_vector(space, 0.5 * (t1 - t2))


def _vector_pattern(space):
    vd = vector_element_dofs(space)
    m = vd.shape[1]
    rows = np.repeat(vd, m, axis=1).ravel()
    cols = np.tile(vd, (1, m)).ravel()
    return rows, cols


def convection_element_matrices(u, space: MixedSpace, newton: bool = True) -> np.ndarray:
    """Element matrices of ``convection_jacobian`` (``newton=True``) or of
    ``convection_matrix``, laid out like :func:`vector_element_dofs`."""
    return _convection_locals(space, _coeffs(u, space), newton)


def vector_element_dofs(space: MixedSpace) -> np.ndarray:
    """Local vector DOFs ``(ne, 2 nloc)``: x components first, then y."""
    dofs = space.velocity_dof_map
    return np.concatenate([dofs, dofs + space.n_scalar], axis=1)


def _convection_locals(space, uc, with_reaction: bool):
    """Element matrices ``(ne, 2 nloc, 2 nloc)`` of ``v -> N(u, v)`` and, when
    ``with_reaction``, additionally of ``v -> N(v, u)``."""
    tab = space.tabulate(quadrature(NONLINEAR_DEGREE))
    U, GU = _at_quadrature(space, uc, tab)
    nloc = space.n_local
    ugphi = _directional(U, tab.vgrad)  # (u.grad) phi_a
    # 1/2 (u.grad psi_b, phi_a) - 1/2 (u.grad phi_a, psi_b)
    T = tab.vphi.T @ (tab.jxw[..., None] * ugphi)
    c_loc = 0.5 * (T - T.transpose(0, 2, 1))
    ne, nq = tab.jxw.shape
    out = np.zeros((ne, 2, nloc, 2, nloc))
    out[:, 0, :, 0, :] = c_loc
    out[:, 1, :, 1, :] = c_loc
    if with_reaction:
        # row (c, a), column (e, b): 1/2 (psi_b d_e u_c, phi_a) - 1/2 (psi_b d_e phi_a, u_c)
        G = (tab.jxw[..., None, None] * GU).reshape(ne, nq, 4).transpose(0, 2, 1)
        phiab = (tab.vphi[:, :, None] * tab.vphi[:, None, :]).reshape(nq, nloc * nloc)
        r1 = (G @ phiab).reshape(ne, 2, 2, nloc, nloc).transpose(0, 1, 3, 2, 4)
        X = (tab.jxw[..., None, None] * U[:, :, :, None] * tab.vphi[None, :, None, :])
        Vg = tab.vgrad.reshape(ne, nq, 2 * nloc).transpose(0, 2, 1)
        r2 = (Vg @ X.reshape(ne, nq, 2 * nloc)).reshape(ne, nloc, 2, 2, nloc)
        out += 0.5 * (r1 - r2.transpose(0, 3, 1, 2, 4))
    return out.reshape(ne, 2 * nloc, 2 * nloc)


def _assemble_vector_matrix(space, local):
    rows, cols = _vector_pattern(space)
    n = space.velocity_dof_count
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def convection_matrix(w, space: MixedSpace) -> sp.csr_matrix:
    """Matrix ``C`` with ``C @ v == N(w, v)`` (the Oseen/Picard operator)."""
    return _assemble_vector_matrix(space, _convection_locals(space, _coeffs(w, space), False))


def convection_jacobian(u, space: MixedSpace) -> sp.csr_matrix:
    """Matrix ``L`` with ``L @ v == N(u, v) + N(v, u)``, the derivative of ``N(u, u)``."""
    return _assemble_vector_matrix(space, _convection_locals(space, _coeffs(u, space), True))


# ---------------------------------------------------------------------------
# load

class SeparableForcing:
    """Forcing ``f(x, t) = sum_k a_k(t) F_k(x)`` given as ``(a_k, F_k)`` pairs.

    It is an ordinary ``f(points, t)`` callable, and its load vector is the
    same combination of the time-independent loads of the ``F_k``, which a
    time stepper can assemble once per space.
    """

    def __init__(self, terms):
        self.terms = tuple(terms)

    def __call__(self, x, t):
        return sum(a(t) * F(x) for a, F in self.terms)

    def spatial_loads(self, space: MixedSpace, degree: int = NONLINEAR_DEGREE) -> list:
        return [assemble_load(lambda x, t, F=F: F(x), 0.0, space, degree) for _, F in self.terms]


def assemble_load(f, t: float, space: MixedSpace, degree: int = NONLINEAR_DEGREE,
                  refined: bool = False) -> np.ndarray:
    """Entries ``(f(., t), phi_i)``; ``f(points (n, 2), t) -> (n, 2)``.

    ``f=None`` gives the zero vector. ``refined=True`` applies the rule on the
    four red-refinement children of every element.
    """
    if f is None:
        return np.zeros(space.velocity_dof_count)
    if refined:
        tab = space.tabulate(refined_quadrature(degree), key=("refined", degree))
    else:
        tab = space.tabulate(quadrature(degree))
    ne, nq = tab.jxw.shape
    vals = np.asarray(f(tab.points.reshape(-1, 2), t), dtype=float).reshape(ne, nq, 2)
    local = np.einsum("eq,eqc,qa->eac", tab.jxw, vals, tab.vphi)
    return _scatter_vector(space, local)
