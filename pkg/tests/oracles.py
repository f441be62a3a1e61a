"""Slow, independent evaluators used as test oracles.

Nothing here calls the library's basis tabulation, quadrature tables or
assembly. Elements are visited one at a time, barycentric coordinates come
from a 3x3 solve, and shape functions are written out explicitly.
"""
import numpy as np


def duffy_rule(n):
    """Collapsed Gauss-Legendre rule on the reference triangle
    ``{x, y >= 0, x + y <= 1}``: barycentric points and weights summing to 1/2.
    Exact for total degree ``2n - 2``."""
    g, w = np.polynomial.legendre.leggauss(n)
    s = 0.5 * (g + 1.0)
    ws = 0.5 * w
    pts, wts = [], []
    for si, wi in zip(s, ws):
        for tj, wj in zip(s, ws):
            x, y = si, (1.0 - si) * tj
            pts.append((1.0 - x - y, x, y))
            wts.append(wi * wj * (1.0 - si))
    return np.array(pts), np.array(wts)


def refine_rule(points, weights):
    """Apply a barycentric rule on the four red-refinement children."""
    E = np.eye(3)
    m = lambda i, j: 0.5 * (E[i] + E[j])
    children = [(E[0], m(0, 1), m(2, 0)), (m(0, 1), E[1], m(1, 2)),
                (m(2, 0), m(1, 2), E[2]), (m(0, 1), m(1, 2), m(2, 0))]
    pts = [p @ np.array(c) for c in children for p in points]
    return np.array(pts), np.tile(np.asarray(weights) / 4.0, 4)


class Element:
    """One triangle with its own affine geometry."""

    def __init__(self, corners):
        self.corners = np.asarray(corners, dtype=float)
        T = np.vstack([np.ones(3), self.corners.T])
        self.Tinv = np.linalg.inv(T)
        self.area = 0.5 * abs(np.linalg.det(T))
        # d lambda_i / d(x, y) = Tinv[i, 1:]
        self.dlam = self.Tinv[:, 1:]

    def point(self, lam):
        return np.asarray(lam) @ self.corners

    def bary(self, x):
        return self.Tinv @ np.array([1.0, x[0], x[1]])


def mini_basis(el, lam):
    """Values (4,) and gradients (4, 2): three hats then the bubble."""
    l0, l1, l2 = lam
    v = np.array([l0, l1, l2, 27.0 * l0 * l1 * l2])
    g = np.zeros((4, 2))
    g[:3] = el.dlam
    g[3] = 27.0 * (l1 * l2 * el.dlam[0] + l0 * l2 * el.dlam[1] + l0 * l1 * el.dlam[2])
    return v, g


def p2_basis(el, lam):
    """Values (6,) and gradients (6, 2): vertices then edges (k, k+1)."""
    v = np.zeros(6)
    g = np.zeros((6, 2))
    for i in range(3):
        v[i] = lam[i] * (2.0 * lam[i] - 1.0)
        g[i] = (4.0 * lam[i] - 1.0) * el.dlam[i]
    for k in range(3):
        a, b = k, (k + 1) % 3
        v[3 + k] = 4.0 * lam[a] * lam[b]
        g[3 + k] = 4.0 * (lam[b] * el.dlam[a] + lam[a] * el.dlam[b])
    return v, g


def basis(space, el, lam):
    return mini_basis(el, lam) if space.pair.kind.name == "MINI" else p2_basis(el, lam)


def _element(space, e):
    return Element(space.mesh.vertices[space.mesh.triangles[e]])


def _local(space, coeffs, e):
    d = space.velocity_dof_map[e]
    return coeffs[d], coeffs[d + space.n_scalar]


def velocity_at(space, coeffs, e, lam):
    el = _element(space, e)
    v, g = basis(space, el, lam)
    cx, cy = _local(space, coeffs, e)
    u = np.array([v @ cx, v @ cy])
    gu = np.array([cx @ g, cy @ g])  # [comp, deriv]
    return u, gu


def slow_convection(space, w, u, rule):
    """Entries ``b(w, u, phi_i)`` by explicit loops with ``rule = (points, weights)``."""
    pts, wts = rule
    out = np.zeros(space.velocity_dof_count)
    ns = space.n_scalar
    for e in range(space.mesh.n_triangles):
        el = _element(space, e)
        dofs = space.velocity_dof_map[e]
        wx, wy = _local(space, w, e)
        ux, uy = _local(space, u, e)
        for lam, q in zip(pts, wts):
            v, g = basis(space, el, lam)
            jw = 2.0 * el.area * q
            W = np.array([v @ wx, v @ wy])
            U = np.array([v @ ux, v @ uy])
            GU = np.array([ux @ g, uy @ g])
            adv = GU @ W                # (w.grad) u
            wgphi = g @ W               # (w.grad) phi_a
            for a, dof in enumerate(dofs):
                for c in range(2):
                    out[dof + c * ns] += jw * 0.5 * (adv[c] * v[a] - wgphi[a] * U[c])
    return out


def slow_load(space, f, t, rule):
    pts, wts = rule
    out = np.zeros(space.velocity_dof_count)
    ns = space.n_scalar
    for e in range(space.mesh.n_triangles):
        el = _element(space, e)
        dofs = space.velocity_dof_map[e]
        for lam, q in zip(pts, wts):
            v, _ = basis(space, el, lam)
            fx = f(el.point(lam)[None, :], t)[0]
            jw = 2.0 * el.area * q
            for a, dof in enumerate(dofs):
                out[dof] += jw * fx[0] * v[a]
                out[dof + ns] += jw * fx[1] * v[a]
    return out


def slow_errors(field, exact, t, rule):
    """``(|u - u_h|, |grad(u - u_h)|, |p - p_h|)`` with both pressures mean-free."""
    space = field.space
    pts, wts = rule
    l2 = h1 = 0.0
    pvals, pex, pw = [], [], []
    for e in range(space.mesh.n_triangles):
        el = _element(space, e)
        pd = space.mesh.triangles[e]
        for lam, q in zip(pts, wts):
            x = el.point(lam)[None, :]
            jw = 2.0 * el.area * q
            uh, guh = velocity_at(space, field.velocity_coeffs, e, lam)
            l2 += jw * np.sum((exact.u(x, t)[0] - uh) ** 2)
            h1 += jw * np.sum((exact.grad_u(x, t)[0] - guh) ** 2)
            pvals.append(np.dot(lam, field.pressure_coeffs[pd]))
            pex.append(exact.p(x, t)[0])
            pw.append(jw)
    pvals, pex, pw = map(np.array, (pvals, pex, pw))
    area = pw.sum()
    d = (pex - pex @ pw / area) - (pvals - pvals @ pw / area)
    return np.sqrt(l2), np.sqrt(h1), np.sqrt(pw @ d ** 2)


def slow_mass_stiffness(space, rule):
    """Dense scalar mass and stiffness matrices."""
    pts, wts = rule
    ns = space.n_scalar
    M = np.zeros((ns, ns))
    A = np.zeros((ns, ns))
    for e in range(space.mesh.n_triangles):
        el = _element(space, e)
        dofs = space.velocity_dof_map[e]
        for lam, q in zip(pts, wts):
            v, g = basis(space, el, lam)
            jw = 2.0 * el.area * q
            M[np.ix_(dofs, dofs)] += jw * np.outer(v, v)
            A[np.ix_(dofs, dofs)] += jw * g @ g.T
    return M, A


def slow_divergence(space, rule):
    """Dense ``B[q, j] = (chi_q, div phi_j)``."""
    pts, wts = rule
    ns = space.n_scalar
    B = np.zeros((space.pressure_dof_count, 2 * ns))
    for e in range(space.mesh.n_triangles):
        el = _element(space, e)
        dofs = space.velocity_dof_map[e]
        pd = space.mesh.triangles[e]
        for lam, q in zip(pts, wts):
            _, g = basis(space, el, lam)
            jw = 2.0 * el.area * q
            for i, qd in enumerate(pd):
                B[qd, dofs] += jw * lam[i] * g[:, 0]
                B[qd, dofs + ns] += jw * lam[i] * g[:, 1]
    return B


def dense_saddle_solve(K, B, c, rhs_u, rhs_p=None):
    """Dense solve of ``[[K, B^T, 0], [B, 0, c], [0, c^T, 0]]``."""
    K = np.asarray(K.todense() if hasattr(K, "todense") else K)
    B = np.asarray(B.todense() if hasattr(B, "todense") else B)
    nu, npr = K.shape[0], B.shape[0]
    A = np.zeros((nu + npr + 1, nu + npr + 1))
    A[:nu, :nu] = K
    A[:nu, nu:nu + npr] = B.T
    A[nu:nu + npr, :nu] = B
    A[nu:nu + npr, -1] = c
    A[-1, nu:nu + npr] = c
    rhs = np.zeros(nu + npr + 1)
    rhs[:nu] = rhs_u
    if rhs_p is not None:
        rhs[nu:nu + npr] = rhs_p
    x = np.linalg.solve(A, rhs)
    return x[:nu], x[nu:nu + npr]
