"""Mixed velocity/pressure spaces on triangulations.

Two inf-sup stable pairs are available: MINI (P1 plus cubic bubble velocity,
P1 pressure) and Taylor-Hood (P2 velocity, P1 pressure). Velocity vectors
store the x component for all scalar DOFs first, then the y component.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .mesh import Triangulation, MeshError, barycentric_coordinates


class ElementKind(enum.Enum):
    MINI = "MINI"
    TAYLOR_HOOD = "TAYLOR_HOOD"


@dataclass(frozen=True)
class ElementPair:
    kind: ElementKind
    velocity_degree_description: str
    pressure_degree_description: str

    @classmethod
    def of(cls, kind) -> "ElementPair":
        kind = ElementKind(kind.value if isinstance(kind, ElementKind) else str(kind).upper())
        if kind is ElementKind.MINI:
            return cls(kind, "P1 + cubic bubble 27*l0*l1*l2", "P1")
        return cls(kind, "P2", "P1")


MINI = ElementPair.of(ElementKind.MINI)
TAYLOR_HOOD = ElementPair.of(ElementKind.TAYLOR_HOOD)


# ---------------------------------------------------------------------------
# quadrature

@dataclass(frozen=True)
class QuadratureRule:
    """Rule on the reference triangle; ``points`` are barycentric, weights sum to 1/2."""

    points: np.ndarray
    weights: np.ndarray
    exactness_degree: int


def _orbit3(a, w):
    return [(a, a, 1 - 2 * a), (a, 1 - 2 * a, a), (1 - 2 * a, a, a)], [w] * 3


def _orbit6(a, b, w):
    c = 1 - a - b
    pts = [(a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)]
    return pts, [w] * 6


def _build_rules():
    rules = {}
    third = 1.0 / 3.0
    rules[1] = ([(third, third, third)], [1.0])
    p, w = _orbit3(1.0 / 6.0, 1.0 / 3.0)
    rules[2] = (p, w)
    p, w = _orbit3(0.2, 25.0 / 48.0)
    rules[3] = ([(third, third, third)] + p, [-27.0 / 48.0] + w)
    pa, wa = _orbit3(0.445948490915965, 0.223381589678011)
    pb, wb = _orbit3(0.091576213509771, 0.109951743655322)
    rules[4] = (pa + pb, wa + wb)
    # Radon's 7-point rule in closed form
    s15 = math.sqrt(15.0)
    pa, wa = _orbit3((6.0 - s15) / 21.0, (155.0 - s15) / 1200.0)
    pb, wb = _orbit3((6.0 + s15) / 21.0, (155.0 + s15) / 1200.0)
    rules[5] = ([(third, third, third)] + pa + pb, [9.0 / 40.0] + wa + wb)
    pa, wa = _orbit3(0.249286745170910, 0.116786275726379)
    pb, wb = _orbit3(0.063089014491502, 0.050844906370207)
    pc, wc = _orbit6(0.053145049844817, 0.310352451033784, 0.082851075618374)
    rules[6] = (pa + pb + pc, wa + wb + wc)
    out = {}
    for deg, (pts, wts) in rules.items():
        pts = np.array(pts, dtype=float)
        pts /= pts.sum(axis=1, keepdims=True)
        wts = np.array(wts, dtype=float)
        wts = 0.5 * wts / wts.sum()
        pts.setflags(write=False)
        wts.setflags(write=False)
        out[deg] = QuadratureRule(pts, wts, deg)
    return out


_RULES = _build_rules()


def quadrature(degree: int) -> QuadratureRule:
    """Symmetric Gauss rule exact for polynomials of total degree ``degree``."""
    if degree not in _RULES:
        raise ValueError(f"unsupported quadrature degree {degree}; choose 1..6")
    return _RULES[degree]


def refined_quadrature(degree: int) -> QuadratureRule:
    """``quadrature(degree)`` applied on each of the four red-refinement children."""
    base = quadrature(degree)
    corners = np.eye(3)
    mid = lambda i, j: 0.5 * (corners[i] + corners[j])
    children = [
        (corners[0], mid(0, 1), mid(2, 0)),
        (mid(0, 1), corners[1], mid(1, 2)),
        (mid(2, 0), mid(1, 2), corners[2]),
        (mid(0, 1), mid(1, 2), mid(2, 0)),
    ]
    pts = np.vstack([base.points @ np.array(c) for c in children])
    wts = np.tile(base.weights / 4.0, 4)
    return QuadratureRule(pts, wts, degree)


# ---------------------------------------------------------------------------
# reference shape functions in barycentric coordinates

def _shape(kind: ElementKind, lam: np.ndarray):
    """Values ``(n, nloc)`` and barycentric derivatives ``(n, nloc, 3)``."""
    l0, l1, l2 = lam[:, 0], lam[:, 1], lam[:, 2]
    n = lam.shape[0]
    if kind is ElementKind.MINI:
        vals = np.column_stack([l0, l1, l2, 27.0 * l0 * l1 * l2])
        d = np.zeros((n, 4, 3))
        d[:, 0, 0] = d[:, 1, 1] = d[:, 2, 2] = 1.0
        d[:, 3, 0] = 27.0 * l1 * l2
        d[:, 3, 1] = 27.0 * l0 * l2
        d[:, 3, 2] = 27.0 * l0 * l1
        return vals, d
    vals = np.column_stack([
        l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
        4 * l0 * l1, 4 * l1 * l2, 4 * l2 * l0,
    ])
    d = np.zeros((n, 6, 3))
    d[:, 0, 0] = 4 * l0 - 1
    d[:, 1, 1] = 4 * l1 - 1
    d[:, 2, 2] = 4 * l2 - 1
    d[:, 3, 0], d[:, 3, 1] = 4 * l1, 4 * l0
    d[:, 4, 1], d[:, 4, 2] = 4 * l2, 4 * l1
    d[:, 5, 2], d[:, 5, 0] = 4 * l0, 4 * l2
    return vals, d


@dataclass(frozen=True)
class Tabulation:
    """Basis data at the points of one rule on every element.

    ``jxw[e, q]`` is the physical quadrature weight, ``vphi`` the velocity
    shape values ``(nq, nloc)`` (or ``(ne, nq, nloc)`` for per-element point
    sets), ``vgrad`` the physical gradients ``(ne, nq, nloc, 2)``.
    """

    rule: QuadratureRule
    jxw: np.ndarray
    vphi: np.ndarray
    vgrad: np.ndarray
    pphi: np.ndarray
    pgrad: np.ndarray
    points: np.ndarray


class MixedSpace:
    """Velocity/pressure pair on one mesh with homogeneous Dirichlet velocity.

    Attributes
    ----------
    mesh, pair
    n_scalar : int
        Scalar velocity DOFs per component.
    velocity_dof_count : int
        ``2 * n_scalar``.
    pressure_dof_count : int
    velocity_dof_map : (nt, nloc) int array of scalar DOF indices; add
        ``n_scalar`` for the y component.
    pressure_dof_map : (nt, 3) int array
    dirichlet_dofs, interior_dofs : vector-DOF index arrays
    nodes : (n_scalar, 2) interpolation nodes (MINI bubbles at centroids)
    """

    def __init__(self, mesh: Triangulation, pair: ElementPair = MINI):
        self.mesh = mesh
        self.pair = pair
        nv, nt = mesh.n_vertices, mesh.n_triangles
        tri = mesh.triangles
        if pair.kind is ElementKind.MINI:
            self.velocity_dof_map = np.column_stack([tri, nv + np.arange(nt)])
            self.n_scalar = nv + nt
            extra_nodes = mesh.vertices[tri].mean(axis=1)
            scalar_boundary = np.concatenate([mesh.boundary_vertex_flags,
                                              np.zeros(nt, dtype=bool)])
        else:
            self.velocity_dof_map = np.column_stack([tri, nv + mesh.triangle_edges])
            self.n_scalar = nv + mesh.n_edges
            extra_nodes = mesh.edge_midpoints()
            scalar_boundary = np.concatenate([mesh.boundary_vertex_flags,
                                              mesh.boundary_edge_flags])
        self.nodes = np.vstack([mesh.vertices, extra_nodes])
        self.scalar_boundary = scalar_boundary
        self.velocity_dof_count = 2 * self.n_scalar
        self.pressure_dof_count = nv
        self.pressure_dof_map = tri
        bd = np.flatnonzero(scalar_boundary)
        self.dirichlet_dofs = np.concatenate([bd, bd + self.n_scalar])
        mask = np.ones(self.velocity_dof_count, dtype=bool)
        mask[self.dirichlet_dofs] = False
        self.interior_dofs = np.flatnonzero(mask)
        for a in (self.velocity_dof_map, self.dirichlet_dofs, self.interior_dofs, self.nodes):
            a.setflags(write=False)

        p = mesh.vertices[tri]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        self.areas = 0.5 * det
        # gradients of barycentric coordinates, (nt, 3, 2)
        g1 = np.column_stack([d2[:, 1], -d2[:, 0]]) / det[:, None]
        g2 = np.column_stack([-d1[:, 1], d1[:, 0]]) / det[:, None]
        self.bary_grads = np.stack([-g1 - g2, g1, g2], axis=1)
        self._tab_cache = {}

    @property
    def n_local(self) -> int:
        return self.velocity_dof_map.shape[1]

    def __repr__(self):
        return (f"MixedSpace({self.pair.kind.value}, nt={self.mesh.n_triangles}, "
                f"velocity={self.velocity_dof_count}, pressure={self.pressure_dof_count})")

    # -- tabulation ---------------------------------------------------------

    def tabulate(self, rule: QuadratureRule, key=None) -> Tabulation:
        key = key if key is not None else ("std", rule.exactness_degree, len(rule.weights))
        tab = self._tab_cache.get(key)
        if tab is None:
            tab = self._tabulate(rule)
            self._tab_cache[key] = tab
        return tab

    def _tabulate(self, rule: QuadratureRule) -> Tabulation:
        lam = rule.points
        vphi, dv = _shape(self.pair.kind, lam)
        vgrad = np.einsum("qak,ekd->eqad", dv, self.bary_grads)
        pphi = lam.copy()
        pgrad = np.broadcast_to(self.bary_grads[:, None, :, :],
                                (self.mesh.n_triangles, len(rule.weights), 3, 2))
        jxw = 2.0 * self.areas[:, None] * rule.weights[None, :]
        verts = self.mesh.vertices[self.mesh.triangles]
        points = np.einsum("qk,ekd->eqd", lam, verts)
        return Tabulation(rule, jxw, vphi, vgrad, pphi, pgrad, points)

    # -- point evaluation -----------------------------------------------------

    def shape_at(self, elements, lam):
        """Velocity shape values ``(n, nloc)`` and physical gradients ``(n, nloc, 2)``
        at barycentric points ``lam[i]`` in ``elements[i]``."""
        vals, d = _shape(self.pair.kind, np.asarray(lam, dtype=float))
        grads = np.einsum("nak,nkd->nad", d, self.bary_grads[elements])
        return vals, grads

    def evaluate_velocity(self, coeffs, elements, lam):
        """Velocity values ``(n, 2)`` and gradients ``(n, 2, 2)`` (``[comp, deriv]``)."""
        elements = np.asarray(elements)
        vals, grads = self.shape_at(elements, lam)
        dofs = self.velocity_dof_map[elements]
        cx = coeffs[dofs]
        cy = coeffs[dofs + self.n_scalar]
        u = np.column_stack([(vals * cx).sum(1), (vals * cy).sum(1)])
        gu = np.stack([np.einsum("na,nad->nd", cx, grads),
                       np.einsum("na,nad->nd", cy, grads)], axis=1)
        return u, gu

    def evaluate_pressure(self, coeffs, elements, lam):
        elements = np.asarray(elements)
        return (np.asarray(lam) * coeffs[self.pressure_dof_map[elements]]).sum(1)

    # -- interpolation ------------------------------------------------------

    def interpolate_velocity(self, func) -> np.ndarray:
        """Nodal interpolant of ``func(points (n, 2)) -> (n, 2)``.

        The MINI bubble coefficient matches the value at the centroid.
        Dirichlet DOFs are set to zero.
        """
        vals = np.asarray(func(self.nodes), dtype=float)
        if self.pair.kind is ElementKind.MINI:
            nv = self.mesh.n_vertices
            vals = vals.copy()
            vals[nv:] -= vals[self.mesh.triangles].mean(axis=1)
        coeffs = np.concatenate([vals[:, 0], vals[:, 1]])
        coeffs[self.dirichlet_dofs] = 0.0
        return coeffs

    def interpolate_pressure(self, func) -> np.ndarray:
        return np.asarray(func(self.mesh.vertices), dtype=float).copy()


def build_space(mesh: Triangulation, pair=MINI) -> MixedSpace:
    if not isinstance(pair, ElementPair):
        pair = ElementPair.of(pair)
    return MixedSpace(mesh, pair)


def _check_barycentric(lam):
    lam = np.asarray(lam, dtype=float)
    if lam.shape[-1] != 3:
        raise ValueError("barycentric points need three coordinates")
    if (np.any(lam < -1e-12) or np.any(lam > 1 + 1e-12)
            or np.any(np.abs(lam.sum(-1) - 1.0) > 1e-12)):
        raise ValueError(f"point {lam} lies outside the reference triangle")
    return lam


def eval_velocity_basis(space: MixedSpace, element: int, point):
    """Local scalar velocity shape values ``(nloc,)`` and gradients ``(nloc, 2)``."""
    lam = _check_barycentric(point).reshape(1, 3)
    if not 0 <= element < space.mesh.n_triangles:
        raise IndexError(f"element {element} out of range")
    vals, grads = space.shape_at(np.array([element]), lam)
    return vals[0], grads[0]


# ---------------------------------------------------------------------------
# discrete fields

@dataclass
class FieldPair:
    """Velocity and pressure coefficient vectors on ``space`` at ``time_stamp``."""

    velocity_coeffs: np.ndarray
    pressure_coeffs: np.ndarray
    space: MixedSpace
    time_stamp: float = 0.0

    @classmethod
    def zeros(cls, space: MixedSpace, t: float = 0.0) -> "FieldPair":
        return cls(np.zeros(space.velocity_dof_count),
                   np.zeros(space.pressure_dof_count), space, t)

    def copy(self) -> "FieldPair":
        return FieldPair(self.velocity_coeffs.copy(), self.pressure_coeffs.copy(),
                         self.space, self.time_stamp)


def prolong(coarse_field: FieldPair, fine_space: MixedSpace):
    """Represent a coarse field on a nested fine space.

    P1 and P2 components are reproduced exactly. A MINI bubble on the coarse
    mesh is not in the fine space; it is interpolated (fine nodal values plus
    fine bubble matching the centroid value). Returns ``(fine_field, defect)``
    where ``defect`` is the L2 norm of the velocity representation error.
    """
    coarse = coarse_field.space
    try:
        anc = fine_space.mesh.ancestors_in(coarse.mesh)
    except MeshError as exc:
        raise MeshError("prolongation needs nested meshes") from exc
    fmesh = fine_space.mesh

    vel = prolongation_matrix(coarse, fine_space, anc) @ coarse_field.velocity_coeffs

    pT = anc[_vertex_owner(fmesh)]
    plam = np.clip(barycentric_coordinates(coarse.mesh, pT, fmesh.vertices), 0.0, 1.0)
    plam /= plam.sum(1, keepdims=True)
    pres = coarse.evaluate_pressure(coarse_field.pressure_coeffs, pT, plam)
    fine = FieldPair(vel, pres, fine_space, coarse_field.time_stamp)

    defect = 0.0
    if coarse.pair.kind is ElementKind.MINI:
        defect = _representation_defect(coarse_field, fine, anc)
    return fine, defect


def prolongation_matrix(coarse: MixedSpace, fine_space: MixedSpace, anc=None) -> sp.csr_matrix:
    """Sparse velocity prolongation used by :func:`prolong`.

    Rows are fine vector DOFs, columns coarse vector DOFs; Dirichlet rows are
    empty.
    """
    fmesh = fine_space.mesh
    if anc is None:
        anc = fmesh.ancestors_in(coarse.mesh)
    # each fine node is evaluated inside the coarse ancestor of one fine
    # triangle that touches it
    ldof = fine_space.velocity_dof_map
    owner = np.empty(fine_space.n_scalar, dtype=np.int64)
    for a in range(ldof.shape[1]):
        owner[ldof[:, a]] = np.arange(fmesh.n_triangles)
    T = anc[owner]
    lam = np.clip(barycentric_coordinates(coarse.mesh, T, fine_space.nodes), 0.0, 1.0)
    lam /= lam.sum(1, keepdims=True)
    vals, _ = coarse.shape_at(T, lam)
    nloc = vals.shape[1]
    rows = np.repeat(np.arange(fine_space.n_scalar), nloc)
    S = sp.csr_matrix((vals.ravel(), (rows, coarse.velocity_dof_map[T].ravel())),
                      shape=(fine_space.n_scalar, coarse.n_scalar))
    if fine_space.pair.kind is ElementKind.MINI:
        nv, nt = fmesh.n_vertices, fmesh.n_triangles
        avg = sp.csr_matrix((np.full(3 * nt, 1.0 / 3.0),
                             (nv + np.repeat(np.arange(nt), 3), fmesh.triangles.ravel())),
                            shape=(fine_space.n_scalar, fine_space.n_scalar))
        S = S - avg @ S
    keep = np.ones(fine_space.velocity_dof_count)
    keep[fine_space.dirichlet_dofs] = 0.0
    P = sp.diags(keep) @ sp.block_diag([S, S], format="csr")
    P.eliminate_zeros()
    return P.tocsr()


def _vertex_owner(mesh):
    owner = np.empty(mesh.n_vertices, dtype=np.int64)
    for a in range(3):
        owner[mesh.triangles[:, a]] = np.arange(mesh.n_triangles)
    return owner


def _representation_defect(coarse_field, fine_field, anc):
    fs = fine_field.space
    tab = fs.tabulate(quadrature(5))
    ne, nq = tab.jxw.shape
    elems = np.repeat(np.arange(ne), nq)
    pts = tab.points.reshape(-1, 2)
    uf, _ = fs.evaluate_velocity(fine_field.velocity_coeffs, elems,
                                 np.tile(tab.rule.points, (ne, 1)))
    T = anc[elems]
    lam = barycentric_coordinates(coarse_field.space.mesh, T, pts)
    uc, _ = coarse_field.space.evaluate_velocity(coarse_field.velocity_coeffs, T, lam)
    diff = ((uf - uc) ** 2).sum(1)
    return float(math.sqrt(np.dot(tab.jxw.ravel(), diff)))
