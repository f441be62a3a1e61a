"""Structured triangulations of rectangles and nested red refinement.

Every mesh is immutable once built. A :class:`MeshHierarchy` stores the
levels from coarsest to finest together with the child-to-parent triangle
maps between consecutive levels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class MeshError(ValueError):
    """Invalid mesh input or an unsatisfiable refinement request."""


def _frozen(a, dtype):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Triangulation:
    """Conforming triangulation with counterclockwise triangles.

    Attributes
    ----------
    vertices : (nv, 2) float array
    triangles : (nt, 3) int array, counterclockwise
    edges : (ne, 2) int array, sorted vertex pairs
    triangle_edges : (nt, 3) int array
        Local edge ``k`` joins local vertices ``k`` and ``(k + 1) % 3``.
    boundary_vertex_flags : (nv,) bool array
    boundary_edge_flags : (ne,) bool array
    mesh_size_h : float
        Longest edge over all triangles.
    level : int
    bounds : (x0, x1, y0, y1) of the rectangle that is meshed
    parent, parent_mesh
        Set on refined meshes: ``parent[c]`` is the triangle of
        ``parent_mesh`` that contains child ``c``.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    edges: np.ndarray
    triangle_edges: np.ndarray
    boundary_vertex_flags: np.ndarray
    boundary_edge_flags: np.ndarray
    mesh_size_h: float
    level: int = 0
    bounds: tuple = (0.0, 1.0, 0.0, 1.0)
    parent: np.ndarray | None = None
    parent_mesh: Triangulation | None = None

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def edge_midpoints(self) -> np.ndarray:
        return 0.5 * (self.vertices[self.edges[:, 0]] + self.vertices[self.edges[:, 1]])

    def ancestors_in(self, coarse: Triangulation) -> np.ndarray:
        """Triangle of ``coarse`` containing each triangle of this mesh.

        Raises :class:`MeshError` unless ``coarse`` is this mesh or one of
        its refinement ancestors.
        """
        anc = np.arange(self.n_triangles)
        m = self
        while m is not coarse:
            if m.parent_mesh is None:
                raise MeshError("meshes are not nested")
            anc = m.parent[anc]
            m = m.parent_mesh
        return anc

    def __repr__(self):
        return (f"Triangulation(level={self.level}, vertices={self.n_vertices}, "
                f"triangles={self.n_triangles}, h={self.mesh_size_h:.4g})")


def _from_triangles(vertices, triangles, level, bounds, parent=None,
                    parent_mesh=None) -> Triangulation:
    triangles = np.asarray(triangles, dtype=np.int64)
    local = np.array([[0, 1], [1, 2], [2, 0]])
    all_edges = np.sort(triangles[:, local].reshape(-1, 2), axis=1)
    edges, inverse, counts = np.unique(all_edges, axis=0, return_inverse=True,
                                       return_counts=True)
    inverse = inverse.reshape(-1)
    tri_edges = inverse.reshape(-1, 3)
    if np.any(counts > 2):
        raise MeshError("non-manifold edge: shared by more than two triangles")
    boundary_edges = counts == 1
    bflags = np.zeros(len(vertices), dtype=bool)
    bflags[edges[boundary_edges].ravel()] = True
    lengths = np.linalg.norm(vertices[edges[:, 0]] - vertices[edges[:, 1]], axis=1)
    return Triangulation(
        vertices=_frozen(vertices, np.float64),
        triangles=_frozen(triangles, np.int64),
        edges=_frozen(edges, np.int64),
        triangle_edges=_frozen(tri_edges, np.int64),
        boundary_vertex_flags=_frozen(bflags, bool),
        boundary_edge_flags=_frozen(boundary_edges, bool),
        mesh_size_h=float(lengths.max()),
        level=level,
        bounds=tuple(float(b) for b in bounds),
        parent=None if parent is None else _frozen(parent, np.int64),
        parent_mesh=parent_mesh,
    )


def build_rectangle_mesh(nx: int, ny: int, bounds=(0.0, 1.0, 0.0, 1.0)) -> Triangulation:
    """Split an ``nx`` by ``ny`` grid of cells along the SW-NE diagonals."""
    if int(nx) < 1 or int(ny) < 1:
        raise MeshError(f"cell counts must be positive, got nx={nx}, ny={ny}")
    x0, x1, y0, y1 = bounds
    if not (x1 > x0 and y1 > y0):
        raise MeshError(f"degenerate rectangle {bounds}")
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys)  # row j holds y = ys[j]
    vertices = np.column_stack([X.ravel(), Y.ravel()])
    i, j = np.meshgrid(np.arange(nx), np.arange(ny))
    v00 = (j * (nx + 1) + i).ravel()
    v10 = v00 + 1
    v01 = v00 + nx + 1
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    triangles = np.stack([lower, upper], axis=1).reshape(-1, 3)
    return _from_triangles(vertices, triangles, 0, bounds)


def build_structured_mesh(n: int) -> Triangulation:
    """Uniform ``n`` x ``n`` diagonal-split triangulation of the unit square.

    The result has ``(n+1)**2`` vertices, ``2 n**2`` triangles and mesh size
    ``sqrt(2)/n``.
    """
    if isinstance(n, bool) or int(n) != n or n < 1:
        raise MeshError(f"n must be a positive integer, got {n!r}")
    return build_rectangle_mesh(int(n), int(n))


def refine_uniform(mesh: Triangulation) -> Triangulation:
    """Red-refine every triangle into four congruent children.

    The refined mesh records ``parent[c]``, the index of the coarse triangle
    containing child ``c``, and a reference to ``mesh``. Old vertices keep their
    indices; edge ``e`` of the coarse mesh gets midpoint vertex
    ``mesh.n_vertices + e``.
    """
    nv = mesh.n_vertices
    mids = mesh.edge_midpoints()
    vertices = np.vstack([mesh.vertices, mids])
    t = mesh.triangles
    te = mesh.triangle_edges + nv
    v0, v1, v2 = t[:, 0], t[:, 1], t[:, 2]
    m01, m12, m20 = te[:, 0], te[:, 1], te[:, 2]
    children = np.stack([
        np.column_stack([v0, m01, m20]),
        np.column_stack([m01, v1, m12]),
        np.column_stack([m20, m12, v2]),
        np.column_stack([m01, m12, m20]),
    ], axis=1).reshape(-1, 3)
    parent = np.repeat(np.arange(mesh.n_triangles), 4)
    return _from_triangles(vertices, children, mesh.level + 1, mesh.bounds,
                           parent, mesh)


@dataclass(frozen=True, eq=False)
class MeshHierarchy:
    """Nested meshes, ``levels[0]`` coarsest.

    ``parent_maps[k]`` maps triangles of ``levels[k + 1]`` to their parents
    in ``levels[k]``.
    """

    levels: tuple
    parent_maps: tuple = field(default=())
    n_coarse: int = 1

    @property
    def finest(self) -> Triangulation:
        return self.levels[-1]

    @property
    def coarse_size(self) -> float:
        """Cell width of the coarsest grid (the diagonal-free size ``H``)."""
        x0, x1, _, _ = self.levels[0].bounds
        return (x1 - x0) / self.n_coarse

    def ancestor_map(self, coarse_level: int, fine_level: int) -> np.ndarray:
        """Index of the ``coarse_level`` triangle containing each fine triangle."""
        if not 0 <= coarse_level <= fine_level < len(self.levels):
            raise MeshError(f"invalid level pair ({coarse_level}, {fine_level})")
        return self.levels[fine_level].ancestors_in(self.levels[coarse_level])


def build_hierarchy(n_coarse: int, fine_levels: int) -> MeshHierarchy:
    if fine_levels < 0:
        raise MeshError(f"fine_levels must be nonnegative, got {fine_levels}")
    levels = [build_structured_mesh(n_coarse)]
    parents = []
    for _ in range(fine_levels):
        fine = refine_uniform(levels[-1])
        levels.append(fine)
        parents.append(fine.parent)
    return MeshHierarchy(tuple(levels), tuple(parents), int(n_coarse))


def choose_fine_level_for_coupling(H: float, hierarchy: MeshHierarchy) -> int:
    """Coarsest level with ``h <= sqrt(2) * H**2``.

    ``H`` is the cell width of the coarse grid and ``h`` the longest edge
    (the cell diagonal), hence the ``sqrt(2)``.
    """
    target = math.sqrt(2.0) * H * H * (1.0 + 1e-12)
    for k, level in enumerate(hierarchy.levels):
        if level.mesh_size_h <= target:
            return k
    raise MeshError(
        f"hierarchy too shallow: finest h={hierarchy.finest.mesh_size_h:.4g} "
        f"exceeds sqrt(2)*H^2={target:.4g}; add fine levels")


def barycentric_coordinates(mesh: Triangulation, triangles, points) -> np.ndarray:
    """Barycentric coordinates of ``points[i]`` with respect to ``triangles[i]``."""
    p = mesh.vertices[mesh.triangles[triangles]]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    r = np.asarray(points) - p[:, 0]
    l1 = (r[:, 0] * d2[:, 1] - r[:, 1] * d2[:, 0]) / det
    l2 = (d1[:, 0] * r[:, 1] - d1[:, 1] * r[:, 0]) / det
    return np.column_stack([1.0 - l1 - l2, l1, l2])


def check_conforming(mesh: Triangulation) -> bool:
    """Edge-sharing audit: interior edges have two triangles on opposite sides,
    boundary edges lie on the rectangle boundary, no hanging vertices."""
    if np.any(mesh.signed_areas() <= 0.0):
        return False
    t = mesh.triangles
    directed = t[:, [[0, 1], [1, 2], [2, 0]]].reshape(-1, 2)
    # in a conforming oriented mesh each directed edge occurs at most once
    if len(np.unique(directed, axis=0)) != len(directed):
        return False
    x0, x1, y0, y1 = mesh.bounds
    tol = 1e-12 * max(x1 - x0, y1 - y0)
    bv = mesh.vertices[mesh.edges[mesh.boundary_edge_flags].ravel()]
    on_rect = ((np.abs(bv[:, 0] - x0) < tol) | (np.abs(bv[:, 0] - x1) < tol)
               | (np.abs(bv[:, 1] - y0) < tol) | (np.abs(bv[:, 1] - y1) < tol))
    if not on_rect.all():
        return False
    area = (x1 - x0) * (y1 - y0)
    return abs(mesh.signed_areas().sum() - area) <= 1e-12 * max(area, 1.0)


def write_mesh(mesh: Triangulation, path) -> None:
    """Plain-text dump: ``vertices N triangles M`` header, vertex lines
    ``x y boundary_flag`` then triangle lines ``i j k``."""
    with open(path, "w") as fh:
        fh.write(f"vertices {mesh.n_vertices} triangles {mesh.n_triangles}\n")
        for (x, y), b in zip(mesh.vertices, mesh.boundary_vertex_flags):
            fh.write(f"{float(x)!r} {float(y)!r} {int(b)}\n")
        for i, j, k in mesh.triangles:
            fh.write(f"{i} {j} {k}\n")


def read_mesh(path) -> Triangulation:
    with open(path) as fh:
        head = fh.readline().split()
        if len(head) != 4 or head[0] != "vertices" or head[2] != "triangles":
            raise MeshError(f"{path}: bad header {' '.join(head)!r}")
        nv, nt = int(head[1]), int(head[3])
        verts = np.array([fh.readline().split()[:2] for _ in range(nv)], dtype=float)
        tris = np.array([fh.readline().split() for _ in range(nt)], dtype=np.int64)
    bounds = (verts[:, 0].min(), verts[:, 0].max(), verts[:, 1].min(), verts[:, 1].max())
    return _from_triangles(verts, tris, 0, bounds)
