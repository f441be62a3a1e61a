"""Sparse direct solves of velocity/pressure saddle-point systems.

The augmented matrix is

    [[K,  B^T, 0],
     [B,  0,   c],
     [0,  c^T, 0]]

where the last row pins the pressure mean to zero and its multiplier absorbs
the constant-pressure null space. It is factorized once with SuperLU and the
factorization is reused for every right-hand side.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import structural_rank
from scipy.sparse.linalg import splu

RESIDUAL_TOL = 1e-10
PIVOT_TOL = 1e-12


class SingularSystemError(RuntimeError):
    """The augmented system could not be factorized."""


class SolveError(RuntimeError):
    """A solve missed the residual contract."""


@dataclass
class SaddleProblem:
    K: sp.spmatrix
    B: sp.spmatrix
    c: np.ndarray | None
    rhs_velocity: np.ndarray | None = None
    rhs_pressure: np.ndarray | None = None


@dataclass
class SolveStats:
    residual_norm: float
    factorization_reused: bool
    wall_time: float


def augmented_matrix(K, B, c=None) -> sp.csc_matrix:
    if c is None:
        return sp.bmat([[K, B.T], [B, None]], format="csc")
    col = sp.csc_matrix(np.asarray(c, dtype=float).reshape(-1, 1))
    return sp.bmat([[K, B.T, None],
                    [B, None, col],
                    [None, col.T, None]], format="csc")


def _splu(matrix, permc_spec="MMD_AT_PLUS_A"):
    # symmetric-mode minimum degree on A + A^T with weak diagonal preference;
    # accuracy is guarded by the residual check in Factorization.solve
    return splu(matrix, permc_spec=permc_spec, diag_pivot_thresh=0.01,
                options=dict(SymmetricMode=True))


class Ordering:
    """A fill-reducing symmetric permutation bound to one CSC pattern.

    Matrices that share the pattern (for instance successive Newton
    matrices) are permuted by a single gather of their data and factorized
    without recomputing the ordering.
    """

    def __init__(self, pattern: sp.csc_matrix, order: np.ndarray):
        pattern = sp.csc_matrix(pattern)
        self.indptr, self.indices = pattern.indptr, pattern.indices
        self.order = np.asarray(order)
        tagged = sp.csc_matrix((np.arange(1, pattern.nnz + 1, dtype=float),
                                pattern.indices, pattern.indptr), shape=pattern.shape)
        permuted = tagged[self.order][:, self.order].tocsc()
        permuted.sort_indices()
        self.map = permuted.data.astype(np.int64) - 1
        self.p_indptr, self.p_indices = permuted.indptr, permuted.indices
        self.shape = pattern.shape

    def matches(self, matrix: sp.csc_matrix) -> bool:
        return (matrix.shape == self.shape and matrix.nnz == len(self.map)
                and np.array_equal(matrix.indptr, self.indptr)
                and np.array_equal(matrix.indices, self.indices))

    def permute(self, matrix: sp.csc_matrix) -> sp.csc_matrix:
        return sp.csc_matrix((matrix.data[self.map], self.p_indices, self.p_indptr),
                             shape=self.shape)


def equilibration(matrix, n_velocity, n_pressure) -> np.ndarray:
    """Symmetric diagonal scaling ``D`` that brings ``D A D`` to unit scale.

    Velocity rows use ``|K_ii|^(-1/2)``, pressure rows the inverse square root
    of the diagonal of ``B diag(K)^{-1} B^T``, the mean row normalizes ``c``.
    """
    A = sp.csc_matrix(matrix)
    nu_, np_ = n_velocity, n_pressure
    dk = np.abs(A.diagonal()[:nu_])
    tiny = np.finfo(float).tiny
    dk = np.where(dk > 0, dk, max(dk.max(initial=0.0), 1.0))
    Bm = A[nu_:nu_ + np_, :nu_]
    dp = np.asarray(abs(Bm).power(2) @ (1.0 / dk)).ravel()
    dp = np.where(dp > tiny, dp, 1.0)
    D = np.concatenate([1.0 / np.sqrt(dk), 1.0 / np.sqrt(dp), np.ones(A.shape[0] - nu_ - np_)])
    if A.shape[0] > nu_ + np_:
        cm = A[nu_:nu_ + np_, nu_ + np_].toarray().ravel() * D[nu_:nu_ + np_]
        norm = np.sqrt(np.dot(cm, cm))
        D[-1] = 1.0 / norm if norm > 0 else 1.0
    return D


class Factorization:
    """LU factors of one saddle system. The factors are never modified, so
    ``solve`` may be called repeatedly and from several threads.

    Build either from blocks ``(K, B, c)`` or, with ``matrix=``, from an
    already assembled augmented matrix of the same layout.
    """

    def __init__(self, K=None, B=None, c=None, *, matrix=None, n_velocity=None,
                 n_pressure=None, check_structure=True, ordering: Ordering | None = None):
        if matrix is None:
            n_velocity, n_pressure = K.shape[0], B.shape[0]
            matrix = augmented_matrix(K, B, c)
            has_mean = c is not None
        else:
            has_mean = matrix.shape[0] == n_velocity + n_pressure + 1
        self.n_velocity = n_velocity
        self.n_pressure = n_pressure
        self.has_mean_constraint = has_mean
        self.matrix = sp.csc_matrix(matrix)
        t0 = time.perf_counter()
        self.scaling = equilibration(self.matrix, n_velocity, n_pressure)
        # SuperLU may crash instead of failing cleanly on structurally
        # singular input, so rule that case out first
        if check_structure:
            self.check_structure(self.matrix)
        A = self.matrix
        D = self.scaling
        scaled = sp.csc_matrix((A.data * D[A.indices] * np.repeat(D, np.diff(A.indptr)),
                                A.indices, A.indptr), shape=A.shape)
        if ordering is not None and not ordering.matches(scaled):
            ordering = None
        self.ordering = ordering
        try:
            if ordering is None:
                self.lu = _splu(scaled)
            else:
                self.lu = _splu(ordering.permute(scaled), "NATURAL")
        except RuntimeError as exc:
            raise SingularSystemError(self._diagnose(str(exc))) from exc
        udiag = np.abs(self.lu.U.diagonal())
        if udiag.min() <= PIVOT_TOL * udiag.max():
            raise SingularSystemError(self._diagnose(
                f"pivot {udiag.min():.3e} below {PIVOT_TOL:g} x max pivot {udiag.max():.3e}"))
        self.factor_time = time.perf_counter() - t0
        self.n_solves = 0

    def check_structure(self, matrix):
        """Raise :class:`SingularSystemError` if ``matrix`` is structurally singular."""
        nonzero = sp.csc_matrix(matrix, copy=True)
        nonzero.eliminate_zeros()
        rank = structural_rank(nonzero)
        if rank < self.size:
            raise SingularSystemError(self._diagnose(
                f"structural rank {rank} < {self.size}"))

    def _diagnose(self, detail):
        nu_ = self.n_velocity
        K = self.matrix[:nu_, :nu_].tocsc()
        K.eliminate_zeros()
        k_ok = structural_rank(K) == nu_
        if k_ok:
            try:
                kd = np.abs(splu(K).U.diagonal())
                k_ok = kd.min() > PIVOT_TOL * kd.max()
            except RuntimeError:
                k_ok = False
        if not k_ok:
            return f"velocity block is singular (not positive definite on the interior DOFs); {detail}"
        what = ("pressure block is rank deficient: inf-sup failure or the "
                "constant-pressure null space is not removed")
        if not self.has_mean_constraint:
            what += " (no pressure-mean constraint row)"
        return f"{what}; {detail}"

    def column_order(self) -> np.ndarray:
        """Symmetric ordering used by the factors, reusable via :class:`Ordering`."""
        if self.ordering is not None:
            return self.ordering.order
        return np.argsort(self.lu.perm_c)

    def _lu_solve(self, b):
        if self.ordering is None:
            return self.lu.solve(b)
        order = self.ordering.order
        x = np.empty_like(b)
        x[order] = self.lu.solve(b[order])
        return x

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def solve(self, rhs_velocity, rhs_pressure=None):
        """Return ``(u, p, stats)``. Raises :class:`SolveError` if the
        augmented residual exceeds ``1e-10 * (1 + |rhs|_inf)``."""
        t0 = time.perf_counter()
        rhs = np.zeros(self.size)
        rhs[:self.n_velocity] = rhs_velocity
        if rhs_pressure is not None:
            rhs[self.n_velocity:self.n_velocity + self.n_pressure] = rhs_pressure
        D = self.scaling
        x = D * self._lu_solve(D * rhs)
        res = self.matrix @ x - rhs
        bound = RESIDUAL_TOL * (1.0 + np.abs(rhs).max())
        rnorm = np.abs(res).max()
        for _ in range(2):
            if rnorm <= bound:
                break
            # iterative refinement
            x -= D * self._lu_solve(D * res)
            res = self.matrix @ x - rhs
            rnorm = np.abs(res).max()
        if not np.isfinite(rnorm) or rnorm > bound:
            raise SolveError(f"saddle residual {rnorm:.3e} exceeds {bound:.3e}")
        reused = self.n_solves > 0
        self.n_solves += 1
        u = x[:self.n_velocity]
        p = x[self.n_velocity:self.n_velocity + self.n_pressure]
        return u, p, SolveStats(float(rnorm), reused, time.perf_counter() - t0)


def factorize(problem: SaddleProblem, include_mean_constraint: bool = True) -> Factorization:
    """Factorize ``problem``; ``include_mean_constraint=False`` drops the
    pressure-mean row, which leaves the system singular."""
    c = problem.c if include_mean_constraint else None
    return Factorization(sp.csc_matrix(problem.K), sp.csc_matrix(problem.B), c)


def solve(fact: Factorization, rhs_velocity, rhs_pressure=None):
    return fact.solve(rhs_velocity, rhs_pressure)
