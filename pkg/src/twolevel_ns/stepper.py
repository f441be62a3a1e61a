"""Backward Euler time marching.

Two evolution problems are advanced on a uniform :class:`TimeGrid`:

* the nonlinear Galerkin system, solved per step by Newton's method with an
  assembled convection Jacobian (Picard fallback), and
* the linear Stokes system whose convection is a given field ``u_H`` moved
  to the right-hand side; its matrix is fixed, so one factorization serves
  every step.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .assembly import (DiscreteSystem, SeparableForcing, assemble_bilinear, assemble_load,
                       convection_apply, convection_element_matrices, vector_element_dofs)
from .femspace import FieldPair, MixedSpace
from .saddle import Factorization, Ordering

log = logging.getLogger(__name__)

DIVERGENCE_TOL = 1e-9


class NewtonError(RuntimeError):
    """Nonlinear solve failed; ``history`` holds the residual norms."""

    def __init__(self, message, history):
        super().__init__(f"{message}; residual history: "
                         + ", ".join(f"{r:.3e}" for r in history))
        self.history = list(history)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_n = n dt`` on ``[0, t_final]``.

    Build with :meth:`uniform`, which shrinks ``dt`` so that it divides
    ``t_final`` and records whether it had to.
    """

    t_final: float
    dt: float
    n_steps: int
    requested_dt: float | None = None

    @classmethod
    def uniform(cls, t_final: float, dt: float) -> "TimeGrid":
        if dt <= 0:
            raise ValueError(f"dt must be positive, got {dt}")
        if t_final < 0:
            raise ValueError(f"t_final must be nonnegative, got {t_final}")
        if t_final == 0:
            return cls(0.0, float(dt), 0, float(dt))
        n = max(1, math.ceil(t_final / dt - 1e-9))
        return cls(float(t_final), t_final / n, n, float(dt))

    @property
    def adjusted(self) -> bool:
        return self.requested_dt is not None and abs(self.dt - self.requested_dt) > 1e-12 * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def time(self, n: int) -> float:
        return n * self.dt

    def index_of(self, t: float) -> int:
        """Step index of sample time ``t``; it must lie on the grid."""
        n = int(round(t / self.dt)) if self.dt > 0 else 0
        if n < 0 or n > self.n_steps or abs(n * self.dt - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"sample time {t} is not a node of the grid (dt={self.dt})")
        return n


@dataclass(frozen=True)
class SolverConfig:
    nu: float = 1.0
    newton_tol: float = 1e-10
    newton_max_iters: int = 25
    picard_fallback: bool = True

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError(f"nu must be positive, got {self.nu}")
        if not self.newton_tol > 0:
            raise ValueError(f"newton_tol must be positive, got {self.newton_tol}")
        if self.newton_max_iters < 1:
            raise ValueError("newton_max_iters must be at least 1")


@dataclass
class StepRecord:
    t: float
    iterations: int
    residuals: list
    mode: str
    divergence: float


# ---------------------------------------------------------------------------
# augmented operator with a fixed sparsity pattern

class _AugmentedOperator:
    """``[[M/dt + nu A + C, -B^T, 0], [-B, 0, c], [0, c^T, 0]]`` on interior DOFs.

    The pattern of the convection block is fixed per space, so each Newton
    matrix is produced by one scatter into a copy of the static data.
    """

    def __init__(self, sys: DiscreteSystem, dt: float, nu: float):
        space = sys.space
        self.sys = sys
        self.n_u = len(space.interior_dofs)
        self.n_p = space.pressure_dof_count
        self.K0 = (sys.M_ii / dt + nu * sys.A_ii).tocsc()
        self.Bneg = (-sys.B_i).tocsc()
        col = sp.csc_matrix(sys.c.reshape(-1, 1))
        static = sp.bmat([[self.K0, self.Bneg.T, None],
                          [self.Bneg, None, col],
                          [None, col.T, None]], format="csc")

        aug = np.full(space.velocity_dof_count, -1, dtype=np.int64)
        aug[space.interior_dofs] = np.arange(self.n_u)
        vd = aug[vector_element_dofs(space)]
        m = vd.shape[1]
        rows = np.repeat(vd, m, axis=1).ravel()
        cols = np.tile(vd, (1, m)).ravel()
        self.mask = (rows >= 0) & (cols >= 0)
        rows, cols = rows[self.mask], cols[self.mask]

        N = static.shape[0]
        pattern = sp.csc_matrix((np.ones(len(rows)), (rows, cols)), shape=(N, N))
        union = (abs(static) + pattern).tocsc()
        union.sum_duplicates()
        union.sort_indices()
        self.indptr, self.indices = union.indptr, union.indices
        keys = np.repeat(np.arange(N), np.diff(self.indptr)) * N + self.indices
        self.pos = np.searchsorted(keys, cols * N + rows)
        st = static.tocoo()
        self.static_data = np.zeros(len(keys))
        np.add.at(self.static_data, np.searchsorted(keys, st.col * N + st.row), st.data)
        self.shape = (N, N)
        self._checked = False
        self._ordering = None

    def matrix(self, local=None) -> sp.csc_matrix:
        data = self.static_data.copy()
        if local is not None:
            data += np.bincount(self.pos, weights=local.reshape(-1)[self.mask],
                                minlength=len(data))
        return sp.csc_matrix((data, self.indices, self.indptr), shape=self.shape)

    def factorize(self, local=None) -> Factorization:
        # the pattern is fixed and the static blocks never vanish, so one
        # structural check per operator suffices
        # and the fill-reducing ordering of the first factorization is reused
        fact = Factorization(matrix=self.matrix(local), n_velocity=self.n_u,
                             n_pressure=self.n_p, check_structure=not self._checked,
                             ordering=self._ordering)
        self._checked = True
        if self._ordering is None:
            self._ordering = Ordering(fact.matrix, fact.column_order())
        return fact


class DiscreteLoad:
    """Forcing given directly as a load vector ``load(t) -> (velocity_dof_count,)``
    instead of a pointwise field."""

    def __init__(self, load):
        self.load = load

    def __call__(self, t):
        return np.asarray(self.load(t), dtype=float)


class _LoadEvaluator:
    """Load vectors ``(f(t), phi_i)`` on one space; separable forcings reuse
    their spatial loads."""

    def __init__(self, forcing, space):
        self.forcing = forcing
        self.space = space
        self._parts = None

    def __call__(self, t):
        f = self.forcing
        if isinstance(f, DiscreteLoad):
            return f(t)
        if not isinstance(f, SeparableForcing):
            return assemble_load(f, t, self.space)
        if self._parts is None:
            self._parts = f.spatial_loads(self.space)
        return sum(a(t) * part for (a, _), part in zip(f.terms, self._parts))


def _full(space, interior_values):
    u = np.zeros(space.velocity_dof_count)
    u[space.interior_dofs] = interior_values
    return u


def _zero_mean(p, c):
    return p - np.dot(c, p) / c.sum()


# ---------------------------------------------------------------------------
# initial data

def project_initial_data(u0, space: MixedSpace, sys: DiscreteSystem | None = None) -> FieldPair:
    """Constrained L2 projection of ``u0(points) -> (n, 2)`` onto the
    discretely divergence-free subspace.

    The returned pressure is NaN: the projection multiplier is not a pressure.
    """
    sys = sys or assemble_bilinear(space)
    if u0 is None:
        rhs = np.zeros(space.velocity_dof_count)
    else:
        rhs = assemble_load(lambda x, t: u0(x), 0.0, space, degree=6, refined=True)
    fact = Factorization(sys.M_ii, -sys.B_i, sys.c)
    ui, _, _ = fact.solve(rhs[space.interior_dofs])
    return FieldPair(_full(space, ui), np.full(space.pressure_dof_count, np.nan), space, 0.0)


# ---------------------------------------------------------------------------
# steppers

class GalerkinStepper:
    """Backward Euler steps of the nonlinear Galerkin system on one space."""

    def __init__(self, sys: DiscreteSystem, config: SolverConfig, forcing=None,
                 extrapolate: bool = True):
        self.sys = sys
        self.space = sys.space
        self.config = config
        self.forcing = forcing
        self.load = _LoadEvaluator(forcing, self.space)
        self.extrapolate = extrapolate
        self.records: list[StepRecord] = []
        self.n_factorizations = 0
        self._ops = {}
        self._previous = None

    def _operator(self, dt):
        key = round(dt, 15)
        op = self._ops.get(key)
        if op is None:
            op = _AugmentedOperator(self.sys, dt, self.config.nu)
            self._ops = {key: op}
        return op

    def step(self, state: FieldPair, t_next: float, guess=None) -> FieldPair:
        space, sys, cfg = self.space, self.sys, self.config
        dt = t_next - state.time_stamp
        if dt <= 0:
            raise ValueError(f"t_next={t_next} must exceed state time {state.time_stamp}")
        op = self._operator(dt)
        ii = space.interior_dofs
        un_i = state.velocity_coeffs[ii]
        rhs = sys.M_ii @ un_i / dt + self.load(t_next)[ii]
        scale = max(1.0, sys.dual_norm(rhs))
        tol = cfg.newton_tol * scale

        if guess is not None:
            u_i = np.array(guess[ii], dtype=float)
        elif (self.extrapolate and self._previous is not None
              and self._previous.space is space
              and abs(state.time_stamp - self._previous.time_stamp - dt) < 1e-12):
            u_i = 2.0 * un_i - self._previous.velocity_coeffs[ii]
        else:
            u_i = un_i.copy()
        p = state.pressure_coeffs
        p = np.zeros(space.pressure_dof_count) if not np.all(np.isfinite(p)) else p.copy()

        def residual(u_i, p):
            u = _full(space, u_i)
            r = op.K0 @ u_i + convection_apply(u, u, space)[ii] + op.Bneg.T @ p - rhs
            return r, sys.dual_norm(r)

        r, rn = residual(u_i, p)
        history = [rn]
        mode = "newton"
        best = (rn, u_i, p)
        it = 0
        while rn > tol:
            if it >= cfg.newton_max_iters:
                raise NewtonError(f"no convergence to {tol:.2e} in {it} iterations "
                                  f"at t={t_next}", history)
            it += 1
            u = _full(space, u_i)
            local = convection_element_matrices(u, space, newton=(mode == "newton"))
            fact = op.factorize(local)
            self.n_factorizations += 1
            du, dp, _ = fact.solve(-r, -(op.Bneg @ u_i))
            cand_u, cand_p = u_i + du, p + dp
            cand_r, cand_rn = residual(cand_u, cand_p)
            if (not np.isfinite(cand_rn) or cand_rn > history[-1]) and mode == "newton" \
                    and cfg.picard_fallback:
                log.info("Newton diverging at t=%g (%.3e -> %.3e); switching to Picard",
                         t_next, history[-1], cand_rn)
                mode = "picard"
                rn, u_i, p = best
                r, _ = residual(u_i, p)
                history.append(cand_rn)
                continue
            if not np.isfinite(cand_rn):
                raise NewtonError(f"non-finite residual at t={t_next}", history + [cand_rn])
            u_i, p, r, rn = cand_u, cand_p, cand_r, cand_rn
            history.append(rn)
            if rn < best[0]:
                best = (rn, u_i, p)

        u_new = _full(space, u_i)
        div = float(np.abs(sys.B @ u_new).max())
        self.records.append(StepRecord(t_next, it, history, mode, div))
        self._previous = state
        return FieldPair(u_new, _zero_mean(p, sys.c), space, t_next)


class FrozenStokesStepper:
    """Backward Euler steps of the Stokes system with convection ``N(w, w)``
    of a supplied field ``w`` on the right-hand side."""

    def __init__(self, sys: DiscreteSystem, config: SolverConfig, forcing=None):
        self.sys = sys
        self.space = sys.space
        self.config = config
        self.forcing = forcing
        self.load = _LoadEvaluator(forcing, self.space)
        self.records: list[StepRecord] = []
        self.n_factorizations = 0
        self._fact = None
        self._dt = None

    def factorization(self, dt) -> Factorization:
        if self._fact is None or abs(dt - self._dt) > 1e-14 * dt:
            self._fact = _AugmentedOperator(self.sys, dt, self.config.nu).factorize()
            self._dt = dt
            self.n_factorizations += 1
        return self._fact

    def step(self, state: FieldPair, w_fine, t_next: float, drop_convection=False) -> FieldPair:
        space, sys = self.space, self.sys
        dt = t_next - state.time_stamp
        if dt <= 0:
            raise ValueError(f"t_next={t_next} must exceed state time {state.time_stamp}")
        fact = self.factorization(dt)
        ii = space.interior_dofs
        rhs = sys.M_ii @ state.velocity_coeffs[ii] / dt + self.load(t_next)[ii]
        if w_fine is not None and not drop_convection:
            rhs = rhs - convection_apply(w_fine, w_fine, space)[ii]
        u_i, p, stats = fact.solve(rhs)
        u = _full(space, u_i)
        div = float(np.abs(sys.B @ u).max())
        self.records.append(StepRecord(t_next, 0, [stats.residual_norm], "linear", div))
        return FieldPair(u, _zero_mean(p, sys.c), space, t_next)


def step_galerkin(state: FieldPair, t_next: float, sys: DiscreteSystem, config: SolverConfig,
                  forcing=None, stepper: GalerkinStepper | None = None) -> FieldPair:
    stepper = stepper or GalerkinStepper(sys, config, forcing, extrapolate=False)
    return stepper.step(state, t_next)


def step_stokes_frozen(state: FieldPair, u_H_fine, t_next: float, sys: DiscreteSystem,
                       config: SolverConfig, forcing=None,
                       stepper: FrozenStokesStepper | None = None) -> FieldPair:
    stepper = stepper or FrozenStokesStepper(sys, config, forcing)
    return stepper.step(state, u_H_fine, t_next)


# ---------------------------------------------------------------------------
# trajectories

@dataclass
class Trajectory:
    sample_times: list
    fields: list
    records: list = field(default_factory=list)
    wall_time: float = 0.0
    n_factorizations: int = 0

    @property
    def newton_iterations(self) -> int:
        return sum(r.iterations for r in self.records)

    @property
    def max_divergence(self) -> float:
        return max((r.divergence for r in self.records), default=0.0)

    def at(self, t: float) -> FieldPair:
        for s, f in zip(self.sample_times, self.fields):
            if abs(s - t) <= 1e-9 * max(1.0, abs(t)):
                return f
        raise KeyError(f"no sample at t={t}")


def _sample_set(grid: TimeGrid, sample_times):
    if sample_times is None:
        sample_times = [0.0, grid.t_final]
    return {grid.index_of(t): float(t) for t in sample_times}


def run_one_level(u0, f, space: MixedSpace, grid: TimeGrid, config: SolverConfig,
                  sample_times=None, sys: DiscreteSystem | None = None,
                  keep_all: bool = False) -> Trajectory:
    """Project ``u0`` and march the Galerkin system over ``grid``.

    Fields are kept at ``sample_times`` (default: 0 and ``t_final``), or at
    every step with ``keep_all``.
    """
    t0 = time.perf_counter()
    sys = sys or assemble_bilinear(space)
    wanted = _sample_set(grid, sample_times)
    state = project_initial_data(u0, space, sys)
    div0 = float(np.abs(sys.B @ state.velocity_coeffs).max())
    traj = Trajectory([], [])
    traj.records.append(StepRecord(0.0, 0, [], "projection", div0))
    if keep_all or 0 in wanted:
        traj.sample_times.append(0.0)
        traj.fields.append(state)
    stepper = GalerkinStepper(sys, config, f)
    for n in range(1, grid.n_steps + 1):
        state = stepper.step(state, grid.time(n))
        if keep_all or n in wanted:
            traj.sample_times.append(wanted.get(n, grid.time(n)))
            traj.fields.append(state)
    traj.records.extend(stepper.records)
    traj.n_factorizations = stepper.n_factorizations
    traj.wall_time = time.perf_counter() - t0
    return traj
