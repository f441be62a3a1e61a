"""Two-level Navier-Stokes time stepping.

First level: the nonlinear Galerkin system is marched on the coarse mesh.
Second level: on the fine mesh a Stokes problem is marched whose convection
term ``b(u_H, u_H, .)`` is built from the prolonged coarse velocity at the
new time level. Both levels share one time grid, so no temporal
interpolation of ``u_H`` is needed. The coarse pressure is reported but not
used by the fine level.
"""
from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field

import numpy as np

from .assembly import assemble_bilinear
from .femspace import MINI, ElementPair, FieldPair, build_space, prolong, prolongation_matrix
from .mesh import MeshError, MeshHierarchy, choose_fine_level_for_coupling
from .stepper import (FrozenStokesStepper, SolverConfig, TimeGrid, Trajectory, StepRecord,
                      _sample_set, project_initial_data, run_one_level)
from .verification import ErrorReport, compute_errors


class FineLevelRule(enum.Enum):
    H_SQUARED = "h_squared"
    EXPLICIT = "explicit"


class TwoLevelError(RuntimeError):
    """Failure inside one level of the two-level method; ``level`` is
    ``"coarse"`` or ``"fine"``."""

    def __init__(self, level, message):
        super().__init__(f"{level} level: {message}")
        self.level = level


@dataclass(frozen=True)
class TwoLevelConfig:
    """Parameters of one two-level run.

    ``fine_level`` is the hierarchy index of the fine mesh and is only read
    with ``FineLevelRule.EXPLICIT``; the coarse mesh is always level 0.
    ``allow_same_level`` permits ``h == H`` for degenerate consistency
    checks.
    """

    n_coarse: int
    time_grid: TimeGrid
    fine_level_rule: FineLevelRule = FineLevelRule.H_SQUARED
    fine_level: int | None = None
    element_pair: ElementPair = MINI
    solver_config: SolverConfig = field(default_factory=SolverConfig)
    sample_times: tuple | None = None
    allow_same_level: bool = False

    def __post_init__(self):
        if self.n_coarse < 1:
            raise ValueError(f"n_coarse must be positive, got {self.n_coarse}")
        if self.fine_level_rule is FineLevelRule.EXPLICIT:
            if self.fine_level is None:
                raise ValueError("EXPLICIT coupling needs fine_level")
            lowest = 0 if self.allow_same_level else 1
            if self.fine_level < lowest:
                raise ValueError(f"fine_level must be at least {lowest} (h < H), "
                                 f"got {self.fine_level}")

    def resolve_fine_level(self, hierarchy: MeshHierarchy) -> int:
        if hierarchy.n_coarse != self.n_coarse:
            raise MeshError(f"hierarchy starts at n={hierarchy.n_coarse}, "
                            f"config expects n_coarse={self.n_coarse}")
        if self.fine_level_rule is FineLevelRule.H_SQUARED:
            k = choose_fine_level_for_coupling(hierarchy.coarse_size, hierarchy)
            if k == 0 and not self.allow_same_level:
                k = 1
        else:
            k = self.fine_level
        if k >= len(hierarchy.levels):
            raise MeshError(f"fine level {k} needs {k} refinements; hierarchy has "
                            f"{len(hierarchy.levels) - 1}")
        return k


@dataclass
class TwoLevelResult:
    coarse_trajectory: Trajectory
    fine_trajectory: Trajectory
    actual_H: float
    actual_h: float
    fine_level: int
    timings: dict
    prolongation_defects: list = field(default_factory=list)

    @property
    def sample_times(self):
        return list(self.fine_trajectory.sample_times)


def run_two_level(u0, f, hierarchy: MeshHierarchy, config: TwoLevelConfig,
                  drop_convection: bool = False) -> TwoLevelResult:
    """Run both levels over ``config.time_grid``.

    ``u0(points) -> (n, 2)`` and ``f(points, t) -> (n, 2)`` may be ``None``
    for zero data. The fine initial value is the projection of ``u0`` onto
    the fine discretely divergence-free space. ``drop_convection`` removes
    the coarse convection term from the fine level (plain Stokes).
    """
    k = config.resolve_fine_level(hierarchy)
    grid = config.time_grid
    cfg = config.solver_config
    timings = {}

    t0 = time.perf_counter()
    coarse_space = build_space(hierarchy.levels[0], config.element_pair)
    try:
        coarse = run_one_level(u0, f, coarse_space, grid, cfg, keep_all=True)
    except (RuntimeError, ArithmeticError) as exc:
        raise TwoLevelError("coarse", str(exc)) from exc
    timings["coarse_solve"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    fine_space = build_space(hierarchy.levels[k], config.element_pair)
    P = prolongation_matrix(coarse_space, fine_space)
    defects = [prolong(coarse.fields[-1], fine_space)[1]] if grid.n_steps else []
    timings["prolongation"] = time.perf_counter() - t0

    wanted = _sample_set(grid, config.sample_times)
    t_fine = time.perf_counter()
    t_prolong = 0.0
    try:
        sys = assemble_bilinear(fine_space)
        state = project_initial_data(u0, fine_space, sys)
        fine = Trajectory([], [])
        fine.records.append(StepRecord(0.0, 0, [], "projection",
                                       float(np.abs(sys.B @ state.velocity_coeffs).max())))
        if 0 in wanted:
            fine.sample_times.append(wanted[0])
            fine.fields.append(state)
        stepper = FrozenStokesStepper(sys, cfg, f)
        for n in range(1, grid.n_steps + 1):
            tp = time.perf_counter()
            w = P @ coarse.fields[n].velocity_coeffs
            t_prolong += time.perf_counter() - tp
            state = stepper.step(state, w, grid.time(n), drop_convection=drop_convection)
            if n in wanted:
                fine.sample_times.append(wanted[n])
                fine.fields.append(state)
    except (RuntimeError, ArithmeticError) as exc:
        raise TwoLevelError("fine", str(exc)) from exc
    fine.records.extend(stepper.records)
    fine.n_factorizations = stepper.n_factorizations
    fine.wall_time = time.perf_counter() - t_fine
    timings["prolongation"] += t_prolong
    timings["fine_solve"] = fine.wall_time - t_prolong

    # keep only the sampled coarse states
    keep = [i for i, _ in enumerate(coarse.fields) if i in wanted]
    coarse.sample_times = [wanted[i] for i in keep]
    coarse.fields = [coarse.fields[i] for i in keep]

    return TwoLevelResult(coarse, fine, hierarchy.levels[0].mesh_size_h,
                          hierarchy.levels[k].mesh_size_h, k, timings, defects)


@dataclass
class ComparisonResult:
    one_level: Trajectory
    two_level: TwoLevelResult
    one_level_report: ErrorReport | None
    two_level_report: ErrorReport | None
    timing_ratio: float

    @property
    def fine_newton_iterations(self) -> int:
        return self.two_level.fine_trajectory.newton_iterations


def _report(traj: Trajectory, exact, h, H, label) -> ErrorReport | None:
    if exact is None:
        return None
    rep = ErrorReport(label=label)
    for t, fld in zip(traj.sample_times, traj.fields):
        rep.add(t, h, H, compute_errors(fld, exact, t))
    return rep


def run_comparison(u0, f, hierarchy: MeshHierarchy, config: TwoLevelConfig,
                   exact=None) -> ComparisonResult:
    """One-level Galerkin on the fine mesh next to the two-level method.

    With a closed-form ``exact`` solution both runs get an ErrorReport.
    ``timing_ratio`` is two-level over one-level wall time.
    """
    t0 = time.perf_counter()
    two = run_two_level(u0, f, hierarchy, config)
    t_two = time.perf_counter() - t0

    fine_space = build_space(hierarchy.levels[two.fine_level], config.element_pair)
    t0 = time.perf_counter()
    one = run_one_level(u0, f, fine_space, config.time_grid, config.solver_config,
                        sample_times=config.sample_times)
    t_one = time.perf_counter() - t0

    rep_one = _report(one, exact, two.actual_h, None, "one_level")
    rep_two = _report(two.fine_trajectory, exact, two.actual_h, two.actual_H, "two_level")
    return ComparisonResult(one, two, rep_one, rep_two, t_two / t_one)
