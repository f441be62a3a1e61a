"""Galerkin and two-level finite element solvers for the 2D incompressible
Navier-Stokes equations, with a manufactured-solution verification harness."""

from .assembly import (DiscreteSystem, assemble_bilinear, assemble_load, convection_apply,
                       convection_jacobian, convection_matrix)
from .femspace import (MINI, TAYLOR_HOOD, ElementKind, ElementPair, FieldPair, MixedSpace,
                       build_space, prolong, quadrature)
from .mesh import (MeshError, MeshHierarchy, Triangulation, build_hierarchy,
                   build_structured_mesh, choose_fine_level_for_coupling, refine_uniform)
from .saddle import Factorization, SaddleProblem, SingularSystemError, SolveError, factorize
from .stepper import (NewtonError, SolverConfig, TimeGrid, Trajectory, project_initial_data,
                      run_one_level, step_galerkin, step_stokes_frozen)
from .twolevel import (FineLevelRule, TwoLevelConfig, TwoLevelResult, run_comparison,
                       run_two_level)
from .verification import (ErrorReport, ExactSolution, compute_errors, compute_self_errors,
                           eoc, make_nonsmooth_initial_solution, make_smooth_solution,
                           weighted_error_trace)

__version__ = "0.1.0"
