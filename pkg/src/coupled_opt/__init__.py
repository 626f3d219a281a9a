"""Accelerated distributed dual method for convex programs with coupled constraints."""

from .engine import (EngineError, InvariantViolation, RunResult, RunState, Schedule, bound_optimal_rho,
                     default_rho, default_step_c, project_Y, run, run_subgradient_baseline, step)
from .graph import (Network, SpectralData, TopologyError, apply_laplacian, build_complete, build_path,
                    build_ring_plus, build_topology, spectral)
from .local_solver import (DualPoint, InnerSolveError, InnerSolveReport, LocalOracle, dual_gradient, dual_value,
                           scalar_prox, solve_local)
from .metrics import (BoundReport, TraceRecord, consensus_error, evaluate_bounds, feasibility_residual, fit_rate,
                      read_trace, write_trace)
from .problem import (CouplingSpec, InequalityKind, InequalitySpec, InstanceError, LocalObjective, ProblemInstance,
                      derive_constants, generate_instance)
from .reference import ReferenceError, ReferenceSolution, grid_reference, solve_reference

__version__ = "0.1.0"
