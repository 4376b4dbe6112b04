"""Stochastic approximation with controlled Markov noise: simulation and stability diagnostics.

Modules
-------
convex      convex sets, drivers ``h(x, y)``, scaled and limiting maps
markov      controlled chains, invariant and occupation measures
engine      the recursion itself, step schedules, martingale noise
rescaling   rescaled iterates on the segment grid, gap and contraction diagnostics
di          selection-based Euler integration of differential inclusions
td          affine (TD-style) drivers with their stability checks
scenario    JSON scenarios and the experiment runner
"""

from ._errors import (BlowUpError, ConfigError, DomainError, EstimationFailed, MultichainError,
                      NumericalError, SALabError, UnknownStateError)
from .audit import AuditReport
from .convex import (ConvexSet, VectorField, big_H_eval, distance_to_set, limit_map_eval,
                     marchaud_audit, scale_map_eval, support_function)
from .di import (SelectionRule, estimate_T_epsilon, flow_bundle, integrate_di, limit_set_estimate,
                 lyapunov_decrease_audit, verify_S2)
from .engine import NoiseModel, SATrajectory, StepSchedule, run_sa, run_sa_batch
from .markov import (MarkovModel, OccupationMeasure, StationaryPolicy, empirical_occupation,
                     hat_h_eval, invariant_measure, occupation_vertices, tilde_h)
from .rescaling import (DeltaLadder, build_segments, difftozero_gap, noise_cauchy_check,
                        rescaled_view, stability_ratio_audit)
from .scenario import RunReport, Scenario, parse_scenario, run_experiment
from .td import (AffineFamily, LyapunovCandidate, build_T2_audit, check_S1_affine, check_T1,
                 hurwitz_check, td_equilibrium)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
