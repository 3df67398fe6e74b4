"""Distributional off-policy Q(lambda) on tabular MDPs with categorical signed measures."""

__version__ = "0.1.0"

from .analysis import (ContractionReport, DomainError, approx_error_bound, beta_alt, beta_p,
                       contraction_report, control_error_bound, empirical_contraction, radius_alt,
                       radius_l1, radius_l2)
from .engine import IterationLog, RunConfig, control, evaluate, figure1_trace
from .grid import (AtomGrid, ReturnFunction, SignedMeasure, WeightedParticleSet, lp_distance,
                   make_uniform_grid, mean, min_mass, project, pushforward_matrix, sup_lp_distance,
                   total_mass)
from .learner import LearnerConfig, LearnerParams, backup_terms, gradient_step, train
from .mdp import (Policy, TabularMdp, TrajectorySegment, epsilon_greedy, eta_pi_dp, greedy_policy,
                  mc_return_oracle, mix_policies, policy_l1_distance, random_mdp, sample_segment,
                  uniform_policy)
from .operators import (SolverOptions, SupportError, TraceSpec, apply_operator,
                        apply_projected_recursion_step, td_measure, trace_coefficient)
