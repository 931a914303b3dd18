"""Quadratically regularized optimal transport on discrete measures."""

from .constants import (DeltaQuantities, StabilityConstants, delta_quantities, gamma_eps,
                        instance_constants, pointwise_constants, uniform_constants, vartheta)
from .core import (CostSpec, Coupling, Instance, NotConvergedError, Potentials, dual_objective,
                   duality_gap, extend_f, extend_g, extract_coupling, extract_support,
                   foc_residuals, scalar_foc_solve, solve_dual)
from .fixtures import example62, quadratic_convex_instance, stability_suite, zero_cost_instance
from .harness import (PerturbationSpec, SolveCache, StabilityReport, estimate_nondegeneracy,
                      lipschitz_ratio_curve, perturb, run_pair)
from .measures import (ClassParams, DiscreteMeasure, MeasureError, audit_class_membership,
                       hausdorff_distance, total_variation, wasserstein1)
from .oracle import qp_primal_solve

__version__ = "0.1.0"
