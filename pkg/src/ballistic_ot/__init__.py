"""Stochastic ballistic transport in one space dimension.

Grid measures, Lagrangians and Legendre transforms, a monotone HJB solver,
exact 1D Wasserstein costs, the dynamic cost C by dual ascent (with a
Sinkhorn oracle for the quadratic case), the two ballistic costs by
interpolation and by duality, and an Euler-Maruyama path simulator.
"""

__version__ = "0.1.0"

from .errors import (AsymmetricGrid, BallisticError, CFLViolation, FlaggedEnsemble, GridMismatch,
                     KernelUnderflow, NegativeWeight, NonFiniteData, SolverFailure, ValidationError,
                     VelocityOutOfRange, ZeroMass)
from .grid_measures import (GridMeasure, SpaceGrid, TimeGrid, atomic, binned_measure, dirac, flip, gaussian,
                            gaussian_mixture, make_measure, mollifier_kernel, mollify, moment, w1_metric)
from .lagrangian import (AssumptionReport, GridFunction, HamiltonianModel, LagrangianModel, SamplingConfig,
                         check_assumptions, concave_hull, convex_hull, eval_H, eval_L, grad_p_H,
                         legendre_concave, legendre_convex)
from .hjb_solver import (MINUS_H, PLUS_H, DriftField, SchemeConfig, ValueField, extract_drift, hopf_cole_solve,
                         pde_residual, solve_hjb_backward)
from .wasserstein import (ANTIMONOTONE, COMONOTONE, Coupling, enumerate_vertices, kantorovich_dual_value,
                          kantorovich_lp, lp_transport, quantile_coupling, w_max, w_min)
from .dynamic_cost import (CostCertificate, DualAscentConfig, SinkhornConfig, c_dual_ascent, c_primal_mc,
                           cost_certificate, jensen_lower_bound, schrodinger_oracle, schrodinger_potentials)
from .ballistic import (BallisticDualConfig, BallisticSolution, InterpolationConfig, adjudicate_sign,
                        b_max_delta_closed_form,
                        b_max_dual, b_max_interpolate, b_min_dual, b_min_interpolate, recover_max_process,
                        recover_min_process)
from .sde_sim import (ActionEstimate, PathEnsemble, ProcessSpec, empirical_terminal_law, estimate_action,
                      estimate_ballistic_objective, make_process_spec, simulate, violating_pair_fraction)
