"""fracsmooth: simulate diffusions, tilt the measure, and read off the
fractional smoothness of a terminal payoff from three weighted norm curves."""

__version__ = "0.1.0"

from .model import (DiffusionModel, TerminalFunction, ValidationReport,
                    builtin_catalog, make_model, make_terminal, validate_model)
from .simulate import (FlowBatch, PathBatch, TimeGridSpec, euler_maruyama,
                       first_variation, resimulate_from)
from .measure import (GirsanovDrift, WeightPath, bmo_norm_estimate,
                      constant_drift, muckenhoupt_check, reverse_hoelder_check,
                      stochastic_exponential, weighted_lp_norm)
from .valuation import (GaussianValueOracle, MonteCarloValueOracle, grad_mc,
                        hessian_mc, k_factor, make_oracle, martingale_M,
                        value_gaussian)
from .functionals import (NormCurve, PhiLadder, curve_time_grid,
                          gradient_curve, hessian_curve, phi_q,
                          residual_curve, residual_m_curve)
from .smoothness import (Budgets, SmoothnessReport, classify_ladder,
                         estimate_theta, interpolation_check,
                         theta_one_diagnostic, verify_equivalence)
from .gridopt import RateStudy, adapted_grid, rate_study, riemann_error
