"""Frontier estimation from conditional central moments of panel residuals."""
from .bounds import (BoundReport, bound_report, central_to_raw, cubic_lower_bound, cubic_mean_feasible,
                     hankel_feasibility, kurtosis_lower_bound, raw_to_central, skewness_lower_bound)
from .dist import ScaledBeta, TruncNormal, params_from_dict
from .fit import (FitConfig, FitResult, FrontierEstimate, KernelWeights, conditional_sup_frontier,
                  effective_sample_size, fit_deviation_distribution, frontier_estimate, required_mass)
from .moments import (MomentEstimates, conditional_moments, error_moments_per_firm, invert_between_identities,
                      invert_within_identities, pooled_moments, between_identities, within_identities)
from .panel import CsvSchema, PanelDataset, load_panel_csv, validate, write_panel_csv
from .residualize import (BasisSpec, ResidualDecomposition, decompose_residuals, fit_conditional_mean,
                          grand_mean_decomposition)
from .sim import SimDesign, draw_deviations, generate_panel, region_label, run_experiment

__version__ = "0.1.0"
