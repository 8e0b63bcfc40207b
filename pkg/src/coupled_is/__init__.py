"""Coupled importance sampling for ratios of integrals."""

from .adaptation import (AdaptConfig, AdaptTrace, adapt_marginals, fit_marginal,
                         objective_estimate, pathwise_gradient, score_gradient, sga_optimize)
from .coupling import (GaussianCoupling, GaussianCouplingParams, IndependentCoupling,
                       MixtureCoupling, SignCoupling, antithetic, coupling_from_dict,
                       coupling_from_json, crn, orthogonal_from_skew)
from .density import (GaussianDist, LinearEllipticalDist, TargetProblem, chi2_gaussians,
                      chi2_monte_carlo, gaussian_product, gaussian_ratio)
from .estimators import (EstimateResult, JointProposal, gensnis_estimate, gensnis_recycled,
                         snis_estimate, uis_estimate)
from .experiments import ConfigError, ExperimentConfig, load_config, parse_config, run
from .transport import MarginalTransport, as_transport
from .variance import (DeltaMethodReport, VarianceReport, c_term_closed_form, delta_method_mse,
                       lower_bound, snis_variance_floor, variance_report_closed_form,
                       variance_report_empirical)

__version__ = "0.1.0"
