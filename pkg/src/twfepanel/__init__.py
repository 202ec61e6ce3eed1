"""Bias-reduced estimation of nonlinear panel models with two-way fixed effects.

The package estimates binary, ordered, multinomial, count, and gaussian
autoregressive panels with additive unit and period effects, removes the
incidental-parameter bias through bias-reducing priors (posterior means via
MCMC) or penalties (penalized MLE), and corrects average partial effects for
the remaining variance-type bias.
"""

from .effects import ApeResult, EffectSpec, ape, ape_bias_term, ape_report, default_effects
from .corrections import (CorrectionSpec, UpsilonField, addon_cross_terms,
                          default_correction, log_correction, upsilon,
                          verify_differential_system)
from .errors import (ContractError, DegeneratePanelError, DomainError,
                     DumpFormatError, LinearAlgebraError, PanelModelError,
                     ParseError, ValidationError)
from .estimation import (FitOptions, FitResult, apply_addon_correction,
                         asymptotic_variance, fit_ar_within, fit_mle,
                         fit_penalized, make_ar_panel)
from .families import ModelFamily, dloglik_obs, loglik_obs
from .likelihood import (ParamState, build_index, joint_derivatives, joint_loglik,
                         layout_for, zero_state)
from .panel import PanelData, RegressorMeta, drop_stayers, read_panel_csv, write_panel_csv

__version__ = "0.1.0"
