"""Grouped time-varying coefficient estimation of how the capital share
transmits into top income shares."""

__version__ = "0.1.0"

from .panel_data import PanelDataset, load_csv, normalize_time, time_averages, within_demean  # noqa: E402
from .splines import SplineBasis, center_basis, evaluate_basis, make_basis, penalty_matrix  # noqa: E402
from .clustering import GroupAssignment, bic_select, classify, lloyd_kmeans, standardize_features  # noqa: E402
from .tvc import TvcFit, first_stage, fit_tvc, fit_tvc_iv  # noqa: E402
from .baselines import cce_mg, elasticity_to_marginal, mg_ols, model_bic  # noqa: E402
from .shapley import decompose, summarize_proportions  # noqa: E402
from .simulate import DgpSpec, generate, grouped_spec, replicate_study  # noqa: E402
