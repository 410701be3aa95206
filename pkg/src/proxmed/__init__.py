"""Proximal causal mediation analysis with unmeasured confounding."""

from .bridges import BridgeParams, BridgeSpec
from .data import ColumnSchema, DataError, FeatureMap, MediationDataset, load_csv, validate, write_csv
from .estimators import (
    METHODS,
    EstimateResult,
    EstimationError,
    delta_pdr,
    effects,
    fit_bridges,
    naive_ols,
    psi_pmr,
    psi_rct,
)
from .inference import BootstrapConfig, bootstrap_se, sandwich_se
from .oracle import CompletenessError, DiscreteLaw, completeness_check, random_law, solve_bridges_discrete
from .simulation import DgpConfig, ExperimentSpec, closed_form_truth, generate, oracle_truth, run_experiment
from .solvers import ConvergenceError, SingularSystemError, SolverError

__version__ = "0.1.0"
