"""Gaussian-process classification with privileged noise information.

GPC+ lets features available only at training time modulate the noise of a
probit GP classifier: the per-sample noise variance is ``exp(g(x*))`` with
``g`` a second GP over the privileged features. Inference uses expectation
propagation with one-dimensional Gauss-Hermite quadrature; hyperparameters
are fitted by maximizing the EP evidence.
"""
__version__ = "0.1.0"

from .data import Dataset, SplitSpec, apply, fit_pipeline, load_csv, save_csv, split, synth_lupi
from .ep import GPC, GPC_PLUS, EPConfig, EPState, Sites, evidence_grad, log_evidence, run_ep
from .evaluation import (
    ErrorTable,
    RankSummary,
    Report,
    TaskSpec,
    average_ranks,
    emit_report,
    error_rate,
    load_error_table_csv,
    load_fixture,
    nemenyi_cd,
    parse_report,
    rank_summary,
    repeat_experiment,
)
from .exceptions import FitError, GPPrivError, InputError, NotConvergedError, NumericalError
from .kernels import SEKernelParams, kernel_matrix
from .model import FitOptions, GPCModel, build_model, fit
from .quadrature import CavityMoments, TiltedMoments, gauss_hermite, tilted_gpc, tilted_gpcplus

__all__ = [
    "CavityMoments", "Dataset", "EPConfig", "EPState", "ErrorTable", "FitError", "FitOptions",
    "GPC", "GPC_PLUS", "GPCModel", "GPPrivError", "InputError", "NotConvergedError",
    "NumericalError", "RankSummary", "Report", "SEKernelParams", "Sites", "SplitSpec", "TaskSpec",
    "TiltedMoments", "apply", "average_ranks", "build_model", "emit_report", "error_rate",
    "evidence_grad", "fit", "fit_pipeline", "gauss_hermite", "kernel_matrix", "load_csv",
    "load_error_table_csv", "load_fixture", "log_evidence", "nemenyi_cd", "parse_report",
    "rank_summary", "repeat_experiment", "run_ep", "save_csv", "split", "synth_lupi",
    "tilted_gpc", "tilted_gpcplus",
]
