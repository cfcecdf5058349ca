"""Statistical postprocessing and verification of ensemble precipitation forecasts."""

__version__ = "0.1.0"

from .bma import BmaMixture, BmaParams, build_rmm, fit_bma_em, predict_bma
from .climatology import EpcForecast, build_epc
from .core import (
    AccumulationWindow,
    EmpiricalEnsemble,
    EnsembleForecast,
    Member,
    MemberTag,
    PredictiveDistribution,
    Region,
    Site,
)
from .emos import CensoredGev, EmosParams, compute_predictors, crps_censored_gev, fit_emos, predict_emos
from .errors import ConvergenceError, ConvergenceWarning, DataError
from .verify import ScoreReport, crps, murphy_curve, reliability, score_case, upit, upit_histogram

__all__ = [
    "AccumulationWindow", "BmaMixture", "BmaParams", "CensoredGev", "ConvergenceError", "ConvergenceWarning",
    "DataError", "EmosParams", "EmpiricalEnsemble", "EnsembleForecast", "EpcForecast", "Member", "MemberTag",
    "PredictiveDistribution", "Region", "ScoreReport", "Site", "build_epc", "build_rmm", "compute_predictors",
    "crps", "crps_censored_gev", "fit_bma_em", "fit_emos", "murphy_curve", "predict_bma", "predict_emos",
    "reliability", "score_case", "upit", "upit_histogram",
]
