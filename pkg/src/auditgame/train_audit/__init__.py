"""Empirical side: penalised training, LASSO explainer selection and metrics."""

from auditgame.train_audit.experiment import (
    CASE_GROUP,
    REGIMES,
    Calibration,
    CalibrationError,
    EmpiricalConfig,
    RegimeRun,
    calibrate_lambda,
    coefficient_table,
    ordering_holds,
    run_regimes,
    write_coefficient_csv,
)
from auditgame.train_audit.lasso import lasso_logistic, select_explainer_vars, select_support
from auditgame.train_audit.metrics import MetricsReport, MetricsRow, auc, delta_log_odds, evaluate, extract_explanation
from auditgame.train_audit.models import PredictorModel, init_model
from auditgame.train_audit.objective import (
    ExplanationDesign,
    Objective,
    TrainSpec,
    explainer_penalty,
    gradient,
    log_loss,
    misalignment_term,
    objective_value,
    predictive_loss,
)
from auditgame.train_audit.optim import FitResult, TrainingDivergence, fit

__all__ = [name for name in dir() if not name.startswith("_")]
