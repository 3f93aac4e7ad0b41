"""TMCMC sampling of the hierarchical posterior and model-class selection."""
from .selection import bic_score, count_parameters, posterior_model_probability
from .stages import ModelComparison, StageOneResult, compare_models, sample_hyper_stage2, sample_stage1
from .targets import Stage1Target, Stage2Prior, Stage2Target, log_target_stage1, stage2_columns
from .tmcmc import BoxPrior, SampleSet, TmcmcConfig, tmcmc

__all__ = [
    "BoxPrior", "ModelComparison", "SampleSet", "Stage1Target", "Stage2Prior", "Stage2Target", "StageOneResult",
    "TmcmcConfig", "bic_score", "compare_models", "count_parameters", "log_target_stage1",
    "posterior_model_probability", "sample_hyper_stage2", "sample_stage1", "stage2_columns", "tmcmc",
]
