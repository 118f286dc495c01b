"""Desk-scale cross-modal fine-tuning lab: autodiff core, toy transformer, OTDD, sweeps."""
from .kernels import BACKEND
from .metrics import MetricResult, evaluate
from .otdd import ApproxConfig, FeatureCloud, OtddReport, otdd_classwise_approx
from .pipeline import PipelineConfig, RunRecord, run_pipeline
from .tensor import Parameter, Tensor

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "MetricResult", "evaluate", "ApproxConfig", "FeatureCloud", "OtddReport",
    "otdd_classwise_approx", "PipelineConfig", "RunRecord", "run_pipeline", "Parameter", "Tensor",
]
