"""Continual-learning engine: gated multi-domain LoRA attention on a small
transformer backbone, PEFT baselines, and a KNN-based evaluation harness."""

from . import kernels
from .adapters import ContinualModel
from .backbone import Backbone, BackboneConfig, preset_config
from .baselines import ExpandedModel, FullFTModel, PrefixModel, SeqLoraModel
from .evaluation import CLMetrics, compute_metrics, knn_classify, summarize_runs
from .tensor import Parameter, Tensor, backward, no_grad
from .training import SequenceSpec, TrainConfig, cosine_lr, run_sequence

__version__ = "0.1.0"

__all__ = [
    "Backbone",
    "BackboneConfig",
    "CLMetrics",
    "ContinualModel",
    "ExpandedModel",
    "FullFTModel",
    "Parameter",
    "PrefixModel",
    "SeqLoraModel",
    "SequenceSpec",
    "Tensor",
    "TrainConfig",
    "backward",
    "compute_metrics",
    "cosine_lr",
    "kernels",
    "knn_classify",
    "no_grad",
    "preset_config",
    "run_sequence",
    "summarize_runs",
    "__version__",
]
