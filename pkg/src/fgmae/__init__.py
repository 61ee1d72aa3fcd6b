"""Feature-guided masked-autoencoder pretraining for multispectral and
SAR-like imagery, on a from-scratch autodiff tensor core."""

from .tensor import Tensor, grad_check
from .rng import Rng
from .features import (BandMap, CannyParams, FeatureSpec, HogParams,
                       SiftParams, compute_canny, compute_dense_sift,
                       compute_hog, compute_ndi, assemble_targets)
from .model import FgMae, MaskPlan, ModelConfig, masked_l2_loss
from .pretrain import PretrainConfig, Trainer, pretrain_run
from .evaluate import (MetricsReport, ProbeConfig, fine_tune,
                       linear_probe_train, metric_f1, metric_map,
                       metric_miou, metric_oa_aa)

__version__ = "0.1.0"

__all__ = [
    "Tensor", "grad_check", "Rng",
    "BandMap", "CannyParams", "FeatureSpec", "HogParams", "SiftParams",
    "compute_canny", "compute_dense_sift", "compute_hog", "compute_ndi",
    "assemble_targets",
    "FgMae", "MaskPlan", "ModelConfig", "masked_l2_loss",
    "PretrainConfig", "Trainer", "pretrain_run",
    "MetricsReport", "ProbeConfig", "fine_tune", "linear_probe_train",
    "metric_f1", "metric_map", "metric_miou", "metric_oa_aa",
]
