"""Tempered self-similarity alignment (TSA) and its masked variant (M-TSA)."""

from .baselines import AlignmentLossKind, repa_loss, stss_l1_loss
from .correspondence import (
    CorrespondenceField,
    LossReport,
    backprop_to_features,
    entropy,
    kl_divergence,
    temper,
    tsa_grad_wrt_similarity,
    tsa_loss,
)
from .motion_mask import (
    MotionMask,
    TubeletGrid,
    build_mask,
    masked_tsa_loss,
    patchify,
    temporal_saliency,
    unpatchify,
)
from .stss import SimilarityTensor, compute_stss, compute_stss_rows, frame_slice
from .tensor_core import (
    FeatureVolume,
    flatten_tokens,
    l2_normalize_channels,
    matmul_transpose,
    unflatten_tokens,
)

__version__ = "0.1.0"

__all__ = [
    "AlignmentLossKind", "CorrespondenceField", "FeatureVolume", "LossReport", "MotionMask",
    "SimilarityTensor", "TubeletGrid", "backprop_to_features", "build_mask", "compute_stss",
    "compute_stss_rows", "entropy", "flatten_tokens", "frame_slice", "kl_divergence",
    "l2_normalize_channels", "masked_tsa_loss", "matmul_transpose", "patchify", "repa_loss",
    "stss_l1_loss", "temporal_saliency", "temper", "tsa_grad_wrt_similarity", "tsa_loss",
    "unflatten_tokens", "unpatchify",
]
