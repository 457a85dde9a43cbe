"""Toolkit for predicting point-cloud registration misalignment.

Pipeline: synthetic labeled pair generation, multiscale geometric feature
extraction (neighborhood entropies, debiased entropic optimal transport,
coverage ratios, co-visibility), a small attention-based regression model
with hand-written gradients, training/evaluation/ablation drivers, and a
map-building simulation that uses the trained predictor to decide which
registrations to redo.
"""

__version__ = "0.1.0"

from .geometry import (
    PointCloud,
    RigidTransform,
    RegisteredPair,
    SpatialIndex,
    DegenerateGeometryError,
    alignment_error,
    farthest_point_sampling,
    icp_register,
    read_xyz,
    write_xyz,
    voxel_downsample,
)
from .features import (
    ScaleConfig,
    AnchorFeatureVector,
    differential_entropy,
    sinkhorn_divergence,
    coverage_ratios,
    covisibility_score,
    extract_anchor_features,
    extract_pair_features,
)
from .model import (
    ModelParams,
    AttentionParams,
    EncoderParams,
    HeadParams,
    init_params,
    split_scales,
    scale_attention,
    forward,
    backward,
    loss_gradient,
    save_checkpoint,
    load_checkpoint,
)

__all__ = [
    "PointCloud",
    "RigidTransform",
    "RegisteredPair",
    "SpatialIndex",
    "DegenerateGeometryError",
    "alignment_error",
    "farthest_point_sampling",
    "icp_register",
    "read_xyz",
    "write_xyz",
    "voxel_downsample",
    "ScaleConfig",
    "AnchorFeatureVector",
    "differential_entropy",
    "sinkhorn_divergence",
    "coverage_ratios",
    "covisibility_score",
    "extract_anchor_features",
    "extract_pair_features",
    "ModelParams",
    "AttentionParams",
    "EncoderParams",
    "HeadParams",
    "init_params",
    "split_scales",
    "scale_attention",
    "forward",
    "backward",
    "loss_gradient",
    "save_checkpoint",
    "load_checkpoint",
]
