from .net import (
    STRIDE,
    BackboneConfig,
    DetectionHead,
    Detector,
    Encoder,
    FeaturePyramid,
    NetworkOutput,
    RestorationDecoder,
    TransformPredictor,
    TransformationPrediction,
    Upscaler,
)
from .losses import (
    LossWeights,
    heatmap_focal_loss,
    loss_detection,
    loss_restoration,
    loss_transformation,
    total_loss,
)
from .targets import (
    OUT_STRIDE,
    BatchedTargets,
    DetectionTargets,
    build_detection_targets,
    decode_detections,
    draw_gaussian,
    gaussian_radius,
    targets_to_tensors,
)

__all__ = [
    "STRIDE",
    "OUT_STRIDE",
    "BackboneConfig",
    "BatchedTargets",
    "DetectionHead",
    "DetectionTargets",
    "Detector",
    "Encoder",
    "FeaturePyramid",
    "LossWeights",
    "NetworkOutput",
    "RestorationDecoder",
    "TransformPredictor",
    "TransformationPrediction",
    "Upscaler",
    "build_detection_targets",
    "decode_detections",
    "draw_gaussian",
    "gaussian_radius",
    "heatmap_focal_loss",
    "loss_detection",
    "loss_restoration",
    "loss_transformation",
    "targets_to_tensors",
    "total_loss",
]
