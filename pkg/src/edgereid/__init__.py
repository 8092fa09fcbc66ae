"""Privacy-aware multi-camera pedestrian re-identification: edge pipeline, server, protocol and metrics."""

from .core import BoundingBox, Detection, Keypoint, SystemParams, bbox_from_keypoints, iou, l2_distance, make_detection

__version__ = "0.1.0"

__all__ = [
    "BoundingBox",
    "Detection",
    "Keypoint",
    "SystemParams",
    "bbox_from_keypoints",
    "iou",
    "l2_distance",
    "make_detection",
]
