"""Shared domain types plus the geometric and vector primitives."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

DEFAULT_FEATURE_DIM = 1280
# OpenPose COCO body model
NUM_PARTS = 18


class NoValidKeypoints(ValueError):
    """No keypoint survived the confidence filter."""


class DimensionMismatch(ValueError):
    """Two feature vectors of different length were compared."""


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite bbox coordinate in {coords}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"inverted bbox {coords}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def shifted(self, dx: float, dy: float) -> BoundingBox:
        return BoundingBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    confidence: float
    part_index: int = 0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite keypoint ({self.x}, {self.y})")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"keypoint confidence {self.confidence} outside [0, 1]")
        if self.part_index < 0:
            raise ValueError(f"negative part index {self.part_index}")


FeatureVector = np.ndarray


def as_feature(values: Iterable[float] | np.ndarray, dim: int | None = None) -> FeatureVector:
    """Coerce ``values`` to a read-only 1-D float64 feature vector."""
    vec = np.array(values, dtype=np.float64).reshape(-1)
    if dim is not None and vec.shape[0] != dim:
        raise DimensionMismatch(f"expected dimension {dim}, got {vec.shape[0]}")
    if not np.all(np.isfinite(vec)):
        raise ValueError("feature vector has non-finite values")
    vec.setflags(write=False)
    return vec


@dataclass(frozen=True, eq=False)
class Detection:
    """One observed person in one frame.

    ``bbox`` is derived from the keypoints that pass the confidence filter;
    use :func:`make_detection` to build one consistently.
    """

    keypoints: tuple[Keypoint, ...]
    bbox: BoundingBox
    feature: FeatureVector
    frame_index: int = 0
    camera_id: int = 0

    def __post_init__(self) -> None:
        if not self.keypoints:
            raise ValueError("detection without keypoints")

    def valid_keypoints(self, theta_conf: float) -> list[Keypoint]:
        return [kp for kp in self.keypoints if kp.confidence >= theta_conf]

    def num_valid_keypoints(self, theta_conf: float) -> int:
        return sum(1 for kp in self.keypoints if kp.confidence >= theta_conf)


@dataclass(frozen=True)
class SystemParams:
    theta_key: int = 5
    theta_conf: float = 0.5
    theta_euc: float = 5.0
    beta_euc: float = 2.0
    theta_iou: float = 0.3
    life_max: int = 60
    predict_horizon: int = 5
    history_len: int = 3

    def __post_init__(self) -> None:
        if self.theta_key < 1:
            raise ValueError("theta_key must be >= 1")
        if not 0.0 <= self.theta_conf <= 1.0:
            raise ValueError("theta_conf must lie in [0, 1]")
        if not 0.0 <= self.theta_iou <= 1.0:
            raise ValueError("theta_iou must lie in [0, 1]")
        if self.theta_euc <= 0 or self.beta_euc <= 0:
            raise ValueError("euclidean thresholds must be positive")
        if self.life_max < 1:
            raise ValueError("life_max must be >= 1")
        if self.predict_horizon < 1 or self.history_len < 2:
            raise ValueError("predict_horizon must be >= 1 and history_len >= 2")

    @classmethod
    def from_mapping(cls, values: Mapping[str, object]) -> SystemParams:
        """Build from string or typed values; unknown keys are ignored."""
        kwargs = {}
        for f in fields(cls):
            if f.name in values:
                caster = int if f.type in ("int", int) else float
                kwargs[f.name] = caster(values[f.name])
        return cls(**kwargs)

    def with_overrides(self, **overrides: object) -> SystemParams:
        return replace(self, **overrides)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union; zero whenever either area is zero."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def bbox_from_keypoints(kps: Sequence[Keypoint], theta_conf: float) -> BoundingBox:
    """Axis-aligned envelope of the keypoints with confidence >= ``theta_conf``."""
    kept = [kp for kp in kps if kp.confidence >= theta_conf]
    if not kept:
        raise NoValidKeypoints(f"no keypoint with confidence >= {theta_conf}")
    xs = [kp.x for kp in kept]
    ys = [kp.y for kp in kept]
    return BoundingBox(min(xs), min(ys), max(xs), max(ys))


def l2_distance(a: FeatureVector, b: FeatureVector) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"cannot compare dimensions {a.shape} and {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def make_detection(
    keypoints: Sequence[Keypoint],
    feature: Iterable[float] | np.ndarray,
    theta_conf: float,
    frame_index: int = 0,
    camera_id: int = 0,
) -> Detection:
    kps = tuple(keypoints)
    return Detection(
        keypoints=kps,
        bbox=bbox_from_keypoints(kps, theta_conf),
        feature=as_feature(feature),
        frame_index=frame_index,
        camera_id=camera_id,
    )
