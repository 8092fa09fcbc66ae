"""Future bounding-box prediction from a short keypoint history.

Any object with a ``predict(history, params)`` method can serve as the
predictor.  The default extrapolates each bbox coordinate with a
least-squares constant-velocity fit; :class:`RecurrentPredictor` runs a
single-layer LSTM forward pass from a weight file and is experimental.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from .core import NUM_PARTS, BoundingBox, Keypoint, NoValidKeypoints, SystemParams, bbox_from_keypoints, iou


class IncompleteHistory(ValueError):
    pass


class EmptyEvaluation(ValueError):
    pass


@dataclass(frozen=True)
class KeypointHistory:
    """Keypoint sets of consecutive observations, oldest first."""

    frames: tuple[tuple[int, tuple[Keypoint, ...]], ...]

    def __post_init__(self) -> None:
        indices = [f for f, _ in self.frames]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise ValueError(f"history frame indices not strictly increasing: {indices}")
        if any(len(kps) == 0 for _, kps in self.frames):
            raise ValueError("empty keypoint set in history")

    @classmethod
    def of(cls, frames: Iterable[tuple[int, Sequence[Keypoint]]]) -> KeypointHistory:
        return cls(tuple((int(f), tuple(kps)) for f, kps in frames))

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def last_frame(self) -> int:
        return self.frames[-1][0]


@dataclass(frozen=True)
class PredictionSet:
    """Boxes for frames ``origin + 1 ... origin + len(boxes)``."""

    origin: int
    boxes: tuple[BoundingBox, ...]


class Predictor(Protocol):
    def predict(self, history: KeypointHistory, params: SystemParams) -> PredictionSet: ...


def _envelope(kps: Sequence[Keypoint], theta_conf: float) -> BoundingBox:
    try:
        return bbox_from_keypoints(kps, theta_conf)
    except NoValidKeypoints:
        return bbox_from_keypoints(kps, 0.0)


def _ordered_box(a: float, b: float, c: float, d: float) -> BoundingBox:
    return BoundingBox(min(a, c), min(b, d), max(a, c), max(b, d))


class ConstantVelocityPredictor:
    """Least-squares linear extrapolation of the four bbox coordinates."""

    def predict(self, history: KeypointHistory, params: SystemParams) -> PredictionSet:
        if len(history) < params.history_len:
            raise IncompleteHistory(f"need {params.history_len} frames, have {len(history)}")
        frames = history.frames[-params.history_len :]
        t = np.array([f for f, _ in frames], dtype=np.float64)
        coords = np.array([_envelope(kps, params.theta_conf).as_tuple() for _, kps in frames])
        t_mean = t.mean()
        c_mean = coords.mean(axis=0)
        dt = t - t_mean
        slope = (dt[:, None] * (coords - c_mean)).sum(axis=0) / (dt**2).sum()
        last = frames[-1][0]
        boxes = []
        for step in range(1, params.predict_horizon + 1):
            x0, y0, x1, y1 = c_mean + slope * (last + step - t_mean)
            boxes.append(_ordered_box(x0, y0, x1, y1))
        return PredictionSet(last, tuple(boxes))


WEIGHTS_MAGIC = b"KPLS"
_HEADER = struct.Struct("<4sII")


def keypoint_input(kps: Sequence[Keypoint], num_parts: int = NUM_PARTS) -> np.ndarray:
    """Flatten a keypoint set to (x, y, conf) per part; missing parts are zero."""
    vec = np.zeros(3 * num_parts, dtype=np.float64)
    for kp in kps:
        if kp.part_index < num_parts:
            vec[3 * kp.part_index : 3 * kp.part_index + 3] = (kp.x, kp.y, kp.confidence)
    return vec


@dataclass
class LSTMWeights:
    w_ih: np.ndarray  # (4H, I), gate order i, f, g, o
    w_hh: np.ndarray  # (4H, H)
    bias: np.ndarray  # (4H,)
    w_out: np.ndarray  # (O, H)
    b_out: np.ndarray  # (O,)

    @property
    def input_dim(self) -> int:
        return self.w_ih.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w_hh.shape[1]

    def save(self, path: str | Path) -> None:
        blocks = [self.w_ih, self.w_hh, self.bias, self.w_out, self.b_out]
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(WEIGHTS_MAGIC, self.input_dim, self.hidden_dim))
            for block in blocks:
                fh.write(np.ascontiguousarray(block, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> LSTMWeights:
        raw = Path(path).read_bytes()
        if len(raw) < _HEADER.size:
            raise ValueError("weight file shorter than its header")
        magic, n_in, n_hid = _HEADER.unpack_from(raw)
        if magic != WEIGHTS_MAGIC:
            raise ValueError(f"bad weight file magic {magic!r}")
        values = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).astype(np.float64)
        fixed = 4 * n_hid * (n_in + n_hid + 1)
        rest = values.size - fixed
        if rest <= 0 or rest % (n_hid + 1) or (rest // (n_hid + 1)) % 4:
            raise ValueError("weight file size does not match its header")
        n_out = rest // (n_hid + 1)
        pos = 0

        def take(*shape: int) -> np.ndarray:
            nonlocal pos
            size = int(np.prod(shape))
            block = values[pos : pos + size].reshape(shape)
            pos += size
            return block

        return cls(
            w_ih=take(4 * n_hid, n_in),
            w_hh=take(4 * n_hid, n_hid),
            bias=take(4 * n_hid),
            w_out=take(n_out, n_hid),
            b_out=take(n_out),
        )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


class RecurrentPredictor:
    """LSTM over per-frame keypoint vectors, last hidden state mapped to boxes.

    The output layer emits ``4 * horizon`` values read as consecutive
    (x_min, y_min, x_max, y_max) groups.
    """

    def __init__(self, weights: LSTMWeights) -> None:
        if weights.input_dim % 3:
            raise ValueError("input dimension must be 3 * number of parts")
        self.weights = weights
        self.num_parts = weights.input_dim // 3

    @classmethod
    def from_file(cls, path: str | Path) -> RecurrentPredictor:
        return cls(LSTMWeights.load(path))

    def predict(self, history: KeypointHistory, params: SystemParams) -> PredictionSet:
        if len(history) < params.history_len:
            raise IncompleteHistory(f"need {params.history_len} frames, have {len(history)}")
        w = self.weights
        n_out = w.w_out.shape[0] // 4
        if n_out < params.predict_horizon:
            raise ValueError(f"weights predict {n_out} frames, horizon is {params.predict_horizon}")
        hid = np.zeros(w.hidden_dim)
        cell = np.zeros(w.hidden_dim)
        for _, kps in history.frames[-params.history_len :]:
            x = keypoint_input(kps, self.num_parts)
            gates = w.w_ih @ x + w.w_hh @ hid + w.bias
            i, f, g, o = np.split(gates, 4)
            cell = _sigmoid(f) * cell + _sigmoid(i) * np.tanh(g)
            hid = _sigmoid(o) * np.tanh(cell)
        out = (w.w_out @ hid + w.b_out).reshape(-1, 4)
        boxes = tuple(_ordered_box(*row) for row in out[: params.predict_horizon])
        return PredictionSet(history.last_frame, boxes)


def evaluate_avg_iou(
    predictions: Iterable[PredictionSet],
    ground_truth: Mapping[int, BoundingBox],
    horizon: int | None = None,
) -> float:
    """Mean IoU of predicted boxes against the ground truth at their target frames.

    ``horizon`` limits scoring to the first ``horizon`` steps of each set.
    """
    scores = []
    for pset in predictions:
        for step, box in enumerate(pset.boxes, start=1):
            if horizon is not None and step > horizon:
                break
            truth = ground_truth.get(pset.origin + step)
            if truth is not None:
                scores.append(iou(box, truth))
    if not scores:
        raise EmptyEvaluation("no prediction aligned with a ground-truth frame")
    return float(np.mean(scores))
