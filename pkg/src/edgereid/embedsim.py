"""Synthetic appearance embeddings and scripted multi-camera scenarios.

Each identity gets a fixed center; every observation of it is the center
plus noise drawn uniformly from a ball of radius ``alpha``.  Centers are
kept at least ``separation`` apart, so with ``separation > 2 * alpha`` any
two draws of one identity are closer than any two draws of different
identities.

Scenario files are line-oriented text; see ``docs/scenario-format.md``.
"""

from __future__ import annotations

import itertools
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import BoundingBox, FeatureVector, Keypoint, SystemParams, as_feature, bbox_from_keypoints, l2_distance


class InfeasibleGeometry(ValueError):
    pass


class UnknownIdentity(KeyError):
    pass


class ParseError(ValueError):
    def __init__(self, line: int, fieldname: str, message: str) -> None:
        super().__init__(f"line {line}: {fieldname}: {message}")
        self.line = line
        self.field = fieldname


class ValidationError(ValueError):
    pass


@dataclass(frozen=True)
class EmbeddingConfig:
    dim: int = 8
    alpha: float = 0.3
    separation: float = 1.0
    seed: int = 0
    box: float = 1.0  # centers are sampled uniformly in [0, box]^dim
    noise: float = 1.0  # fraction of alpha actually used as the noise radius
    max_attempts: int = 2000


@dataclass(frozen=True)
class EmbeddingModel:
    config: EmbeddingConfig
    centers: dict[int, FeatureVector]

    @property
    def dim(self) -> int:
        return self.config.dim

    @property
    def alpha(self) -> float:
        return self.config.alpha


def _ball_volume(dim: int, radius: float) -> float:
    return math.pi ** (dim / 2) / math.gamma(dim / 2 + 1) * radius**dim


def build_model(config: EmbeddingConfig, identities: Iterable[int]) -> EmbeddingModel:
    """Place one center per identity by seeded rejection sampling."""
    ids = sorted(set(identities))
    if config.dim < 2:
        raise ValueError("embedding dimension must be at least 2")
    if config.separation <= 2 * config.alpha:
        raise ValueError("separation must exceed 2 * alpha")
    if any(i < 0 for i in ids):
        raise ValueError("identity IDs must be non-negative")
    # Disjoint balls of radius separation/2 must fit inside the padded box.
    half = config.separation / 2
    capacity = (config.box + config.separation) ** config.dim / _ball_volume(config.dim, half)
    if len(ids) > capacity:
        raise InfeasibleGeometry(
            f"{len(ids)} identities cannot be {config.separation} apart in a "
            f"{config.dim}-d box of side {config.box} (volume bound {capacity:.1f})"
        )
    rng = np.random.default_rng(config.seed)
    placed: list[np.ndarray] = []
    centers: dict[int, FeatureVector] = {}
    for ident in ids:
        for _ in range(config.max_attempts):
            cand = rng.uniform(0.0, config.box, size=config.dim)
            if all(np.sqrt(np.sum((cand - p) ** 2)) >= config.separation for p in placed):
                break
        else:
            raise InfeasibleGeometry(
                f"could not place identity {ident} after {config.max_attempts} attempts "
                f"({len(placed)} placed)"
            )
        placed.append(cand)
        centers[ident] = as_feature(cand)
    return EmbeddingModel(config, centers)


def sample_embedding(model: EmbeddingModel, identity: int, draw_index: int) -> FeatureVector:
    """Deterministic draw for ``(seed, identity, draw_index)`` inside the alpha-ball."""
    center = model.centers.get(identity)
    if center is None:
        raise UnknownIdentity(identity)
    radius = model.config.alpha * model.config.noise
    if radius == 0:
        return center
    rng = np.random.default_rng([model.config.seed, identity, draw_index])
    direction = rng.standard_normal(model.dim)
    norm = np.sqrt(np.sum(direction**2))
    r = radius * rng.uniform() ** (1.0 / model.dim)
    return as_feature(center + direction * (r / norm))


@dataclass(frozen=True)
class TripletReport:
    max_intra: float
    min_inter: float
    satisfied: bool


def verify_triplet_geometry(model: EmbeddingModel, n_samples: int) -> TripletReport:
    """Check that every same-identity pair is closer than every cross-identity pair."""
    if n_samples < 2:
        raise ValueError("need at least two samples per identity")
    samples = {i: [sample_embedding(model, i, k) for k in range(n_samples)] for i in sorted(model.centers)}
    max_intra = 0.0
    for vecs in samples.values():
        for a, b in itertools.combinations(vecs, 2):
            max_intra = max(max_intra, l2_distance(a, b))
    min_inter = math.inf
    for i, j in itertools.combinations(sorted(samples), 2):
        for a in samples[i]:
            for b in samples[j]:
                min_inter = min(min_inter, l2_distance(a, b))
    return TripletReport(max_intra, min_inter, max_intra < min_inter)


# --- scenarios ---------------------------------------------------------------


@dataclass(frozen=True)
class Observation:
    camera: int
    frame: int
    identity: int
    visible: bool
    keypoints: tuple[Keypoint, ...]

    def truth_box(self, theta_conf: float) -> BoundingBox:
        try:
            return bbox_from_keypoints(self.keypoints, theta_conf)
        except ValueError:
            return bbox_from_keypoints(self.keypoints, 0.0)


@dataclass(frozen=True)
class NetworkConfig:
    latency: int = 0
    jitter: int = 0
    # (camera, first tick, end tick): node-to-server link down in [first, end)
    outages: tuple[tuple[int, int, int], ...] = ()


@dataclass
class Scenario:
    cameras: dict[int, int]  # camera id -> number of frames
    observations: list[Observation]
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)

    def __post_init__(self) -> None:
        self._by_frame: dict[tuple[int, int], list[Observation]] = defaultdict(list)
        for obs in sorted(self.observations, key=lambda o: (o.camera, o.frame, o.identity)):
            self._by_frame[(obs.camera, obs.frame)].append(obs)

    @property
    def identities(self) -> list[int]:
        return sorted({o.identity for o in self.observations})

    @property
    def num_ticks(self) -> int:
        return max(self.cameras.values(), default=0)

    def frame(self, camera: int, frame: int) -> list[Observation]:
        return self._by_frame.get((camera, frame), [])


def validate_scenario(sc: Scenario) -> None:
    if not sc.cameras:
        raise ValidationError("scenario declares no camera")
    if sc.embedding.separation <= 2 * sc.embedding.alpha:
        raise ValidationError(
            f"separation {sc.embedding.separation} must exceed 2 * alpha = {2 * sc.embedding.alpha}"
        )
    seen = set()
    for obs in sc.observations:
        if obs.camera not in sc.cameras:
            raise ValidationError(f"observation references undeclared camera {obs.camera}")
        if not 0 <= obs.frame < sc.cameras[obs.camera]:
            raise ValidationError(f"frame {obs.frame} outside camera {obs.camera}'s {sc.cameras[obs.camera]} frames")
        if not obs.keypoints:
            raise ValidationError(f"observation of identity {obs.identity} has no keypoints")
        key = (obs.camera, obs.frame, obs.identity)
        if key in seen:
            raise ValidationError(f"identity {obs.identity} observed twice in camera {obs.camera} frame {obs.frame}")
        seen.add(key)
    for cam, _, _ in sc.network.outages:
        if cam not in sc.cameras:
            raise ValidationError(f"outage references undeclared camera {cam}")


def check_thresholds(sc: Scenario, params: SystemParams) -> None:
    if 2 * sc.embedding.alpha * sc.embedding.noise >= params.theta_euc:
        warnings.warn(
            f"2 * alpha = {2 * sc.embedding.alpha} >= theta_euc = {params.theta_euc}: "
            "same-identity pairs may miss the local match threshold",
            stacklevel=2,
        )


_HEADER_KEYS = {
    "dim": int,
    "alpha": float,
    "separation": float,
    "seed": int,
    "box": float,
    "noise": float,
    "latency": int,
    "jitter": int,
}


def _num(tok: str, caster: type, line: int, name: str) -> int | float:
    try:
        value = caster(tok)
    except ValueError:
        raise ParseError(line, name, f"expected {caster.__name__}, got {tok!r}") from None
    if caster is float and not math.isfinite(value):
        raise ParseError(line, name, f"non-finite value {tok!r}")
    return value


def parse_scenario(text: str) -> Scenario:
    declared: dict[int, int | None] = {}
    header: dict[str, int | float] = {}
    outages = []
    observations = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        key = tok[0]
        if key == "camera":
            if len(tok) not in (2, 3):
                raise ParseError(lineno, "camera", "expected 'camera <id> [<num_frames>]'")
            cam = int(_num(tok[1], int, lineno, "camera id"))
            declared[cam] = int(_num(tok[2], int, lineno, "num_frames")) if len(tok) == 3 else None
        elif key in _HEADER_KEYS:
            if len(tok) != 2:
                raise ParseError(lineno, key, f"expected '{key} <value>'")
            header[key] = _num(tok[1], _HEADER_KEYS[key], lineno, key)
        elif key == "down":
            if len(tok) != 4:
                raise ParseError(lineno, "down", "expected 'down <camera> <start> <end>'")
            outages.append(tuple(int(_num(t, int, lineno, "down")) for t in tok[1:]))
        elif key == "obs":
            if len(tok) < 6:
                raise ParseError(lineno, "obs", "expected 'obs <camera> <frame> <identity> <vis> <k> ...'")
            cam, frame, ident, vis, k = (int(_num(t, int, lineno, n)) for t, n in zip(tok[1:6], ("camera", "frame", "identity", "vis", "k")))
            if vis not in (0, 1):
                raise ParseError(lineno, "vis", f"visibility must be 0 or 1, got {vis}")
            values = tok[6:]
            if len(values) != 3 * k:
                raise ParseError(lineno, "keypoints", f"k={k} needs {3 * k} values, got {len(values)}")
            kps = []
            for p in range(k):
                x, y, c = (_num(v, float, lineno, f"keypoint {p}") for v in values[3 * p : 3 * p + 3])
                if not 0.0 <= c <= 1.0:
                    raise ValidationError(f"line {lineno}: keypoint {p} confidence {c} outside [0, 1]")
                kps.append(Keypoint(x, y, c, p))
            if frame < 0 or ident < 0:
                raise ValidationError(f"line {lineno}: negative frame or identity")
            observations.append(Observation(cam, frame, ident, bool(vis), tuple(kps)))
        else:
            raise ParseError(lineno, key, "unknown directive")

    cameras: dict[int, int] = {}
    frames_seen: dict[int, set[int]] = defaultdict(set)
    for obs in observations:
        if obs.camera not in declared:
            raise ValidationError(f"observation references undeclared camera {obs.camera}")
        frames_seen[obs.camera].add(obs.frame)
    for cam, count in declared.items():
        seen = frames_seen.get(cam, set())
        if count is None:
            # without an explicit frame count the observed frames must be 0..n-1
            count = max(seen) + 1 if seen else 0
            if len(seen) != count:
                missing = sorted(set(range(count)) - seen)
                raise ValidationError(
                    f"camera {cam}: frame indices not dense (missing {missing[:5]}); declare a frame count"
                )
        cameras[cam] = count

    embedding = EmbeddingConfig(**{k: v for k, v in header.items() if k in EmbeddingConfig.__dataclass_fields__})
    network = NetworkConfig(int(header.get("latency", 0)), int(header.get("jitter", 0)), tuple(outages))
    sc = Scenario(cameras, observations, embedding, network)
    validate_scenario(sc)
    return sc


def load_scenario(path: str | Path, params: SystemParams | None = None) -> Scenario:
    sc = parse_scenario(Path(path).read_text(encoding="utf-8"))
    if params is not None:
        check_thresholds(sc, params)
    return sc


def _fmt(x: float) -> str:
    return repr(float(x)) if not float(x).is_integer() else str(int(x))


def format_scenario(sc: Scenario) -> str:
    emb = sc.embedding
    lines = [f"camera {cam} {n}" for cam, n in sorted(sc.cameras.items())]
    lines += [
        f"dim {emb.dim}",
        f"alpha {_fmt(emb.alpha)}",
        f"separation {_fmt(emb.separation)}",
        f"seed {emb.seed}",
        f"box {_fmt(emb.box)}",
        f"noise {_fmt(emb.noise)}",
        f"latency {sc.network.latency}",
        f"jitter {sc.network.jitter}",
    ]
    lines += [f"down {c} {s} {e}" for c, s, e in sc.network.outages]
    for obs in sorted(sc.observations, key=lambda o: (o.frame, o.camera, o.identity)):
        kp = " ".join(f"{_fmt(k.x)} {_fmt(k.y)} {_fmt(k.confidence)}" for k in obs.keypoints)
        lines.append(f"obs {obs.camera} {obs.frame} {obs.identity} {int(obs.visible)} {len(obs.keypoints)} {kp}")
    return "\n".join(lines) + "\n"


# --- scripted scenario generation --------------------------------------------

# Normalized (u, v) body layout of the 18 COCO parts; u and v each span [0, 1]
# so the keypoint envelope equals the person box exactly.
BODY_LAYOUT: tuple[tuple[float, float], ...] = (
    (0.5, 0.05),   # nose
    (0.5, 0.18),   # neck
    (0.3, 0.2),    # right shoulder
    (0.2, 0.38),   # right elbow
    (0.0, 0.5),    # right wrist
    (0.7, 0.2),    # left shoulder
    (0.8, 0.38),   # left elbow
    (1.0, 0.5),    # left wrist
    (0.38, 0.55),  # right hip
    (0.36, 0.77),  # right knee
    (0.35, 1.0),   # right ankle
    (0.62, 0.55),  # left hip
    (0.64, 0.77),  # left knee
    (0.65, 1.0),   # left ankle
    (0.45, 0.03),  # right eye
    (0.55, 0.03),  # left eye
    (0.42, 0.0),   # right ear
    (0.58, 0.0),   # left ear
)
_EXTREME_PARTS = frozenset({4, 7, 10, 13, 16, 17})


def person_keypoints(
    x: float, y: float, w: float, h: float, confidence: float = 0.9, hidden: Iterable[int] = ()
) -> tuple[Keypoint, ...]:
    """Keypoints of a person occupying the box (x, y, x + w, y + h).

    Parts listed in ``hidden`` get confidence 0.1.
    """
    hidden = set(hidden)
    return tuple(
        Keypoint(x + u * w, y + v * h, 0.1 if p in hidden else confidence, p)
        for p, (u, v) in enumerate(BODY_LAYOUT)
    )


@dataclass(frozen=True)
class Segment:
    """One identity walking in a straight line through one camera."""

    identity: int
    camera: int
    start: int
    end: int  # exclusive
    x0: float
    y0: float
    vx: float = 0.0
    vy: float = 0.0
    width: float = 40.0
    height: float = 100.0


def scripted_scenario(
    segments: Sequence[Segment],
    cameras: dict[int, int],
    embedding: EmbeddingConfig = EmbeddingConfig(),
    network: NetworkConfig = NetworkConfig(),
    hide_prob: float = 0.0,
    seed: int = 0,
) -> Scenario:
    """Build a scenario from straight-line segments.

    With ``hide_prob`` > 0, each interior body part is independently given
    low confidence per frame, which varies the valid-keypoint count without
    moving the keypoint envelope.
    """
    rng = np.random.default_rng(seed)
    interior = [p for p in range(len(BODY_LAYOUT)) if p not in _EXTREME_PARTS]
    observations = []
    for seg in segments:
        for f in range(seg.start, seg.end):
            t = f - seg.start
            hidden = [p for p in interior if rng.uniform() < hide_prob] if hide_prob else []
            kps = person_keypoints(seg.x0 + seg.vx * t, seg.y0 + seg.vy * t, seg.width, seg.height, hidden=hidden)
            observations.append(Observation(seg.camera, f, seg.identity, True, kps))
    sc = Scenario(dict(cameras), observations, embedding, network)
    validate_scenario(sc)
    return sc


def random_walkers(
    num_identities: int,
    num_frames: int,
    camera: int = 0,
    seed: int = 0,
    extent: tuple[float, float] = (1920.0, 1080.0),
    max_speed: float = 2.0,
    first_identity: int = 0,
) -> list[Segment]:
    """Constant-velocity walkers that stay visible for the whole sequence."""
    rng = np.random.default_rng(seed)
    segs = []
    for k in range(num_identities):
        x0 = float(rng.uniform(0.2, 0.8) * extent[0])
        y0 = float(rng.uniform(0.2, 0.8) * extent[1])
        vx, vy = (float(v) for v in rng.uniform(-max_speed, max_speed, size=2))
        segs.append(Segment(first_identity + k, camera, 0, num_frames, x0, y0, vx, vy))
    return segs
