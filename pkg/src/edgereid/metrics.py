"""Re-identification and tracking evaluation: CMC, mAP, IDP/IDR/IDF1 and the AE score."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .core import BoundingBox, FeatureVector, as_feature, iou


class EmptyProbeSet(ValueError):
    pass


class NonpositivePower(ValueError):
    pass


class FewerThanThreeComponents(ValueError):
    pass


# --- ranking metrics ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ReidSample:
    identity: int
    feature: FeatureVector
    camera: int = 0


def _ranked_hits(query: ReidSample, gallery: Sequence[ReidSample], exclude_same_camera: bool) -> np.ndarray:
    """Boolean hit vector over the gallery in ascending-distance order.

    Same-identity items from the query's camera are dropped first when
    ``exclude_same_camera`` is set.  Equal distances keep gallery order.
    """
    keep = [
        g for g in gallery
        if not (exclude_same_camera and g.identity == query.identity and g.camera == query.camera)
    ]
    if not keep:
        return np.zeros(0, dtype=bool)
    feats = np.stack([g.feature for g in keep])
    dist = np.sqrt(np.sum((feats - query.feature) ** 2, axis=1))
    order = np.argsort(dist, kind="stable")
    return np.array([keep[i].identity == query.identity for i in order], dtype=bool)


def probe_set(gallery: Sequence[ReidSample], queries: Sequence[ReidSample], same_camera_excluded: bool = False) -> list[int]:
    """Indices of queries that still have a correct gallery match."""
    return [i for i, q in enumerate(queries) if _ranked_hits(q, gallery, same_camera_excluded).any()]


def cmc(gallery: Sequence[ReidSample], queries: Sequence[ReidSample], r: int, same_camera_excluded: bool = False) -> float:
    """Percentage of probes whose first correct match ranks within the top ``r``."""
    if r < 1:
        raise ValueError("rank must be >= 1")
    first_hits = []
    for q in queries:
        hits = _ranked_hits(q, gallery, same_camera_excluded)
        if hits.any():
            first_hits.append(int(np.argmax(hits)) + 1)
    if not first_hits:
        raise EmptyProbeSet("no query has a matching gallery item")
    return 100.0 * sum(1 for rank in first_hits if rank <= r) / len(first_hits)


def cmc_curve(gallery: Sequence[ReidSample], queries: Sequence[ReidSample], max_rank: int, same_camera_excluded: bool = False) -> list[float]:
    return [cmc(gallery, queries, r, same_camera_excluded) for r in range(1, max_rank + 1)]


def average_precision(hits: np.ndarray) -> float:
    n_true = int(hits.sum())
    if n_true == 0:
        return 0.0
    ranks = np.flatnonzero(hits) + 1
    return float(np.sum(np.arange(1, n_true + 1) / ranks) / n_true)


def mean_average_precision(gallery: Sequence[ReidSample], queries: Sequence[ReidSample], same_camera_excluded: bool = False) -> float:
    """Mean AP over the probe set, as a percentage."""
    aps = []
    for q in queries:
        hits = _ranked_hits(q, gallery, same_camera_excluded)
        if hits.any():
            aps.append(average_precision(hits))
    if not aps:
        raise EmptyProbeSet("no query has a matching gallery item")
    return 100.0 * float(np.mean(aps))


def read_samples(path: str | Path) -> list[ReidSample]:
    """Parse ``feat <identity> <camera> v1 ... vD`` lines."""
    samples = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].split()
        if not line:
            continue
        if line[0] != "feat" or len(line) < 4:
            raise ValueError(f"{path}:{lineno}: expected 'feat <identity> <camera> v1 ... vD'")
        samples.append(ReidSample(int(line[1]), as_feature([float(v) for v in line[3:]]), int(line[2])))
    return samples


# --- identity measures ------------------------------------------------------------------


class TrackSet:
    """Boxes per identity, at most one per (camera, frame)."""

    def __init__(self) -> None:
        self.tracks: dict[int, dict[tuple[int, int], BoundingBox]] = defaultdict(dict)

    def add(self, identity: int, camera: int, frame: int, box: BoundingBox) -> None:
        track = self.tracks[identity]
        if (camera, frame) in track:
            raise ValueError(f"identity {identity} already has a box in camera {camera} frame {frame}")
        track[(camera, frame)] = box

    def __len__(self) -> int:
        return sum(len(t) for t in self.tracks.values())

    def __iter__(self) -> Iterator[tuple[int, int, int, BoundingBox]]:
        for ident in sorted(self.tracks):
            for (cam, frame), box in sorted(self.tracks[ident].items()):
                yield ident, cam, frame, box

    @property
    def identities(self) -> list[int]:
        return sorted(i for i, t in self.tracks.items() if t)

    @property
    def cameras(self) -> list[int]:
        return sorted({cam for t in self.tracks.values() for cam, _ in t})

    def restrict(self, camera: int) -> TrackSet:
        out = TrackSet()
        for ident, cam, frame, box in self:
            if cam == camera:
                out.add(ident, cam, frame, box)
        return out

    @classmethod
    def from_rows(cls, rows: Iterable[tuple[int, int, int, BoundingBox]]) -> TrackSet:
        ts = cls()
        for ident, cam, frame, box in rows:
            ts.add(ident, cam, frame, box)
        return ts


def read_tracks(path: str | Path) -> TrackSet:
    """Parse ``trk <camera> <frame> <identity> <xmin> <ymin> <xmax> <ymax>`` lines."""
    ts = TrackSet()
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        tok = raw.split("#", 1)[0].split()
        if not tok:
            continue
        if tok[0] != "trk" or len(tok) != 8:
            raise ValueError(f"{path}:{lineno}: expected 'trk <camera> <frame> <identity> <xmin> <ymin> <xmax> <ymax>'")
        cam, frame, ident = int(tok[1]), int(tok[2]), int(tok[3])
        ts.add(ident, cam, frame, BoundingBox(*(float(v) for v in tok[4:])))
    return ts


def write_tracks(ts: TrackSet, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ident, cam, frame, box in sorted(ts, key=lambda r: (r[1], r[2], r[0])):
            fh.write(f"trk {cam} {frame} {ident} {float(box.x_min)!r} {float(box.y_min)!r} {float(box.x_max)!r} {float(box.y_max)!r}\n")


def linear_assignment(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost assignment for a rectangular cost matrix.

    Shortest augmenting path with row/column potentials, O(n^2 m).  Every
    row of the smaller side is assigned.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return []
    transposed = cost.shape[0] > cost.shape[1]
    if transposed:
        cost = cost.T
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=int)  # p[j]: row (1-based) matched to column j
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = np.inf
            j1 = 0
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    pairs = [(int(p[j]) - 1, j - 1) for j in range(1, m + 1) if p[j] != 0]
    if transposed:
        pairs = [(c, r) for r, c in pairs]
    return sorted(pairs)


@dataclass(frozen=True)
class IdMeasures:
    idp: float
    idr: float
    idf1: float
    idtp: int
    idfp: int
    idfn: int
    degenerate: bool = False  # some ratio was 0/0 and reported as 0

    def as_dict(self) -> dict:
        return {
            "idp": self.idp, "idr": self.idr, "idf1": self.idf1,
            "idtp": self.idtp, "idfp": self.idfp, "idfn": self.idfn,
            "degenerate": self.degenerate,
        }


def association_counts(truth: TrackSet, hyp: TrackSet, iou_threshold: float = 0.3) -> dict[tuple[int, int], int]:
    """Frames in which each (truth identity, hypothesis identity) pair could associate."""
    by_frame: dict[tuple[int, int], list[tuple[int, BoundingBox]]] = defaultdict(list)
    for hid, cam, frame, box in hyp:
        by_frame[(cam, frame)].append((hid, box))
    counts: dict[tuple[int, int], int] = defaultdict(int)
    for tid, cam, frame, tbox in truth:
        for hid, hbox in by_frame.get((cam, frame), ()):
            if iou(tbox, hbox) >= iou_threshold:
                counts[(tid, hid)] += 1
    return dict(counts)


def _ratio(num: float, den: float) -> tuple[float, bool]:
    if den == 0:
        return 0.0, True
    return 100.0 * num / den, False


def id_measures(truth: TrackSet, hyp: TrackSet, iou_threshold: float = 0.3) -> IdMeasures:
    """Identity precision, recall and F1 under the best one-to-one identity mapping."""
    t_ids = truth.identities
    h_ids = hyp.identities
    counts = association_counts(truth, hyp, iou_threshold)
    idtp = 0
    if t_ids and h_ids and counts:
        overlap = np.zeros((len(t_ids), len(h_ids)))
        t_pos = {t: i for i, t in enumerate(t_ids)}
        h_pos = {h: j for j, h in enumerate(h_ids)}
        for (t, h), c in counts.items():
            overlap[t_pos[t], h_pos[h]] = c
        pairs = linear_assignment(-overlap)
        idtp = int(sum(overlap[i, j] for i, j in pairs))
    idfn = len(truth) - idtp
    idfp = len(hyp) - idtp
    idp, d1 = _ratio(idtp, idtp + idfp)
    idr, d2 = _ratio(idtp, idtp + idfn)
    idf1, d3 = _ratio(2 * idtp, 2 * idtp + idfp + idfn)
    return IdMeasures(idp, idr, idf1, idtp, idfp, idfn, d1 or d2 or d3)


# --- accuracy . efficiency ----------------------------------------------------------------


def efficiency(fps: float, watts: float) -> float:
    """Frames per second per watt."""
    if watts <= 0:
        raise NonpositivePower(f"power must be positive, got {watts}")
    return fps / watts


def ae_mark(accuracy_pct: float, eff: float) -> float:
    if accuracy_pct < 0 or eff < 0:
        raise ValueError("accuracy and efficiency must be non-negative")
    return accuracy_pct * eff


@dataclass(frozen=True)
class CoverageComponent:
    name: str
    value: float
    bound: float
    direction: str = "max"  # "max": larger is better, "min": smaller is better

    def normalized(self) -> float:
        if self.bound <= 0:
            raise ValueError(f"component {self.name}: bound must be positive")
        if self.direction not in ("max", "min"):
            raise ValueError(f"component {self.name}: direction must be 'max' or 'min'")
        x = min(max(self.value / self.bound, 0.0), 1.0)
        return 1.0 - x if self.direction == "min" else x


def ae_coverage(components: Sequence[CoverageComponent]) -> float:
    """Radar-polygon area of the normalized components over the unit k-gon area, in percent.

    Axes sit at equal angles in the given order, so the ratio reduces to
    ``sum(r_i * r_{i+1}) / k``.
    """
    k = len(components)
    if k < 3:
        raise FewerThanThreeComponents(f"need at least 3 components, got {k}")
    r = [c.normalized() for c in components]
    return 100.0 * sum(r[i] * r[(i + 1) % k] for i in range(k)) / k


@dataclass
class Measurements:
    fps: float | None = None
    watts: float | None = None
    accuracy: float | None = None
    components: list[CoverageComponent] | None = None


def read_measurements(path: str | Path) -> Measurements:
    """Parse ``fps``/``watts``/``accuracy`` keys and ``component <name> <value> <bound> <max|min>`` lines."""
    m = Measurements()
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        tok = raw.split("#", 1)[0].replace("=", " ").split()
        if not tok:
            continue
        key = tok[0]
        if key in ("fps", "watts", "accuracy") and len(tok) == 2:
            setattr(m, key, float(tok[1]))
        elif key == "component" and len(tok) == 5:
            m.components = (m.components or []) + [CoverageComponent(tok[1], float(tok[2]), float(tok[3]), tok[4])]
        else:
            raise ValueError(f"{path}:{lineno}: cannot parse {raw.strip()!r}")
    return m
