"""Per-node tracking: validation, spatially gated greedy matching, local database upkeep."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

from .core import BoundingBox, Detection, FeatureVector, Keypoint, SystemParams, iou, l2_distance
from .predictor import IncompleteHistory, KeypointHistory, Predictor
from .protocol import Message, Query, Release, UpdateFeature, provisional_ref


@dataclass(frozen=True)
class DatabaseEntry:
    local_id: int
    bbox: BoundingBox
    feature: FeatureVector
    keypoint_count: int
    life: int
    global_id: int | None = None
    predictions: tuple[BoundingBox, ...] = ()
    # (frame_index, valid keypoints) of the most recent observations
    history: tuple[tuple[int, tuple[Keypoint, ...]], ...] = ()

    def server_ref(self) -> int:
        """ID to put in server-bound messages about this entry."""
        return self.global_id if self.global_id is not None else provisional_ref(self.local_id)


@dataclass
class LocalDatabase:
    entries: dict[int, DatabaseEntry] = field(default_factory=dict)
    # last local ID handed out; fresh IDs are zeta + 1, zeta + 2, ...
    zeta: int = 0

    @property
    def next_id(self) -> int:
        return self.zeta + 1

    def issue_id(self) -> int:
        self.zeta += 1
        return self.zeta

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, local_id: int) -> bool:
        return local_id in self.entries


@dataclass(frozen=True)
class CandidateRow:
    detection_index: int
    entry_id: int
    distance: float


@dataclass
class CandidateTable:
    rows: list[CandidateRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    @classmethod
    def from_triples(cls, triples: Iterable[tuple[int, int, float]]) -> CandidateTable:
        return cls([CandidateRow(d, e, float(dist)) for d, e, dist in triples])


@dataclass
class FrameResult:
    """Outcome of one frame.  Detection indices refer to the input list."""

    assignments: dict[int, int] = field(default_factory=dict)
    new_assignments: dict[int, int] = field(default_factory=dict)
    outbound: list[Message] = field(default_factory=list)
    evicted: list[int] = field(default_factory=list)

    @property
    def new_ids(self) -> set[int]:
        return set(self.new_assignments.values())

    @property
    def labels(self) -> dict[int, int]:
        """Every valid detection's local ID."""
        return {**self.assignments, **self.new_assignments}


def validate_detections(detections: Sequence[Detection], params: SystemParams) -> list[Detection]:
    return [d for d in detections if d.num_valid_keypoints(params.theta_conf) >= params.theta_key]


def gather_candidates(valid: Sequence[Detection], db: LocalDatabase, params: SystemParams) -> CandidateTable:
    """Rows for every (detection, entry) pair that overlaps spatially and is close in appearance."""
    rows = []
    for d_idx, det in enumerate(valid):
        for entry_id in sorted(db.entries):
            entry = db.entries[entry_id]
            if not any(iou(det.bbox, box) > 0 for box in (entry.bbox, *entry.predictions)):
                continue
            dist = l2_distance(det.feature, entry.feature)
            if dist < params.theta_euc:
                rows.append(CandidateRow(d_idx, entry_id, dist))
    return CandidateTable(rows)


def resolve_matches(
    table: CandidateTable, db: LocalDatabase, num_detections: int
) -> tuple[dict[int, int], dict[int, int]]:
    """Greedy lowest-distance-first assignment.

    Ties on distance go to the lower entry ID, then the lower detection
    index.  Detections left over receive fresh IDs from ``db`` in index
    order.  Returns ``(reid, new)``, both mapping detection index to local ID.
    """
    reid: dict[int, int] = {}
    used_entries: set[int] = set()
    for row in sorted(table.rows, key=lambda r: (r.distance, r.entry_id, r.detection_index)):
        if row.detection_index in reid or row.entry_id in used_entries:
            continue
        reid[row.detection_index] = row.entry_id
        used_entries.add(row.entry_id)
    new = {d: db.issue_id() for d in range(num_detections) if d not in reid}
    return reid, new


def update_entry(entry: DatabaseEntry, d: Detection, params: SystemParams) -> DatabaseEntry:
    """Refresh a matched entry.

    The bbox always follows the detection.  The stored feature is replaced
    only when the boxes overlap less than ``theta_iou`` and the detection
    has more valid keypoints than the stored feature was captured with.
    """
    n_valid = d.num_valid_keypoints(params.theta_conf)
    changes: dict = {"bbox": d.bbox, "life": params.life_max}
    if iou(entry.bbox, d.bbox) < params.theta_iou and n_valid > entry.keypoint_count:
        changes["feature"] = d.feature
        changes["keypoint_count"] = n_valid
    return replace(entry, **changes)


def age_and_evict(db: LocalDatabase, matched_ids: set[int]) -> tuple[LocalDatabase, list[int]]:
    removals = []
    for local_id in sorted(db.entries):
        if local_id in matched_ids:
            continue
        entry = db.entries[local_id]
        if entry.life <= 1:
            del db.entries[local_id]
            removals.append(local_id)
        else:
            db.entries[local_id] = replace(entry, life=entry.life - 1)
    return db, removals


def _feature_tuple(feature: FeatureVector) -> tuple[float, ...]:
    return tuple(float(v) for v in feature)


def _with_prediction(
    entry: DatabaseEntry, det: Detection, predictor: Predictor | None, params: SystemParams
) -> DatabaseEntry:
    obs = (det.frame_index, tuple(det.valid_keypoints(params.theta_conf)))
    history = (*entry.history, obs)[-params.history_len :]
    entry = replace(entry, history=history)
    if predictor is None or len(history) < params.history_len:
        return entry
    try:
        pset = predictor.predict(KeypointHistory(history), params)
    except IncompleteHistory:
        return entry
    return replace(entry, predictions=pset.boxes[: params.predict_horizon])


def process_frame(
    detections: Sequence[Detection],
    db: LocalDatabase,
    predictor: Predictor | None,
    params: SystemParams,
    node_id: int = 0,
) -> FrameResult:
    """Run one frame through validate, gather, resolve, update, predict and age.

    ``db`` is updated in place.  Outbound holds a Query per new local ID,
    an UpdateFeature per replaced feature, and a Release per eviction.
    """
    valid_idx = [i for i, d in enumerate(detections) if d.num_valid_keypoints(params.theta_conf) >= params.theta_key]
    valid = [detections[i] for i in valid_idx]
    table = gather_candidates(valid, db, params)
    reid, new = resolve_matches(table, db, len(valid))

    result = FrameResult()
    for v_idx in range(len(valid)):
        det = valid[v_idx]
        if v_idx in reid:
            old = db.entries[reid[v_idx]]
            entry = update_entry(old, det, params)
            if entry.feature is not old.feature:
                result.outbound.append(UpdateFeature(node_id, entry.server_ref(), _feature_tuple(entry.feature)))
            result.assignments[valid_idx[v_idx]] = entry.local_id
        else:
            entry = DatabaseEntry(
                local_id=new[v_idx],
                bbox=det.bbox,
                feature=det.feature,
                keypoint_count=det.num_valid_keypoints(params.theta_conf),
                life=params.life_max,
            )
            result.outbound.append(Query(node_id, entry.local_id, _feature_tuple(entry.feature)))
            result.new_assignments[valid_idx[v_idx]] = entry.local_id
        db.entries[entry.local_id] = _with_prediction(entry, det, predictor, params)

    evicted_entries = dict(db.entries)
    _, removals = age_and_evict(db, set(result.labels.values()))
    for local_id in removals:
        result.outbound.append(Release(node_id, evicted_entries[local_id].server_ref()))
    result.evicted = removals
    return result


def apply_match_reply(db: LocalDatabase, temp_id: int, global_id: int) -> bool:
    """Record the global ID for a local entry; False if the entry is already gone."""
    entry = db.entries.get(temp_id)
    if entry is None:
        return False
    db.entries[temp_id] = replace(entry, global_id=global_id)
    return True
