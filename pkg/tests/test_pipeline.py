import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from edgereid.core import BoundingBox, Keypoint, SystemParams, make_detection
from edgereid.embedsim import person_keypoints
from edgereid.pipeline import (
    CandidateTable,
    DatabaseEntry,
    LocalDatabase,
    age_and_evict,
    apply_match_reply,
    gather_candidates,
    process_frame,
    resolve_matches,
    update_entry,
    validate_detections,
)
from edgereid.predictor import ConstantVelocityPredictor
from edgereid.protocol import PROVISIONAL_FLAG, Query, Release, UpdateFeature

from oracles import greedy_matches_literal

P = SystemParams()


def det(confs, feature=(0.0, 0.0), box=(0, 0, 10, 10), frame=0):
    """Detection whose keypoints sit on a diagonal of ``box``."""
    x0, y0, x1, y1 = box
    n = len(confs)
    kps = [Keypoint(x0 + (x1 - x0) * i / max(n - 1, 1), y0 + (y1 - y0) * i / max(n - 1, 1), c, i) for i, c in enumerate(confs)]
    return make_detection(kps, feature, P.theta_conf, frame_index=frame)


def person(x, y, feature, frame=0, hidden=()):
    return make_detection(person_keypoints(x, y, 40, 100, hidden=hidden), feature, P.theta_conf, frame_index=frame)


def entry(local_id, box=(0, 0, 10, 10), feature=(0.0, 0.0), kp=18, life=None, **kw):
    return DatabaseEntry(local_id, BoundingBox(*box), np.asarray(feature, float), kp, life or P.life_max, **kw)


def db_of(*entries, zeta=None):
    db = LocalDatabase({e.local_id: e for e in entries})
    db.zeta = zeta if zeta is not None else max((e.local_id for e in entries), default=0)
    return db


# --- validation -------------------------------------------------------------


def test_validate_boundary_pass():
    assert len(validate_detections([det([0.6] * 5)], P)) == 1


def test_validate_one_short():
    assert validate_detections([det([0.6, 0.6, 0.6, 0.6, 0.4])], P) == []


def test_validate_empty():
    assert validate_detections([], P) == []


def test_validate_preserves_order():
    ds = [det([0.9] * 6, feature=(i, 0)) for i in range(4)]
    ds.insert(2, det([0.9, 0.9, 0.1, 0.1, 0.1, 0.1]))
    kept = validate_detections(ds, P)
    assert [d.feature[0] for d in kept] == [0, 1, 2, 3]


# --- candidates ---------------------------------------------------------------


def test_gather_overlapping_close_feature():
    db = db_of(entry(1))
    d = det([0.9] * 6, feature=(1.2, 0.0), box=(2, 2, 12, 12))
    table = gather_candidates([d], db, P)
    assert [(r.detection_index, r.entry_id) for r in table.rows] == [(0, 1)]
    assert table.rows[0].distance == pytest.approx(1.2)


def test_gather_appearance_threshold():
    db = db_of(entry(1))
    d = det([0.9] * 6, feature=(6.0, 0.0), box=(2, 2, 12, 12))
    assert len(gather_candidates([d], db, P)) == 0


def test_gather_threshold_is_strict():
    db = db_of(entry(1))
    d = det([0.9] * 6, feature=(5.0, 0.0), box=(2, 2, 12, 12))
    assert len(gather_candidates([d], db, P)) == 0


def test_gather_spatial_gate_excludes_distance_zero():
    db = db_of(entry(1, predictions=(BoundingBox(20, 20, 30, 30),)))
    d = det([0.9] * 6, feature=(0.0, 0.0), box=(100, 100, 110, 110))
    assert len(gather_candidates([d], db, P)) == 0


def test_gather_uses_predicted_boxes():
    db = db_of(entry(1, predictions=(BoundingBox(20, 20, 30, 30), BoundingBox(95, 95, 105, 105))))
    d = det([0.9] * 6, box=(100, 100, 110, 110))
    assert len(gather_candidates([d], db, P)) == 1


# --- greedy resolution ----------------------------------------------------------------


def test_resolve_example_one():
    table = CandidateTable.from_triples([(0, 1, 0.5), (0, 2, 0.7), (1, 2, 0.6)])
    reid, new = resolve_matches(table, db_of(entry(1), entry(2)), 2)
    assert reid == {0: 1, 1: 2} and new == {}


def test_resolve_entry_consumed():
    table = CandidateTable.from_triples([(0, 1, 0.5), (1, 1, 0.6)])
    db = db_of(entry(1), zeta=4)
    reid, new = resolve_matches(table, db, 2)
    assert reid == {0: 1}
    assert new == {1: 5}


def test_resolve_all_new():
    db = db_of(zeta=10)
    reid, new = resolve_matches(CandidateTable(), db, 3)
    assert reid == {} and new == {0: 11, 1: 12, 2: 13}
    assert db.zeta == 13 and db.next_id == 14


def test_resolve_tie_prefers_lower_entry_then_detection():
    table = CandidateTable.from_triples([(1, 3, 1.0), (0, 2, 1.0), (1, 2, 1.0)])
    reid, _ = resolve_matches(table, db_of(entry(2), entry(3)), 2)
    # (d0,e2), (d1,e2) tie on entry 2; d0 wins, then d1 takes e3
    assert reid == {0: 2, 1: 3}


def random_table(rng: random.Random):
    n_det = rng.randint(0, 6)
    n_ent = rng.randint(0, 6)
    levels = [round(rng.uniform(0, 5), 1) for _ in range(3)]  # few values -> many ties
    rows = []
    for d in range(n_det):
        for e in range(1, n_ent + 1):
            if rng.random() < 0.6:
                dist = rng.choice(levels) if rng.random() < 0.5 else rng.uniform(0, 5)
                rows.append((d, e, dist))
    rng.shuffle(rows)
    return rows, n_det, n_ent


def test_resolve_matches_literal_oracle_seeded():
    rng = random.Random(2024)
    for _ in range(300):
        rows, n_det, n_ent = random_table(rng)
        zeta = rng.randint(0, 50)
        db = db_of(*[entry(e) for e in range(1, n_ent + 1)], zeta=max(zeta, n_ent))
        expected = greedy_matches_literal(rows, n_det, db.zeta)
        reid, new = resolve_matches(CandidateTable.from_triples(rows), db, n_det)
        assert (reid, new, db.zeta) == expected


@settings(max_examples=200, deadline=None)
@given(st.randoms(use_true_random=False))
def test_resolve_is_injective(rnd):
    rows, n_det, n_ent = random_table(rnd)
    db = db_of(*[entry(e) for e in range(1, n_ent + 1)])
    reid, new = resolve_matches(CandidateTable.from_triples(rows), db, n_det)
    assert len(set(reid.values())) == len(reid)
    assert set(reid) | set(new) == set(range(n_det))
    assert not set(reid) & set(new)
    assert not set(new.values()) & set(range(1, n_ent + 1))


# --- updates and ageing -------------------------------------------------------------


def test_update_replaces_feature_on_low_iou_and_more_keypoints():
    e = entry(1, box=(0, 0, 10, 10), feature=(0, 0), kp=6)
    d = det([0.9] * 8, feature=(1.0, 1.0), box=(8, 8, 18, 18))  # IoU 4/196
    out = update_entry(e, d, P)
    assert out.feature.tolist() == [1.0, 1.0] and out.keypoint_count == 8
    assert out.bbox == d.bbox and out.life == P.life_max


def test_update_keeps_feature_on_high_iou():
    e = entry(1, box=(0, 0, 10, 10), feature=(0, 0), kp=6)
    d = det([0.9] * 8, feature=(1.0, 1.0), box=(1, 0, 11, 10))
    out = update_entry(e, d, P)
    assert out.feature is e.feature and out.bbox == d.bbox


def test_update_keeps_feature_without_more_keypoints():
    e = entry(1, box=(0, 0, 10, 10), feature=(0, 0), kp=6)
    d = det([0.9] * 5, feature=(1.0, 1.0), box=(8, 8, 18, 18))
    out = update_entry(e, d, P)
    assert out.feature is e.feature and out.keypoint_count == 6


def test_age_evicts_at_life_one():
    db = db_of(entry(1, life=1))
    _, removed = age_and_evict(db, set())
    assert removed == [1] and 1 not in db


def test_age_matched_untouched():
    db = db_of(entry(1, life=P.life_max))
    age_and_evict(db, {1})
    assert db.entries[1].life == P.life_max


def test_age_decrements():
    db = db_of(entry(1, life=5))
    _, removed = age_and_evict(db, set())
    assert removed == [] and db.entries[1].life == 4


# --- full frame -------------------------------------------------------------------


def test_process_empty_frame():
    db = LocalDatabase()
    res = process_frame([], db, ConstantVelocityPredictor(), P)
    assert res.labels == {} and res.outbound == [] and len(db) == 0


def test_process_first_detection_is_new():
    db = LocalDatabase()
    res = process_frame([person(10, 10, (0.5, 0.5))], db, ConstantVelocityPredictor(), P, node_id=3)
    assert res.new_assignments == {0: 1} and res.new_ids == {1}
    assert res.outbound == [Query(3, 1, (0.5, 0.5))]


def test_process_two_frames_reidentifies():
    db = LocalDatabase()
    pred = ConstantVelocityPredictor()
    first = process_frame([person(10, 10, (0.5, 0.5), frame=0)], db, pred, P)
    second = process_frame([person(12, 11, (0.5, 0.5), frame=1)], db, pred, P)
    assert second.assignments == {0: first.new_assignments[0]}
    assert second.new_ids == set() and second.outbound == []


def test_process_invalid_detection_leaves_no_trace():
    db = LocalDatabase()
    bad = det([0.9, 0.9, 0.1, 0.1, 0.1, 0.1])
    res = process_frame([bad], db, None, P)
    assert res.labels == {} and len(db) == 0 and db.zeta == 0


def test_process_indices_refer_to_input_list():
    db = LocalDatabase()
    ds = [det([0.9, 0.1, 0.1, 0.1, 0.1, 0.1]), person(10, 10, (0.0, 0.0)), person(300, 10, (4.0, 4.0))]
    res = process_frame(ds, db, None, P)
    assert set(res.labels) == {1, 2}


def test_process_update_message_carries_provisional_reference():
    params = SystemParams(theta_iou=0.9)  # any movement allows a feature refresh
    db = LocalDatabase()
    process_frame([person(0, 0, (0.0, 0.0), hidden=(0, 1, 2))], db, None, params)
    res = process_frame([person(10, 0, (0.2, 0.0), frame=1)], db, None, params)
    assert res.outbound == [UpdateFeature(0, PROVISIONAL_FLAG | 1, (0.2, 0.0))]
    apply_match_reply(db, 1, 42)
    res = process_frame([person(20, 0, (0.3, 0.0), frame=2)], db, None, params)
    assert res.outbound == []  # same keypoint count, no refresh


def test_process_release_on_expiry_uses_global_id():
    params = SystemParams(life_max=2)
    db = LocalDatabase()
    process_frame([person(0, 0, (0.0, 0.0))], db, None, params)
    assert apply_match_reply(db, 1, 9)
    assert process_frame([], db, None, params).outbound == []
    res = process_frame([], db, None, params)
    assert res.outbound == [Release(0, 9)] and res.evicted == [1]


def test_apply_match_reply_after_eviction():
    assert not apply_match_reply(LocalDatabase(), 5, 1)


def test_predictions_appear_after_history_fills():
    db = LocalDatabase()
    pred = ConstantVelocityPredictor()
    for f in range(3):
        process_frame([person(10 + 2 * f, 10, (0.0, 0.0), frame=f)], db, pred, P)
        expected = 0 if f < 2 else P.predict_horizon
        assert len(db.entries[1].predictions) == expected
    assert db.entries[1].predictions[0] == BoundingBox(16, 10, 56, 110)


def test_ids_monotone_and_lives_in_range():
    rng = np.random.default_rng(0)
    db = LocalDatabase()
    pred = ConstantVelocityPredictor()
    params = SystemParams(life_max=4)
    seen = set()
    last_zeta = 0
    for f in range(60):
        ds = [person(float(x), 0.0, (float(x) / 10, 0.0), frame=f) for x in rng.choice(np.arange(0, 2000, 100), size=3, replace=False)]
        res = process_frame(ds, db, pred, params)
        assert db.zeta >= last_zeta
        last_zeta = db.zeta
        assert not res.new_ids & seen
        seen |= res.new_ids
        assert all(1 <= e.life <= params.life_max for e in db.entries.values())
        touched = set(res.labels.values()) | set(res.evicted)
        for msg in res.outbound:
            ref = getattr(msg, "temp_id", None) or (msg.global_id & ~PROVISIONAL_FLAG)
            assert ref in touched
