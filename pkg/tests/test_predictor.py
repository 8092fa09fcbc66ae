import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from edgereid.core import BoundingBox, Keypoint, SystemParams
from edgereid.embedsim import person_keypoints
from edgereid.predictor import (
    ConstantVelocityPredictor,
    EmptyEvaluation,
    IncompleteHistory,
    KeypointHistory,
    LSTMWeights,
    PredictionSet,
    RecurrentPredictor,
    evaluate_avg_iou,
    keypoint_input,
)

P = SystemParams()
CV = ConstantVelocityPredictor()


def box_kps(x0, y0, x1, y1):
    return (Keypoint(x0, y0, 0.9, 0), Keypoint(x1, y1, 0.9, 1), Keypoint((x0 + x1) / 2, y0, 0.9, 2))


def test_stationary_history():
    hist = KeypointHistory.of((f, box_kps(0, 0, 2, 2)) for f in range(3))
    out = CV.predict(hist, P)
    assert out.boxes == (BoundingBox(0, 0, 2, 2),) * 5
    assert out.origin == 2


def test_linear_drift():
    hist = KeypointHistory.of((f, box_kps(2 * f, 0, 2 * f + 10, 10)) for f in range(3))
    out = CV.predict(hist, P)
    # last box starts at x=4; +2 px per frame
    assert [b.x_min for b in out.boxes] == pytest.approx([6, 8, 10, 12, 14])
    assert all(b.width == pytest.approx(10) for b in out.boxes)


def test_least_squares_smooths_one_noisy_frame():
    # x positions 0, 3, 4: slope by least squares = 2, intercept mean 7/3 at t=1
    hist = KeypointHistory.of([(0, box_kps(0, 0, 1, 1)), (1, box_kps(3, 0, 4, 1)), (2, box_kps(4, 0, 5, 1))])
    first = CV.predict(hist, P).boxes[0]
    assert first.x_min == pytest.approx(7 / 3 + 2 * 2)


def test_irregular_frame_spacing_uses_frame_indices():
    hist = KeypointHistory.of([(0, box_kps(0, 0, 1, 1)), (2, box_kps(4, 0, 5, 1)), (3, box_kps(6, 0, 7, 1))])
    assert CV.predict(hist, P).boxes[0].x_min == pytest.approx(8.0)


def test_incomplete_history():
    hist = KeypointHistory.of((f, box_kps(0, 0, 2, 2)) for f in range(2))
    with pytest.raises(IncompleteHistory):
        CV.predict(hist, P)


def test_history_must_increase():
    with pytest.raises(ValueError):
        KeypointHistory.of([(1, box_kps(0, 0, 1, 1)), (1, box_kps(0, 0, 1, 1))])


def test_shrinking_box_stays_valid():
    hist = KeypointHistory.of((f, box_kps(5 * f, 0, 20 - 5 * f, 10)) for f in range(3))
    for b in CV.predict(hist, P).boxes:
        assert b.x_min <= b.x_max


@pytest.mark.parametrize("horizon", [1, 3, 8])
def test_output_length_follows_horizon(horizon):
    params = SystemParams(predict_horizon=horizon)
    hist = KeypointHistory.of((f, box_kps(f, f, f + 3, f + 5)) for f in range(3))
    assert len(CV.predict(hist, params).boxes) == horizon


finite = st.floats(-500, 500, allow_nan=False)


@settings(max_examples=100)
@given(finite, finite, finite, finite, finite, finite)
def test_translation_equivariance(x, y, vx, vy, dx, dy):
    frames = [(f, person_keypoints(x + vx * f, y + vy * f, 40, 100)) for f in range(3)]
    moved = [(f, tuple(Keypoint(k.x + dx, k.y + dy, k.confidence, k.part_index) for k in kps)) for f, kps in frames]
    a = CV.predict(KeypointHistory.of(frames), P)
    b = CV.predict(KeypointHistory.of(moved), P)
    for ba, bb in zip(a.boxes, b.boxes):
        assert np.allclose(bb.as_tuple(), ba.shifted(dx, dy).as_tuple(), rtol=0, atol=1e-9)


def test_avg_iou_perfect_and_disjoint():
    truth = {f: BoundingBox(f, 0, f + 10, 10) for f in range(10)}
    good = [PredictionSet(0, tuple(truth[k] for k in range(1, 6)))]
    assert evaluate_avg_iou(good, truth) == 1.0
    bad = [PredictionSet(0, tuple(b.shifted(100, 100) for b in good[0].boxes))]
    assert evaluate_avg_iou(bad, truth) == 0.0


def test_avg_iou_horizon_limit_and_alignment():
    truth = {1: BoundingBox(0, 0, 10, 10)}
    pset = PredictionSet(0, (BoundingBox(0, 0, 10, 10), BoundingBox(50, 50, 60, 60)))
    # step 2 targets frame 2, which has no ground truth
    assert evaluate_avg_iou([pset], truth) == 1.0
    assert evaluate_avg_iou([pset], truth, horizon=1) == 1.0


def test_avg_iou_empty():
    with pytest.raises(EmptyEvaluation):
        evaluate_avg_iou([], {0: BoundingBox(0, 0, 1, 1)})


# --- recurrent variant --------------------------------------------------------------


def zero_lstm(hidden=4, horizon=5, parts=18):
    n_in = 3 * parts
    return LSTMWeights(
        w_ih=np.zeros((4 * hidden, n_in)),
        w_hh=np.zeros((4 * hidden, hidden)),
        bias=np.zeros(4 * hidden),
        w_out=np.zeros((4 * horizon, hidden)),
        b_out=np.tile([1.0, 2.0, 3.0, 4.0], horizon),
    )


def test_recurrent_bias_only_output():
    pred = RecurrentPredictor(zero_lstm())
    hist = KeypointHistory.of((f, person_keypoints(0, 0, 40, 100)) for f in range(3))
    assert pred.predict(hist, P).boxes == (BoundingBox(1, 2, 3, 4),) * 5


def test_recurrent_forward_matches_hand_computation():
    rng = np.random.default_rng(0)
    w = zero_lstm(hidden=2, parts=2)
    w.w_ih = rng.normal(size=w.w_ih.shape) * 0.1
    w.w_hh = rng.normal(size=w.w_hh.shape) * 0.1
    w.w_out = rng.normal(size=w.w_out.shape)
    hist = KeypointHistory.of((f, (Keypoint(f, 2 * f, 0.9, 0), Keypoint(1, 1, 0.8, 1))) for f in range(3))

    sig = lambda z: 1 / (1 + np.exp(-z))  # noqa: E731
    h = np.zeros(2)
    c = np.zeros(2)
    for f in range(3):
        x = np.array([f, 2 * f, 0.9, 1, 1, 0.8])
        z = w.w_ih @ x + w.w_hh @ h
        i, fg, g, o = sig(z[0:2]), sig(z[2:4]), np.tanh(z[4:6]), sig(z[6:8])
        c = fg * c + i * g
        h = o * np.tanh(c)
    raw = (w.w_out @ h + w.b_out).reshape(-1, 4)
    got = RecurrentPredictor(w).predict(hist, P).boxes
    for row, box in zip(raw, got):
        assert box.x_min == pytest.approx(min(row[0], row[2]))
        assert box.y_max == pytest.approx(max(row[1], row[3]))


def test_weight_file_roundtrip(tmp_path):
    w = zero_lstm(hidden=3)
    w.w_hh[:] = 0.5
    path = tmp_path / "w.bin"
    w.save(path)
    raw = path.read_bytes()
    assert raw[:4] == b"KPLS"
    assert int.from_bytes(raw[4:8], "little") == 54 and int.from_bytes(raw[8:12], "little") == 3
    back = LSTMWeights.load(path)
    assert np.array_equal(back.w_hh, w.w_hh) and np.array_equal(back.b_out, w.b_out)


def test_weight_file_rejects_bad_magic(tmp_path):
    path = tmp_path / "w.bin"
    path.write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(ValueError):
        LSTMWeights.load(path)


def test_keypoint_input_zero_fills_missing_parts():
    vec = keypoint_input([Keypoint(5, 6, 0.7, 2)], num_parts=3)
    assert vec.tolist() == [0, 0, 0, 0, 0, 0, 5, 6, 0.7]
