import numpy as np
import pytest

from trackfusion.emissions import ObservableLayout
from trackfusion.fusion import (
    BBox,
    DetectionEvent,
    FusionConfig,
    FusionEngine,
    TrackerReport,
    annotate_state,
    average_bbox,
    detection_gate,
    iou,
)
from trackfusion.hmm import AnnotatedHistory, forward_pass, filter_posterior
from trackfusion.states import build_state_space

TARGET = BBox(100, 100, 40, 40)
FAR = BBox(400, 300, 40, 40)


def reports_at(boxes, obs=0.8):
    return [TrackerReport(b, (obs,)) for b in boxes]


def engine(n=3, **kw):
    return FusionEngine(FusionConfig(ObservableLayout.uniform(n), **kw))


def test_iou_examples():
    assert iou(TARGET, TARGET) == 1.0
    assert iou(TARGET, FAR) == 0.0
    assert iou(BBox(0, 0, 2, 2), BBox(1, 0, 2, 2)) == pytest.approx(2 / 6, rel=1e-15)
    assert iou(BBox(0, 0, 0, 0), BBox(0, 0, 0, 0)) == 0.0


def test_average_box_examples():
    assert average_bbox([TARGET]) == TARGET
    assert average_bbox([BBox(0, 0, 2, 2), BBox(2, 2, 4, 4)]) == BBox(1, 1, 3, 3)
    assert average_bbox([FAR] * 5) == FAR
    with pytest.raises(ValueError):
        average_bbox([])


def test_negative_box_size_rejected():
    with pytest.raises(ValueError):
        BBox(0, 0, -1, 1)


def test_annotate_state_examples():
    assert annotate_state(reports_at([TARGET] * 3), TARGET, 0.5) == (1, 1, 1)
    assert annotate_state(reports_at([FAR] * 3), TARGET, 0.5) == (0, 0, 0)
    # IoU 0.6 and 0.3 against the detection
    det = BBox(0, 0, 10, 10)
    a = BBox(0, 0, 10, 6)  # 60 / 100
    b = BBox(0, 0, 10, 3)  # 30 / 100
    assert [iou(a, det), iou(b, det)] == pytest.approx([0.6, 0.3])
    assert annotate_state(reports_at([a, b]), det, 0.5) == (1, 0)


def test_gate_rejects_far_detection_when_all_correct():
    cfg = FusionConfig(ObservableLayout.uniform(3))
    post = np.eye(8)[0]
    assert not detection_gate(post, reports_at([TARGET] * 3), FAR, cfg)


def test_gate_defers_to_detector_with_one_correct_tracker():
    cfg = FusionConfig(ObservableLayout.uniform(3))
    space = build_state_space(3)
    post = np.eye(8)[space.index_of((1, 0, 0))]
    assert detection_gate(post, reports_at([TARGET] * 3), FAR, cfg)


def test_gate_accepts_overlapping_detection():
    cfg = FusionConfig(ObservableLayout.uniform(3))
    det = BBox(100, 100, 40, 36)  # IoU 0.9 with the mean box
    assert iou(det, TARGET) == pytest.approx(0.9)
    assert detection_gate(np.eye(8)[0], reports_at([TARGET] * 3), det, cfg)


def test_gate_uses_only_the_correct_trackers_mean():
    cfg = FusionConfig(ObservableLayout.uniform(3))
    space = build_state_space(3)
    post = np.eye(8)[space.index_of((1, 1, 0))]
    reps = reports_at([TARGET, TARGET, FAR])
    assert detection_gate(post, reps, TARGET, cfg)
    assert not detection_gate(post, reps, FAR, cfg)


def test_two_trackers_need_both_for_majority():
    cfg = FusionConfig(ObservableLayout.uniform(2))
    space = build_state_space(2)
    reps = reports_at([TARGET, TARGET])
    assert not detection_gate(np.eye(4)[0], reps, FAR, cfg)
    assert detection_gate(np.eye(4)[space.index_of((1, 0))], reps, FAR, cfg)


def test_config_validation():
    lay = ObservableLayout.uniform(2)
    for bad in ({"gate_iou": 1.5}, {"correct_iou": -0.1}, {"window": "last"}, {"max_iters": -1}):
        with pytest.raises(ValueError):
            FusionConfig(lay, **bad)


def test_first_frame_averages_all_trackers():
    eng = engine()
    boxes = [BBox(0, 0, 10, 10), BBox(3, 0, 10, 10), BBox(6, 0, 10, 10)]
    out = eng.step(reports_at(boxes, obs=0.1))
    assert out.source == "fused"
    assert out.state == 0
    assert out.bbox == BBox(3, 0, 10, 10)
    assert out.posterior.tolist() == np.eye(8)[0].tolist()


def test_accepted_detection_returns_its_box():
    eng = engine()
    eng.step(reports_at([TARGET] * 3))
    det = BBox(101, 99, 40, 41)
    out = eng.step(reports_at([TARGET] * 3), DetectionEvent(det))
    assert out.source == "detector"
    assert out.bbox is det
    assert out.detection == "accepted"
    assert out.annotation == 0


def test_directive_after_detection_at_frame_ten():
    eng = engine()
    for _ in range(9):
        eng.step(reports_at([TARGET] * 3))
        assert eng.reinit_protocol() is None
    out = eng.step(reports_at([TARGET] * 3), DetectionEvent(TARGET))
    d = eng.reinit_protocol()
    assert d is out.directive
    assert (d.bbox, d.frame, d.next_segment_start) == (TARGET, 10, 11)
    assert d.template_update == 0.5
    eng.step(reports_at([TARGET] * 3))
    assert eng.reinit_protocol() is None


def test_posterior_restarts_after_accepted_detection():
    eng = engine()
    for _ in range(5):
        eng.step(reports_at([TARGET, FAR, FAR], obs=0.3))
    eng.step(reports_at([TARGET, FAR, FAR], obs=0.3), DetectionEvent(TARGET))
    assert eng.posterior.tolist() == np.eye(8)[0].tolist()
    out = eng.step(reports_at([TARGET] * 3, obs=0.01))
    assert out.posterior.tolist() == np.eye(8)[0].tolist()


def test_consecutive_detections_make_one_frame_segments():
    eng = engine(max_iters=0)
    eng.step(reports_at([TARGET] * 3))
    a = eng.step(reports_at([TARGET] * 3), DetectionEvent(TARGET))
    b = eng.step(reports_at([TARGET] * 3), DetectionEvent(TARGET))
    assert a.directive.next_segment_start == 3 and b.directive.next_segment_start == 4
    h = eng.history
    assert h.annotations == ((1, 0), (2, 0))
    assert [(s, e) for s, e, _ in h.segments()] == [(0, 2), (2, 3)]


def test_rejected_detection_is_invisible():
    reps = reports_at([TARGET] * 3, obs=0.9)
    a, b = engine(), engine()
    for _ in range(20):
        a.step(reps)
        b.step(reps)
    out = a.step(reps, DetectionEvent(FAR))
    ref = b.step(reps)
    assert out.detection == "rejected" and out.source == "fused"
    assert out.bbox == ref.bbox and out.state == ref.state
    assert np.array_equal(out.posterior, ref.posterior)
    sa, sb = a.snapshot(), b.snapshot()
    assert sa.keys() == sb.keys()
    for k in sa:
        if isinstance(sa[k], np.ndarray):
            assert np.array_equal(sa[k], sb[k])
        else:
            assert sa[k] == sb[k]


def test_marginals_sum_the_posterior():
    rng = np.random.default_rng(3)
    eng = engine()
    space = build_state_space(3)
    for _ in range(30):
        out = eng.step([TrackerReport(TARGET, (rng.random(),)) for _ in range(3)])
        for c in range(3):
            want = sum(out.posterior[i] for i in range(8) if space.bits[i, c])
            assert out.marginals[c] == pytest.approx(want, abs=1e-15)
            assert 0.0 <= out.marginals[c] <= 1.0


def test_online_filter_matches_batch_forward_pass():
    rng = np.random.default_rng(11)
    eng = engine(max_iters=0)
    outs = []
    for t in range(40):
        det = DetectionEvent(TARGET) if t in (12, 25) else None
        outs.append(eng.step([TrackerReport(TARGET, (rng.random(),)) for _ in range(3)], det))
    cache = forward_pass(eng.params, eng.history)
    for t, o in enumerate(outs):
        np.testing.assert_allclose(o.posterior, filter_posterior(cache, t), rtol=1e-9, atol=1e-14)


def test_fused_box_is_mean_of_correct_trackers():
    eng = engine()
    for _ in range(30):
        out = eng.step([TrackerReport(TARGET, (0.95,)), TrackerReport(TARGET, (0.95,)), TrackerReport(FAR, (0.02,))])
    assert eng.space.state_bits(out.state) == (1, 1, 0)
    assert out.bbox == TARGET


def test_learning_only_on_accepted_detections():
    eng = engine()
    reps = reports_at([TARGET] * 3)
    for _ in range(10):
        eng.step(reps)
    assert eng.learn_count == 0
    eng.step(reps, DetectionEvent(FAR))
    assert eng.learn_count == 0
    eng.step(reps, DetectionEvent(TARGET))
    assert eng.learn_count == 1


def test_segment_window_learns_from_last_segment():
    rng = np.random.default_rng(5)
    full, seg = engine(), engine(window="segment")
    # stop on the second detection so both windows are the ones just learned from
    for t in range(51):
        reps = [TrackerReport(TARGET, (rng.random(),)) for _ in range(3)]
        det = DetectionEvent(TARGET) if t in (20, 50) else None
        full.step(reps, det)
        seg.step(reps, det)
    assert seg._learning_history().T == 30
    assert full._learning_history().T == 51
    assert full.params != seg.params


def test_dimension_checks():
    eng = engine()
    with pytest.raises(ValueError):
        eng.step(reports_at([TARGET] * 2))
    with pytest.raises(ValueError):
        eng.step([TrackerReport(TARGET, (0.5, 0.5))] * 3)
    with pytest.raises(ValueError):
        eng.step(reports_at([TARGET] * 3), shared=(0.5,))


def test_shared_observables_enter_the_frame():
    eng = FusionEngine(FusionConfig(ObservableLayout((1, 1), shared=1)))
    eng.step(reports_at([TARGET] * 2), shared=(0.25,))
    assert eng.history.frames[0].tolist() == [0.8, 0.8, 0.25]


def test_replay_is_deterministic():
    rng = np.random.default_rng(9)
    frames = [[TrackerReport(TARGET, (rng.random(),)) for _ in range(3)] for _ in range(80)]
    dets = [DetectionEvent(TARGET) if rng.random() < 0.2 else None for _ in range(80)]
    runs = []
    for _ in range(2):
        eng = engine()
        runs.append([eng.step(r, d) for r, d in zip(frames, dets)])
    for a, b in zip(*runs):
        assert a.bbox == b.bbox and a.state == b.state and np.array_equal(a.posterior, b.posterior)


def test_history_rejects_writes():
    eng = engine()
    eng.step(reports_at([TARGET] * 3))
    h = eng.history
    assert isinstance(h, AnnotatedHistory)
    with pytest.raises(ValueError):
        h.frames[0, 0] = 0.5
