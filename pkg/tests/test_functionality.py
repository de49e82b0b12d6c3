"""
Functional test of the post-processing and the metrics.
"""

import sys
from pathlib import Path

src = str((Path(__file__).parent / "../src").resolve())
sys.path.insert(0, src)

from math import isclose, pi
from unittest import TestCase

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from pytest import fixture, raises

from multigrasp.anchor_codec import (
    GD_PR,
    H,
    OD_PR,
    W,
    HeadTensor,
    decode_gd,
    decode_od,
    default_scale_specs,
    encode_targets,
    targets_to_tensor,
)
from multigrasp.classes import (
    AxisRect,
    Detection,
    GraspCandidate,
    OrientedRect,
    PairedObject,
    SceneAnnotation,
    SceneObject,
    TooFewGroups,
    ZeroGT,
)
from multigrasp.dataio import synth_scene
from multigrasp.evaluation import (
    EvalConfig,
    EvalReport,
    average_precision,
    cornell_accuracy,
    cv_splits,
    grasp_match,
    mapg,
)
from multigrasp.planner import grasp_order
from multigrasp.postprocess import PostConfig, build_relation_graph, nms, pair, run_pipeline, stacking_depth
from multigrasp.selftest import recovers, small_specs

N_CLASSES = 3


def onehot(i, n=N_CLASSES):
    v = np.zeros(n)
    v[i] = 1.0
    return v


def det(class_id, pr, box, cc=None):
    """A detection whose CC scores are `cc` (class -> score), no-class otherwise."""
    scores = np.zeros(N_CLASSES + 1)
    for c, s in (cc or {}).items():
        scores[c] = s
    if not scores.any():
        scores[N_CLASSES] = 1.0
    return Detection(class_id, onehot(class_id), pr, AxisRect(*box), onehot(N_CLASSES, N_CLASSES + 1), scores)


def grasp(class_id, pr, rect):
    return GraspCandidate(rect, pr, class_id, onehot(class_id))


def objects(*dets):
    return [PairedObject(d, None, i) for i, d in enumerate(dets)]


@fixture
def specs():
    return default_scale_specs(320, 31)


########################
# POST-PROCESSING      #
########################


def test_nms():
    a = det(0, 0.9, (0, 0, 10, 10))
    b = det(0, 0.8, (0, 0, 10, 9))
    assert nms([b, a], 0.45) == [a]
    c = det(1, 0.8, (0, 0, 10, 9))
    assert nms([a, c], 0.45) == [a, c]
    assert nms([a, c], 0.45, class_aware=False) == [a]
    assert nms([], 0.45) == []


def test_nms_on_grasps():
    g1 = grasp(0, 0.9, OrientedRect(10, 10, 8, 4, 0.1))
    g2 = grasp(0, 0.7, OrientedRect(10, 10, 8, 4, 0.15))
    g3 = grasp(0, 0.8, OrientedRect(30, 30, 8, 4, 0.1))
    assert nms([g2, g3, g1], 0.30) == [g1, g3]


def test_pair():
    d = det(0, 0.9, (0, 0, 10, 10))
    weak = grasp(0, 0.7, OrientedRect(5, 1, 10, 2))
    strong = grasp(0, 0.9, OrientedRect(5, 9, 10, 2))
    (p,) = pair([d], [weak, strong])
    assert p.best_grasp is strong and p.id == 0

    (p,) = pair([d], [grasp(1, 0.9, OrientedRect(5, 5, 9, 10))])
    assert p.best_grasp is None
    (p,) = pair([d], [grasp(0, 0.9, OrientedRect(0.5, 0.5, 1, 1))])
    assert p.best_grasp is None


def test_pair_serves_one_detection():
    first = det(0, 0.9, (0, 0, 10, 10))
    second = det(0, 0.8, (0, 0, 10, 10))
    only = grasp(0, 0.9, OrientedRect(5, 5, 8, 4))
    paired = pair([second, first], [only])
    assert paired[1].best_grasp is only
    assert paired[0].best_grasp is None


def test_relation_single_edge():
    objs = objects(det(0, 0.9, (0, 0, 10, 10)), det(1, 0.9, (2, 2, 12, 12), cc={0: 0.9}))
    g = build_relation_graph(objs)
    assert g.edges == ((0, 1),)
    assert g.ord == {0: 0, 1: 1}


def test_relation_no_scores():
    objs = objects(det(0, 0.9, (0, 0, 10, 10)), det(1, 0.9, (2, 2, 12, 12), cc={0: 0.3}))
    g = build_relation_graph(objs)
    assert g.edges == ()
    assert g.ord == {0: 0, 1: 0}


def test_relation_chain():
    objs = objects(
        det(0, 0.9, (0, 0, 10, 10)),
        det(1, 0.8, (1, 1, 11, 11), cc={0: 0.9}),
        det(2, 0.7, (2, 2, 12, 12), cc={1: 0.9}),
    )
    g = build_relation_graph(objs)
    assert g.edges == ((0, 1), (1, 2))
    assert g.ord == {0: 0, 1: 1, 2: 2}
    assert grasp_order(g) == [0, 1, 2]


def test_relation_cycle_is_broken_at_the_weakest_edge():
    objs = objects(det(0, 0.9, (0, 0, 10, 10), cc={1: 0.9}), det(1, 0.9, (2, 2, 12, 12), cc={0: 0.6}))
    g = build_relation_graph(objs)
    assert g.edges == ((1, 0),)


def test_stacking_depth():
    assert stacking_depth([0, 1, 2, 3], [(0, 2), (1, 2), (2, 3)]) == {0: 0, 1: 0, 2: 1, 3: 2}


def test_pipeline_recovers_scenes(specs):
    for seed in range(10):
        scene, _ = synth_scene(seed, 2 + seed % 3)
        g = run_pipeline(targets_to_tensor(encode_targets(scene, specs, 31)), specs)
        assert recovers(g, scene)


def test_pipeline_single_object(specs):
    scene, _ = synth_scene(0, 1)
    g = run_pipeline(targets_to_tensor(encode_targets(scene, specs, 31)), specs)
    (n,) = g.nodes
    assert n.best_grasp is not None
    assert g.ord == {n.id: 0}


def test_pipeline_empty(specs):
    a = encode_targets(SceneAnnotation(320, 320, ()), specs, 31)
    g = run_pipeline(targets_to_tensor(a), specs)
    assert g.nodes == () and g.edges == ()


def test_post_config_ranges():
    with raises(AssertionError):
        PostConfig(od_nms_iou=1.5)


########################
# METRICS              #
########################


def test_grasp_match_table():
    r = OrientedRect(50, 50, 30, 10, 0.4)
    assert grasp_match(r, [r])
    assert not grasp_match(OrientedRect(50, 50, 30, 10, 0.4 + pi / 4), [r])
    assert grasp_match(OrientedRect(50, 50, 30, 10, 0.4 + pi), [r])
    assert grasp_match(r, [OrientedRect(50, 50, 30, 10, 0.4 + pi)])
    assert not grasp_match(OrientedRect(90, 90, 30, 10, 0.4), [r])
    assert not grasp_match(r, [])
    assert grasp_match(OrientedRect(50, 50, 30, 10, 0.4 + pi / 4), [r], EvalConfig(angle_threshold=pi / 3))


def test_cornell_accuracy():
    r = OrientedRect(50, 50, 30, 10, 0.4)
    far = OrientedRect(90, 90, 30, 10, 0.4)
    report = cornell_accuracy([[r], [(far, 0.2), (r, 0.9)], [far]], [[r], [r], [r]])
    assert (report.n_images, report.n_success) == (3, 2)
    assert isclose(report.accuracy, 2 / 3)
    assert report.counters == {"missing": 0, "failed": 1, "matched": 2}

    report = cornell_accuracy([None, []], [[r], [r]])
    assert report.accuracy == 0.0
    assert report.counters["missing"] == 2


def test_cornell_top_k():
    r = OrientedRect(50, 50, 30, 10, 0.4)
    far = OrientedRect(90, 90, 30, 10, 0.4)
    preds = [[(far, 0.9), (r, 0.5)]]
    assert cornell_accuracy(preds, [[r]]).accuracy == 0.0
    assert cornell_accuracy(preds, [[r]], EvalConfig(top_k=2)).accuracy == 1.0


def test_average_precision():
    assert average_precision([0.9], [True], 1) == 1.0
    assert isclose(average_precision([0.9, 0.8, 0.7], [True, False, True], 2), 5 / 6)
    assert isclose(average_precision([0.9, 0.8, 0.7], [True, False, True], 2, "interpolated"), 5 / 6)
    assert average_precision([], [], 3) == 0.0
    with raises(ZeroGT):
        average_precision([0.9], [True], 0)


def _scene_object(i, class_id, box, grasp_rect):
    return SceneObject(i, class_id, f"class-{class_id}", AxisRect(*box), (), (grasp_rect,))


def _prediction(i, class_id, pr, box, grasp_rect):
    scores = onehot(class_id)
    none = onehot(N_CLASSES, N_CLASSES + 1)
    d = Detection(class_id, scores, pr, AxisRect(*box), none, none)
    g = GraspCandidate(grasp_rect, pr, class_id, scores) if grasp_rect else None
    return PairedObject(d, g, i)


@fixture
def two_cups():
    ga = OrientedRect(5, 5, 6, 3, 0.2)
    gb = OrientedRect(55, 55, 6, 3, 1.2)
    scene = SceneAnnotation(
        100, 100, (_scene_object(0, 0, (0, 0, 10, 10), ga), _scene_object(1, 0, (50, 50, 60, 60), gb))
    )
    return scene, ga, gb


def test_mapg_hand_curve(two_cups):
    scene, ga, gb = two_cups
    preds = [
        _prediction(0, 0, 0.9, (0, 0, 10, 10), ga),
        _prediction(1, 0, 0.8, (80, 80, 90, 90), ga),
        _prediction(2, 0, 0.7, (50, 50, 60, 60), gb),
    ]
    report = mapg([preds], [scene])
    assert isclose(report.mapg, 5 / 6)
    assert isclose(report.map, 5 / 6)
    assert report.n_success == 1
    assert report.counters["box_tp"] == 2


def test_mapg_rotated_grasps(two_cups):
    scene, ga, gb = two_cups
    turn = lambda r: OrientedRect(r.x, r.y, r.w, r.h, r.theta + pi / 4)
    preds = [_prediction(0, 0, 0.9, (0, 0, 10, 10), turn(ga)), _prediction(1, 0, 0.8, (50, 50, 60, 60), turn(gb))]
    report = mapg([preds], [scene])
    assert report.map == 1.0
    assert report.mapg == 0.0
    assert report.n_success == 0


def test_mapg_oracle(specs):
    outputs, scenes = [], []
    for seed in range(5):
        scene, _ = synth_scene(seed, 3)
        outputs.append(run_pipeline(targets_to_tensor(encode_targets(scene, specs, 31)), specs).nodes)
        scenes.append(scene)
    report = mapg(outputs, scenes)
    assert report.mapg == 1.0 and report.map == 1.0
    assert report.accuracy == 1.0


def test_mapg_notes_classes_without_ground_truth(two_cups):
    scene, ga, _ = two_cups
    preds = [_prediction(0, 0, 0.9, (0, 0, 10, 10), ga), _prediction(1, 2, 0.9, (50, 50, 60, 60), None)]
    report = mapg([preds], [scene])
    assert 2 not in report.ap
    assert any("class 2" in n for n in report.notes)
    assert report.mapg <= report.map


def test_report_views(two_cups):
    scene, ga, gb = two_cups
    report = mapg([[_prediction(0, 0, 0.9, (0, 0, 10, 10), ga)]], [scene])
    frame = report.to_frame({0: "cup"})
    assert list(frame.columns) == ["name", "ap", "apg"]
    assert frame.loc[0, "name"] == "cup"
    doc = report.to_document()
    assert doc["ap"]["0"] == {"box": 0.5, "grasp": 0.5}
    assert "mAPg" in report.to_text()
    with raises(AssertionError):
        EvalReport(n_images=2, n_success=1, accuracy=0.9)


def test_cv_splits():
    folds = cv_splits(range(10), "image_wise", k=5)
    assert [len(f) for f in folds] == [2] * 5
    assert sorted(i for f in folds for i in f) == list(range(10))
    assert cv_splits(range(10), k=5, seed=3) == cv_splits(range(10), k=5, seed=3)

    folds = cv_splits(range(10), "object_wise", k=5, group_key=lambda i: i // 2)
    for f in folds:
        assert len({i // 2 for i in f}) == 1
    with raises(TooFewGroups):
        cv_splits(range(6), "object_wise", k=5, group_key=lambda i: i // 2)
    with raises(TooFewGroups):
        cv_splits(range(3), "image_wise", k=5)


########################
# PROPERTIES           #
########################

pixels = st.integers(min_value=0, max_value=60)
sizes = st.integers(min_value=1, max_value=40)
classes = st.integers(min_value=0, max_value=N_CLASSES - 1)
confidences = st.integers(min_value=1, max_value=9).map(lambda k: k / 10)
boxes = st.builds(lambda x, y, w, h: (x, y, x + w, y + h), pixels, pixels, sizes, sizes)
detections = st.lists(st.builds(det, classes, confidences, boxes), max_size=12)
rotated = st.builds(OrientedRect, pixels, pixels, sizes, sizes, st.floats(min_value=0, max_value=3.1))
grasps = st.lists(st.builds(grasp, classes, confidences, rotated), max_size=10)
log_scales = st.floats(min_value=-1e4, max_value=1e4, allow_nan=False)


class Test_Properties(TestCase):
    @given(detections, st.sampled_from([0.1, 0.45, 0.9]), st.booleans())
    def test_nms_is_idempotent(self, dets, threshold, class_aware):
        once = nms(dets, threshold, class_aware)
        twice = nms(once, threshold, class_aware)
        assert [id(d) for d in twice] == [id(d) for d in once]

    @settings(max_examples=50, deadline=None)
    @given(grasps, st.sampled_from([0.1, 0.3]))
    def test_nms_on_grasps_is_idempotent(self, items, threshold):
        once = nms(items, threshold)
        assert [id(g) for g in nms(once, threshold)] == [id(g) for g in once]

    @given(
        st.lists(st.tuples(st.integers(min_value=0, max_value=20), st.booleans()), min_size=1, max_size=30),
        st.sampled_from(["continuous", "interpolated"]),
    )
    def test_average_precision_depends_on_ranking_only(self, ranked, method):
        ranks = [k for k, _ in ranked]
        matches = [m for _, m in ranked]
        n_gt = max(1, sum(matches))
        ap = average_precision(ranks, matches, n_gt, method)
        assert 0.0 <= ap <= 1.0
        for f in (lambda k: 3 * k + 1, lambda k: np.exp(k / 4), lambda k: k / (k + 1)):
            assert isclose(average_precision([f(k) for k in ranks], matches, n_gt, method), ap)

    @given(log_scales, log_scales, log_scales, log_scales)
    def test_decode_any_scale(self, od_w, od_h, gd_w, gd_h):
        specs = small_specs()
        h = HeadTensor.zeros(specs, N_CLASSES)
        od = [o.copy() for o in h.od]
        gd = [g.copy() for g in h.gd]
        for o in od:
            o[..., OD_PR] = -40.0
        for g in gd:
            g[..., GD_PR] = -40.0
        od[1][1, 0, 0, [OD_PR, W, H]] = (0.0, od_w, od_h)
        gd[0][0, 0, 2, [GD_PR, W, H]] = (0.0, gd_w, gd_h)
        h = HeadTensor(specs, N_CLASSES, od, gd)
        (d,) = decode_od(h, specs)
        assert 0 <= d.box.x1 < d.box.x2 <= 32 and 0 <= d.box.y1 < d.box.y2 <= 32
        (g,) = decode_gd(h, specs)
        assert g.rect.w > 0 and g.rect.h > 0
