"""
Cornell files, scene documents, tensor bundles and synthetic scenes.
"""

import sys
from pathlib import Path

src = str((Path(__file__).parent / "../src").resolve())
sys.path.insert(0, src)

import json
from math import isclose, pi

import numpy as np
from pytest import fixture, mark, raises

from multigrasp.anchor_codec import HeadTensor, default_scale_specs, encode_targets, targets_to_tensor
from multigrasp.classes import (
    BadMagic,
    BadScene,
    CyclicGraph,
    CyclicSupport,
    MalformedLine,
    OrphanGrasp,
    ShapeMismatch,
    TruncatedFile,
    TruncatedPayload,
)
from multigrasp.dataio import (
    canonical,
    cornell_group_key,
    load_bundle,
    load_cornell_predictions,
    load_cornell_sample,
    load_relation_graph,
    load_scene,
    parse_cornell_rect_file,
    save_bundle,
    save_scene,
    synth_scene,
    understanding_document,
)
from multigrasp.geometry import axis_iou
from multigrasp.postprocess import run_pipeline
from multigrasp.selftest import small_specs

CLEAN = "2 1\n-2 1\n-2 -1\n2 -1\n"


########################
# CORNELL              #
########################


def test_parse_clean_file():
    rects, skipped = parse_cornell_rect_file(CLEAN + "\n" + CLEAN)
    assert len(rects) == 2 and skipped == 0
    r = rects[0]
    assert (r.w, r.h) == (2.0, 4.0)
    assert isclose(r.theta, pi / 2)


def test_nan_groups_are_skipped():
    rects, skipped = parse_cornell_rect_file("NaN 1\n-2 1\n-2 -1\n2 -1\n" + CLEAN)
    assert len(rects) == 1 and skipped == 1


def test_empty_file():
    assert parse_cornell_rect_file("") == ([], 0)


@mark.parametrize(
    "text, error, line",
    [
        (CLEAN + "1 1\n2 2\n", TruncatedFile, 5),
        ("2 1\n-2 x\n-2 -1\n2 -1\n", MalformedLine, 2),
        ("2 1 3\n-2 1\n-2 -1\n2 -1\n", MalformedLine, 1),
        ("2 1\n-2 1\ninf -1\n2 -1\n", MalformedLine, 3),
        ("0 0\n4 0\n4 1\n0 3\n", MalformedLine, 1),
        ("\n\n" + CLEAN + "1 1\n", TruncatedFile, 7),
    ],
)
def test_parse_errors(text, error, line):
    with raises(error) as e:
        parse_cornell_rect_file(text)
    assert e.value.line == line


def test_cornell_sample():
    sample = load_cornell_sample(CLEAN, CLEAN + CLEAN, image_id="pcd0123r")
    assert (len(sample.positives), len(sample.negatives)) == (1, 2)
    assert sample.group == cornell_group_key("pcd0123r") == "012"
    assert load_cornell_sample(CLEAN, image_id="x", group_key=str.upper).group == "X"


def test_cornell_predictions():
    doc = {"images": [{"id": "pcd0100", "grasps": [{"x": 1, "y": 2, "w": 3, "h": 4, "theta": 0.5, "pr": 0.7}]}]}
    preds = load_cornell_predictions(json.dumps(doc))
    ((rect, pr),) = preds["pcd0100"]
    assert (rect.x, rect.w, pr) == (1.0, 3.0, 0.7)
    doc["images"][0]["grasps"][0]["pr"] = "high"
    with raises(BadScene):
        load_cornell_predictions(json.dumps(doc))


########################
# SCENES               #
########################


@fixture
def scene_doc():
    return {
        "image": {"w": 320, "h": 320},
        "objects": [
            {"id": 0, "class": {"index": 3, "name": "box"}, "box": [40, 40, 140, 140]},
            {"id": 1, "class": {"index": 7, "name": "cup"}, "box": [60, 60, 120, 120], "on_top_of": [0]},
        ],
        "grasps": [{"object": 1, "x": 90, "y": 90, "w": 30, "h": 12, "theta": 0.3}],
    }


def test_load_scene(scene_doc):
    scene = load_scene(json.dumps(scene_doc))
    assert scene.object(1).on_top_of == (0,)
    assert scene.object(1).class_name == "cup"
    assert len(scene.object(1).grasps) == 1
    assert scene.object(0).grasps == ()


def test_scene_documents_are_canonical(scene_doc):
    text = save_scene(load_scene(scene_doc))
    assert save_scene(load_scene(text)) == text
    assert text.endswith("\n")
    assert json.loads(text)["objects"][1]["grasps"][0]["theta"] == 0.3


def test_bad_scenes(scene_doc):
    with raises(BadScene):
        load_scene("{not json")
    with raises(BadScene):
        load_scene({"objects": []})
    scene_doc["grasps"][0]["object"] = 5
    with raises(OrphanGrasp):
        load_scene(scene_doc)
    scene_doc["grasps"] = []
    scene_doc["objects"][0]["on_top_of"] = [1]
    with raises(CyclicSupport):
        load_scene(scene_doc)


@mark.parametrize(
    "edit",
    [
        lambda d: d["objects"][0].update(id="abc"),
        lambda d: d["objects"][1].update(on_top_of=["under"]),
        lambda d: d["image"].update(w="wide"),
        lambda d: d["grasps"][0].update(x="left"),
    ],
)
def test_bad_values(scene_doc, edit):
    edit(scene_doc)
    with raises(BadScene):
        load_scene(json.dumps(scene_doc))


def test_canonical_rounding():
    assert canonical({"b": 1 / 3, "a": [np.float64(2.0), -0.0]}) == '{\n  "a": [\n    2.0,\n    0.0\n  ],\n  "b": 0.333333\n}\n'


def test_understanding_round_trip():
    specs = default_scale_specs(320, 31)
    scene, _ = synth_scene(4, 3)
    g = run_pipeline(targets_to_tensor(encode_targets(scene, specs, 31)), specs)
    doc = understanding_document(g)
    assert sorted(doc["order"]) == sorted(o["id"] for o in doc["objects"])
    back = load_relation_graph(canonical(doc))
    assert back.edges == g.edges
    assert back.ord == g.ord
    assert [n.class_id for n in back.nodes] == [n.class_id for n in g.nodes]


def test_relation_graph_errors():
    node = {"id": 0, "class": 0, "pr": 0.9, "box": [0, 0, 10, 10], "fc_scores": [0, 1], "cc_scores": [0, 1]}
    with raises(BadScene):
        load_relation_graph({"objects": [node, node]})
    with raises(BadScene):
        load_relation_graph({"objects": [node], "edges": [[0, 4]]})
    other = dict(node, id=1)
    with raises(CyclicGraph):
        load_relation_graph({"objects": [node, other], "edges": [[0, 1], [1, 0]]})
    with raises(BadScene):
        load_relation_graph({"objects": [{"id": 0}]})
    with raises(BadScene):
        load_relation_graph({"objects": [dict(node, pr="sure")]})


########################
# BUNDLES              #
########################


@fixture
def head():
    specs = small_specs()
    size = HeadTensor.zeros(specs, 3).size
    return HeadTensor.from_flat(np.arange(size) % 7 - 3.0, specs, 3)


def test_bundle_round_trip(head):
    data = save_bundle(head)
    assert data.startswith(b"MTGD1\n")
    assert load_bundle(data) == head


def test_bundle_errors(head):
    data = save_bundle(head)
    with raises(BadMagic):
        load_bundle(b"XXXX" + data)
    with raises(TruncatedPayload):
        load_bundle(data[:-1])
    with raises(ShapeMismatch):
        load_bundle(data + b"\0\0\0\0")
    with raises(ShapeMismatch):
        load_bundle(b"MTGD1\nabc\n{}")


########################
# SYNTHETIC SCENES     #
########################


def test_synth_is_deterministic():
    assert save_scene(synth_scene(7, 3)[0]) == save_scene(synth_scene(7, 3)[0])
    assert save_scene(synth_scene(7, 3)[0]) != save_scene(synth_scene(8, 3)[0])


def test_synth_invariants():
    for seed in range(30):
        scene, state = synth_scene(seed, 1 + seed % 6)
        assert len({o.class_id for o in scene.objects}) == len(scene.objects)
        assert set(state.objects) == {o.id for o in scene.objects}
        for o in scene.objects:
            b = o.box
            assert 0 <= b.x1 and b.x2 <= 320 and 0 <= b.y1 and b.y2 <= 320
            assert 1 <= len(o.grasps) <= 3
            for g in o.grasps:
                assert b.x1 <= g.x <= b.x2 and b.y1 <= g.y <= b.y2
            for parent in o.on_top_of:
                assert parent < o.id
                assert axis_iou(b, scene.object(parent).box) > 0
