import sys
from pathlib import Path

src = str((Path(__file__).parent / "../src").resolve())
sys.path.insert(0, src)

from math import isclose, log
from unittest import TestCase

import numpy as np
from hypothesis import given
from hypothesis import strategies as st
from pytest import raises

from multigrasp import selftest
from multigrasp.anchor_codec import H, W, HeadTensor, default_scale_specs, encode_targets, targets_to_tensor
from multigrasp.classes import DimensionMismatch, SceneAnnotation, ShapeMismatch
from multigrasp.dataio import synth_scene
from multigrasp.loss import LossConfig, binary_focal_loss, focal_loss, multitask_loss
from multigrasp.selftest import gradient_error, positive_components, random_head, small_specs

ROUNDED = 0.25 * log(2)


class Test_Focal(TestCase):
    def test_examples(self):
        assert focal_loss(1.0) == 0.0
        assert isclose(focal_loss(0.5), ROUNDED)
        assert isclose(binary_focal_loss([0.5], [1]), ROUNDED)
        assert isclose(binary_focal_loss(np.full(32, 0.5), np.zeros(32)), 32 * ROUNDED)
        assert binary_focal_loss([1.0, 0.0, 0.0], [1, 0, 0]) < 1e-10

    @given(st.floats(min_value=1e-9, max_value=1))
    def test_cross_entropy_limit(self, p):
        assert isclose(focal_loss(p, 0), -log(p), abs_tol=1e-12)

    @given(st.floats(min_value=1e-9, max_value=1), st.floats(min_value=0, max_value=5))
    def test_modulation_only_lowers(self, p, gamma):
        assert 0 <= focal_loss(p, gamma) <= focal_loss(p, 0) + 1e-12

    def test_dimension_mismatch(self):
        with raises(DimensionMismatch):
            binary_focal_loss([0.5, 0.5], [1])


def _assignment(seed=3, n=3):
    specs = default_scale_specs(320, 31)
    scene, _ = synth_scene(seed, n)
    return specs, encode_targets(scene, specs, 31)


def test_perfect_head_has_no_loss():
    _, a = _assignment()
    br = multitask_loss(targets_to_tensor(a), a)
    assert br.total < 1e-6
    assert set(br.terms()) == {
        "coord_mse", "objectness_pos", "objectness_neg", "class_focal", "reasoning_bifocal", "angle_mse", "total"
    }


def test_empty_scene_closed_form():
    specs = default_scale_specs(320, 31)
    a = encode_targets(SceneAnnotation(320, 320, ()), specs, 31)
    h = HeadTensor.zeros(specs, 31)
    br = multitask_loss(h, a)
    assert h.n_slots() == 8300
    assert isclose(br.total, 100 * 8300 * log(2), rel_tol=1e-12)
    assert br.coord_mse == br.class_focal == br.angle_mse == 0.0


def test_negative_weight_scales_linearly():
    specs, a = _assignment()
    rng = np.random.default_rng(2)
    h = HeadTensor.from_flat(rng.normal(0, 1, HeadTensor.zeros(specs, 31).size), specs, 31)
    base = multitask_loss(h, a, LossConfig(lambda_n=100))
    double = multitask_loss(h, a, LossConfig(lambda_n=200))
    assert isclose(double.objectness_neg, 2 * base.objectness_neg, rel_tol=1e-12)
    for term in ("coord_mse", "objectness_pos", "class_focal", "reasoning_bifocal", "angle_mse"):
        assert getattr(double, term) == getattr(base, term)


def test_term_weights():
    specs, a = _assignment()
    rng = np.random.default_rng(4)
    h = HeadTensor.from_flat(rng.normal(0, 1, HeadTensor.zeros(specs, 31).size), specs, 31)
    br = multitask_loss(h, a, LossConfig(angle_weight=0.0, class_weight=2.0))
    expected = br.coord_mse + br.objectness_pos + br.objectness_neg + 2 * br.class_focal + br.reasoning_bifocal
    assert isclose(br.total, expected, rel_tol=1e-12)


def test_mismatched_head():
    _, a = _assignment()
    with raises(ShapeMismatch):
        multitask_loss(HeadTensor.zeros(small_specs(), 3), a)


def test_bad_config():
    with raises(AssertionError):
        LossConfig(lambda_n=-1)
    with raises(AssertionError):
        LossConfig(angle_weight=-0.5)


def test_gradient_matches_finite_differences():
    specs = small_specs()
    rng = np.random.default_rng(1)
    for k, gamma in enumerate((0.0, 0.5, 2.0)):
        scene, _ = synth_scene(k, 1 + k % 3, 3, 32)
        a = encode_targets(scene, specs, 3)
        h = random_head(rng, specs, 3)
        components = positive_components(h, a) + [int(i) for i in rng.choice(h.size, 20, replace=False)]
        assert gradient_error(h, a, LossConfig(lambda_n=1.0, gamma=gamma), sorted(set(components))) < 1e-4


def test_gradient_of_a_perfect_head_vanishes():
    _, a = _assignment()
    grad = multitask_loss(targets_to_tensor(a), a).grad.flat()
    assert np.max(np.abs(grad)) < 1e-6


def test_gradient_error_is_relative(monkeypatch):
    specs = small_specs()
    scene, _ = synth_scene(1, 2, 3, 32)
    a = encode_targets(scene, specs, 3)
    h = random_head(np.random.default_rng(4), specs, 3)
    cfg = LossConfig(lambda_n=1e-4)
    grad = multitask_loss(h, a, cfg).grad.flat()
    small = [i for i in range(h.size) if 1e-6 < abs(grad[i]) < 1e-3]
    assert small
    monkeypatch.setattr(selftest, "finite_difference", lambda h, a, cfg, i, step: grad[i] * 1.001)
    assert isclose(gradient_error(h, a, cfg, small), 1e-3, rel_tol=1e-6)
    flat = [i for i in range(h.size) if grad[i] == 0.0]
    assert gradient_error(h, a, cfg, flat) == 0.0


def test_extreme_scales_stay_finite():
    specs = small_specs()
    scene, _ = synth_scene(0, 1, 3, 32)
    a = encode_targets(scene, specs, 3)
    (t,) = a.od_targets
    h = targets_to_tensor(a)
    od = [o.copy() for o in h.od]
    od[t.scale][t.row, t.col, t.anchor, W] = 800.0
    od[t.scale][t.row, t.col, t.anchor, H] = -800.0
    br = multitask_loss(HeadTensor(specs, 3, od, h.gd), a)
    assert np.isfinite(br.total) and br.coord_mse > 0
    g = br.grad.od[t.scale][t.row, t.col, t.anchor]
    assert g[W] == 0.0 and g[H] == 0.0
