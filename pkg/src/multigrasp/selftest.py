"""
Acceptance suites run by `multigrasp selftest`.

Every check returns a SuiteResult; `quick=True` shrinks sample counts so the
whole run takes seconds instead of minutes. The helpers here (Monte-Carlo IOU,
finite differences, stacking forests) are shared with the test-suite.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from itertools import product
from math import cos, pi, sin

import numpy as np
import pandas as pd

from .anchor_codec import (
    GD_ANGLES,
    THETA,
    HeadTensor,
    ScaleSpec,
    decode_gd,
    decode_od,
    default_scale_specs,
    encode_targets,
    targets_to_tensor,
)
from .classes import AxisRect, GraspError, MalformedLine, OrientedRect, TruncatedFile
from .dataio import parse_cornell_rect_file, save_scene, synth_scene
from .evaluation import EvalConfig, average_precision, grasp_match, mapg
from .geometry import angle_difference, rotated_iou
from .loss import LossConfig, focal_loss, multitask_loss
from .planner import SceneState, StateObject, simulate
from .postprocess import run_pipeline
from .toytrain import TrainConfig, standard_suite, train_direct, verify_recovery

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float


########################
# SHARED HELPERS       #
########################


def random_rect(rng, near=None, extent=100.0):
    """A random OrientedRect, optionally close to another one."""
    if near is None:
        x, y = rng.uniform(0, extent, 2)
    else:
        x, y = near.x + rng.normal(0, near.w / 3), near.y + rng.normal(0, near.h / 3)
    w, h = rng.uniform(5, 40, 2)
    return OrientedRect(x, y, w, h, rng.uniform(0, pi))


def _inside(points, r: OrientedRect):
    d = points - np.array([r.x, r.y])
    u = d[:, 0] * cos(r.theta) + d[:, 1] * sin(r.theta)
    v = -d[:, 0] * sin(r.theta) + d[:, 1] * cos(r.theta)
    return (np.abs(u) <= r.w / 2) & (np.abs(v) <= r.h / 2)


def monte_carlo_iou(a: OrientedRect, b: OrientedRect, samples=10**6, seed=0):
    """IOU estimated from uniform points over a square holding both rectangles."""
    rng = np.random.default_rng(seed)
    reach = max(np.hypot(a.w, a.h), np.hypot(b.w, b.h)) / 2
    lo = min(a.x, a.y, b.x, b.y) - reach
    hi = max(a.x, a.y, b.x, b.y) + reach
    points = rng.uniform(lo, hi, (samples, 2))
    ina, inb = _inside(points, a), _inside(points, b)
    either = np.count_nonzero(ina | inb)
    return np.count_nonzero(ina & inb) / either if either else 0.0


def small_specs():
    """Three scales over a 32 x 32 input (grids 1, 2 and 4) with anchors sized for it."""
    return [
        ScaleSpec(1, 32, 1, 1, ((24.0, 24.0), (16.0, 16.0)), ((8.0, 8.0),), GD_ANGLES),
        ScaleSpec(2, 16, 2, 2, ((12.0, 12.0), (8.0, 8.0)), ((4.0, 4.0),), GD_ANGLES),
        ScaleSpec(4, 8, 4, 4, ((6.0, 6.0), (4.0, 4.0))),
    ]


def random_head(rng, specs, n_classes):
    """Standard-normal head values with angle offsets kept inside (-0.5, 0.5)."""
    h = HeadTensor.zeros(specs, n_classes)
    od = [rng.normal(0.0, 1.0, o.shape) for o in h.od]
    gd = [rng.normal(0.0, 1.0, g.shape) for g in h.gd]
    for g in gd:
        g[..., THETA] = rng.uniform(-0.5, 0.5, g.shape[:-1])
    return HeadTensor(specs, n_classes, od, gd)


def finite_difference(h: HeadTensor, a, cfg: LossConfig, index, step=1e-5):
    """Central difference of the total loss along one flat component."""
    values = h.flat()
    up, down = values.copy(), values.copy()
    up[index] += step
    down[index] -= step
    f_up = multitask_loss(HeadTensor.from_flat(up, h.specs, h.n_classes), a, cfg).total
    f_down = multitask_loss(HeadTensor.from_flat(down, h.specs, h.n_classes), a, cfg).total
    return (f_up - f_down) / (2 * step)


def positive_components(h: HeadTensor, a):
    """Flat indices of every channel of every positive slot."""
    offsets, at = [], 0
    for o, g in zip(h.od, h.gd):
        offsets.append((at, at + o.size))
        at += o.size + g.size
    out = []
    for t in a.od_targets:
        start = offsets[t.scale][0] + np.ravel_multi_index((t.row, t.col, t.anchor, 0), h.od[t.scale].shape)
        out.extend(range(start, start + h.od[t.scale].shape[-1]))
    for t in a.gd_targets:
        start = offsets[t.scale][1] + np.ravel_multi_index((t.row, t.col, t.slot, 0), h.gd[t.scale].shape)
        out.extend(range(start, start + h.gd[t.scale].shape[-1]))
    return out


def gradient_error(h, a, cfg, components, step=1e-5, floor=1e-6):
    """Worst |analytic - numeric| / |analytic| over the given components.

    Components whose analytic gradient is at most `floor` in magnitude are skipped.
    """
    grad = multitask_loss(h, a, cfg).grad.flat()
    worst = 0.0
    for i in components:
        if abs(grad[i]) <= floor:
            continue
        numeric = finite_difference(h, a, cfg, i, step)
        worst = max(worst, abs(grad[i] - numeric) / abs(grad[i]))
    return worst


def stack_forests(n):
    """Every stacking forest on n ordered objects: parents[i] is None or an earlier index."""
    return product(*[[None] + list(range(i)) for i in range(n)])


def forest_state(parents, occluding=True):
    """A SceneState for a forest; occluding children hide their support completely."""
    objects, boxes = [], []
    roots = 0
    for i, p in enumerate(parents):
        if p is None:
            box = AxisRect(200.0 * roots, 0.0, 200.0 * roots + 100.0, 100.0)
            roots += 1
        elif occluding:
            under = boxes[p]
            box = AxisRect(under.x1 - 1.0, under.y1 - 1.0, under.x2 + 1.0, under.y2 + 1.0)
        else:
            under = boxes[p]
            box = AxisRect(under.x1 + 10.0, under.y1 + 10.0, under.x1 + 50.0, under.y1 + 50.0)
        boxes.append(box)
        objects.append(StateObject(i, i, box, () if p is None else (p,)))
    return SceneState(objects, n_classes=len(parents))


########################
# SUITES               #
########################


def check_geometry(quick=False):
    rng = np.random.default_rng(0)
    pairs, samples = (20, 10**5) if quick else (200, 10**6)
    worst = 0.0
    for k in range(pairs):
        a = random_rect(rng)
        b = random_rect(rng, near=a)
        worst = max(worst, abs(rotated_iou(a, b) - monte_carlo_iou(a, b, samples, seed=k)))
    cross = rotated_iou(OrientedRect(0, 0, 4, 2, 0), OrientedRect(0, 0, 4, 2, pi / 2))
    ok = worst <= (0.02 if quick else 0.01) and abs(cross - 1 / 3) < 1e-9
    return ok, f"worst deviation {worst:.4f} over {pairs} pairs, perpendicular case {cross:.9f}"


def check_codec(quick=False):
    specs = default_scale_specs(320, 31)
    scenes = 50 if quick else 1000
    worst_px = worst_rad = 0.0
    dropped = 0
    for seed in range(scenes):
        scene, _ = synth_scene(seed, 1 + seed % 5, 31, 320)
        a = encode_targets(scene, specs, 31)
        dropped += a.dropped
        h = targets_to_tensor(a)
        boxes = {d.slot: d.box for d in decode_od(h, specs)}
        for t in a.od_targets:
            got = boxes[(specs[t.scale].scale_id, t.row, t.col, t.anchor)]
            want = scene.object(t.object_id).box
            worst_px = max(worst_px, max(abs(p - q) for p, q in zip(got.as_tuple(), want.as_tuple())))
        rects = {g.slot: g.rect for g in decode_gd(h, specs)}
        for t in a.gd_targets:
            got = rects[(specs[t.scale].scale_id, t.row, t.col, t.anchor, t.angle)]
            want = scene.object(t.object_id).grasps[t.grasp_index]
            worst_px = max(worst_px, max(abs(p - q) for p, q in zip(got.as_tuple()[:4], want.as_tuple()[:4])))
            worst_rad = max(worst_rad, angle_difference(got.theta, want.theta))
    ok = worst_px <= 1e-6 and worst_rad <= 1e-9 and dropped == 0
    return ok, f"{scenes} scenes, worst {worst_px:.2e} px / {worst_rad:.2e} rad, {dropped} dropped"


def check_gradients(quick=False):
    rng = np.random.default_rng(1)
    specs = small_specs()
    pairs = 5 if quick else 50
    worst = 0.0
    for k in range(pairs):
        scene, _ = synth_scene(k, 1 + k % 3, 3, 32)
        a = encode_targets(scene, specs, 3)
        h = random_head(rng, specs, 3)
        cfg = LossConfig(lambda_n=1.0, gamma=(0.0, 0.5, 2.0)[k % 3])
        components = positive_components(h, a)
        components += [int(i) for i in rng.choice(h.size, 20, replace=False)]
        worst = max(worst, gradient_error(h, a, cfg, sorted(set(components))))
    return worst <= 1e-4, f"{pairs} pairs, worst relative error {worst:.2e}"


def check_loss_anchors(quick=False):
    specs = default_scale_specs(320, 31)
    scene, _ = synth_scene(3, 3, 31, 320)
    a = encode_targets(scene, specs, 31)
    perfect = multitask_loss(targets_to_tensor(a), a).total

    rng = np.random.default_rng(2)
    h = HeadTensor.from_flat(rng.normal(0, 1, HeadTensor.zeros(specs, 31).size), specs, 31)
    base = multitask_loss(h, a, LossConfig(lambda_n=100))
    double = multitask_loss(h, a, LossConfig(lambda_n=200))
    scaling = (
        abs(double.objectness_neg - 2 * base.objectness_neg) <= 1e-9 * base.objectness_neg
        and all(getattr(double, k) == getattr(base, k)
                for k in ("coord_mse", "objectness_pos", "class_focal", "reasoning_bifocal", "angle_mse"))
    )
    ce = max(abs(focal_loss(p, 0) + np.log(p)) for p in rng.uniform(0.01, 1, 100))
    ok = perfect < 1e-6 and scaling and ce < 1e-12
    return ok, f"perfect total {perfect:.2e}, lambda scaling {'exact' if scaling else 'broken'}, CE gap {ce:.1e}"


def check_closed_loop(quick=False):
    specs = default_scale_specs(320, 31)
    scenes = 20 if quick else 200
    failures = []
    outputs, truths = [], []
    for seed in range(scenes):
        scene, _ = synth_scene(seed, 2 + seed % 4, 31, 320)
        g = run_pipeline(targets_to_tensor(encode_targets(scene, specs, 31)), specs)
        outputs.append(g.nodes)
        truths.append(scene)
        if not recovers(g, scene):
            failures.append(seed)
    score = mapg(outputs, truths).mapg
    return not failures and score == 1.0, f"{scenes} scenes, failures {failures[:5]}, mAPg {score:.6f}"


def recovers(g, scene, tol=1e-6) -> bool:
    """True if a relation graph holds exactly the scene's objects, a grasp of each and its support edges."""
    if len(g.nodes) != len(scene.objects):
        return False
    by_class = {n.class_id: n for n in g.nodes}
    owner = {}
    for o in scene.objects:
        n = by_class.get(o.class_id)
        if n is None or max(abs(p - q) for p, q in zip(n.box.as_tuple(), o.box.as_tuple())) > tol:
            return False
        if n.best_grasp is None or not any(
            max(abs(p - q) for p, q in zip(n.best_grasp.rect.as_tuple()[:4], r.as_tuple()[:4])) <= tol
            and angle_difference(n.best_grasp.rect.theta, r.theta) <= 1e-9
            for r in o.grasps
        ):
            return False
        owner[n.id] = o.id
    edges = {(owner[c], owner[p]) for c, p in g.edges}
    return edges == {(o.id, p) for o in scene.objects for p in o.on_top_of}


def check_metrics(quick=False):
    ap = average_precision([0.9, 0.8, 0.7], [True, False, True], 2)
    r = OrientedRect(50, 50, 30, 10, 0.4)
    table = (
        grasp_match(r, [r]),
        not grasp_match(OrientedRect(50, 50, 30, 10, 0.4 + pi / 4), [r]),
        grasp_match(OrientedRect(50, 50, 30, 10, 0.4 + pi), [r]),
    )
    return abs(ap - 5 / 6) < 1e-9 and all(table), f"AP {ap:.9f}, rectangle metric table {table}"


def check_training(quick=False):
    suite = standard_suite()[:2] if quick else standard_suite()
    cfg = TrainConfig(steps=200 if quick else 500)
    converged = recovered = total_objects = 0
    for seed, scene in suite:
        specs = default_scale_specs(scene.image_w, 31)
        a = encode_targets(scene, specs, 31)
        trace = train_direct(a, specs, TrainConfig(cfg.steps, seed=seed))
        converged += trace.totals[-1] <= 0.1 * trace.totals[0]
        report = verify_recovery(trace, scene, specs, EvalConfig())
        recovered += sum(o.success for o in report.objects)
        total_objects += len(report.objects)
    needed = len(suite) - 1 if len(suite) > 2 else len(suite)
    ok = converged >= needed and recovered >= 0.9 * total_objects
    return ok, f"{converged}/{len(suite)} converged, {recovered}/{total_objects} objects recovered"


def check_planner(quick=False):
    largest = 3 if quick else 5
    episodes = failures = 0
    for n in range(1, largest + 1):
        for parents in stack_forests(n):
            for occluding in (True, False):
                state = forest_state(parents, occluding)
                for target in range(n):
                    ep = simulate(state, target, max_steps=n)
                    episodes += 1
                    if not ep.success or ep.steps > n:
                        failures += 1
                        logger.warning("planner failed on forest %s, target %d", parents, target)
    return failures == 0, f"{episodes} episodes, {failures} failures"


def check_determinism(quick=False):
    docs = {save_scene(synth_scene(7, 3)[0]) for _ in range(2)}
    specs = small_specs()
    scene, _ = synth_scene(0, 1, 3, 32)
    a = encode_targets(scene, specs, 3)
    traces = [train_direct(a, specs, TrainConfig(steps=10)).totals for _ in range(2)]
    same = len(docs) == 1 and np.array_equal(traces[0], traces[1])
    return same, "identical documents and traces" if same else "outputs differ between runs"


def check_cornell(quick=False):
    clean = "2 1\n-2 1\n-2 -1\n2 -1\n"
    rects, skipped = parse_cornell_rect_file("NaN 1\n-2 1\n-2 -1\n2 -1\n" + clean)
    codes = []
    for text in (clean + "1 1\n2 2\n", "2 1\n-2 x\n-2 -1\n2 -1\n"):
        try:
            parse_cornell_rect_file(text)
            codes.append(None)
        except (TruncatedFile, MalformedLine) as e:
            codes.append((e.code, e.line))
    expected = [("truncated-file", 5), ("malformed-line", 2)]
    ok = len(rects) == 1 and skipped == 1 and codes == expected
    return ok, f"{len(rects)} rect, {skipped} skipped, errors {codes}"


SUITES = (
    ("geometry-oracle", check_geometry),
    ("codec-bijection", check_codec),
    ("gradient-check", check_gradients),
    ("loss-anchors", check_loss_anchors),
    ("closed-loop", check_closed_loop),
    ("metric-fixtures", check_metrics),
    ("toy-training", check_training),
    ("planner-soundness", check_planner),
    ("determinism", check_determinism),
    ("cornell-parser", check_cornell),
)


def run_selftest(quick=False, only=None):
    """Run the suites in order; a suite that raises counts as failed."""
    results = []
    for name, check in SUITES:
        if only and name not in only:
            continue
        start = time.perf_counter()
        try:
            passed, detail = check(quick)
        except (GraspError, AssertionError) as e:
            passed, detail = False, f"{type(e).__name__}: {e}"
        seconds = time.perf_counter() - start
        logger.info("%s: %s (%.1fs)", name, "ok" if passed else "FAILED", seconds)
        results.append(SuiteResult(name, bool(passed), detail, seconds))
    return results


def results_frame(results) -> pd.DataFrame:
    return pd.DataFrame(
        [(r.name, "ok" if r.passed else "FAILED", f"{r.seconds:.1f}s", r.detail) for r in results],
        columns=["suite", "status", "time", "detail"],
    )
