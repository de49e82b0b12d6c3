"""
Multi-scale anchor grids and the transforms between ground truth and raw head values.

A head emits, per grid cell and per anchor, raw t-values. They decode as

    x = (sigmoid(t_x) + c_x) * stride        y = (sigmoid(t_y) + c_y) * stride
    w = p_w * exp(t_w)                       h = p_h * exp(t_h)
    theta = p_theta + t_theta  (mod pi)      pr = sigmoid(t_pr)
    cls = softmax(t_cls)                     fc, cc = sigmoid(t_fc), sigmoid(t_cc)

and encode_targets() inverts these laws for a scene annotation.
t_w and t_h are clipped to [-MAX_LOG_SCALE, MAX_LOG_SCALE] before exp().

Channel layout per OD anchor (width 3C + 7):
    x y w h | pr | cls[C] | fc[C+1] | cc[C+1]
Channel layout per GD anchor-angle slot (width C + 6):
    x y w h | theta | pr | cls[C]
GD slots are ordered anchor-major: slot = anchor * len(gd_angles) + angle.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from math import floor, log, pi
from typing import List, Sequence, Tuple

import numpy as np

from .classes import (
    AxisRect,
    BadInputSize,
    Detection,
    GraspCandidate,
    NonFinite,
    OrientedRect,
    OutOfBounds,
    SceneAnnotation,
    ShapeMismatch,
)
from .functions import logit, normalize_angle, sigmoid, softmax, wrap_angle
from .geometry import axis_iou, centered_box

logger = logging.getLogger(__name__)

# OD channels
X, Y, W, H = 0, 1, 2, 3
OD_PR = 4
# GD channels
THETA = 4
GD_PR = 5

# t-value used for "certainly yes" / "certainly no" in oracle heads
SATURATION = 40.0

# center fractions are clamped before the logit so cell borders stay finite
FRACTION_EPS = 1e-6

# |t_w|, |t_h| are clipped here before exp() by the decoder and the loss
MAX_LOG_SCALE = 10.0

OD_ANCHORS = (
    ((540, 540), (480, 480), (420, 420)),
    ((360, 360), (300, 300), (240, 240)),
    ((180, 180), (120, 120), (60, 60)),
)
GD_ANCHORS = (((300, 300),), ((100, 100),), ())
GD_ANGLES = (0.0, pi / 4, pi / 2, 3 * pi / 4)
STRIDES = (32, 16, 8)
SCALE_IDS = (1, 2, 4)


def od_width(n_classes):
    """Channels per OD anchor: 4 offsets, objectness, classes, FC and CC."""
    return 4 + 1 + n_classes + 2 * (n_classes + 1)


def gd_width(n_classes):
    """Channels per GD anchor-angle slot: 4 offsets, angle, objectness, classes."""
    return 4 + 1 + 1 + n_classes


def od_slices(n_classes):
    """Return the (cls, fc, cc) channel slices of an OD anchor."""
    c = n_classes
    return slice(5, 5 + c), slice(5 + c, 6 + 2 * c), slice(6 + 2 * c, 7 + 3 * c)


def gd_class_slice(n_classes):
    return slice(6, 6 + n_classes)


@dataclass(frozen=True)
class ScaleSpec:
    """Anchor priors and grid geometry of one prediction scale."""

    scale_id: int
    stride: int
    grid_w: int
    grid_h: int
    od_anchors: Tuple[Tuple[float, float], ...]
    gd_anchors: Tuple[Tuple[float, float], ...] = ()
    gd_angles: Tuple[float, ...] = ()

    def __post_init__(self):
        assert self.scale_id in (1, 2, 4), f"unknown scale {self.scale_id}"
        assert self.stride > 0 and self.grid_w > 0 and self.grid_h > 0
        assert all(w > 0 and h > 0 for w, h in self.od_anchors + self.gd_anchors)
        assert all(0 <= a < pi for a in self.gd_angles), "angle anchors must lie in [0, pi)"
        assert not (self.scale_id == 4 and self.gd_anchors), "no grasp anchors at scale x4"
        assert not self.gd_anchors or self.gd_angles, "grasp anchors need angle anchors"

    @property
    def input_w(self):
        return self.stride * self.grid_w

    @property
    def input_h(self):
        return self.stride * self.grid_h

    @property
    def n_od(self):
        return len(self.od_anchors)

    @property
    def n_gd(self):
        return len(self.gd_anchors) * len(self.gd_angles)

    def gd_slot(self, anchor, angle):
        return anchor * len(self.gd_angles) + angle

    def od_shape(self, n_classes):
        return (self.grid_h, self.grid_w, self.n_od, od_width(n_classes))

    def gd_shape(self, n_classes):
        return (self.grid_h, self.grid_w, self.n_gd, gd_width(n_classes))

    def cell_of(self, x, y):
        """(row, col) of the cell containing pixel (x, y)."""
        return int(floor(y / self.stride)), int(floor(x / self.stride))


def default_scale_specs(input_size=608, n_classes=31) -> List[ScaleSpec]:
    """The three prediction scales x1, x2, x4 with strides 32, 16, 8.

    >>> [(s.grid_w, s.grid_h) for s in default_scale_specs(608)]
    [(19, 19), (38, 38), (76, 76)]
    """
    assert n_classes >= 1, "need at least one class"
    if input_size <= 0 or input_size % 32:
        raise BadInputSize(f"input size {input_size} is not a positive multiple of 32")
    specs = []
    for scale_id, stride, od, gd in zip(SCALE_IDS, STRIDES, OD_ANCHORS, GD_ANCHORS):
        n = input_size // stride
        specs.append(
            ScaleSpec(
                scale_id,
                stride,
                n,
                n,
                od_anchors=tuple((float(w), float(h)) for w, h in od),
                gd_anchors=tuple((float(w), float(h)) for w, h in gd),
                gd_angles=GD_ANGLES if gd else (),
            )
        )
    return specs


class HeadTensor:
    """The raw multi-scale outputs of a detector head.

    od[i] has shape (grid_h, grid_w, n_od, 3C + 7) and gd[i] shape
    (grid_h, grid_w, n_gd, C + 6) for the i-th ScaleSpec. The arrays are
    read-only; build a new tensor to change values.
    """

    __slots__ = ["specs", "n_classes", "od", "gd"]

    def __init__(self, specs: Sequence[ScaleSpec], n_classes: int, od, gd):
        specs = tuple(specs)
        if len(od) != len(specs) or len(gd) != len(specs):
            raise ShapeMismatch(f"{len(specs)} scales but {len(od)} OD and {len(gd)} GD arrays")
        frozen_od, frozen_gd = [], []
        for spec, o, g in zip(specs, od, gd):
            o = np.array(o, dtype=float)
            g = np.array(g, dtype=float)
            if o.shape != spec.od_shape(n_classes):
                raise ShapeMismatch(f"scale x{spec.scale_id}: OD shape {o.shape}, expected {spec.od_shape(n_classes)}")
            if g.shape != spec.gd_shape(n_classes):
                raise ShapeMismatch(f"scale x{spec.scale_id}: GD shape {g.shape}, expected {spec.gd_shape(n_classes)}")
            if not (np.all(np.isfinite(o)) and np.all(np.isfinite(g))):
                raise NonFinite(f"scale x{spec.scale_id} holds non-finite values")
            o.setflags(write=False)
            g.setflags(write=False)
            frozen_od.append(o)
            frozen_gd.append(g)
        self.specs = specs
        self.n_classes = n_classes
        self.od = tuple(frozen_od)
        self.gd = tuple(frozen_gd)

    @classmethod
    def zeros(cls, specs, n_classes):
        specs = tuple(specs)
        return cls(
            specs,
            n_classes,
            [np.zeros(s.od_shape(n_classes)) for s in specs],
            [np.zeros(s.gd_shape(n_classes)) for s in specs],
        )

    @classmethod
    def from_flat(cls, values, specs, n_classes):
        """Rebuild a tensor from flat() order: per scale, the OD block then the GD block."""
        specs = tuple(specs)
        values = np.asarray(values, dtype=float).ravel()
        expected = sum(int(np.prod(s.od_shape(n_classes))) + int(np.prod(s.gd_shape(n_classes))) for s in specs)
        if values.size != expected:
            raise ShapeMismatch(f"{values.size} values for a tensor of {expected}")
        od, gd, at = [], [], 0
        for s in specs:
            for shape, out in ((s.od_shape(n_classes), od), (s.gd_shape(n_classes), gd)):
                n = int(np.prod(shape))
                out.append(values[at:at + n].reshape(shape))
                at += n
        return cls(specs, n_classes, od, gd)

    def flat(self):
        parts = []
        for o, g in zip(self.od, self.gd):
            parts.append(o.ravel())
            parts.append(g.ravel())
        return np.concatenate(parts)

    @property
    def size(self):
        return sum(o.size + g.size for o, g in zip(self.od, self.gd))

    def n_slots(self):
        """Number of objectness slots (OD anchors plus GD anchor-angle slots)."""
        return sum(o.shape[0] * o.shape[1] * o.shape[2] + g.shape[0] * g.shape[1] * g.shape[2]
                   for o, g in zip(self.od, self.gd))

    def __eq__(self, other):
        return (
            isinstance(other, HeadTensor)
            and self.specs == other.specs
            and self.n_classes == other.n_classes
            and all(np.array_equal(a, b) for a, b in zip(self.od + self.gd, other.od + other.gd))
        )

    def __repr__(self):
        scales = ", ".join(f"x{s.scale_id}:{s.grid_w}x{s.grid_h}" for s in self.specs)
        return f"HeadTensor({scales}, classes={self.n_classes})"


def check_consistent(h: HeadTensor, specs):
    specs = tuple(specs)
    if h.specs != specs:
        raise ShapeMismatch("tensor was built for different scale specs")


########################
# DECODING             #
########################


def scaled_extent(prior, t):
    """p * exp(t) with t clipped to [-MAX_LOG_SCALE, MAX_LOG_SCALE].

    >>> float(scaled_extent(2.0, 0.0))
    2.0
    >>> bool(np.isfinite(scaled_extent(60.0, 800.0)))
    True
    """
    return prior * np.exp(np.clip(t, -MAX_LOG_SCALE, MAX_LOG_SCALE))


def decode_od(h: HeadTensor, specs, conf_threshold=0.5, *, clamp=True) -> List[Detection]:
    """Decode every OD anchor whose objectness reaches conf_threshold.

    Output order is scale-major, then row-major cells, then anchors.
    Boxes are clamped to the image unless clamp is False.
    """
    check_consistent(h, specs)
    cls_s, fc_s, cc_s = od_slices(h.n_classes)
    detections = []
    for spec, t in zip(h.specs, h.od):
        pr = sigmoid(t[..., OD_PR])
        rows, cols, anchors = np.nonzero(pr >= conf_threshold)
        if not rows.size:
            continue
        sel = t[rows, cols, anchors]
        prior = np.array(spec.od_anchors, dtype=float)[anchors]
        cx = (sigmoid(sel[:, X]) + cols) * spec.stride
        cy = (sigmoid(sel[:, Y]) + rows) * spec.stride
        w = scaled_extent(prior[:, 0], sel[:, W])
        hh = scaled_extent(prior[:, 1], sel[:, H])
        scores = softmax(sel[:, cls_s])
        fc = sigmoid(sel[:, fc_s])
        cc = sigmoid(sel[:, cc_s])
        for i in range(rows.size):
            x1, y1 = cx[i] - w[i] / 2, cy[i] - hh[i] / 2
            x2, y2 = cx[i] + w[i] / 2, cy[i] + hh[i] / 2
            if clamp:
                x1, y1 = max(x1, 0.0), max(y1, 0.0)
                x2, y2 = min(x2, float(spec.input_w)), min(y2, float(spec.input_h))
            if not (x1 < x2 and y1 < y2):
                logger.debug("skipping degenerate OD box at x%d (%d, %d)", spec.scale_id, rows[i], cols[i])
                continue
            detections.append(
                Detection(
                    class_id=int(np.argmax(scores[i])),
                    class_scores=scores[i],
                    pr=float(pr[rows[i], cols[i], anchors[i]]),
                    box=AxisRect(x1, y1, x2, y2),
                    fc_scores=fc[i],
                    cc_scores=cc[i],
                    slot=(spec.scale_id, int(rows[i]), int(cols[i]), int(anchors[i])),
                )
            )
    return detections


def decode_gd(h: HeadTensor, specs, conf_threshold=0.5) -> List[GraspCandidate]:
    """Decode every GD anchor-angle slot whose graspable probability reaches conf_threshold."""
    check_consistent(h, specs)
    cls_s = gd_class_slice(h.n_classes)
    grasps = []
    for spec, t in zip(h.specs, h.gd):
        if not spec.n_gd:
            continue
        pr = sigmoid(t[..., GD_PR])
        rows, cols, slots = np.nonzero(pr >= conf_threshold)
        if not rows.size:
            continue
        sel = t[rows, cols, slots]
        n_angles = len(spec.gd_angles)
        anchor_idx, angle_idx = slots // n_angles, slots % n_angles
        prior = np.array(spec.gd_anchors, dtype=float)[anchor_idx]
        angle_prior = np.array(spec.gd_angles, dtype=float)[angle_idx]
        cx = (sigmoid(sel[:, X]) + cols) * spec.stride
        cy = (sigmoid(sel[:, Y]) + rows) * spec.stride
        w = scaled_extent(prior[:, 0], sel[:, W])
        hh = scaled_extent(prior[:, 1], sel[:, H])
        theta = normalize_angle(angle_prior + sel[:, THETA])
        scores = softmax(sel[:, cls_s])
        for i in range(rows.size):
            if not (w[i] > 0 and hh[i] > 0):
                logger.debug("skipping degenerate GD rectangle at x%d (%d, %d)", spec.scale_id, rows[i], cols[i])
                continue
            grasps.append(
                GraspCandidate(
                    rect=OrientedRect(cx[i], cy[i], w[i], hh[i], theta[i]),
                    pr=float(pr[rows[i], cols[i], slots[i]]),
                    class_id=int(np.argmax(scores[i])),
                    class_scores=scores[i],
                    slot=(spec.scale_id, int(rows[i]), int(cols[i]), int(anchor_idx[i]), int(angle_idx[i])),
                )
            )
    return grasps


########################
# ENCODING             #
########################


@dataclass(frozen=True, eq=False)
class OdTarget:
    """A positive OD anchor and the values its head should emit."""

    scale: int  # index into the spec list
    row: int
    col: int
    anchor: int
    tx: float
    ty: float
    tw: float
    th: float
    class_id: int
    fc: np.ndarray  # multi-hot over C + 1
    cc: np.ndarray
    object_id: int


@dataclass(frozen=True, eq=False)
class GdTarget:
    """A positive GD anchor-angle slot and the values its head should emit."""

    scale: int
    row: int
    col: int
    anchor: int
    angle: int
    slot: int
    tx: float
    ty: float
    tw: float
    th: float
    ttheta: float
    class_id: int
    object_id: int
    grasp_index: int


@dataclass(frozen=True, eq=False)
class TargetAssignment:
    """Positive slots with their targets, and negative masks for everything else.

    od_negative[i] has shape (grid_h, grid_w, n_od), gd_negative[i] shape
    (grid_h, grid_w, n_gd); True marks a negative objectness slot.
    """

    specs: Tuple[ScaleSpec, ...]
    n_classes: int
    od_targets: Tuple[OdTarget, ...]
    gd_targets: Tuple[GdTarget, ...]
    od_negative: Tuple[np.ndarray, ...]
    gd_negative: Tuple[np.ndarray, ...]
    dropped: int = 0

    @property
    def positives(self):
        keys = {("od", t.scale, t.row, t.col, t.anchor) for t in self.od_targets}
        return keys | {("gd", t.scale, t.row, t.col, t.slot) for t in self.gd_targets}

    @property
    def negatives(self):
        keys = set()
        for kind, masks in (("od", self.od_negative), ("gd", self.gd_negative)):
            for s, mask in enumerate(masks):
                keys |= {(kind, s, int(r), int(c), int(a)) for r, c, a in zip(*np.nonzero(mask))}
        return keys


def nearest_angle(theta, angles):
    """Index of the angle anchor nearest to theta (mod pi) and the signed residual.

    With four anchors the residual lies in (-pi/8, pi/8].

    >>> nearest_angle(0.5, (0.0, pi / 4, pi / 2, 3 * pi / 4))[0]
    1
    """
    residuals = [wrap_angle(theta - a) for a in angles]
    k = min(range(len(angles)), key=lambda i: (abs(residuals[i]), residuals[i] < 0, i))
    return k, residuals[k]


def _relation_targets(scene, n_classes):
    """FC and CC multi-hot vectors per object id; the last slot is "no class"."""
    fc, cc = {}, {}
    by_id = {o.id: o for o in scene.objects}
    for o in scene.objects:
        under = np.zeros(n_classes + 1)
        for parent in o.on_top_of:
            under[by_id[parent].class_id] = 1.0
        over = np.zeros(n_classes + 1)
        for child in scene.resting_on(o.id):
            over[by_id[child].class_id] = 1.0
        if not under.any():
            under[n_classes] = 1.0
        if not over.any():
            over[n_classes] = 1.0
        fc[o.id], cc[o.id] = under, over
    return fc, cc


def _fractions(spec, x, y):
    row, col = spec.cell_of(x, y)
    fx = x / spec.stride - col
    fy = y / spec.stride - row
    return row, col, fx, fy


def encode_targets(scene: SceneAnnotation, specs, n_classes=None) -> TargetAssignment:
    """Assign every ground-truth object and grasp to a responsible head slot.

    Objects go to the center cell of the OD anchor (over all scales) with the
    largest IOU against the box, both centered at the origin. Grasps go to the
    GD anchor with the largest IOU and the nearest angle anchor. A slot that's
    already taken falls back to the next best anchor; when none is left the
    target is dropped with a warning and counted.
    """
    specs = tuple(specs)
    n_classes = n_classes if n_classes is not None else 1 + max((o.class_id for o in scene.objects), default=0)
    width, height = specs[0].input_w, specs[0].input_h
    if (scene.image_w, scene.image_h) != (width, height):
        raise ShapeMismatch(f"scene is {scene.image_w}x{scene.image_h}, head expects {width}x{height}")
    for o in scene.objects:
        if not 0 <= o.class_id < n_classes:
            raise ShapeMismatch(f"object {o.id} has class {o.class_id}, head has {n_classes} classes")
        b = o.box
        if b.x1 < 0 or b.y1 < 0 or b.x2 > width or b.y2 > height:
            raise OutOfBounds(f"object {o.id} box {b.as_tuple()} leaves the {width}x{height} image")
        for g in o.grasps:
            if not (0 <= g.x < width and 0 <= g.y < height):
                raise OutOfBounds(f"object {o.id} grasp center ({g.x}, {g.y}) is outside the image")

    fc, cc = _relation_targets(scene, n_classes)
    taken = set()
    dropped = 0

    od_candidates = [(s, a) for s, spec in enumerate(specs) for a in range(spec.n_od)]
    od_targets = []
    for o in scene.objects:
        box = centered_box(o.box.w, o.box.h)
        ranked = sorted(
            od_candidates,
            key=lambda sa: (-axis_iou(box, centered_box(*specs[sa[0]].od_anchors[sa[1]])), sa),
        )
        cx, cy = o.box.center
        for s, a in ranked:
            spec = specs[s]
            row, col, fx, fy = _fractions(spec, cx, cy)
            key = ("od", s, row, col, a)
            if key in taken:
                continue
            taken.add(key)
            pw, ph = spec.od_anchors[a]
            od_targets.append(
                OdTarget(
                    s, row, col, a,
                    tx=logit(fx, eps=FRACTION_EPS),
                    ty=logit(fy, eps=FRACTION_EPS),
                    tw=log(o.box.w / pw),
                    th=log(o.box.h / ph),
                    class_id=o.class_id,
                    fc=fc[o.id],
                    cc=cc[o.id],
                    object_id=o.id,
                )
            )
            break
        else:
            dropped += 1
            logger.warning("encoding conflict: object %s has no free OD anchor, dropped", o.id)

    gd_candidates = [(s, a) for s, spec in enumerate(specs) for a in range(len(spec.gd_anchors))]
    gd_targets = []
    for o in scene.objects:
        for gi, g in enumerate(o.grasps):
            size = centered_box(g.w, g.h)
            ranked = sorted(
                gd_candidates,
                key=lambda sa: (-axis_iou(size, centered_box(*specs[sa[0]].gd_anchors[sa[1]])), sa),
            )
            for s, a in ranked:
                spec = specs[s]
                k, residual = nearest_angle(g.theta, spec.gd_angles)
                row, col, fx, fy = _fractions(spec, g.x, g.y)
                slot = spec.gd_slot(a, k)
                key = ("gd", s, row, col, slot)
                if key in taken:
                    continue
                taken.add(key)
                pw, ph = spec.gd_anchors[a]
                gd_targets.append(
                    GdTarget(
                        s, row, col, a, k, slot,
                        tx=logit(fx, eps=FRACTION_EPS),
                        ty=logit(fy, eps=FRACTION_EPS),
                        tw=log(g.w / pw),
                        th=log(g.h / ph),
                        ttheta=residual,
                        class_id=o.class_id,
                        object_id=o.id,
                        grasp_index=gi,
                    )
                )
                break
            else:
                dropped += 1
                logger.warning("encoding conflict: grasp %s of object %s has no free GD slot, dropped", gi, o.id)

    od_negative = [np.ones((s.grid_h, s.grid_w, s.n_od), dtype=bool) for s in specs]
    gd_negative = [np.ones((s.grid_h, s.grid_w, s.n_gd), dtype=bool) for s in specs]
    for t in od_targets:
        od_negative[t.scale][t.row, t.col, t.anchor] = False
    for t in gd_targets:
        gd_negative[t.scale][t.row, t.col, t.slot] = False
    for m in od_negative + gd_negative:
        m.setflags(write=False)
    if dropped:
        logger.info("%d targets dropped while encoding", dropped)
    return TargetAssignment(
        specs, n_classes, tuple(od_targets), tuple(gd_targets),
        tuple(od_negative), tuple(gd_negative), dropped,
    )


def targets_to_tensor(a: TargetAssignment, saturation=SATURATION) -> HeadTensor:
    """A head that decodes exactly to the assignment with saturated probabilities.

    Positive slots carry their targets and t_pr = +saturation; every negative
    slot has t_pr = -saturation. Class, FC and CC logits are +/- saturation.
    """
    c = a.n_classes
    cls_s, fc_s, cc_s = od_slices(c)
    gd_cls = gd_class_slice(c)
    od = [np.zeros(s.od_shape(c)) for s in a.specs]
    gd = [np.zeros(s.gd_shape(c)) for s in a.specs]
    for arr in od:
        arr[..., OD_PR] = -saturation
    for arr in gd:
        arr[..., GD_PR] = -saturation
    for t in a.od_targets:
        v = od[t.scale][t.row, t.col, t.anchor]
        v[[X, Y, W, H]] = (t.tx, t.ty, t.tw, t.th)
        v[OD_PR] = saturation
        onehot = np.zeros(c)
        onehot[t.class_id] = 1.0
        v[cls_s] = saturation * (2 * onehot - 1)
        v[fc_s] = saturation * (2 * t.fc - 1)
        v[cc_s] = saturation * (2 * t.cc - 1)
    for t in a.gd_targets:
        v = gd[t.scale][t.row, t.col, t.slot]
        v[[X, Y, W, H]] = (t.tx, t.ty, t.tw, t.th)
        v[THETA] = t.ttheta
        v[GD_PR] = saturation
        onehot = np.zeros(c)
        onehot[t.class_id] = 1.0
        v[gd_cls] = saturation * (2 * onehot - 1)
    return HeadTensor(a.specs, c, od, gd)
