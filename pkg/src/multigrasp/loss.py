"""
The multi-task detection loss and its exact gradient with respect to every raw head value.

Terms, summed over the positive slots of a TargetAssignment unless noted:

    coord_mse          (sigmoid(t_x) - fx)^2 + (sigmoid(t_y) - fy)^2 in cell units,
                       plus (p_w/S)^2 (e^t_w - e^t^_w)^2 and the same for h, S the input size
                       (t_w, t_h clipped to +-MAX_LOG_SCALE like the decoder)
    objectness_pos     -ln sigmoid(t_pr)
    objectness_neg     lambda_n * -ln(1 - sigmoid(t_pr)), over every negative OD and GD slot
    class_focal        focal loss of softmax(t_cls), OD and GD positives
    reasoning_bifocal  binary focal loss of sigmoid(t_fc) and sigmoid(t_cc), OD positives
    angle_mse          wrap(t_theta - t^_theta)^2, GD positives

Logarithms of probabilities are taken in the log domain (softplus, log-softmax)
so values and gradients stay finite for any finite head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anchor_codec import (
    GD_PR,
    H,
    MAX_LOG_SCALE,
    OD_PR,
    THETA,
    W,
    X,
    Y,
    HeadTensor,
    TargetAssignment,
    gd_class_slice,
    od_slices,
)
from .classes import DimensionMismatch, ShapeMismatch
from .functions import binary_focal, focal, log_softmax, sigmoid, softplus, wrap_angle


@dataclass(frozen=True)
class LossConfig:
    """Weights of the multi-task loss."""

    lambda_n: float = 100.0
    gamma: float = 2.0
    coord_weight: float = 1.0
    objectness_pos_weight: float = 1.0
    objectness_neg_weight: float = 1.0
    class_weight: float = 1.0
    reasoning_weight: float = 1.0
    angle_weight: float = 1.0

    def __post_init__(self):
        assert self.lambda_n >= 0, "lambda_n can't be negative"
        assert self.gamma >= 0, "gamma can't be negative"
        for name in ("coord", "objectness_pos", "objectness_neg", "class", "reasoning", "angle"):
            assert getattr(self, f"{name}_weight") >= 0, f"{name}_weight can't be negative"


@dataclass(frozen=True, eq=False)
class LossBreakdown:
    coord_mse: float
    objectness_pos: float
    objectness_neg: float
    class_focal: float
    reasoning_bifocal: float
    angle_mse: float
    total: float
    grad: HeadTensor

    def terms(self):
        return {
            "coord_mse": self.coord_mse,
            "objectness_pos": self.objectness_pos,
            "objectness_neg": self.objectness_neg,
            "class_focal": self.class_focal,
            "reasoning_bifocal": self.reasoning_bifocal,
            "angle_mse": self.angle_mse,
            "total": self.total,
        }


def focal_loss(p_t, gamma=2.0):
    """-(1 - p_t)^gamma ln p_t with p_t clamped to at least 1e-12."""
    return focal(gamma)(p_t)


def binary_focal_loss(scores, targets, gamma=2.0):
    """Sum of focal-modulated binary cross-entropies over independent class slots.

    >>> round(binary_focal_loss([0.5], [1]), 6)
    0.173287
    """
    scores = np.asarray(scores, dtype=float).ravel()
    targets = np.asarray(targets).ravel()
    if scores.shape != targets.shape:
        raise DimensionMismatch(f"{scores.size} scores for {targets.size} targets")
    f = binary_focal(gamma)
    return float(sum(f(s, bool(t)) for s, t in zip(scores, targets)))


########################
# TERM KERNELS         #
########################
# each kernel returns (value, d value / d logits)


def _class_focal(z, target, gamma):
    """Focal loss of softmax(z) at class `target`."""
    logp = log_softmax(z)
    p = np.exp(logp)
    logp_t = logp[target]
    p_t = p[target]
    a = -np.expm1(logp_t)  # 1 - p_t without cancellation
    value = -(a ** gamma) * logp_t
    slope = gamma * a ** (gamma - 1) * p_t * logp_t if a > 0 and gamma > 0 else 0.0
    coeff = slope - a ** gamma
    onehot = np.zeros_like(p)
    onehot[target] = 1.0
    return float(value), coeff * (onehot - p)


def _bifocal(t, targets, gamma):
    """Binary focal loss of sigmoid(t) against a multi-hot vector."""
    sign = np.where(targets > 0, 1.0, -1.0)
    u = sign * t
    q = sigmoid(-u)
    sp = softplus(-u)
    qg = q ** gamma
    value = np.sum(qg * sp)
    du = -qg * (gamma * (1.0 - q) * sp + q)
    return float(value), du * sign


def _offsets(t, target, prior, size):
    """Coordinate MSE of (x, y, w, h) for one slot; prior is the anchor (p_w, p_h)."""
    value = 0.0
    grad = np.zeros(4)
    for k in (X, Y):
        s, goal = sigmoid(t[k]), sigmoid(target[k])
        value += (s - goal) ** 2
        grad[k] = 2.0 * (s - goal) * s * (1.0 - s)
    for k, p, extent in ((W, prior[0], size[0]), (H, prior[1], size[1])):
        scale = p / extent
        # flat beyond the clip, matching what the decoder emits
        e = np.exp(np.clip(t[k], -MAX_LOG_SCALE, MAX_LOG_SCALE))
        d = scale * (e - np.exp(target[k]))
        value += d * d
        grad[k] = 2.0 * d * scale * e if abs(t[k]) < MAX_LOG_SCALE else 0.0
    return float(value), grad


########################
# LOSS                 #
########################


def multitask_loss(h: HeadTensor, a: TargetAssignment, cfg: LossConfig = LossConfig()) -> LossBreakdown:
    """Evaluate every loss term and the gradient of the weighted total."""
    if h.specs != a.specs or h.n_classes != a.n_classes:
        raise ShapeMismatch("tensor and assignment were built for different heads")
    c = h.n_classes
    cls_s, fc_s, cc_s = od_slices(c)
    gd_cls = gd_class_slice(c)
    od_grad = [np.zeros_like(o) for o in h.od]
    gd_grad = [np.zeros_like(g) for g in h.gd]

    coord = obj_pos = obj_neg = cls_total = reason = angle = 0.0

    # negatives: every objectness slot outside the positive set
    for s in range(len(h.specs)):
        for values, grads, mask, channel in (
            (h.od[s], od_grad[s], a.od_negative[s], OD_PR),
            (h.gd[s], gd_grad[s], a.gd_negative[s], GD_PR),
        ):
            t = values[..., channel]
            obj_neg += cfg.lambda_n * float(np.sum(softplus(t[mask]))) if mask.any() else 0.0
            grads[..., channel] += cfg.objectness_neg_weight * cfg.lambda_n * np.where(mask, sigmoid(t), 0.0)

    for tg in a.od_targets:
        spec = h.specs[tg.scale]
        t = h.od[tg.scale][tg.row, tg.col, tg.anchor]
        g = od_grad[tg.scale][tg.row, tg.col, tg.anchor]

        v, d = _offsets(t, (tg.tx, tg.ty, tg.tw, tg.th), spec.od_anchors[tg.anchor], (spec.input_w, spec.input_h))
        coord += v
        g[:4] += cfg.coord_weight * d

        obj_pos += softplus(-t[OD_PR])
        g[OD_PR] += cfg.objectness_pos_weight * (sigmoid(t[OD_PR]) - 1.0)

        v, d = _class_focal(t[cls_s], tg.class_id, cfg.gamma)
        cls_total += v
        g[cls_s] += cfg.class_weight * d

        for sl, multi_hot in ((fc_s, tg.fc), (cc_s, tg.cc)):
            v, d = _bifocal(t[sl], multi_hot, cfg.gamma)
            reason += v
            g[sl] += cfg.reasoning_weight * d

    for tg in a.gd_targets:
        spec = h.specs[tg.scale]
        t = h.gd[tg.scale][tg.row, tg.col, tg.slot]
        g = gd_grad[tg.scale][tg.row, tg.col, tg.slot]

        v, d = _offsets(t, (tg.tx, tg.ty, tg.tw, tg.th), spec.gd_anchors[tg.anchor], (spec.input_w, spec.input_h))
        coord += v
        g[:4] += cfg.coord_weight * d

        obj_pos += softplus(-t[GD_PR])
        g[GD_PR] += cfg.objectness_pos_weight * (sigmoid(t[GD_PR]) - 1.0)

        v, d = _class_focal(t[gd_cls], tg.class_id, cfg.gamma)
        cls_total += v
        g[gd_cls] += cfg.class_weight * d

        r = wrap_angle(t[THETA] - tg.ttheta)
        angle += r * r
        g[THETA] += cfg.angle_weight * 2.0 * r

    total = (
        cfg.coord_weight * coord
        + cfg.objectness_pos_weight * obj_pos
        + cfg.objectness_neg_weight * obj_neg
        + cfg.class_weight * cls_total
        + cfg.reasoning_weight * reason
        + cfg.angle_weight * angle
    )
    return LossBreakdown(
        coord_mse=float(coord),
        objectness_pos=float(obj_pos),
        objectness_neg=float(obj_neg),
        class_focal=float(cls_total),
        reasoning_bifocal=float(reason),
        angle_mse=float(angle),
        total=float(total),
        grad=HeadTensor(h.specs, c, od_grad, gd_grad),
    )
