"""
Grasp and detection metrics.

The rectangle metric calls a predicted grasp correct when some ground-truth
rectangle lies within `angle_threshold` of its orientation (mod pi) and
overlaps it with rotated IOU above `grasp_iou_threshold`.

mAPg counts a detection as a true positive only when its box matches a
ground-truth object of the same class (IOU above `od_iou_threshold`) AND its
best grasp passes the rectangle metric against that object's grasps.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from math import pi
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .classes import OrientedRect, PairedObject, SceneAnnotation, TooFewGroups, ZeroGT
from .geometry import angle_difference, axis_iou, rotated_iou

logger = logging.getLogger(__name__)

AP_METHODS = ("continuous", "interpolated")


@dataclass(frozen=True)
class EvalConfig:
    angle_threshold: float = pi / 6
    grasp_iou_threshold: float = 0.25
    od_iou_threshold: float = 0.5
    ap_method: str = "continuous"
    top_k: int = 1

    def __post_init__(self):
        assert 0 < self.angle_threshold <= pi / 2, "angle threshold must lie in (0, pi/2]"
        assert 0 <= self.grasp_iou_threshold < 1, "grasp IOU threshold must lie in [0, 1)"
        assert 0 <= self.od_iou_threshold < 1, "box IOU threshold must lie in [0, 1)"
        assert self.ap_method in AP_METHODS, f"ap_method must be one of {AP_METHODS}"
        assert self.top_k >= 1, "top_k must be at least 1"


@dataclass(frozen=True)
class EvalReport:
    """Rectangle-metric accuracy and detection precision of one evaluation run.

    ap and ap_box map class ids to the average precision with and without the
    grasp criterion; classes without ground truth are left out and noted.
    """

    n_images: int = 0
    n_success: int = 0
    accuracy: float = 0.0
    ap: Dict[int, float] = field(default_factory=dict)
    ap_box: Dict[int, float] = field(default_factory=dict)
    map: float = 0.0
    mapg: float = 0.0
    counters: Dict[str, int] = field(default_factory=dict)
    notes: Tuple[str, ...] = ()
    ap_method: str = "continuous"

    def __post_init__(self):
        for value in (self.accuracy, self.map, self.mapg, *self.ap.values(), *self.ap_box.values()):
            assert 0 <= value <= 1, f"metric {value} outside [0, 1]"
        assert self.n_images == 0 or abs(self.accuracy - self.n_success / self.n_images) < 1e-12

    def to_frame(self, class_names=None) -> pd.DataFrame:
        """Per-class AP table, one row per evaluated class."""
        names = class_names or {}
        rows = [
            {"class": c, "name": names.get(c, str(c)), "ap": self.ap_box.get(c, 0.0), "apg": self.ap.get(c, 0.0)}
            for c in sorted(set(self.ap) | set(self.ap_box))
        ]
        return pd.DataFrame(rows, columns=["class", "name", "ap", "apg"]).set_index("class")

    def to_text(self, class_names=None):
        lines = [
            f"images   {self.n_images}",
            f"success  {self.n_success}",
            f"accuracy {self.accuracy:.4f}",
        ]
        if self.ap or self.ap_box:
            lines += [f"mAP      {self.map:.4f}", f"mAPg     {self.mapg:.4f}", f"AP       {self.ap_method}", ""]
            lines.append(self.to_frame(class_names).to_string(float_format=lambda v: f"{v:.4f}"))
        lines += [f"note: {n}" for n in self.notes]
        return "\n".join(lines)

    def to_document(self):
        classes = sorted(set(self.ap) | set(self.ap_box))
        return {
            "n_images": self.n_images,
            "n_success": self.n_success,
            "accuracy": self.accuracy,
            "ap": {str(c): {"box": self.ap_box.get(c, 0.0), "grasp": self.ap.get(c, 0.0)} for c in classes},
            "map": self.map,
            "mapg": self.mapg,
            "counters": dict(self.counters),
            "notes": list(self.notes),
            "ap_method": self.ap_method,
        }


########################
# RECTANGLE METRIC     #
########################


def grasp_match(pred: OrientedRect, gts: Sequence[OrientedRect], cfg: EvalConfig = EvalConfig()) -> bool:
    """True if pred passes the rectangle metric against any of gts.

    >>> r = OrientedRect(10, 10, 8, 4, 0.2)
    >>> grasp_match(r, [r])
    True
    """
    return any(
        angle_difference(pred.theta, gt.theta) < cfg.angle_threshold
        and rotated_iou(pred, gt) > cfg.grasp_iou_threshold
        for gt in gts
    )


def _scored(item):
    """(rect, pr) of a prediction given as a pair, a grasp candidate or a bare rectangle."""
    if isinstance(item, OrientedRect):
        return item, 1.0
    if isinstance(item, tuple):
        return item
    return item.rect, item.pr


def cornell_accuracy(predictions, ground_truth, cfg: EvalConfig = EvalConfig()) -> EvalReport:
    """Fraction of images whose top-scored grasp (top_k of them) passes the rectangle metric.

    predictions[i] lists the scored grasps of image i; None or an empty list
    is a miss, never an error.
    """
    assert len(predictions) == len(ground_truth), "one prediction list per image"
    success = missing = 0
    for preds, gts in zip(predictions, ground_truth):
        ranked = [_scored(p) for p in (preds or ())]
        if not ranked:
            missing += 1
            continue
        order = sorted(range(len(ranked)), key=lambda i: (-ranked[i][1], i))
        if any(grasp_match(ranked[i][0], gts, cfg) for i in order[: cfg.top_k]):
            success += 1
    n = len(ground_truth)
    if missing:
        logger.info("%d of %d images had no prediction", missing, n)
    return EvalReport(
        n_images=n,
        n_success=success,
        accuracy=success / n if n else 0.0,
        counters={"missing": missing, "failed": n - success - missing, "matched": success},
        ap_method=cfg.ap_method,
    )


########################
# PRECISION            #
########################


def average_precision(scores, matches, n_gt, method="continuous") -> float:
    """Area under the precision-recall curve of confidence-ranked predictions.

    "continuous" sums precision x delta-recall at every true positive;
    "interpolated" first replaces precision by its running maximum from the right.

    >>> round(average_precision([0.9, 0.8, 0.7], [True, False, True], 2), 6)
    0.833333
    """
    assert method in AP_METHODS, f"unknown AP method {method!r}"
    if n_gt <= 0:
        raise ZeroGT("average precision needs at least one ground-truth instance")
    scores = np.asarray(scores, dtype=float)
    matches = np.asarray(matches, dtype=bool)
    if not scores.size:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(matches[order])
    precision = tp / np.arange(1, scores.size + 1)
    recall = tp / n_gt
    if method == "continuous":
        return float(np.sum(precision[matches[order]]) / n_gt)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    step = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[step + 1] - mrec[step]) * mpre[step + 1]))


def mapg(
    predictions: Sequence[Sequence[PairedObject]],
    scenes: Sequence[SceneAnnotation],
    cfg: EvalConfig = EvalConfig(),
) -> EvalReport:
    """Per-class AP of boxes alone (mAP) and of boxes with a correct grasp (mAPg).

    Detections of one class are ranked over all images by confidence; each
    takes the same-class ground-truth object it overlaps most. A ground-truth
    object is consumed by its first box match whether or not the grasp passes.
    An image succeeds when every ground-truth object in it gets a correct grasp.
    """
    assert len(predictions) == len(scenes), "one prediction list per scene"
    n_gt: Dict[int, int] = {}
    for scene in scenes:
        for o in scene.objects:
            n_gt[o.class_id] = n_gt.get(o.class_id, 0) + 1
    ranked: Dict[int, List[Tuple[float, int, int, PairedObject]]] = {}
    for img, objs in enumerate(predictions):
        for k, p in enumerate(objs):
            ranked.setdefault(p.class_id, []).append((p.pr, img, k, p))

    consumed = set()
    grasped = set()
    ap, ap_box, notes = {}, {}, []
    box_tp_total = grasp_tp_total = 0
    for c in sorted(set(n_gt) | set(ranked)):
        entries = sorted(ranked.get(c, []), key=lambda e: (-e[0], e[1], e[2]))
        box_tp, grasp_tp = [], []
        for _, img, _, p in entries:
            gts = [o for o in scenes[img].objects if o.class_id == c]
            best = max(gts, key=lambda o: axis_iou(o.box, p.box), default=None)
            hit = best is not None and axis_iou(best.box, p.box) > cfg.od_iou_threshold
            hit = hit and (img, best.id) not in consumed
            good = False
            if hit:
                consumed.add((img, best.id))
                good = p.best_grasp is not None and grasp_match(p.best_grasp.rect, best.grasps, cfg)
                if good:
                    grasped.add((img, best.id))
            box_tp.append(hit)
            grasp_tp.append(good)
        box_tp_total += sum(box_tp)
        grasp_tp_total += sum(grasp_tp)
        scores = [e[0] for e in entries]
        try:
            ap_box[c] = average_precision(scores, box_tp, n_gt.get(c, 0), cfg.ap_method)
            ap[c] = average_precision(scores, grasp_tp, n_gt.get(c, 0), cfg.ap_method)
        except ZeroGT:
            notes.append(f"class {c} has no ground truth and is left out of the mean")
            logger.warning("class %d has detections but no ground truth", c)

    if not ap:
        notes.append("no class has ground truth")
    success = sum(
        1 for img, scene in enumerate(scenes) if all((img, o.id) in grasped for o in scene.objects)
    )
    n = len(scenes)
    return EvalReport(
        n_images=n,
        n_success=success,
        accuracy=success / n if n else 0.0,
        ap=ap,
        ap_box=ap_box,
        map=float(np.mean(list(ap_box.values()))) if ap_box else 0.0,
        mapg=float(np.mean(list(ap.values()))) if ap else 0.0,
        counters={
            "predictions": sum(len(v) for v in ranked.values()),
            "gt_objects": sum(n_gt.values()),
            "box_tp": box_tp_total,
            "grasp_tp": grasp_tp_total,
        },
        notes=tuple(notes),
        ap_method=cfg.ap_method,
    )


########################
# CROSS VALIDATION     #
########################


def cv_splits(
    ids: Sequence,
    mode="image_wise",
    k=5,
    seed=0,
    group_key: Optional[Callable] = None,
) -> List[list]:
    """Partition ids into k folds.

    image_wise shuffles the ids; object_wise shuffles the groups named by
    group_key so every image of one object lands in the same fold.

    >>> [len(f) for f in cv_splits(range(10), k=5)]
    [2, 2, 2, 2, 2]
    """
    assert mode in ("image_wise", "object_wise"), f"unknown split mode {mode!r}"
    assert k >= 1, "need at least one fold"
    ids = list(ids)
    rng = np.random.default_rng(seed)
    if mode == "image_wise":
        if len(ids) < k:
            raise TooFewGroups(f"{len(ids)} samples can't fill {k} folds")
        return [[ids[i] for i in chunk] for chunk in np.array_split(rng.permutation(len(ids)), k)]

    assert group_key is not None, "object_wise splits need a group key"
    keys = [group_key(i) for i in ids]
    groups = sorted(set(keys))
    if len(groups) < k:
        raise TooFewGroups(f"{len(groups)} object groups can't fill {k} folds")
    fold_of = {}
    for f, chunk in enumerate(np.array_split(rng.permutation(len(groups)), k)):
        for g in chunk:
            fold_of[groups[g]] = f
    folds = [[] for _ in range(k)]
    for i, key in zip(ids, keys):
        folds[fold_of[key]].append(i)
    return folds
