"""
Reasoning post-processing: suppression, object-grasp pairing and the relation graph.

The stages run in this order on one image:

    decode_od -> nms -> decode_gd -> nms -> pair -> build_relation_graph

An edge (child, parent) of the graph means child rests ON parent. Edges come
from the children-class (CC) scores only; the father-class (FC) scores are
carried along for inspection.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Sequence

from .anchor_codec import HeadTensor, decode_gd, decode_od
from .classes import Detection, GraspCandidate, PairedObject, RelationGraph, find_cycle
from .geometry import aabb, axis_iou, rotated_iou

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PostConfig:
    od_nms_iou: float = 0.45
    gd_nms_iou: float = 0.30
    od_conf: float = 0.5
    gd_conf: float = 0.5
    pair_iou_threshold: float = 0.05
    relation_iou_threshold: float = 0.10
    cc_score_threshold: float = 0.5

    def __post_init__(self):
        for name, value in vars(self).items():
            assert 0 <= value <= 1, f"{name} must lie in [0, 1], got {value}"


def _overlap(a, b):
    if isinstance(a, Detection):
        return axis_iou(a.box, b.box)
    return rotated_iou(a.rect, b.rect)


def nms(items: Sequence, iou_threshold, class_aware=True) -> List:
    """Greedy non-maximum suppression.

    Works on Detections (axis IOU of boxes) and GraspCandidates (rotated IOU).
    The survivors come back in descending probability, ties by input order.
    """
    order = sorted(range(len(items)), key=lambda i: (-items[i].pr, i))
    kept = []
    for i in order:
        item = items[i]
        if any(
            (not class_aware or k.class_id == item.class_id) and _overlap(k, item) > iou_threshold
            for k in kept
        ):
            continue
        kept.append(item)
    return kept


def pair(dets: Sequence[Detection], grasps: Sequence[GraspCandidate], cfg: PostConfig = PostConfig()):
    """Give every detection the most probable grasp of its class lying on it.

    Detections pick in descending confidence and a grasp serves one detection
    at most. The PairedObject id is the detection's position in `dets`.
    """
    hulls = [aabb(g.rect) for g in grasps]
    taken = set()
    best = {}
    for d in sorted(range(len(dets)), key=lambda i: (-dets[i].pr, i)):
        det = dets[d]
        candidates = []
        for gi, g in enumerate(grasps):
            if gi in taken or g.class_id != det.class_id:
                continue
            iou = axis_iou(hulls[gi], det.box)
            if iou >= cfg.pair_iou_threshold:
                candidates.append((g.pr, iou, -gi))
        if candidates:
            gi = -max(candidates)[2]
            taken.add(gi)
            best[d] = grasps[gi]
    return [PairedObject(det, best.get(d), d) for d, det in enumerate(dets)]


def stacking_depth(ids, edges):
    """ord per node: 0 when nothing rests on it, else 1 + the deepest child on top."""
    on_top = {n: [] for n in ids}
    for child, parent in edges:
        on_top[parent].append(child)

    @lru_cache(maxsize=None)
    def depth(n):
        return 1 + max(depth(c) for c in on_top[n]) if on_top[n] else 0

    return {n: depth(n) for n in ids}


def build_relation_graph(objs: Sequence[PairedObject], cfg: PostConfig = PostConfig()) -> RelationGraph:
    """Turn CC predictions into "rests on" edges and stacking depths."""
    scored = {}
    for o in objs:
        cc = o.detection.cc_scores
        n_classes = len(cc) - 1  # last slot is "no class"
        for c in range(n_classes):
            if cc[c] < cfg.cc_score_threshold:
                continue
            candidates = [
                (axis_iou(other.box, o.box), -other.id)
                for other in objs
                if other.id != o.id and other.class_id == c
            ]
            candidates = [k for k in candidates if k[0] >= cfg.relation_iou_threshold]
            if candidates:
                child = -max(candidates)[1]
                edge = (child, o.id)
                scored[edge] = max(scored.get(edge, 0.0), float(cc[c]))

    while True:
        successors = {o.id: [p for c, p in scored if c == o.id] for o in objs}
        cycle = find_cycle(successors)
        if not cycle:
            break
        ring = [(cycle[i], cycle[(i + 1) % len(cycle)]) for i in range(len(cycle))]
        weakest = min(ring, key=lambda e: (scored[e], e))
        logger.info("breaking relation cycle %s at edge %s", cycle, weakest)
        del scored[weakest]

    edges = tuple(sorted(scored))
    return RelationGraph(tuple(objs), edges, stacking_depth([o.id for o in objs], edges))


def run_pipeline(h: HeadTensor, specs, cfg: PostConfig = PostConfig()) -> RelationGraph:
    dets = nms(decode_od(h, specs, cfg.od_conf), cfg.od_nms_iou)
    grasps = nms(decode_gd(h, specs, cfg.gd_conf), cfg.gd_nms_iou)
    logger.debug("%d detections and %d grasps survive suppression", len(dets), len(grasps))
    return build_relation_graph(pair(dets, grasps, cfg), cfg)
