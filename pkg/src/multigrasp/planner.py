"""
Grasp sequencing over a relation graph, and a desk-scale scene simulator.

The simulator replays the three table-top protocols: a cluttered scene (no
stacking), a stacking scene and an invisible scene where the target is hidden
under other objects. Between every robot movement the detector runs again on
what is visible.

>>> g = RelationGraph((), (), {})
>>> grasp_order(g)
[]
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from shapely.geometry import box as shapely_box
from shapely.ops import unary_union

from .classes import (
    AxisRect,
    BadScene,
    CyclicGraph,
    Detection,
    GraspCandidate,
    OrientedRect,
    PairedObject,
    RelationGraph,
    SceneAnnotation,
    UnknownClass,
    find_cycle,
)
from .geometry import axis_iou
from .postprocess import stacking_depth

logger = logging.getLogger(__name__)

# a box counts as hidden once this fraction of it lies under objects above it
VISIBILITY = 0.8

# detector boxes are matched to scene objects above this IOU
MATCH_IOU = 0.5


class PlanStatus(Enum):
    TargetGrasped = "target-grasped"
    TargetNotFound = "target-not-found"
    Exhausted = "exhausted"


@dataclass(frozen=True)
class StateObject:
    id: int
    class_id: int
    box: AxisRect
    supports: Tuple[int, ...] = ()
    grasps: Tuple[OrientedRect, ...] = ()
    pr: float = 1.0
    present: bool = True


class SceneState:
    """Objects on the table, what each rests on, and which are still there.

    An object is visible while less than `visibility` of its box is covered by
    the union of the boxes of the objects stacked (transitively) above it.
    """

    def __init__(self, objects, visibility=VISIBILITY, n_classes=None):
        assert 0 < visibility <= 1, "visibility must lie in (0, 1]"
        self.objects: Dict[int, StateObject] = {o.id: o for o in objects}
        if len(self.objects) != len(objects):
            raise BadScene("object ids must be unique")
        for o in objects:
            for s in o.supports:
                if s not in self.objects:
                    raise BadScene(f"object {o.id} rests on missing object {s}")
        cycle = find_cycle({o.id: o.supports for o in objects})
        if cycle:
            raise BadScene(f"support cycle {cycle}")
        self.visibility = visibility
        self.n_classes = n_classes if n_classes is not None else 1 + max((o.class_id for o in objects), default=0)

    @classmethod
    def from_annotation(cls, scene: SceneAnnotation, visibility=VISIBILITY, n_classes=None):
        return cls(
            [StateObject(o.id, o.class_id, o.box, tuple(o.on_top_of), tuple(o.grasps)) for o in scene.objects],
            visibility,
            n_classes,
        )

    def copy(self):
        return SceneState(list(self.objects.values()), self.visibility, self.n_classes)

    def present(self):
        return [o for _, o in sorted(self.objects.items()) if o.present]

    def supports_of(self, object_id):
        return [s for s in self.objects[object_id].supports if self.objects[s].present]

    def resting_on(self, object_id):
        return [o.id for o in self.present() if object_id in self.supports_of(o.id)]

    def above(self, object_id):
        """Ids of every present object stacked directly or indirectly on object_id."""
        found, stack = set(), [object_id]
        while stack:
            for child in self.resting_on(stack.pop()):
                if child not in found:
                    found.add(child)
                    stack.append(child)
        return found

    def covered_fraction(self, object_id):
        target = self.objects[object_id].box
        over = [self.objects[i].box for i in self.above(object_id)]
        if not over:
            return 0.0
        region = shapely_box(*target.as_tuple())
        cover = unary_union([shapely_box(*b.as_tuple()) for b in over]).intersection(region)
        return cover.area / region.area

    def is_visible(self, object_id):
        return self.covered_fraction(object_id) < self.visibility

    def visible(self):
        return [o for o in self.present() if self.is_visible(o.id)]

    def remove(self, object_id):
        o = self.objects[object_id]
        assert o.present, f"object {object_id} is already gone"
        assert not self.resting_on(object_id), f"object {object_id} is still holding something"
        self.objects[object_id] = replace(o, present=False)


@dataclass(frozen=True)
class GraspPlan:
    target: Optional[int]
    plan: Tuple[int, ...]
    status: PlanStatus


@dataclass(frozen=True)
class Episode:
    """What happened in one simulated run."""

    success: bool
    status: PlanStatus
    steps: int
    removed: Tuple[int, ...]
    log: Tuple[dict, ...] = field(default=())

    @property
    def failed_grasps(self):
        return sum(1 for entry in self.log if not entry["grasped"])

    @property
    def first_try(self):
        """True when the episode succeeded without a single failed grasp."""
        return self.success and self.failed_grasps == 0


########################
# ORDERING             #
########################


def grasp_order(g: RelationGraph) -> List[int]:
    """Topological order in which objects on top come before what they rest on.

    Among free objects the most confident detection goes first, then the lower id.
    """
    pr = {n.id: n.pr for n in g.nodes}
    load = {n.id: 0 for n in g.nodes}
    for _, parent in g.edges:
        load[parent] += 1
    ready = [(-pr[i], i) for i, k in load.items() if k == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        _, i = heapq.heappop(ready)
        order.append(i)
        for child, parent in g.edges:
            if child == i:
                load[parent] -= 1
                if load[parent] == 0:
                    heapq.heappush(ready, (-pr[parent], parent))
    if len(order) != len(load):
        raise CyclicGraph(f"relation graph has a cycle through {sorted(set(load) - set(order))}")
    return order


def plan_target(g: RelationGraph, target_class) -> GraspPlan:
    """Clear everything resting on the most confident instance of target_class, then take it."""
    if not isinstance(target_class, (int, np.integer)) or target_class < 0:
        raise UnknownClass(f"target class must be a non-negative integer, got {target_class!r}")
    candidates = [n for n in g.nodes if n.class_id == target_class]
    if not candidates:
        return GraspPlan(None, (), PlanStatus.TargetNotFound)
    target = min(candidates, key=lambda n: (-n.pr, n.id)).id
    above, stack = set(), [target]
    while stack:
        for child in g.children_on_top(stack.pop()):
            if child not in above:
                above.add(child)
                stack.append(child)
    plan = [i for i in grasp_order(g) if i in above] + [target]
    return GraspPlan(target, tuple(plan), PlanStatus.TargetGrasped)


########################
# SIMULATION           #
########################


def oracle_detector(state: SceneState) -> RelationGraph:
    """A perfect detector: sees exactly the visible objects and how they stack.

    Support chains through hidden objects collapse into a direct edge to the
    nearest visible object underneath.
    """
    c = state.n_classes
    visible = {o.id for o in state.visible()}
    edges = set()
    for v in sorted(visible):
        stack, seen = list(state.supports_of(v)), set()
        while stack:
            s = stack.pop()
            if s in seen:
                continue
            seen.add(s)
            if s in visible:
                edges.add((v, s))
            else:
                stack.extend(state.supports_of(s))
    nodes = []
    for v in sorted(visible):
        o = state.objects[v]
        scores = np.zeros(c)
        scores[o.class_id] = 1.0
        fc = np.zeros(c + 1)
        cc = np.zeros(c + 1)
        for child, parent in edges:
            if child == v:
                fc[state.objects[parent].class_id] = 1.0
            if parent == v:
                cc[state.objects[child].class_id] = 1.0
        for multi_hot in (fc, cc):
            if not multi_hot.any():
                multi_hot[c] = 1.0
        det = Detection(o.class_id, scores, o.pr, o.box, fc, cc)
        grasp = GraspCandidate(o.grasps[0], o.pr, o.class_id, scores) if o.grasps else None
        nodes.append(PairedObject(det, grasp, v))
    edges = tuple(sorted(edges))
    return RelationGraph(tuple(nodes), edges, stacking_depth([n.id for n in nodes], edges))


def _locate(state: SceneState, box: AxisRect) -> Optional[int]:
    """The present scene object a detector box refers to, if any."""
    best = None
    for o in state.present():
        iou = axis_iou(o.box, box)
        if iou < MATCH_IOU:
            continue
        key = (iou, not state.resting_on(o.id), -o.id)
        if best is None or key > best[0]:
            best = (key, o.id)
    return best[1] if best else None


def _intersection_area(a: AxisRect, b: AxisRect):
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    return w * h if w > 0 and h > 0 else 0.0


def _hidden_overlap(state: SceneState, nodes):
    """Area of each node box over the union of the present objects nobody can see."""
    hidden = [shapely_box(*o.box.as_tuple()) for o in state.present() if not state.is_visible(o.id)]
    if not hidden:
        return {n.id: 0.0 for n in nodes}
    cover = unary_union(hidden)
    return {n.id: shapely_box(*n.box.as_tuple()).intersection(cover).area for n in nodes}


def simulate(
    scene: SceneState,
    target_class,
    detector: Callable[[SceneState], RelationGraph] = oracle_detector,
    max_steps=20,
    *,
    seed=0,
    grasp_success=1.0,
) -> Episode:
    """Run one target-driven episode. One grasp attempt per step.

    While the target is visible the planner clears what rests on it, then
    takes it. Otherwise the free object overlapping most with where the
    target was last seen is put away, or, before the target has been seen,
    the one covering most of the objects hidden under the pile. Ties go to
    the more confident detection.
    A grasp attempt succeeds with probability grasp_success.
    """
    assert max_steps >= 1, "max_steps must be at least 1"
    assert 0 <= grasp_success <= 1, "grasp_success is a probability"
    state = scene.copy()
    rng = np.random.default_rng(seed)
    removed, log = [], []
    last_seen: Optional[AxisRect] = None
    status = PlanStatus.Exhausted

    for step in range(1, max_steps + 1):
        if not state.present():
            status = PlanStatus.TargetNotFound
            break
        g = detector(state)
        plan = plan_target(g, target_class)
        if plan.status is PlanStatus.TargetGrasped:
            last_seen = g.node(plan.target).box
            node = g.node(plan.plan[0])
            reason = "target" if node.id == plan.target else "clear"
        else:
            free = [n for n in g.nodes if g.ord[n.id] == 0]
            if not free:
                status = PlanStatus.TargetNotFound
                break
            if last_seen is not None:
                weight = {n.id: _intersection_area(n.box, last_seen) for n in free}
            else:
                weight = _hidden_overlap(state, free)
            node = min(free, key=lambda n: (-weight[n.id], -n.pr, n.id))
            reason = "explore"

        object_id = _locate(state, node.box)
        grasped = object_id is not None and not state.resting_on(object_id) and rng.random() < grasp_success
        entry = {"step": step, "reason": reason, "object": object_id, "grasped": bool(grasped)}
        log.append(entry)
        logger.debug("step %d: %s", step, entry)
        if not grasped:
            continue
        state.remove(object_id)
        removed.append(object_id)
        if state.objects[object_id].class_id == target_class:
            return Episode(True, PlanStatus.TargetGrasped, step, tuple(removed), tuple(log))

    steps = len(log)
    logger.info("episode ended without the target: %s after %d steps", status.value, steps)
    return Episode(False, status, steps, tuple(removed), tuple(log))
