"""
Value types shared by every stage of the grasp pipeline.

Rectangles, detections, grasps, paired objects, relation graphs and scene
annotations are immutable once constructed; every invariant is checked at
construction so downstream code never has to re-validate.

All coordinates are pixels in double precision, all angles radians.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from .functions import finite, normalize_angle


class GraspError(Exception):
    """Extra Exception so that user code can filter exceptions specific to this lib.

    Every subclass carries a stable `code` that the command line prints as a
    machine-parsable prefix.
    """

    code = "grasp-error"


class NotARectangle(GraspError):
    code = "not-a-rectangle"


class NonFinite(GraspError):
    code = "non-finite"


class BadInputSize(GraspError):
    code = "bad-input-size"


class ShapeMismatch(GraspError):
    code = "shape-mismatch"


class DimensionMismatch(GraspError):
    code = "dimension-mismatch"


class OutOfBounds(GraspError):
    code = "out-of-bounds"


class OrphanGrasp(GraspError):
    code = "orphan-grasp"


class CyclicGraph(GraspError):
    code = "cyclic-graph"


class BadScene(GraspError):
    code = "bad-scene"


class ZeroGT(GraspError):
    code = "zero-gt"


class TooFewGroups(GraspError):
    code = "too-few-groups"


class UnknownClass(GraspError):
    code = "unknown-class"


class DivergenceDetected(GraspError):
    code = "divergence"

    def __init__(self, step, total):
        super().__init__(f"loss became {total} at step {step}")
        self.step = step


class LocatedError(GraspError):
    """An error pinned to a line of a parsed file."""

    def __init__(self, message, line=None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")
        self.line = line


class MalformedLine(LocatedError):
    code = "malformed-line"


class TruncatedFile(LocatedError):
    code = "truncated-file"


class SceneError(GraspError):
    """An error pinned to one object of a scene."""

    def __init__(self, message, object_id=None):
        where = f"object {object_id}: " if object_id is not None else ""
        super().__init__(f"{where}{message}")
        self.object_id = object_id


class DanglingSupport(SceneError):
    code = "dangling-support"


class CyclicSupport(SceneError):
    code = "cyclic-support"


class DuplicateId(SceneError):
    code = "duplicate-id"


class BadMagic(GraspError):
    code = "bad-magic"


class TruncatedPayload(GraspError):
    code = "truncated-payload"


########################
# RECTANGLES           #
########################


@dataclass(frozen=True)
class OrientedRect:
    """A 5D grasp rectangle.

    w is the gripper opening (along theta), h the plate extent (across it).
    theta is stored in [0, pi): a parallel-jaw grasp is the same under theta + pi.

    >>> from math import pi
    >>> OrientedRect(0, 0, 4, 2, pi).theta
    0.0
    """

    x: float
    y: float
    w: float
    h: float
    theta: float = 0.0

    def __post_init__(self):
        if not finite(self.x, self.y, self.w, self.h, self.theta):
            raise NonFinite(f"rectangle has a non-finite field: {self!r}")
        if not (self.w > 0 and self.h > 0):
            raise NotARectangle(f"extents must be positive, got w={self.w}, h={self.h}")
        for name in ("x", "y", "w", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "theta", normalize_angle(float(self.theta)))

    @property
    def area(self):
        return self.w * self.h

    def as_tuple(self):
        return (self.x, self.y, self.w, self.h, self.theta)


@dataclass(frozen=True)
class AxisRect:
    """An axis-aligned box in corner form."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not finite(self.x1, self.y1, self.x2, self.y2):
            raise NonFinite(f"box has a non-finite corner: {self!r}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise NotARectangle(f"corners out of order: {self!r}")
        for name in ("x1", "y1", "x2", "y2"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @classmethod
    def from_center(cls, x, y, w, h):
        return cls(x - w / 2, y - h / 2, x + w / 2, y + h / 2)

    @property
    def w(self):
        return self.x2 - self.x1

    @property
    def h(self):
        return self.y2 - self.y1

    @property
    def area(self):
        return self.w * self.h

    @property
    def center(self):
        return ((self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2)

    def as_tuple(self):
        return (self.x1, self.y1, self.x2, self.y2)


########################
# DETECTOR OUTPUTS     #
########################


def _check_scores(class_id, class_scores, pr):
    assert 0 <= pr <= 1, f"probability {pr} outside [0, 1]"
    assert 0 <= class_id < len(class_scores), f"class {class_id} out of range"
    assert abs(float(np.sum(class_scores)) - 1) < 1e-6, "class scores must sum to 1"


@dataclass(frozen=True, eq=False)
class Detection:
    """A decoded object box with its class distribution and relation scores.

    fc_scores and cc_scores hold C + 1 independent probabilities; the last
    slot means "no class".
    slot is (scale_id, row, col, anchor) of the head cell it came from.
    """

    class_id: int
    class_scores: np.ndarray
    pr: float
    box: AxisRect
    fc_scores: np.ndarray
    cc_scores: np.ndarray
    slot: Tuple[int, ...] = ()

    def __post_init__(self):
        _check_scores(self.class_id, self.class_scores, self.pr)


@dataclass(frozen=True, eq=False)
class GraspCandidate:
    """A decoded grasp rectangle with graspable probability and object class.

    slot is (scale_id, row, col, anchor, angle_anchor).
    """

    rect: OrientedRect
    pr: float
    class_id: int
    class_scores: np.ndarray
    slot: Tuple[int, ...] = ()

    def __post_init__(self):
        _check_scores(self.class_id, self.class_scores, self.pr)


@dataclass(frozen=True, eq=False)
class PairedObject:
    """A detection with the grasp chosen for it (if any)."""

    detection: Detection
    best_grasp: Optional[GraspCandidate]
    id: int

    @property
    def class_id(self):
        return self.detection.class_id

    @property
    def pr(self):
        return self.detection.pr

    @property
    def box(self):
        return self.detection.box


@dataclass(frozen=True, eq=False)
class RelationGraph:
    """Paired objects with "rests on" edges.

    An edge (child, parent) means child rests ON parent.
    ord[id] is the stacking depth from the top: 0 means nothing rests on it.
    """

    nodes: Tuple[PairedObject, ...]
    edges: Tuple[Tuple[int, int], ...]
    ord: Dict[int, int]

    def __post_init__(self):
        ids = {n.id for n in self.nodes}
        for child, parent in self.edges:
            assert child in ids and parent in ids, f"edge ({child}, {parent}) has a missing endpoint"

    def node(self, node_id):
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def children_on_top(self, node_id):
        return sorted(c for c, p in self.edges if p == node_id)


########################
# ANNOTATIONS          #
########################


@dataclass(frozen=True)
class SceneObject:
    """One annotated object: class, box, what it rests on and its grasps."""

    id: int
    class_id: int
    class_name: str
    box: AxisRect
    on_top_of: Tuple[int, ...] = ()
    grasps: Tuple[OrientedRect, ...] = ()


@dataclass(frozen=True)
class SceneGrasp:
    """A grasp that names its owner by id, as flat annotation lists do."""

    object_id: int
    rect: OrientedRect


@dataclass(frozen=True)
class SceneAnnotation:
    """A fully annotated image: size, objects, support relation and grasps.

    Grasps listed in `loose_grasps` are attached to their owners on
    construction; an owner that doesn't exist is an OrphanGrasp.
    """

    image_w: int
    image_h: int
    objects: Tuple[SceneObject, ...]
    loose_grasps: Tuple[SceneGrasp, ...] = field(default=(), repr=False)

    def __post_init__(self):
        validate_scene(self)
        if self.loose_grasps:
            extra = {}
            for g in self.loose_grasps:
                extra.setdefault(g.object_id, []).append(g.rect)
            merged = tuple(
                SceneObject(
                    o.id, o.class_id, o.class_name, o.box, o.on_top_of,
                    o.grasps + tuple(extra.get(o.id, ())),
                )
                for o in self.objects
            )
            object.__setattr__(self, "objects", merged)
            object.__setattr__(self, "loose_grasps", ())

    def object(self, object_id):
        for o in self.objects:
            if o.id == object_id:
                return o
        raise KeyError(object_id)

    def resting_on(self, object_id):
        """Ids of the objects that rest directly on `object_id`."""
        return sorted(o.id for o in self.objects if object_id in o.on_top_of)


def find_cycle(successors):
    """Return one cycle of a directed graph as a list of nodes, or None.

    successors maps node -> iterable of nodes; iteration order is sorted so
    the answer is deterministic.
    """
    white, grey, black = 0, 1, 2
    colour = {n: white for n in successors}
    stack = []

    def visit(n):
        colour[n] = grey
        stack.append(n)
        for m in sorted(successors.get(n, ())):
            if colour.get(m, white) == grey:
                return stack[stack.index(m):]
            if colour.get(m, white) == white:
                found = visit(m)
                if found:
                    return found
        stack.pop()
        colour[n] = black
        return None

    for n in sorted(successors):
        if colour[n] == white:
            found = visit(n)
            if found:
                return found
    return None


def validate_scene(scene):
    """Check the annotation invariants, naming the offending object."""
    seen = set()
    for o in scene.objects:
        if o.id in seen:
            raise DuplicateId("id used twice", o.id)
        seen.add(o.id)
    for o in scene.objects:
        for parent in o.on_top_of:
            if parent not in seen:
                raise DanglingSupport(f"rests on missing object {parent}", o.id)
            if parent == o.id:
                raise CyclicSupport("rests on itself", o.id)
    for g in scene.loose_grasps:
        if g.object_id not in seen:
            raise OrphanGrasp(f"grasp {g.rect} references missing object {g.object_id}")
    cycle = find_cycle({o.id: o.on_top_of for o in scene.objects})
    if cycle:
        raise CyclicSupport(f"support cycle {cycle}", cycle[0])
