"""
Rectangle geometry: vertex conversions and both IOU variants.

Vertex convention for 4-point rectangles: the p1-p2 edge is the gripper
plate (h), the p2-p3 edge is the opening (w) and fixes theta.

>>> r = rect_from_vertices([(2, 1), (-2, 1), (-2, -1), (2, -1)])
>>> (r.x, r.y, r.w, r.h)
(0.0, 0.0, 2.0, 4.0)
"""

from __future__ import annotations

from math import atan2, cos, hypot, pi, sin

import numpy as np
from shapely.geometry import Polygon

from .classes import AxisRect, NonFinite, NotARectangle, OrientedRect
from .functions import finite, wrap_angle

# opposite edges of a Cornell rectangle may differ by less than this ratio
EDGE_TOLERANCE = 0.05


def vertices(r: OrientedRect) -> np.ndarray:
    """Return the four corners of r counterclockwise, shape (4, 2).

    p1 -> p2 runs along the plate (h), p2 -> p3 against the opening (w),
    so rect_from_vertices(vertices(r)) == r.

    >>> vertices(OrientedRect(0, 0, 4, 2)).tolist()
    [[2.0, -1.0], [2.0, 1.0], [-2.0, 1.0], [-2.0, -1.0]]
    """
    u = np.array([cos(r.theta), sin(r.theta)]) * (r.w / 2)
    v = np.array([-sin(r.theta), cos(r.theta)]) * (r.h / 2)
    c = np.array([r.x, r.y])
    return np.array([c + u - v, c + u + v, c - u + v, c - u - v])


def rect_from_vertices(points) -> OrientedRect:
    """Convert 4 corner points into an OrientedRect.

    h = |p1 - p2|, w = |p2 - p3|, theta = direction of p2 -> p3.
    Opposite edges must agree within EDGE_TOLERANCE.
    """
    p = np.asarray(points, dtype=float)
    if p.shape != (4, 2):
        raise NotARectangle(f"expected 4 points, got shape {p.shape}")
    if not finite(p):
        raise NonFinite("vertex with a non-finite coordinate")
    e = [p[(i + 1) % 4] - p[i] for i in range(4)]
    lengths = [hypot(*d) for d in e]
    for a, b in ((0, 2), (1, 3)):
        longest = max(lengths[a], lengths[b])
        if longest == 0 or abs(lengths[a] - lengths[b]) >= EDGE_TOLERANCE * longest:
            raise NotARectangle(f"opposite edges {lengths[a]:.6g} and {lengths[b]:.6g} disagree")
    center = p.mean(axis=0)
    return OrientedRect(
        center[0], center[1], w=lengths[1], h=lengths[0], theta=atan2(e[1][1], e[1][0])
    )


def aabb(r: OrientedRect) -> AxisRect:
    """Tightest axis-aligned box containing r."""
    v = vertices(r)
    lo, hi = v.min(axis=0), v.max(axis=0)
    return AxisRect(lo[0], lo[1], hi[0], hi[1])


def axis_iou(a: AxisRect, b: AxisRect) -> float:
    """Intersection over union of two axis-aligned boxes.

    >>> round(axis_iou(AxisRect(0, 0, 2, 2), AxisRect(1, 1, 3, 3)), 6)
    0.142857
    """
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def polygon(r: OrientedRect) -> Polygon:
    return Polygon(vertices(r))


def rotated_iou(a: OrientedRect, b: OrientedRect) -> float:
    """Intersection over union of two rotated rectangles.

    The intersection is an exact convex polygon clip; the union uses the
    exact rectangle areas.
    """
    if a == b:
        return 1.0
    reach = (hypot(a.w, a.h) + hypot(b.w, b.h)) / 2
    if hypot(a.x - b.x, a.y - b.y) > reach:
        return 0.0
    inter = polygon(a).intersection(polygon(b)).area
    if inter <= 0:
        return 0.0
    return float(min(1.0, inter / (a.area + b.area - inter)))


def angle_difference(a: float, b: float) -> float:
    """Absolute angle between two grasp orientations, folded into [0, pi/2].

    >>> angle_difference(0.1, pi + 0.1) < 1e-12
    True
    """
    return abs(wrap_angle(a - b))


def centered_box(w, h):
    """Axis box of size w x h centered at the origin, used for anchor matching."""
    return AxisRect(-w / 2, -h / 2, w / 2, h / 2)
