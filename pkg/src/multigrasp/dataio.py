"""
Reading and writing everything the pipeline exchanges with the outside.

- Cornell grasp-rectangle files: one "x y" pair per line, four lines per rectangle.
- Scene documents (JSON): annotated objects, their support relation and grasps.
- Scene-understanding, plan and episode documents produced by the pipeline.
- Tensor bundles: a JSON manifest followed by little-endian float32 values.
- A seeded generator of synthetic table-top scenes.

Documents are written canonically: sorted keys, 2-space indent and floats
rounded to 6 decimals, so equal inputs give byte-identical files.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from math import ceil, cos, floor, isinf, isnan, pi, sin
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .anchor_codec import HeadTensor, ScaleSpec
from .classes import (
    AxisRect,
    BadMagic,
    BadScene,
    CyclicGraph,
    Detection,
    GraspCandidate,
    MalformedLine,
    NotARectangle,
    NonFinite,
    OrientedRect,
    PairedObject,
    RelationGraph,
    SceneAnnotation,
    SceneGrasp,
    SceneObject,
    ShapeMismatch,
    TruncatedFile,
    TruncatedPayload,
    find_cycle,
)
from .functions import normalize_angle
from .geometry import axis_iou, rect_from_vertices
from .planner import Episode, GraspPlan, SceneState, grasp_order
from .postprocess import stacking_depth

logger = logging.getLogger(__name__)

PRECISION = 6
MAGIC = b"MTGD1"


def canonical(document) -> str:
    """Serialize a document with sorted keys and floats rounded to 6 decimals."""
    return json.dumps(_rounded(document), sort_keys=True, indent=2) + "\n"


def _rounded(value):
    if isinstance(value, float):
        return round(value, PRECISION) + 0.0
    if isinstance(value, (np.floating, np.integer)):
        return _rounded(value.item())
    if isinstance(value, dict):
        return {str(k): _rounded(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, np.ndarray)):
        return [_rounded(v) for v in value]
    return value


def read_document(text):
    """Parse a JSON document, or pass an already parsed one through."""
    if isinstance(text, (dict, list)):
        return text
    try:
        return json.loads(text)
    except ValueError as e:
        raise BadScene(f"not a JSON document: {e}") from None


########################
# CORNELL              #
########################


@dataclass(frozen=True)
class CornellSample:
    image_id: str
    positives: Tuple[OrientedRect, ...]
    negatives: Tuple[OrientedRect, ...] = ()
    group: str = ""
    skipped: int = 0


def parse_cornell_rect_file(text: str) -> Tuple[List[OrientedRect], int]:
    """Parse a Cornell rectangle file into rectangles and the number of NaN groups skipped.

    Blank lines are ignored; line numbers in errors count every line.

    >>> rects, skipped = parse_cornell_rect_file("2 1\\n-2 1\\n-2 -1\\n2 -1\\n")
    >>> (rects[0].x, rects[0].y, skipped)
    (0.0, 0.0, 0)
    """
    rows = []
    for number, line in enumerate(text.splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != 2:
            raise MalformedLine(f"expected 'x y', got {line.strip()!r}", number)
        try:
            x, y = float(tokens[0]), float(tokens[1])
        except ValueError:
            raise MalformedLine(f"non-numeric token in {line.strip()!r}", number) from None
        if isinf(x) or isinf(y):
            raise MalformedLine(f"infinite coordinate in {line.strip()!r}", number)
        rows.append((number, x, y))

    if len(rows) % 4:
        first = rows[len(rows) - len(rows) % 4][0]
        raise TruncatedFile(f"{len(rows) % 4} trailing lines don't form a rectangle", first)

    rects, skipped = [], 0
    for i in range(0, len(rows), 4):
        group = rows[i:i + 4]
        if any(isnan(x) or isnan(y) for _, x, y in group):
            skipped += 1
            logger.info("skipping rectangle with a NaN vertex at line %d", group[0][0])
            continue
        try:
            rects.append(rect_from_vertices([(x, y) for _, x, y in group]))
        except (NotARectangle, NonFinite) as e:
            raise MalformedLine(str(e), group[0][0]) from None
    return rects, skipped


def cornell_group_key(image_id: str) -> str:
    """Object group of a Cornell image: its number without the last digit.

    >>> cornell_group_key("pcd0123r")
    '012'
    """
    digits = re.search(r"\d+", image_id)
    if not digits:
        return image_id
    return digits.group()[:-1] or digits.group()


def load_cornell_sample(
    positive_text: str,
    negative_text: str = "",
    image_id: str = "",
    group_key: Callable[[str], str] = cornell_group_key,
) -> CornellSample:
    positives, skipped_pos = parse_cornell_rect_file(positive_text)
    negatives, skipped_neg = parse_cornell_rect_file(negative_text)
    return CornellSample(image_id, tuple(positives), tuple(negatives), group_key(image_id), skipped_pos + skipped_neg)


def load_cornell_predictions(document) -> Dict[str, List[Tuple[OrientedRect, float]]]:
    """Scored grasps per image id from a Cornell prediction document."""
    doc = read_document(document)
    out = {}
    try:
        for image in doc.get("images", []):
            out[str(image["id"])] = [(_rect(g), float(g.get("pr", 1.0))) for g in image.get("grasps", [])]
    except (KeyError, TypeError, AttributeError) as e:
        raise BadScene(f"prediction document lacks field {e}") from None
    except ValueError as e:
        raise BadScene(f"prediction document has a bad value: {e}") from None
    return out


########################
# SCENES               #
########################


def _rect(d) -> OrientedRect:
    try:
        return OrientedRect(d["x"], d["y"], d["w"], d["h"], d.get("theta", 0.0))
    except (KeyError, TypeError) as e:
        raise BadScene(f"grasp {d!r} lacks field {e}") from None
    except ValueError as e:
        raise BadScene(f"grasp {d!r} has a bad value: {e}") from None


def _rect_doc(r: OrientedRect):
    return {"x": r.x, "y": r.y, "w": r.w, "h": r.h, "theta": r.theta}


def load_scene(document) -> SceneAnnotation:
    """Build a SceneAnnotation from a scene document (text or parsed).

    A top-level "grasps" list of {"object", x, y, w, h, theta} entries is
    accepted as well and attached to the named objects.
    """
    doc = read_document(document)
    try:
        image = doc["image"]
        objects = []
        for o in doc["objects"]:
            cls = o["class"]
            objects.append(
                SceneObject(
                    id=int(o["id"]),
                    class_id=int(cls["index"]),
                    class_name=str(cls.get("name", cls["index"])),
                    box=AxisRect(*o["box"]),
                    on_top_of=tuple(int(i) for i in o.get("on_top_of", [])),
                    grasps=tuple(_rect(g) for g in o.get("grasps", [])),
                )
            )
        loose = tuple(SceneGrasp(int(g["object"]), _rect(g)) for g in doc.get("grasps", []))
        return SceneAnnotation(int(image["w"]), int(image["h"]), tuple(objects), loose)
    except (KeyError, TypeError) as e:
        raise BadScene(f"scene document lacks field {e}") from None
    except ValueError as e:
        raise BadScene(f"scene document has a bad value: {e}") from None


def scene_document(scene: SceneAnnotation):
    return {
        "image": {"w": scene.image_w, "h": scene.image_h},
        "objects": [
            {
                "id": o.id,
                "class": {"index": o.class_id, "name": o.class_name},
                "box": list(o.box.as_tuple()),
                "on_top_of": list(o.on_top_of),
                "grasps": [_rect_doc(g) for g in o.grasps],
            }
            for o in scene.objects
        ],
    }


def save_scene(scene: SceneAnnotation) -> str:
    return canonical(scene_document(scene))


def understanding_document(g: RelationGraph):
    """What the pipeline understood of one image: objects, grasps, support edges, grasp order."""
    objects = []
    for n in g.nodes:
        d = n.detection
        grasp = None
        if n.best_grasp is not None:
            grasp = dict(_rect_doc(n.best_grasp.rect), pr=n.best_grasp.pr)
        objects.append(
            {
                "id": n.id,
                "class": d.class_id,
                "pr": d.pr,
                "box": list(d.box.as_tuple()),
                "fc_scores": list(d.fc_scores),
                "cc_scores": list(d.cc_scores),
                "grasp": grasp,
                "ord": g.ord[n.id],
            }
        )
    return {"objects": objects, "edges": [list(e) for e in g.edges], "order": grasp_order(g)}


def load_relation_graph(document) -> RelationGraph:
    """Rebuild a RelationGraph from a scene-understanding document.

    Class distributions aren't stored, so each node gets a one-hot one.
    Stacking depths are recomputed from the edges.
    """
    doc = read_document(document)
    nodes = []
    try:
        for o in doc["objects"]:
            fc = np.asarray(o["fc_scores"], dtype=float)
            scores = np.zeros(len(fc) - 1)
            scores[int(o["class"])] = 1.0
            det = Detection(
                int(o["class"]), scores, float(o["pr"]), AxisRect(*o["box"]), fc,
                np.asarray(o["cc_scores"], dtype=float),
            )
            grasp = None
            if o.get("grasp"):
                grasp = GraspCandidate(_rect(o["grasp"]), float(o["grasp"].get("pr", det.pr)), det.class_id, scores)
            nodes.append(PairedObject(det, grasp, int(o["id"])))
        edges = tuple(sorted((int(c), int(p)) for c, p in doc.get("edges", [])))
    except (KeyError, TypeError, IndexError, ValueError) as e:
        raise BadScene(f"scene-understanding document is malformed: {e!r}") from None
    ids = [n.id for n in nodes]
    if len(set(ids)) != len(ids):
        raise BadScene("node ids must be unique")
    if any(c not in ids or p not in ids for c, p in edges):
        raise BadScene("edge with a missing endpoint")
    cycle = find_cycle({i: [p for c, p in edges if c == i] for i in ids})
    if cycle:
        raise CyclicGraph(f"relation cycle {cycle}")
    return RelationGraph(tuple(nodes), edges, stacking_depth(ids, edges))


def plan_document(plan: GraspPlan):
    return {"target": plan.target, "plan": list(plan.plan), "status": plan.status.value}


def episode_document(episode: Episode):
    return {
        "success": episode.success,
        "status": episode.status.value,
        "steps": episode.steps,
        "removed": list(episode.removed),
        "log": [dict(entry) for entry in episode.log],
    }


########################
# TENSOR BUNDLES       #
########################


def save_bundle(h: HeadTensor) -> bytes:
    """MTGD1, header length and JSON manifest on their own lines, then the float32 payload."""
    payload = h.flat().astype("<f4").tobytes()
    first = h.specs[0]
    header = {
        "classes": h.n_classes,
        "input": [first.input_w, first.input_h],
        "scales": [
            {
                "id": s.scale_id,
                "gw": s.grid_w,
                "gh": s.grid_h,
                "od_anchors": [list(a) for a in s.od_anchors],
                "gd_anchors": [list(a) for a in s.gd_anchors],
                "gd_angles": list(s.gd_angles),
            }
            for s in h.specs
        ],
        "endianness": "little",
        "dtype": "float32",
        "payload_bytes": len(payload),
    }
    body = json.dumps(header, sort_keys=True).encode("ascii")
    return MAGIC + b"\n" + str(len(body)).encode("ascii") + b"\n" + body + payload


def _scale_from_header(s, width, height) -> ScaleSpec:
    gw, gh = int(s["gw"]), int(s["gh"])
    if width % gw or height % gh or width // gw != height // gh:
        raise ShapeMismatch(f"grid {gw}x{gh} doesn't tile a {width}x{height} input")
    return ScaleSpec(
        int(s["id"]),
        width // gw,
        gw,
        gh,
        od_anchors=tuple(tuple(float(v) for v in a) for a in s["od_anchors"]),
        gd_anchors=tuple(tuple(float(v) for v in a) for a in s["gd_anchors"]),
        gd_angles=tuple(float(a) for a in s["gd_angles"]),
    )


def load_bundle(data: bytes) -> HeadTensor:
    """Read a tensor bundle; the manifest is checked before the payload is touched."""
    if not data.startswith(MAGIC + b"\n"):
        raise BadMagic("data doesn't start with the MTGD1 magic")
    rest = data[len(MAGIC) + 1:]
    length, sep, rest = rest.partition(b"\n")
    if not sep or not length.isdigit():
        raise ShapeMismatch("bundle header length is missing")
    n = int(length)
    if len(rest) < n:
        raise TruncatedPayload("bundle ends inside its header")
    try:
        header = json.loads(rest[:n].decode("ascii"))
        n_classes = int(header["classes"])
        width, height = (int(v) for v in header["input"])
        if header.get("endianness", "little") != "little" or header.get("dtype", "float32") != "float32":
            raise ShapeMismatch("only little-endian float32 payloads are supported")
        specs = [_scale_from_header(s, width, height) for s in header["scales"]]
        declared = int(header["payload_bytes"])
    except (KeyError, TypeError, ValueError, AssertionError) as e:
        raise ShapeMismatch(f"bundle header is malformed: {e!r}") from None
    expected = 4 * sum(int(np.prod(s.od_shape(n_classes))) + int(np.prod(s.gd_shape(n_classes))) for s in specs)
    if declared != expected:
        raise ShapeMismatch(f"header declares {declared} payload bytes, its scales need {expected}")
    payload = rest[n:]
    if len(payload) < declared:
        raise TruncatedPayload(f"payload has {len(payload)} of {declared} bytes")
    if len(payload) > declared:
        raise ShapeMismatch(f"{len(payload) - declared} bytes after the payload")
    values = np.frombuffer(payload, dtype="<f4").astype(float)
    return HeadTensor.from_flat(values, specs, n_classes)


########################
# SYNTHETIC SCENES     #
########################

# grasps sharing an angle bin never share a cell of this size
GRASP_CELL = 16
MIN_STACK_IOU = 0.12


def _between(rng, lo, hi):
    """A random k + 0.5 with k integer inside [lo, hi], or the k + 0.5 nearest the middle."""
    a, b = ceil(lo - 0.5), floor(hi - 0.5)
    if b < a:
        return floor((lo + hi) / 2) + 0.5
    return int(rng.integers(a, b + 1)) + 0.5


def _place(rng, size, extent):
    """Center coordinate keeping a span of `size` inside [0, extent]."""
    return _between(rng, size / 2, extent - size / 2)


def _clamp(center, size, extent):
    """Shift a k + 0.5 center so a span of `size` stays inside [0, extent]."""
    return min(max(center, ceil(size / 2 - 0.5) + 0.5), floor(extent - size / 2 - 0.5) + 0.5)


def synth_scene(
    seed, n_objects, n_classes=31, image_size=320, class_names: Optional[Sequence[str]] = None
) -> Tuple[SceneAnnotation, SceneState]:
    """A random table-top scene: distinct classes, a stacking forest and 1-3 grasps per object.

    Stacked objects overlap their support with IOU >= 0.12. Every grasp lies
    inside its object's box, and the simulator state mirrors the annotation.
    """
    assert 1 <= n_objects <= 10, "between 1 and 10 objects"
    assert n_classes >= n_objects, "need a distinct class per object"
    rng = np.random.default_rng(seed)
    size = float(image_size)
    classes = [int(c) for c in rng.choice(n_classes, n_objects, replace=False)]
    names = class_names or [f"class-{c}" for c in range(n_classes)]

    boxes: List[AxisRect] = []
    supports: List[Tuple[int, ...]] = []
    for i in range(n_objects):
        parent = int(rng.integers(i)) if i and rng.random() < 0.6 else None
        w = round(rng.uniform(0.2, 0.35) * size * 4) / 4
        h = round(rng.uniform(0.2, 0.35) * size * 4) / 4
        if parent is None:
            box = AxisRect.from_center(_place(rng, w, size), _place(rng, h, size), w, h)
        else:
            under = boxes[parent]
            px, py = under.center
            box = AxisRect.from_center(_clamp(px, w, size), _clamp(py, h, size), w, h)
            for _ in range(20):
                cx = _clamp(px + round(rng.uniform(-0.5, 0.5) * under.w), w, size)
                cy = _clamp(py + round(rng.uniform(-0.5, 0.5) * under.h), h, size)
                candidate = AxisRect.from_center(cx, cy, w, h)
                if axis_iou(candidate, under) >= MIN_STACK_IOU:
                    box = candidate
                    break
        boxes.append(box)
        supports.append((parent,) if parent is not None else ())

    used = set()
    objects = []
    for i, box in enumerate(boxes):
        m = min(box.w, box.h)
        grasps = []
        for b in rng.choice(4, int(rng.integers(1, 4)), replace=False):
            gw = round(rng.uniform(0.5, 0.7) * m, 3)
            gh = round(rng.uniform(0.3, 0.5) * m, 3)
            theta = round(normalize_angle(round(b * pi / 4 + rng.uniform(-0.3, 0.3), PRECISION)), PRECISION)
            ex = (gw * abs(cos(theta)) + gh * abs(sin(theta))) / 2
            ey = (gw * abs(sin(theta)) + gh * abs(cos(theta))) / 2
            for _ in range(20):
                gx = _between(rng, box.x1 + ex, box.x2 - ex)
                gy = _between(rng, box.y1 + ey, box.y2 - ey)
                cell = (floor(gx / GRASP_CELL), floor(gy / GRASP_CELL), int(b))
                if cell not in used:
                    break
            else:
                if grasps:
                    continue
            used.add(cell)
            grasps.append(OrientedRect(gx, gy, gw, gh, theta))
        objects.append(SceneObject(i, classes[i], names[classes[i]], box, supports[i], tuple(grasps)))

    scene = SceneAnnotation(int(image_size), int(image_size), tuple(objects))
    return scene, SceneState.from_annotation(scene, n_classes=n_classes)
