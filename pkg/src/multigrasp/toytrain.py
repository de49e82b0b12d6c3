"""
Direct optimisation of a head tensor against encoded targets.

No backbone: the raw head values themselves are the parameters. This checks
that the codec, the loss gradient and the metrics fit together, one scene at
a time.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import List, Tuple

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from .anchor_codec import HeadTensor, TargetAssignment, default_scale_specs, encode_targets
from .classes import DivergenceDetected, NonFinite, SceneAnnotation
from .dataio import synth_scene
from .evaluation import EvalConfig, grasp_match
from .geometry import axis_iou
from .loss import LossConfig, multitask_loss
from .postprocess import PostConfig, run_pipeline

logger = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    lr: float = 0.1
    momentum: float = 0.9
    seed: int = 0
    init_scale: float = 0.01
    optimizer: str = "sgd"
    beta2: float = 0.999
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        assert self.steps >= 1, "steps must be at least 1"
        assert self.lr >= 0, "learning rate can't be negative"
        assert 0 <= self.momentum < 1, "momentum must lie in [0, 1)"
        assert 0 <= self.beta2 < 1, "beta2 must lie in [0, 1)"
        assert self.init_scale >= 0, "init_scale can't be negative"
        assert self.optimizer in OPTIMIZERS, f"optimizer must be one of {OPTIMIZERS}"


class SGDMomentum:
    """Classic momentum: v <- mu v - lr g, x <- x + v."""

    def __init__(self, lr, mu):
        self.lr, self.mu = lr, mu
        self.velocity = None

    def step(self, params, grad):
        if self.velocity is None:
            self.velocity = np.zeros_like(params)
        self.velocity = self.mu * self.velocity - self.lr * grad
        return params + self.velocity


class Adam:
    """Adam with bias correction; beta1 is the momentum setting."""

    def __init__(self, lr, beta1, beta2, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, params, grad):
        if self.m is None:
            self.m, self.v = np.zeros_like(params), np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass(frozen=True, eq=False)
class TrainTrace:
    """Loss per step (before that step's update), the final tensor and the time taken."""

    totals: np.ndarray
    terms: Tuple[dict, ...]
    final: HeadTensor
    wall_time: float

    def __len__(self):
        return len(self.totals)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(list(self.terms)).rename_axis("step")

    def to_text(self):
        """Two columns, step and total, one line per step."""
        return "".join(f"{i} {v:.6f}\n" for i, v in enumerate(self.totals))

    def plot(self, ax=None):
        """Graph the total loss over the steps on a log scale."""
        ax = ax or plt.gca()
        ax.semilogy(np.arange(len(self.totals)), self.totals)
        ax.set_xlabel("step")
        ax.set_ylabel("total loss")
        return ax


def train_direct(a: TargetAssignment, specs, cfg: TrainConfig = TrainConfig()) -> TrainTrace:
    """Fit a head tensor to an assignment by gradient descent on the multi-task loss."""
    specs = tuple(specs)
    assert specs == a.specs, "assignment was encoded for other scale specs"
    start = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    size = HeadTensor.zeros(specs, a.n_classes).size
    params = rng.normal(0.0, cfg.init_scale, size)
    if cfg.optimizer == "adam":
        opt = Adam(cfg.lr, cfg.momentum, cfg.beta2)
    else:
        opt = SGDMomentum(cfg.lr, cfg.momentum)

    totals, terms = [], []
    for step in range(cfg.steps):
        h = HeadTensor.from_flat(params, specs, a.n_classes)
        try:
            br = multitask_loss(h, a, cfg.loss)
        except NonFinite:
            raise DivergenceDetected(step, float("inf")) from None
        if not np.isfinite(br.total):
            raise DivergenceDetected(step, br.total)
        totals.append(br.total)
        terms.append(br.terms())
        params = opt.step(params, br.grad.flat())
        if not np.all(np.isfinite(params)):
            raise DivergenceDetected(step, float("nan"))
        if step % 100 == 0:
            logger.debug("step %d: total %.6g", step, br.total)

    final = HeadTensor.from_flat(params, specs, a.n_classes)
    elapsed = time.perf_counter() - start
    logger.info("%d steps in %.2fs, loss %.6g -> %.6g", cfg.steps, elapsed, totals[0], totals[-1])
    return TrainTrace(np.array(totals), tuple(terms), final, elapsed)


@dataclass(frozen=True)
class ObjectRecovery:
    object_id: int
    class_id: int
    box_iou: float
    grasp_ok: bool
    success: bool


@dataclass(frozen=True)
class RecoveryReport:
    objects: Tuple[ObjectRecovery, ...]

    @property
    def success_rate(self):
        """Share of recovered objects; 1.0 for a scene without objects."""
        if not self.objects:
            return 1.0
        return sum(o.success for o in self.objects) / len(self.objects)

    @property
    def success(self):
        return all(o.success for o in self.objects)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [vars(o) for o in self.objects], columns=["object_id", "class_id", "box_iou", "grasp_ok", "success"]
        )

    def to_text(self):
        if not self.objects:
            return "no objects\n"
        return self.to_frame().to_string(index=False) + f"\nrecovered {self.success_rate:.4f}\n"


def verify_recovery(
    trace: TrainTrace,
    scene: SceneAnnotation,
    specs,
    cfg: EvalConfig = EvalConfig(),
    post: PostConfig = PostConfig(),
) -> RecoveryReport:
    """Run the pipeline on the trained tensor and score every ground-truth object.

    An object is recovered when a detection of its class overlaps it with IOU
    above od_iou_threshold and that detection's grasp passes the rectangle metric.
    """
    g = run_pipeline(trace.final, specs, post)
    results = []
    for o in scene.objects:
        same = [n for n in g.nodes if n.class_id == o.class_id]
        best = max(same, key=lambda n: (axis_iou(n.box, o.box), -n.id), default=None)
        iou = axis_iou(best.box, o.box) if best else 0.0
        grasp_ok = bool(best and best.best_grasp and grasp_match(best.best_grasp.rect, o.grasps, cfg))
        results.append(ObjectRecovery(o.id, o.class_id, iou, grasp_ok, iou > cfg.od_iou_threshold and grasp_ok))
    return RecoveryReport(tuple(results))


def standard_suite(n_classes=31, image_size=320) -> List[Tuple[int, SceneAnnotation]]:
    """The eight reference scenes: seeds 0-7 with 1 + seed % 3 objects each."""
    return [(seed, synth_scene(seed, 1 + seed % 3, n_classes, image_size)[0]) for seed in range(8)]


def train_scene(scene: SceneAnnotation, cfg: TrainConfig = TrainConfig(), n_classes=31, eval_cfg=EvalConfig()):
    """Encode a scene, train on it and check the result. Returns (trace, report)."""
    specs = default_scale_specs(scene.image_w, n_classes)
    a = encode_targets(scene, specs, n_classes)
    trace = train_direct(a, specs, cfg)
    return trace, verify_recovery(trace, scene, specs, eval_cfg)
