"""Set-prediction denoising loss, its analytic gradient, and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from ..boxgeom import iou_matrix
from ..errors import ConfigError, DivergedLoss, EmptyBatch
from .denoiser import DenoiserParams, PARAM_NAMES, build_inputs, head_jacobian, mlp_backward, mlp_forward, softmax, split_output
from .latent import encode, from_unit, to_unit, unit_to_xyxy
from .schedule import NoiseSchedule, forward_noise

log = logging.getLogger(__name__)

TRAIN_PROPOSALS = 48
POSITIVE_IOU = 0.5


@dataclass
class Annotated:
    """One training image: a scene plus the boxes it should be pulled toward."""

    scene: object
    boxes: np.ndarray
    class_ids: np.ndarray
    weights: Optional[np.ndarray] = None

    @classmethod
    def from_scene(cls, scene) -> "Annotated":
        return cls(scene, scene.boxes, scene.class_ids)


@dataclass
class ImageLoss:
    total: float
    coord: float
    cls: float
    grads: Dict[str, np.ndarray] = field(repr=False)


def match_cost(pred_latent: np.ndarray, gt_latent: np.ndarray, scale: float) -> np.ndarray:
    """``(1 - IoU) + ||latent difference||`` for every prediction/target pair."""
    iou = iou_matrix(unit_to_xyxy(to_unit(pred_latent, scale)), unit_to_xyxy(to_unit(gt_latent, scale)))
    dist = np.linalg.norm(pred_latent[:, None, :] - gt_latent[None, :, :], axis=2)
    return (1.0 - iou) + dist


def hungarian_match(cost: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    rows, cols = linear_sum_assignment(cost)
    return rows, cols


def greedy_match(cost: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Repeatedly take the cheapest remaining pair. Used as a cross-check."""
    cost = cost.astype(float).copy()
    rows, cols = [], []
    for _ in range(min(cost.shape)):
        r, c = np.unravel_index(np.argmin(cost), cost.shape)
        rows.append(r)
        cols.append(c)
        cost[r, :] = np.inf
        cost[:, c] = np.inf
    order = np.argsort(rows)
    return np.asarray(rows)[order], np.asarray(cols)[order]


def _padding_latents(rng, n: int, scale: float) -> np.ndarray:
    unit = np.clip(rng.normal(0.5, 1.0 / 6.0, (n, 4)), 1e-4, 1.0)
    return from_unit(unit, scale)


def image_loss(
    params: DenoiserParams,
    item: Annotated,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    n_proposals: int = TRAIN_PROPOSALS,
    box_weights: bool = True,
) -> ImageLoss:
    """Loss and parameter gradient for one image.

    Proposals are the target latents padded with random boxes, noised to a
    uniformly drawn step. Predictions are matched one-to-one to targets and
    pairs whose boxes do not overlap are discarded; the coordinate term is
    half the squared latent error averaged over the remaining pairs. The
    class term is cross-entropy over all proposals: a prediction takes the
    class of its matched target when their IoU reaches ``POSITIVE_IOU``,
    else that of any target it overlaps that well, else background. With
    ``box_weights`` both averages are weighted by the per-target weights,
    background proposals taking the image's mean weight.
    """
    scene = item.scene
    s = params.scale
    C = params.n_classes
    gt = encode(item.boxes, scene.width, scene.height, s)
    k = len(gt)
    w = np.ones(k) if item.weights is None or not box_weights else np.asarray(item.weights, dtype=np.float64)

    t = int(rng.integers(1, schedule.T + 1))
    pad = _padding_latents(rng, max(n_proposals - k, 0), s)
    z0 = np.concatenate([gt, pad])
    zt, _ = forward_noise(z0, t, schedule, rng)

    x = build_inputs(zt, t, scene.features, params)
    out, cache = mlp_forward(params, x)
    pred, logits = split_output(out, x, s)
    N = len(pred)

    overlap = iou_matrix(unit_to_xyxy(to_unit(pred, s)), unit_to_xyxy(to_unit(gt, s)))
    dist = np.linalg.norm(pred[:, None, :] - gt[None, :, :], axis=2)
    rows, cols = hungarian_match((1.0 - overlap) + dist)
    # a prediction that does not touch its assigned target carries no
    # information about it; such pairs are dropped
    touching = overlap[rows, cols] > 0
    rows, cols = rows[touching], cols[touching]
    resid = pred[rows] - gt[cols]
    wm = w[cols]
    coord = 0.5 * float(np.sum(wm * np.sum(resid**2, axis=1)) / wm.sum()) if len(rows) else 0.0

    # a prediction is foreground only where it actually lands on an object:
    # its matched target if that overlap is good enough, else the nearest
    target = np.full(N, C)
    omega = np.full(N, w.mean())
    near = overlap.argmax(axis=1)
    hit = overlap[np.arange(N), near] >= POSITIVE_IOU
    target[hit] = item.class_ids[near[hit]]
    omega[hit] = w[near[hit]]
    good = overlap[rows, cols] >= POSITIVE_IOU
    target[rows[good]] = item.class_ids[cols[good]]
    omega[rows[good]] = wm[good]
    probs = softmax(logits)
    ce = -np.log(np.clip(probs[np.arange(N), target], 1e-300, None))
    cls = float(np.sum(omega * ce) / omega.sum())

    dout = np.zeros_like(out)
    if len(rows):
        dout[rows, :4] = (wm / wm.sum())[:, None] * resid * head_jacobian(out[rows], x[rows], s)
    dlogits = probs.copy()
    dlogits[np.arange(N), target] -= 1.0
    dout[:, 4:] = (omega / omega.sum())[:, None] * dlogits
    grads = mlp_backward(params, cache, dout)
    return ImageLoss(coord + cls, coord, cls, grads)


@dataclass
class LossResult:
    total: float
    coord: float
    cls: float
    grads: Dict[str, np.ndarray] = field(repr=False)


def _as_items(batch) -> List[Annotated]:
    return [b if isinstance(b, Annotated) else Annotated.from_scene(b) for b in batch]


def mean_loss(params, items: Sequence[Annotated], schedule, rng, n_proposals=TRAIN_PROPOSALS, box_weights=True):
    """Unweighted mean of per-image losses and gradients, accumulated in order."""
    grads = {n: np.zeros_like(getattr(params, n)) for n in PARAM_NAMES}
    total = coord = cls = 0.0
    for item in items:
        r = image_loss(params, item, schedule, rng, n_proposals, box_weights)
        total += r.total
        coord += r.coord
        cls += r.cls
        for n in PARAM_NAMES:
            grads[n] += r.grads[n]
    m = len(items)
    return LossResult(total / m, coord / m, cls / m, {n: g / m for n, g in grads.items()})


def supervised_loss(params, batch, schedule, rng, n_proposals: int = TRAIN_PROPOSALS) -> LossResult:
    """Mean over scenes of the matched denoising loss, with its gradient."""
    items = _as_items(batch)
    if not items:
        raise EmptyBatch("supervised_loss needs at least one scene")
    for it in items:
        if len(it.boxes) == 0:
            raise EmptyBatch(f"scene {it.scene.image_id} has no ground truth")
    return mean_loss(params, items, schedule, rng, n_proposals)


# --- optimisation ------------------------------------------------------------


@dataclass
class OptimizerConfig:
    steps: int = 1500
    lr: float = 3e-3
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    n_proposals: int = TRAIN_PROPOSALS
    # exponential moving average of the iterates; 0 returns the last iterate
    ema_decay: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError(f"ema_decay must lie in [0, 1), got {self.ema_decay}")


class Adam:
    def __init__(self, params: DenoiserParams, cfg: OptimizerConfig):
        self.cfg = cfg
        self.m = {n: np.zeros_like(a) for n, a in params.arrays()}
        self.v = {n: np.zeros_like(a) for n, a in params.arrays()}
        self.k = 0
        self.avg = params.copy() if cfg.ema_decay > 0 else None

    def result(self, params: DenoiserParams) -> DenoiserParams:
        """The averaged weights when averaging is on, else ``params``."""
        return params if self.avg is None else self.avg.copy()

    def step(self, params: DenoiserParams, grads: Dict[str, np.ndarray]) -> None:
        c = self.cfg
        self.k += 1
        if c.lr == 0:
            return
        for n, a in params.arrays():
            g = grads[n]
            self.m[n] = c.beta1 * self.m[n] + (1 - c.beta1) * g
            self.v[n] = c.beta2 * self.v[n] + (1 - c.beta2) * g * g
            mhat = self.m[n] / (1 - c.beta1**self.k)
            vhat = self.v[n] / (1 - c.beta2**self.k)
            a -= c.lr * mhat / (np.sqrt(vhat) + c.eps)
        if self.avg is not None:
            d = c.ema_decay
            for (_, a), (_, b) in zip(self.avg.arrays(), params.arrays()):
                a *= d
                a += (1.0 - d) * b


def check_finite(value: float, step: int) -> None:
    if not math.isfinite(value):
        raise DivergedLoss(f"loss became non-finite at step {step}")


def train(params: DenoiserParams, dataset, schedule: NoiseSchedule, cfg: OptimizerConfig = OptimizerConfig()):
    """Adam on minibatches of ``cfg.batch_size`` scenes; returns ``(params, trace)``."""
    items = _as_items(dataset)
    items = [it for it in items if len(it.boxes)]
    if not items:
        raise EmptyBatch("train needs a non-empty dataset")
    params = params.copy()
    opt = Adam(params, cfg)
    rng = np.random.default_rng(cfg.seed)
    trace = []
    for step in range(cfg.steps):
        pick = rng.choice(len(items), size=min(cfg.batch_size, len(items)), replace=False)
        res = mean_loss(params, [items[i] for i in pick], schedule, rng, cfg.n_proposals)
        check_finite(res.total, step)
        trace.append(res.total)
        opt.step(params, res.grads)
        if not params.all_finite():
            raise DivergedLoss(f"parameters became non-finite at step {step}")
        if step % 250 == 0:
            log.debug("step %d loss %.4f", step, res.total)
    return opt.result(params), np.asarray(trace)


def dataset_loss(params, dataset, schedule, seed: int = 0, n_proposals: int = TRAIN_PROPOSALS) -> float:
    """Loss over the whole dataset with a fixed noise draw; comparable across params."""
    items = [it for it in _as_items(dataset) if len(it.boxes)]
    return mean_loss(params, items, schedule, np.random.default_rng(seed), n_proposals).total
