"""Confidence-weighted semi-supervised loss and finetuning.

The loss is the supervised mean over labelled images plus a weighted average
of per-image pseudo-label losses, normalised by the total image weight. An
image's weight is the mean confidence of its pseudo-labels; with the default
``"box"`` granularity each box's confidence also weights its own terms inside
the image loss.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from .diffusion.denoiser import PARAM_NAMES, DenoiserParams
from .diffusion.schedule import NoiseSchedule
from .diffusion.training import (
    Adam,
    Annotated,
    OptimizerConfig,
    TRAIN_PROPOSALS,
    check_finite,
    image_loss,
    supervised_loss,
)
from .errors import ConfigError, DivergedLoss, EmptyBatch, ZeroWeightMass
from .pseudolabel import PseudoLabel, label_arrays

log = logging.getLogger(__name__)

GRANULARITIES = ("box", "image")


def pseudo_item(scene, labels: Sequence[PseudoLabel]) -> Annotated:
    boxes, classes, weights = label_arrays(labels)
    return Annotated(scene, boxes, classes, weights)


@dataclass
class SslBatch:
    labeled: List[Annotated] = field(default_factory=list)
    unlabeled: List[Annotated] = field(default_factory=list)

    def __post_init__(self):
        self.labeled = [b if isinstance(b, Annotated) else Annotated.from_scene(b) for b in self.labeled]
        if not self.labeled and not self.unlabeled:
            raise EmptyBatch("an SSL batch needs at least one labelled or unlabelled image")
        for it in self.unlabeled:
            if it.weights is None or len(it.weights) != len(it.boxes):
                raise ConfigError(f"unlabelled image {it.scene.image_id} needs one weight per pseudo-label")
            if np.any(np.asarray(it.weights) <= 0) or np.any(np.asarray(it.weights) > 1):
                raise ConfigError(f"pseudo-label weights of image {it.scene.image_id} must lie in (0, 1]")
            if len(it.boxes) == 0:
                raise EmptyBatch(f"unlabelled image {it.scene.image_id} carries no pseudo-labels")


@dataclass
class SslLossBreakdown:
    supervised: float
    pseudo: float
    total: float
    weight_sum: float
    grads: Dict[str, np.ndarray] = field(repr=False)


def image_weight(item: Annotated) -> float:
    return float(np.mean(item.weights))


def ssl_loss(
    params: DenoiserParams,
    batch: SslBatch,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    granularity: str = "box",
    n_proposals: int = TRAIN_PROPOSALS,
) -> SslLossBreakdown:
    """Supervised mean plus the weight-normalised pseudo-label term.

    Labelled images are processed first, consuming ``rng`` exactly as
    :func:`supervised_loss` does, so a batch without unlabelled images gives
    that loss bit for bit.
    """
    if granularity not in GRANULARITIES:
        raise ConfigError(f"granularity must be one of {GRANULARITIES}, got {granularity!r}")
    zeros = {n: np.zeros_like(getattr(params, n)) for n in PARAM_NAMES}
    if batch.labeled:
        sup = supervised_loss(params, batch.labeled, schedule, rng, n_proposals)
        sup_total, grads = sup.total, sup.grads
    else:
        sup_total, grads = 0.0, zeros
    if not batch.unlabeled:
        return SslLossBreakdown(sup_total, 0.0, sup_total, 0.0, grads)

    wk = np.array([image_weight(it) for it in batch.unlabeled])
    wsum = float(wk.sum())
    if not wsum > 0:
        raise ZeroWeightMass("pseudo-label weights sum to zero")
    pseudo = 0.0
    pgrads = {n: np.zeros_like(g) for n, g in zeros.items()}
    for it, w in zip(batch.unlabeled, wk):
        r = image_loss(params, it, schedule, rng, n_proposals, box_weights=granularity == "box")
        pseudo += w * r.total
        for n in PARAM_NAMES:
            pgrads[n] += w * r.grads[n]
    pseudo /= wsum
    grads = {n: grads[n] + pgrads[n] / wsum for n in PARAM_NAMES}
    return SslLossBreakdown(sup_total, pseudo, sup_total + pseudo, wsum, grads)


def finetune(
    params: DenoiserParams,
    labeled: Sequence,
    pseudo: Sequence[Annotated],
    schedule: NoiseSchedule,
    cfg: OptimizerConfig = OptimizerConfig(steps=300),
    granularity: str = "box",
):
    """Adam on the SSL loss; returns ``(params, trace)``.

    Each step draws ``cfg.batch_size`` labelled images and, when pseudo-labelled
    images exist, as many of those (a 1:1 ratio). Unlabelled draws use their
    own stream, so an empty pseudo set reproduces supervised training with the
    same seed exactly.
    """
    labeled = [b if isinstance(b, Annotated) else Annotated.from_scene(b) for b in labeled]
    labeled = [it for it in labeled if len(it.boxes)]
    if not labeled:
        raise EmptyBatch("finetune needs at least one labelled image")
    pseudo = [p for p in pseudo if len(p.boxes)]
    params = params.copy()
    opt = Adam(params, cfg)
    rng = np.random.default_rng(cfg.seed)
    pick_rng = np.random.default_rng([cfg.seed, 1])
    trace = []
    for step in range(cfg.steps):
        idx = rng.choice(len(labeled), size=min(cfg.batch_size, len(labeled)), replace=False)
        unl = []
        if pseudo:
            jdx = pick_rng.choice(len(pseudo), size=min(cfg.batch_size, len(pseudo)), replace=False)
            unl = [pseudo[j] for j in jdx]
        res = ssl_loss(params, SslBatch([labeled[i] for i in idx], unl), schedule, rng, granularity, cfg.n_proposals)
        check_finite(res.total, step)
        trace.append(res.total)
        opt.step(params, res.grads)
        if not params.all_finite():
            raise DivergedLoss(f"parameters became non-finite at step {step}")
    return opt.result(params), np.asarray(trace)
