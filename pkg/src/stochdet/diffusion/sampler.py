"""Reverse sampling: random boxes -> refined detections."""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np

from ..accumulator import DetectionRun
from ..errors import ConfigError
from ..nms import DetectionSet
from .denoiser import DenoiserParams, build_inputs, mlp_forward, softmax, split_output
from .latent import decode, from_unit, to_unit
from .schedule import NoiseSchedule, cosine_schedule

DEFAULT_BOXES = 300
DEFAULT_STEPS = 10


@dataclass(frozen=True)
class SamplerConfig:
    num_boxes: int = DEFAULT_BOXES
    num_steps: int = DEFAULT_STEPS
    f_box_size: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_boxes < 1 or self.num_steps < 1 or not self.f_box_size > 0:
            raise ConfigError(f"invalid sampler config {self}")


def initial_latents(cfg: SamplerConfig, rng: np.random.Generator, scale: float) -> np.ndarray:
    """Standard-normal latents with decoded width/height shrunk by ``f_box_size``."""
    z = rng.standard_normal((cfg.num_boxes, 4))
    if cfg.f_box_size != 1.0:
        unit_wh = to_unit(z[:, 2:], scale) * cfg.f_box_size
        z[:, 2:] = from_unit(unit_wh, scale)
    return z


def reverse_sample(
    scene,
    params: DenoiserParams,
    cfg: SamplerConfig = SamplerConfig(),
    schedule: NoiseSchedule = None,
    run_index: int = 1,
) -> DetectionRun:
    """Deterministic DDIM refinement from a seeded draw of random boxes.

    ``scene`` supplies ``features``, ``width``, ``height`` and ``image_id``.
    Every step predicts the clean latent, then re-noises it to the next
    timestep using the implied noise; the final prediction is decoded and
    clipped to the image. Confidence is the softmax probability of the best
    foreground class (background logit included in the normaliser).
    """
    schedule = schedule or cosine_schedule()
    rng = np.random.default_rng(cfg.seed)
    s = params.scale
    z = initial_latents(cfg, rng, s)
    steps = schedule.inference_steps(cfg.num_steps)
    ab = schedule.alpha_bar
    for t, t_next in zip(steps[:-1], steps[1:]):
        x = build_inputs(z, t, scene.features, params)
        out, _ = mlp_forward(params, x)
        z0_hat, logits = split_output(out, x, s)
        z0_hat = np.clip(z0_hat, -s, s)
        if t_next > 0:
            eps = (z - math.sqrt(ab[t]) * z0_hat) / math.sqrt(1.0 - ab[t])
            z = math.sqrt(ab[t_next]) * z0_hat + math.sqrt(1.0 - ab[t_next]) * eps
    probs = softmax(logits)[:, : params.n_classes]
    classes = probs.argmax(axis=1)
    scores = probs[np.arange(len(probs)), classes]
    boxes = decode(z0_hat, scene.width, scene.height, s)
    return DetectionRun(scene.image_id, run_index, DetectionSet(boxes, classes, scores))


def run_seed(base_seed: int, image_id, run_index: int) -> int:
    """Seed for one (image, run) pair; independent across both."""
    ss = np.random.SeedSequence([int(base_seed), zlib.crc32(str(image_id).encode()), int(run_index)])
    return int(ss.generate_state(1)[0])


def sample_runs(scene, params, n_runs: int, cfg: SamplerConfig = SamplerConfig(), schedule=None):
    """``n_runs`` independent runs for one scene, seeds derived from ``cfg.seed``."""
    runs = []
    for i in range(1, n_runs + 1):
        c = SamplerConfig(cfg.num_boxes, cfg.num_steps, cfg.f_box_size, run_seed(cfg.seed, scene.image_id, i))
        runs.append(reverse_sample(scene, params, c, schedule, run_index=i))
    return runs
