"""Per-box denoiser: a one-hidden-layer perceptron with hand-written backprop.

Each box is processed independently. Its input row is the clamped latent
(divided by the signal scale), a sinusoidal embedding of the step, and the
scene feature map pooled over a 3x3 grid of points inside the box (as an RoI
head would). Outputs are the predicted clean latent and ``C + 1`` logits, the
last one being background.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterator, Tuple

import numpy as np

from ..errors import StepOutOfRange
from .latent import SIGNAL_SCALE, from_unit, to_unit

PARAM_NAMES = ("W1", "b1", "W2", "b2")
EMBED_DIM = 8
HIDDEN = 64
PRIOR_MASS = 0.05
_OFFSETS = np.array([-1.0 / 3.0, 0.0, 1.0 / 3.0])


@dataclass
class DenoiserParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    n_classes: int = 4
    embed_dim: int = EMBED_DIM
    scale: float = SIGNAL_SCALE

    @property
    def hidden(self) -> int:
        return self.W1.shape[1]

    @property
    def in_dim(self) -> int:
        return self.W1.shape[0]

    def arrays(self) -> Iterator[Tuple[str, np.ndarray]]:
        for name in PARAM_NAMES:
            yield name, getattr(self, name)

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(
            *(a.copy() for _, a in self.arrays()), n_classes=self.n_classes, embed_dim=self.embed_dim, scale=self.scale
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for _, a in self.arrays()])

    def with_flat(self, vec: np.ndarray) -> "DenoiserParams":
        out = self.copy()
        pos = 0
        for name, a in out.arrays():
            a[...] = vec[pos : pos + a.size].reshape(a.shape)
            pos += a.size
        return out

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for _, a in self.arrays())


def input_dim(n_classes: int, embed_dim: int = EMBED_DIM) -> int:
    return 4 + embed_dim + n_classes + 4


def init_params(
    rng: np.random.Generator, n_classes: int = 4, hidden: int = HIDDEN, embed_dim: int = EMBED_DIM
) -> DenoiserParams:
    d_in = input_dim(n_classes, embed_dim)
    d_out = 4 + n_classes + 1
    W1 = rng.standard_normal((d_in, hidden)) * np.sqrt(2.0 / d_in)
    W2 = rng.standard_normal((hidden, d_out)) * np.sqrt(1.0 / hidden) * 0.1
    return DenoiserParams(W1, np.zeros(hidden), W2, np.zeros(d_out), n_classes=n_classes, embed_dim=embed_dim)


def step_embedding(t, dim: int = EMBED_DIM) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def _bilinear(fmap: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample ``fmap [G, G, Ch]`` at normalised points; zero outside the image."""
    G = fmap.shape[0]
    padded = np.pad(fmap, ((1, 1), (1, 1), (0, 0)))
    gx = np.clip(x * G - 0.5, -1.0, G) + 1.0
    gy = np.clip(y * G - 0.5, -1.0, G) + 1.0
    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    fx = (gx - x0)[..., None]
    fy = (gy - y0)[..., None]
    x1 = np.minimum(x0 + 1, G + 1)
    y1 = np.minimum(y0 + 1, G + 1)
    return (
        padded[y0, x0] * (1 - fx) * (1 - fy)
        + padded[y0, x1] * fx * (1 - fy)
        + padded[y1, x0] * (1 - fx) * fy
        + padded[y1, x1] * fx * fy
    )


def roi_pool(fmap: np.ndarray, unit_boxes: np.ndarray, n_classes: int) -> np.ndarray:
    """Pool the feature map over each box; returns ``[N, C + 4]``.

    The map is sampled on a 3x3 grid inside the box and the sample with the
    most mass wins. Columns are that sample's class masses and its box
    estimate, shrunk toward the box itself when the mass is small.
    """
    unit_boxes = np.asarray(unit_boxes, dtype=np.float64).reshape(-1, 4)
    n = len(unit_boxes)
    cx, cy, w, h = unit_boxes.T
    px = cx[:, None, None] + _OFFSETS[None, None, :] * w[:, None, None]
    py = cy[:, None, None] + _OFFSETS[None, :, None] * h[:, None, None]
    px, py = np.broadcast_arrays(px, py)
    samples = _bilinear(fmap, px, py).reshape(n, 9, -1)
    mass = np.clip(samples[:, :, :n_classes], 0.0, None)
    best = mass.sum(axis=2).argmax(axis=1)
    picked = samples[np.arange(n), best]
    m = mass[np.arange(n), best]
    total = m.sum(axis=1, keepdims=True)
    est = (total * picked[:, n_classes : n_classes + 4] + PRIOR_MASS * unit_boxes) / (total + PRIOR_MASS)
    return np.concatenate([m, np.clip(est, 0.0, 1.0)], axis=1)


def build_inputs(zt: np.ndarray, t, fmap: np.ndarray, params: DenoiserParams) -> np.ndarray:
    zt = np.asarray(zt, dtype=np.float64).reshape(-1, 4)
    s = params.scale
    unit = to_unit(zt, s)
    pooled = roi_pool(fmap, unit, params.n_classes)
    C = params.n_classes
    est = from_unit(pooled[:, C:], s) / s
    t = np.broadcast_to(np.asarray(t), (len(zt),))
    emb = step_embedding(t, params.embed_dim)
    return np.concatenate([np.clip(zt, -s, s) / s, emb, pooled[:, :C], est], axis=1)


def mlp_forward(params: DenoiserParams, x: np.ndarray):
    pre = x @ params.W1 + params.b1
    hidden = np.maximum(pre, 0.0)
    out = hidden @ params.W2 + params.b2
    return out, (x, pre, hidden)


def mlp_backward(params: DenoiserParams, cache, dout: np.ndarray) -> Dict[str, np.ndarray]:
    x, pre, hidden = cache
    dW2 = hidden.T @ dout
    db2 = dout.sum(axis=0)
    dhidden = dout @ params.W2.T
    dpre = dhidden * (pre > 0)
    dW1 = x.T @ dpre
    db1 = dpre.sum(axis=0)
    return {"W1": dW1, "b1": db1, "W2": dW2, "b2": db2}


LOG_SCALE_CLIP = 4.0
MIN_REF_SIZE = 1e-3


def _reference(x: np.ndarray) -> np.ndarray:
    # pooled reference box in unit coordinates, from the last four input columns
    ref = (x[:, -4:] + 1.0) / 2.0
    ref[:, 2:] = np.maximum(ref[:, 2:], MIN_REF_SIZE)
    return ref


def split_output(out: np.ndarray, x: np.ndarray = None, scale: float = SIGNAL_SCALE):
    """Split into (clean latent, logits).

    Without ``x`` the first four outputs are the latent itself. With ``x`` they
    are deltas on the pooled reference box ``(cx, cy, w, h)`` carried in the
    input row: centre shifts in units of the reference size and log size
    ratios, the usual box-regression parametrisation.
    """
    if x is None:
        return out[:, :4], out[:, 4:]
    ref = _reference(x)
    d = out[:, :4]
    unit = np.empty_like(ref)
    unit[:, :2] = ref[:, :2] + ref[:, 2:] * d[:, :2]
    unit[:, 2:] = ref[:, 2:] * np.exp(np.clip(d[:, 2:], -LOG_SCALE_CLIP, LOG_SCALE_CLIP))
    return from_unit(unit, scale), out[:, 4:]


def head_jacobian(out: np.ndarray, x: np.ndarray, scale: float = SIGNAL_SCALE) -> np.ndarray:
    """Elementwise ``d latent / d out[:, :4]`` for :func:`split_output` with ``x``."""
    ref = _reference(x)
    d = out[:, :4]
    jac = np.empty_like(ref)
    jac[:, :2] = ref[:, 2:]
    inside = np.abs(d[:, 2:]) < LOG_SCALE_CLIP
    jac[:, 2:] = ref[:, 2:] * np.exp(np.clip(d[:, 2:], -LOG_SCALE_CLIP, LOG_SCALE_CLIP)) * inside
    return 2.0 * scale * jac


def denoise_step(zt: np.ndarray, t, fmap: np.ndarray, params: DenoiserParams, T: int = 1000):
    """One forward pass: ``(predicted clean latent [N, 4], logits [N, C + 1])``."""
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > T):
        raise StepOutOfRange(f"denoise_step needs t in [1, {T}], got {t}")
    x = build_inputs(zt, t, fmap, params)
    out, _ = mlp_forward(params, x)
    return split_output(out, x, params.scale)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)
