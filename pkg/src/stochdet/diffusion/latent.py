"""Box <-> latent coding.

Boxes become ``(cx, cy, w, h)`` normalised by image size, then are mapped
affinely from ``[0, 1]`` to ``[-scale, scale]``.
"""

from __future__ import annotations

import numpy as np

from ..boxgeom import as_array, clip_to_image, cxcywh_to_xyxy, xyxy_to_cxcywh

SIGNAL_SCALE = 2.0


def to_unit(latent: np.ndarray, scale: float = SIGNAL_SCALE) -> np.ndarray:
    """Clamp a latent to the signal range and map it to normalised cxcywh."""
    return (np.clip(latent, -scale, scale) / scale + 1.0) / 2.0


def from_unit(unit: np.ndarray, scale: float = SIGNAL_SCALE) -> np.ndarray:
    return (np.asarray(unit, dtype=np.float64) * 2.0 - 1.0) * scale


def encode(boxes: np.ndarray, width: float, height: float, scale: float = SIGNAL_SCALE) -> np.ndarray:
    unit = xyxy_to_cxcywh(as_array(boxes)) / np.array([width, height, width, height])
    return from_unit(unit, scale)


def unit_to_xyxy(unit: np.ndarray) -> np.ndarray:
    """Normalised cxcywh -> normalised corner boxes (image is the unit square)."""
    unit = np.array(unit, dtype=np.float64).reshape(-1, 4)
    unit[:, 2:] = np.clip(unit[:, 2:], 0.0, None)
    return cxcywh_to_xyxy(unit)


def decode(latent: np.ndarray, width: float, height: float, scale: float = SIGNAL_SCALE) -> np.ndarray:
    """Latent -> pixel corner boxes clipped to the image."""
    xyxy = unit_to_xyxy(to_unit(np.asarray(latent).reshape(-1, 4), scale))
    return clip_to_image(xyxy * np.array([width, height, width, height]), width, height)
