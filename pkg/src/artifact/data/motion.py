"""Dense motion fields from three consecutive luma frames."""

from __future__ import annotations

from typing import Callable

import cv2
import numpy as np

from ..errors import FlowBackendUnavailable, ShapeMismatch

MAX_MAGNITUDE = 64.0

FlowFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def _dis(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    flow = cv2.DISOpticalFlow_create(cv2.DISOPTICAL_FLOW_PRESET_MEDIUM)
    return flow.calc(a, b, None)


def _farneback(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return cv2.calcOpticalFlowFarneback(a, b, None, 0.5, 3, 15, 3, 5, 1.2, 0)


def _deepflow(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    optflow = getattr(cv2, "optflow", None)
    if optflow is None:
        raise FlowBackendUnavailable("DeepFlow needs opencv-contrib (cv2.optflow)")
    return optflow.createOptFlow_DeepFlow().calc(a, b, None)


FLOW_BACKENDS: dict[str, FlowFn] = {"dis": _dis, "farneback": _farneback, "deepflow": _deepflow}


def _as_u8(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ShapeMismatch(f"expected a single-channel image, got shape {img.shape}")
    if img.dtype == np.uint8:
        return np.ascontiguousarray(img)
    return np.clip(np.rint(img * 255.0 if img.max() <= 1.0 else img), 0, 255).astype(np.uint8)


def compute_motion(prev_luma, cur_luma, next_luma, backend: str = "dis") -> np.ndarray:
    """Per-pixel (magnitude in pixels, direction in radians) as an HxWx2 array.

    Magnitude is the mean of the backward (cur->prev) and forward (cur->next)
    flow magnitudes; direction is taken from the forward flow and set to 0
    where the forward flow vanishes.
    """
    if backend not in FLOW_BACKENDS:
        raise FlowBackendUnavailable(f"unknown flow backend {backend!r}")
    frames = [_as_u8(f) for f in (prev_luma, cur_luma, next_luma)]
    if len({f.shape for f in frames}) != 1:
        raise ShapeMismatch(f"frame sizes differ: {[f.shape for f in frames]}")
    prev, cur, nxt = frames
    fn = FLOW_BACKENDS[backend]
    backward = fn(cur, prev)
    forward = fn(cur, nxt)
    magnitude = 0.5 * (np.hypot(backward[..., 0], backward[..., 1]) + np.hypot(forward[..., 0], forward[..., 1]))
    direction = np.arctan2(forward[..., 1], forward[..., 0])
    direction[(forward[..., 0] == 0) & (forward[..., 1] == 0)] = 0.0
    return np.stack([magnitude, direction], axis=-1).astype(np.float32)


def encode_motion(motion: np.ndarray) -> np.ndarray:
    """Network encoding: magnitude clipped at 64 px and direction mapped into [0, 1]."""
    mag = np.clip(motion[..., 0], 0.0, MAX_MAGNITUDE) / MAX_MAGNITUDE
    ang = (motion[..., 1] + np.pi) / (2 * np.pi)
    return np.stack([mag, ang], axis=-1).astype(np.float32)
