"""Synthetic clips and patches for offline smoke runs."""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np

from .codec import write_frames


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth multi-scale colour noise with a few sharp-edged shapes."""
    img = np.zeros((size, size, 3), np.float32)
    for sigma, weight in ((size / 8, 0.6), (size / 32, 0.3), (1.0, 0.1)):
        layer = cv2.GaussianBlur(rng.random((size, size, 3)).astype(np.float32), (0, 0), sigma)
        layer = (layer - layer.min()) / (np.ptp(layer) + 1e-8)
        img += weight * layer
    for _ in range(4):
        colour = tuple(float(c) for c in rng.random(3))
        centre = tuple(int(v) for v in rng.integers(0, size, 2))
        if rng.random() < 0.5:
            cv2.circle(img, centre, int(rng.integers(size // 16, size // 4)), colour, -1, lineType=cv2.LINE_AA)
        else:
            half = int(rng.integers(size // 16, size // 4))
            cv2.rectangle(img, (centre[0] - half, centre[1] - half), (centre[0] + half, centre[1] + half), colour, -1)
    return np.clip(img * 255, 0, 255).astype(np.uint8)


def make_clip(rng: np.random.Generator, frames: int, size: int) -> np.ndarray:
    """A panning texture: each frame rolls the canvas by a fixed velocity."""
    canvas = _texture(rng, size)
    vy, vx = (int(v) for v in rng.integers(-3, 4, 2))
    return np.stack([np.roll(canvas, (t * vy, t * vx), axis=(0, 1)) for t in range(frames)])


def make_toy_clips(out_dir: str | Path, n_clips: int = 3, frames: int = 8, size: int = 64, seed: int = 0) -> list[Path]:
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    paths = []
    for k in range(n_clips):
        path = out_dir / f"clip{k:03d}"
        write_frames(path, make_clip(rng, frames, size))
        paths.append(path)
    return paths


def make_toy_patches(out_dir: str | Path, n: int = 16, size: int = 64, seed: int = 0) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for k in range(n):
        path = out_dir / f"patch{k:03d}.png"
        cv2.imwrite(str(path), cv2.cvtColor(_texture(rng, size), cv2.COLOR_RGB2BGR))
        paths.append(path)
    return paths
