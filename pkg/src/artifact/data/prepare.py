"""End-to-end dataset preparation: encode, decode, motion, manifests."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from ..evaluation.metrics import luma, lpips_batch, psnr
from .codec import IMAGE_SUFFIXES, VIDEO_SUFFIXES, ClipRecord, EncoderSettings, degrade_clip, read_frames
from .dataset import DatasetManifest, FrameStore, build_manifest, load_sample
from .motion import compute_motion

log = logging.getLogger(__name__)


@dataclass
class PrepareOptions:
    crf_grid: Sequence[int] = (22, 26, 30, 34, 38, 42)
    patch_size: int = 512
    patch_stride: int = 512
    frame_step: int = 1
    test_fraction: float = 0.0
    flow_backend: str = "dis"
    lpips_weights: str = "auto"
    encoder: EncoderSettings = field(default_factory=EncoderSettings)
    seed: int = 0


def discover_clips(src: str | Path) -> list[Path]:
    """Clip sources under `src`: frame directories, videos, .npy arrays or single images (one-frame clips)."""
    src = Path(src)
    out = []
    for p in sorted(src.iterdir()):
        if p.is_dir() and any(q.suffix.lower() in IMAGE_SUFFIXES for q in p.iterdir()):
            out.append(p)
        elif p.suffix.lower() in VIDEO_SUFFIXES | IMAGE_SUFFIXES or p.suffix == ".npy":
            out.append(p)
    if not out:
        raise FileNotFoundError(f"no clips found in {src}")
    return out


def clip_motion(frames: np.ndarray, backend: str) -> np.ndarray:
    """Motion for every frame from its (clamped) previous and next luma frames."""
    y = [np.clip(np.rint(luma(f) * 255), 0, 255).astype(np.uint8) for f in frames]
    last = len(y) - 1
    return np.stack([compute_motion(y[max(t - 1, 0)], y[t], y[min(t + 1, last)], backend) for t in range(len(y))])


def split_clips(clip_ids: list[str], test_fraction: float, seed: int) -> dict[str, list[str]]:
    order = list(np.random.default_rng(seed).permutation(len(clip_ids)))
    n_test = int(round(test_fraction * len(clip_ids)))
    if test_fraction > 0 and len(clip_ids) > 1:
        n_test = min(max(n_test, 1), len(clip_ids) - 1)
    test = sorted(clip_ids[i] for i in order[:n_test])
    train = sorted(c for c in clip_ids if c not in test)
    return {"train": train, "test": test}


def annotate(manifest: DatasetManifest, lpips_weights: str, batch_size: int = 16) -> None:
    """Fill in d_t (LPIPS of degraded vs reference) and patch PSNR_Y."""
    store = FrameStore(manifest.root)
    for start in range(0, len(manifest.entries), batch_size):
        chunk = manifest.entries[start:start + batch_size]
        samples = [load_sample(e, store) for e in chunk]
        f = torch.from_numpy(np.stack([s.f_t for s in samples])).permute(0, 3, 1, 2)
        y = torch.from_numpy(np.stack([s.y_t for s in samples])).permute(0, 3, 1, 2)
        scores = lpips_batch(y, f, weights=lpips_weights)
        for e, s, d in zip(chunk, samples, scores.tolist()):
            e.d_t = max(float(d), 0.0)
            e.psnr_y = psnr(s.y_t, s.f_t, "Y")


def prepare_dataset(src: str | Path, out: str | Path, options: PrepareOptions) -> dict[str, DatasetManifest]:
    out = Path(out).resolve()
    for sub in ("reference", "degraded", "motion"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    refs: list[ClipRecord] = []
    degraded: dict[tuple[str, int], ClipRecord] = {}
    sizes: dict[str, tuple[int, int]] = {}
    for source in discover_clips(src):
        clip_id = source.stem
        frames = read_frames(source)
        ref_path = out / "reference" / f"{clip_id}.npy"
        np.save(ref_path, frames)
        refs.append(ClipRecord(clip_id, str(ref_path), len(frames), [0]))
        sizes[clip_id] = frames.shape[1:3]
        for crf in options.crf_grid:
            loc, rec = degrade_clip(ref_path, crf, out / "degraded", clip_id=clip_id, settings=options.encoder)
            degraded[(clip_id, crf)] = rec
            np.save(out / "motion" / f"{clip_id}_crf{crf}.npy", clip_motion(np.load(loc), options.flow_backend))
        log.info("prepared clip %s (%d frames)", clip_id, len(frames))

    splits = split_clips([r.clip_id for r in refs], options.test_fraction, options.seed)
    manifests = {}
    for split, ids in splits.items():
        if not ids:
            continue
        manifest = build_manifest(
            [r for r in refs if r.clip_id in ids],
            options.crf_grid,
            options.patch_stride,
            split,
            {k: v for k, v in degraded.items() if k[0] in ids},
            patch_size=options.patch_size,
            frame_size=sizes,
            root=out,
            frame_step=options.frame_step,
        )
        annotate(manifest, options.lpips_weights)
        manifest.save(out / f"manifest_{split}.jsonl")
        manifests[split] = manifest

    summary = {
        "clips": len(refs),
        "crf_grid": list(options.crf_grid),
        "entries": {k: len(m) for k, m in manifests.items()},
        "degraded_representations": sum(len(m) for m in manifests.values()),
        "mean_psnr_y_per_crf": {
            str(c): float(np.mean([e.psnr_y for m in manifests.values() for e in m.entries if e.crf == c]))
            for c in options.crf_grid
        },
    }
    (out / "prepare_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return manifests
