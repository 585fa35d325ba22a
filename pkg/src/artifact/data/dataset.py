"""Training-sample assembly: manifests, I-frame association, Δt and d_t."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
from torch.utils.data import Dataset

from ..errors import MissingDegradedVariant, NegativeGamma, ShapeMismatch
from .codec import ClipRecord
from .motion import encode_motion

IFRAME_DECAY = 0.02


def nearest_iframe(frame_index: int, record: ClipRecord) -> tuple[int, int]:
    """Closest I-frame and its distance; ties go to the earlier I-frame."""
    if not 0 <= frame_index < record.frame_count:
        raise IndexError(f"frame {frame_index} outside clip {record.clip_id} ({record.frame_count} frames)")
    best = min(record.gop_iframes, key=lambda i: (abs(frame_index - i), i))
    return best, abs(frame_index - best)


def compute_delta(gamma: int) -> float:
    """I-frame feature weight exp(-0.02 * gamma)."""
    if gamma < 0:
        raise NegativeGamma(f"gamma must be non-negative, got {gamma}")
    return math.exp(-IFRAME_DECAY * gamma)


def compute_restoration_strength(degraded, reference, weights: str = "auto") -> float:
    """d_t for training: LPIPS between the degraded patch and its reference."""
    from ..evaluation.metrics import lpips_score

    return lpips_score(reference, degraded, weights=weights)


@dataclass
class TrainingSample:
    f_t: np.ndarray
    y_t: np.ndarray
    m_t: np.ndarray
    i_patch: np.ndarray
    gamma: int
    delta_t: float
    d_t: float
    crf: int

    def check(self) -> None:
        if self.delta_t != compute_delta(self.gamma):
            raise ValueError("delta_t does not match gamma")
        if self.d_t < 0:
            raise ValueError("d_t must be non-negative")
        hw = {a.shape[:2] for a in (self.f_t, self.y_t, self.m_t, self.i_patch)}
        if len(hw) != 1:
            raise ShapeMismatch(f"sample fields differ in spatial size: {sorted(hw)}")


@dataclass
class ManifestEntry:
    clip_id: str
    frame: int
    origin: tuple[int, int]
    crf: int
    patch_size: int
    iframe: int
    gamma: int
    delta_t: float
    # locators are relative to the manifest directory: clip-level frame stores
    reference: str
    degraded: str
    motion: str
    d_t: float | None = None
    psnr_y: float | None = None

    @property
    def key(self) -> tuple:
        return (self.clip_id, self.frame, tuple(self.origin), self.crf)

    @property
    def sample_id(self) -> str:
        return f"{self.clip_id}_f{self.frame:05d}_y{self.origin[0]}_x{self.origin[1]}_crf{self.crf}"


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    split: str = "train"
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.entries)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        with open(path, "w") as fh:
            for e in self.entries:
                record = {"split": self.split, **asdict(e)}
                record["origin"] = list(e.origin)
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        entries, splits = [], set()
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            splits.add(rec.pop("split"))
            rec["origin"] = tuple(rec["origin"])
            entries.append(ManifestEntry(**rec))
        if len(splits) > 1:
            raise ValueError(f"manifest {path} mixes splits {sorted(splits)}")
        return cls(entries, splits.pop() if splits else "train", path.parent)

    def resolve(self, locator: str) -> Path:
        return self.root / locator

    def check_locators(self) -> None:
        for e in self.entries:
            for loc in (e.reference, e.degraded, e.motion):
                if not self.resolve(loc).exists():
                    raise MissingDegradedVariant(f"{loc} (entry {e.sample_id}) does not exist")


def patch_origins(height: int, width: int, patch_size: int, stride: int) -> list[tuple[int, int]]:
    if patch_size > min(height, width):
        raise ValueError(f"patch size {patch_size} exceeds frame size {width}x{height}")
    ys = range(0, height - patch_size + 1, stride)
    xs = range(0, width - patch_size + 1, stride)
    return [(y, x) for y in ys for x in xs]


def build_manifest(
    clips: Sequence[ClipRecord],
    crf_grid: Sequence[int],
    patch_stride: int,
    split: str,
    degraded: Mapping[tuple[str, int], ClipRecord],
    *,
    patch_size: int,
    frame_size: Mapping[str, tuple[int, int]],
    root: str | Path = ".",
    motion: Mapping[tuple[str, int], str] | None = None,
    frame_step: int = 1,
) -> DatasetManifest:
    """One entry per (clip, sampled frame, patch origin, crf), in sorted order.

    `clips` describe the reference streams, `degraded[(clip_id, crf)]` the
    decoded H.265 streams; `frame_size[clip_id]` is (height, width).
    Locators are stored relative to `root`.
    """
    root = Path(root)
    seen: dict[tuple, ManifestEntry] = {}
    refs = {c.clip_id: c for c in clips}
    for clip_id in sorted(refs):
        ref = refs[clip_id]
        h, w = frame_size[clip_id]
        origins = patch_origins(h, w, patch_size, patch_stride)
        for crf in sorted(set(int(c) for c in crf_grid)):
            rec = degraded.get((clip_id, crf))
            if rec is None:
                raise MissingDegradedVariant(f"no degraded variant for clip {clip_id} at CRF {crf}")
            if not Path(rec.source_path).exists():
                raise MissingDegradedVariant(f"degraded file {rec.source_path} is missing")
            if rec.frame_count != ref.frame_count:
                raise MissingDegradedVariant(f"degraded {clip_id}@{crf} has {rec.frame_count} frames, expected {ref.frame_count}")
            motion_loc = (motion or {}).get((clip_id, crf), root / "motion" / f"{clip_id}_crf{crf}.npy")
            for frame in range(0, ref.frame_count, frame_step):
                iframe, gamma = nearest_iframe(frame, rec)
                for origin in origins:
                    entry = ManifestEntry(
                        clip_id=clip_id,
                        frame=frame,
                        origin=origin,
                        crf=crf,
                        patch_size=patch_size,
                        iframe=iframe,
                        gamma=gamma,
                        delta_t=compute_delta(gamma),
                        reference=_relative(ref.source_path, root),
                        degraded=_relative(rec.source_path, root),
                        motion=_relative(motion_loc, root),
                    )
                    seen.setdefault(entry.key, entry)
    return DatasetManifest(list(seen.values()), split, root)


def _relative(locator: str | Path, root: Path) -> str:
    p = Path(locator).resolve()
    try:
        return str(p.relative_to(root.resolve()))
    except ValueError:
        return str(p)


class FrameStore:
    """Memory-mapped clip arrays keyed by locator."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self._cache: dict[str, np.ndarray] = {}

    def __getitem__(self, locator: str) -> np.ndarray:
        if locator not in self._cache:
            path = self.root / locator
            if not path.exists():
                raise MissingDegradedVariant(f"{path} does not exist")
            self._cache[locator] = np.load(path, mmap_mode="r")
        return self._cache[locator]


def _crop(frames: np.ndarray, frame: int, origin: tuple[int, int], size: int) -> np.ndarray:
    y, x = origin
    return np.asarray(frames[frame, y:y + size, x:x + size])


def load_sample(entry: ManifestEntry, store: FrameStore) -> TrainingSample:
    p = entry.patch_size
    ref = store[entry.reference]
    deg = store[entry.degraded]
    mot = store[entry.motion]
    sample = TrainingSample(
        f_t=_crop(deg, entry.frame, entry.origin, p).astype(np.float32) / 255.0,
        y_t=_crop(ref, entry.frame, entry.origin, p).astype(np.float32) / 255.0,
        m_t=_crop(mot, entry.frame, entry.origin, p).astype(np.float32),
        i_patch=_crop(deg, entry.iframe, entry.origin, p).astype(np.float32) / 255.0,
        gamma=entry.gamma,
        delta_t=entry.delta_t,
        d_t=0.0 if entry.d_t is None else float(entry.d_t),
        crf=entry.crf,
    )
    return sample


def _chw(a: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a.transpose(2, 0, 1), dtype=np.float32))


class PatchDataset(Dataset):
    """Tensor view of a manifest: f (3ch), m (2ch, encoded), i (3ch), delta, d, y (3ch)."""

    def __init__(self, manifest: DatasetManifest, max_psnr_y: float | None = None, limit: int | None = None):
        entries = manifest.entries
        if max_psnr_y is not None:
            entries = [e for e in entries if e.psnr_y is None or e.psnr_y <= max_psnr_y]
        if limit is not None:
            entries = entries[:limit]
        self.entries = entries
        self.store = FrameStore(manifest.root)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, idx: int) -> dict[str, torch.Tensor]:
        s = load_sample(self.entries[idx], self.store)
        return {
            "f": _chw(s.f_t),
            "m": _chw(encode_motion(s.m_t)),
            "i": _chw(s.i_patch),
            "delta": torch.tensor([s.delta_t], dtype=torch.float32),
            "d": torch.tensor([s.d_t], dtype=torch.float32),
            "y": _chw(s.y_t),
        }


class TensorSampleDataset(Dataset):
    """In-memory samples, mainly for tests and smoke runs."""

    def __init__(self, samples: Iterable[dict[str, torch.Tensor]]):
        self.samples = list(samples)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, idx: int) -> dict[str, torch.Tensor]:
        return self.samples[idx]
