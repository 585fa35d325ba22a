"""System evaluation over a test manifest and Table-style comparison output."""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from ..data.dataset import DatasetManifest, PatchDataset
from ..errors import MissingMetricBackend
from . import metrics as M

log = logging.getLogger(__name__)

# CLI names -> report columns
METRIC_COLUMNS = {
    "psnr": ("psnr_y", "psnr_cbcr"),
    "psnr_y": ("psnr_y",),
    "psnr_cbcr": ("psnr_cbcr",),
    "ssim": ("ssim",),
    "lpips": ("lpips",),
    "fid": ("fid",),
    "kid": ("kid",),
    "vmaf": ("vmaf",),
}
COLUMN_ORDER = ("psnr_y", "psnr_cbcr", "ssim", "vmaf", "lpips", "fid", "kid")


def parse_metrics(names: Iterable[str] | str) -> list[str]:
    if isinstance(names, str):
        names = [n for n in names.split(",") if n.strip()]
    columns = []
    for name in names:
        key = name.strip().lower()
        if key not in METRIC_COLUMNS:
            raise ValueError(f"unknown metric {name!r}; expected a subset of {sorted(METRIC_COLUMNS)}")
        columns.extend(METRIC_COLUMNS[key])
    return [c for c in COLUMN_ORDER if c in columns]


@dataclass
class MetricReport:
    system_id: str
    clips: list[str]
    per_clip: dict[str, list[float]]
    aggregates: dict[str, float]
    set_level: list[str] = field(default_factory=list)
    skipped: dict[str, str] = field(default_factory=dict)

    def check(self) -> None:
        for metric, series in self.per_clip.items():
            if len(series) != len(self.clips):
                raise ValueError(f"{metric}: {len(series)} values for {len(self.clips)} clips")
            if self.aggregates[metric] != _mean(series):
                raise ValueError(f"{metric}: aggregate is not the mean of the per-clip series")

    def to_dict(self) -> dict:
        return {
            "system_id": self.system_id,
            "clips": self.clips,
            "per_clip": self.per_clip,
            "aggregates": self.aggregates,
            "set_level": self.set_level,
            "skipped": self.skipped,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricReport":
        return cls(**doc)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "MetricReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _mean(series: Sequence[float]) -> float:
    return float(np.mean(np.asarray(series, dtype=np.float64)))


def _system_outputs(system, dataset: PatchDataset, d_t: float | None, batch_size: int):
    """Yield (entry, reference, output) with HxWx3 float arrays in [0, 1]."""
    gen = None
    if system not in ("identity", "degraded"):
        from ..models.checkpoint import load_generator

        gen = system if isinstance(system, torch.nn.Module) else load_generator(system)[0]
        gen.eval()
    for start in range(0, len(dataset), batch_size):
        idx = range(start, min(start + batch_size, len(dataset)))
        items = [dataset[i] for i in idx]
        y = torch.stack([it["y"] for it in items])
        if system == "identity":
            out = y
        elif system == "degraded":
            out = torch.stack([it["f"] for it in items])
        else:
            d = torch.stack([it["d"] for it in items]) if d_t is None else torch.full((len(items), 1), float(d_t))
            with torch.no_grad():
                out = gen(
                    torch.stack([it["f"] for it in items]),
                    torch.stack([it["m"] for it in items]),
                    torch.stack([it["i"] for it in items]),
                    torch.stack([it["delta"] for it in items]),
                    d,
                ).clamp(0.0, 1.0)
        for k, i in enumerate(idx):
            yield dataset.entries[i], y[k].permute(1, 2, 0).numpy(), out[k].permute(1, 2, 0).numpy()


def evaluate_system(
    checkpoint,
    test_manifest: DatasetManifest | str | Path,
    metrics: Iterable[str] | str,
    *,
    system_id: str | None = None,
    d_t: float | None = None,
    lpips_weights: str = "auto",
    embedder=None,
    batch_size: int = 8,
) -> MetricReport:
    """Score one system on every manifest entry.

    `checkpoint` is a generator checkpoint path (or network), ``"identity"``
    (output = reference) or ``"degraded"`` (output = input). Pairwise metrics
    are averaged per degraded clip ``<clip_id>@crf<c>``; FID and KID are
    computed once over the pooled patches. `d_t` overrides the manifest's
    restoration strength at inference.
    """
    manifest = test_manifest if isinstance(test_manifest, DatasetManifest) else DatasetManifest.load(test_manifest)
    columns = parse_metrics(metrics)
    dataset = PatchDataset(manifest)
    if system_id is None:
        system_id = checkpoint if isinstance(checkpoint, str) and checkpoint in ("identity", "degraded") else str(checkpoint)

    per_patch: dict[str, dict[str, list[float]]] = defaultdict(lambda: defaultdict(list))
    frames: dict[str, tuple[list, list]] = defaultdict(lambda: ([], []))
    pooled_ref, pooled_out = [], []
    lpips_queue: list[tuple[str, np.ndarray, np.ndarray]] = []

    def flush_lpips():
        if not lpips_queue:
            return
        ref = torch.from_numpy(np.stack([r for _, r, _ in lpips_queue])).permute(0, 3, 1, 2)
        out = torch.from_numpy(np.stack([o for _, _, o in lpips_queue])).permute(0, 3, 1, 2)
        for (clip, _, _), score in zip(lpips_queue, M.lpips_batch(ref, out, weights=lpips_weights).tolist()):
            per_patch[clip]["lpips"].append(max(float(score), 0.0))
        lpips_queue.clear()

    for entry, ref, out in _system_outputs(checkpoint, dataset, d_t, batch_size):
        clip = f"{entry.clip_id}@crf{entry.crf}"
        if "psnr_y" in columns:
            per_patch[clip]["psnr_y"].append(M.psnr(ref, out, "Y"))
        if "psnr_cbcr" in columns:
            per_patch[clip]["psnr_cbcr"].append(M.psnr(ref, out, "CbCr"))
        if "ssim" in columns:
            per_patch[clip]["ssim"].append(M.ssim(ref, out))
        if "lpips" in columns:
            lpips_queue.append((clip, ref.astype(np.float32), out.astype(np.float32)))
            if len(lpips_queue) >= 16:
                flush_lpips()
        if "vmaf" in columns:
            frames[clip][0].append(_to_uint8(ref))
            frames[clip][1].append(_to_uint8(out))
        if "fid" in columns or "kid" in columns:
            pooled_ref.append(ref)
            pooled_out.append(out)
    flush_lpips()

    clips = sorted({f"{e.clip_id}@crf{e.crf}" for e in dataset.entries})
    per_clip: dict[str, list[float]] = {}
    skipped: dict[str, str] = {}
    for metric in ("psnr_y", "psnr_cbcr", "ssim", "lpips"):
        if metric in columns:
            per_clip[metric] = [_mean(per_patch[c][metric]) for c in clips]
    if "vmaf" in columns:
        try:
            per_clip["vmaf"] = [M.vmaf(np.stack(frames[c][0]), np.stack(frames[c][1])) for c in clips]
        except MissingMetricBackend as exc:
            log.warning("VMAF skipped: %s", exc)
            skipped["vmaf"] = str(exc)
    aggregates = {m: _mean(v) for m, v in per_clip.items()}

    set_level = []
    if pooled_ref:
        embed = embedder or M.default_embedder()
        feats_ref, feats_out = embed(pooled_ref), embed(pooled_out)
        if "fid" in columns:
            aggregates["fid"] = M.fid_from_features(feats_ref, feats_out)
            set_level.append("fid")
        if "kid" in columns:
            aggregates["kid"] = M.kid_from_features(feats_ref, feats_out)
            set_level.append("kid")

    report = MetricReport(system_id, clips, per_clip, aggregates, set_level, skipped)
    report.check()
    return report


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def render_table(reports: Sequence[MetricReport], columns: Sequence[str] | None = None) -> str:
    """Plain-text table: one row per system, one column per metric."""
    if columns is None:
        present = {m for r in reports for m in r.aggregates} | {m for r in reports for m in r.skipped}
        columns = [c for c in COLUMN_ORDER if c in present]
    header = ["system"] + [_label(c) for c in columns]
    rows = []
    for r in reports:
        row = [r.system_id]
        for c in columns:
            if c in r.aggregates:
                row.append(_format(c, r.aggregates[c]))
            else:
                row.append("skipped" if c in r.skipped else "")
        rows.append(row)
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    lines = [
        " | ".join(h.ljust(w) for h, w in zip(header, widths)),
        "-+-".join("-" * w for w in widths),
    ]
    lines += [" | ".join(str(x).ljust(w) for x, w in zip(row, widths)) for row in rows]
    return "\n".join(lines) + "\n"


def _label(column: str) -> str:
    return {"psnr_y": "PSNR_Y", "psnr_cbcr": "PSNR_CbCr", "ssim": "SSIM", "vmaf": "VMAF", "lpips": "LPIPS", "fid": "FID", "kid": "KID"}[column]


def _format(column: str, value: float) -> str:
    if column in ("psnr_y", "psnr_cbcr", "vmaf", "fid"):
        return f"{value:.2f}"
    return f"{value:.4f}"
