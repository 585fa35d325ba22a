"""H.265 degradation through an external ffmpeg binary (libx265)."""

from __future__ import annotations

import logging
import math
import os
import re
import shutil
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from ..errors import BadRange, EncoderUnavailable, InvalidCRF

log = logging.getLogger(__name__)

CRF_MIN, CRF_MAX = 0, 51
VIDEO_SUFFIXES = {".mp4", ".mkv", ".mov", ".avi", ".y4m", ".webm", ".hevc", ".h265"}
IMAGE_SUFFIXES = {".png", ".bmp", ".tif", ".tiff", ".jpg", ".jpeg"}


@dataclass
class ClipRecord:
    clip_id: str
    source_path: str
    frame_count: int
    gop_iframes: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.gop_iframes = sorted(int(i) for i in self.gop_iframes)
        if not self.gop_iframes:
            raise ValueError(f"clip {self.clip_id} has no I-frames")
        if self.gop_iframes[0] < 0 or self.gop_iframes[-1] >= self.frame_count:
            raise ValueError(f"clip {self.clip_id} I-frame index outside [0, {self.frame_count})")


@dataclass
class EncoderSettings:
    preset: str = "medium"
    keyint: int = 30
    all_intra: bool = False
    fps: int = 25
    # single-threaded x265 keeps bitstreams byte-identical between runs
    x265_extra: str = "pools=1:frame-threads=1"


def ffmpeg_exe() -> str:
    """Locate ffmpeg: $ARTIFACT_FFMPEG, then PATH, then the imageio-ffmpeg bundle."""
    env = os.environ.get("ARTIFACT_FFMPEG")
    if env:
        return env
    found = shutil.which("ffmpeg")
    if found:
        return found
    try:
        import imageio_ffmpeg

        return imageio_ffmpeg.get_ffmpeg_exe()
    except Exception as exc:
        raise EncoderUnavailable("no ffmpeg binary found") from exc


def check_crf(crf: int) -> int:
    if isinstance(crf, bool) or int(crf) != crf or not CRF_MIN <= crf <= CRF_MAX:
        raise InvalidCRF(f"CRF must be an integer in [{CRF_MIN}, {CRF_MAX}], got {crf}")
    return int(crf)


def select_crf_grid(min_crf: int, max_crf: int, points: int) -> list[int]:
    """Linearly spaced integer CRFs with both endpoints, deduplicated in order."""
    if points < 2 or min_crf >= max_crf:
        raise BadRange(f"bad CRF range ({min_crf}, {max_crf}, {points})")
    step = (max_crf - min_crf) / (points - 1)
    grid: list[int] = []
    for i in range(points):
        value = int(math.floor(min_crf + i * step + 0.5))
        if value not in grid:
            grid.append(value)
    for crf in grid:
        check_crf(crf)
    return grid


def read_frames(source: str | Path) -> np.ndarray:
    """Load a clip as a (T, H, W, 3) uint8 RGB array.

    `source` is a directory of image frames (sorted by name), a single image,
    a video file, or a ``.npy`` array.
    """
    path = Path(source)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise FileNotFoundError(f"no frames in {path}")
        return np.stack([_read_image(p) for p in files])
    if path.suffix == ".npy":
        return np.load(path)
    if path.suffix.lower() in IMAGE_SUFFIXES:
        return _read_image(path)[None]
    frames, _ = decode_video(path)
    return frames


def _read_image(path: Path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise FileNotFoundError(f"cannot read image {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def write_frames(directory: str | Path, frames: np.ndarray) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        cv2.imwrite(str(directory / f"{i:05d}.png"), cv2.cvtColor(frame, cv2.COLOR_RGB2BGR))


def encode_frames(frames: np.ndarray, crf: int, out_path: str | Path, settings: EncoderSettings | None = None) -> Path:
    """Encode RGB frames to an H.265 stream at the given CRF."""
    crf = check_crf(crf)
    settings = settings or EncoderSettings()
    t, h, w, _ = frames.shape
    if h % 2 or w % 2:
        raise ValueError(f"frame size {w}x{h} must be even for 4:2:0 encoding")
    keyint = 1 if settings.all_intra else settings.keyint
    params = f"log-level=error:keyint={keyint}:min-keyint={keyint}:scenecut=0"
    if settings.x265_extra:
        params += ":" + settings.x265_extra
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    cmd = [
        ffmpeg_exe(), "-hide_banner", "-loglevel", "error", "-y",
        "-f", "rawvideo", "-pix_fmt", "rgb24", "-s", f"{w}x{h}", "-r", str(settings.fps), "-i", "-",
        "-c:v", "libx265", "-crf", str(crf), "-preset", settings.preset, "-pix_fmt", "yuv420p",
        "-x265-params", params, "-map_metadata", "-1", "-fflags", "+bitexact", str(out_path),
    ]
    try:
        proc = subprocess.run(cmd, input=np.ascontiguousarray(frames, dtype=np.uint8).tobytes(), capture_output=True)
    except OSError as exc:
        raise EncoderUnavailable(f"cannot run ffmpeg: {exc}") from exc
    if proc.returncode != 0:
        raise EncoderUnavailable(f"ffmpeg/libx265 failed: {proc.stderr.decode(errors='replace')[-500:]}")
    return out_path


_SIZE_RE = re.compile(r"Video: .*?(\d{2,5})x(\d{2,5})")
_TYPE_RE = re.compile(r"\bn:\s*(\d+).*?\btype:([IPB?])")


def decode_video(path: str | Path) -> tuple[np.ndarray, list[str]]:
    """Decode to RGB frames and report each frame's picture type."""
    cmd = [ffmpeg_exe(), "-hide_banner", "-i", str(path), "-vf", "showinfo", "-f", "rawvideo", "-pix_fmt", "rgb24", "-"]
    try:
        proc = subprocess.run(cmd, capture_output=True)
    except OSError as exc:
        raise EncoderUnavailable(f"cannot run ffmpeg: {exc}") from exc
    err = proc.stderr.decode(errors="replace")
    if proc.returncode != 0:
        raise EncoderUnavailable(f"decoding {path} failed: {err[-500:]}")
    size = _SIZE_RE.search(err)
    if size is None:
        raise EncoderUnavailable(f"could not determine frame size of {path}")
    w, h = int(size.group(1)), int(size.group(2))
    frames = np.frombuffer(proc.stdout, dtype=np.uint8).reshape(-1, h, w, 3)
    types = ["?"] * len(frames)
    for n, kind in _TYPE_RE.findall(err):
        if int(n) < len(types):
            types[int(n)] = kind
    return frames, types


def degrade_clip(
    source: str | Path,
    crf: int,
    out_dir: str | Path,
    clip_id: str | None = None,
    settings: EncoderSettings | None = None,
) -> tuple[Path, ClipRecord]:
    """Compress a clip with libx265 and store the decoded frames alongside the stream.

    Returns the decoded-frame locator (``.npy``) and a record whose I-frame
    positions come from the encoded stream's picture types.
    """
    crf = check_crf(crf)
    source = Path(source)
    clip_id = clip_id or source.stem
    out_dir = Path(out_dir)
    frames = read_frames(source)
    stream = encode_frames(frames, crf, out_dir / f"{clip_id}_crf{crf}.mp4", settings)
    decoded, types = decode_video(stream)
    if len(decoded) != len(frames):
        raise EncoderUnavailable(f"decoded {len(decoded)} frames from {len(frames)} inputs")
    iframes = [i for i, kind in enumerate(types) if kind == "I"]
    if not iframes:
        log.warning("no I-frame types reported for %s; assuming frame 0", stream)
        iframes = [0]
    locator = out_dir / f"{clip_id}_crf{crf}.npy"
    np.save(locator, decoded)
    return locator, ClipRecord(clip_id, str(locator), len(decoded), iframes)
