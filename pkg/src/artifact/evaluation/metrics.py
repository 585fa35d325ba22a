"""Full-reference and set-level quality metrics.

Images are HxWx3 RGB, either uint8 or float in [0, 1]. Colour conversion is
BT.601 full range.
"""

from __future__ import annotations

import json
import logging
import subprocess
import tempfile
import warnings
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from skimage.metrics import structural_similarity

from ..errors import MetricUnavailable, MissingMetricBackend, SetTooSmall, ShapeMismatch

log = logging.getLogger(__name__)

PSNR_CAP = 100.0

_BT601 = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ]
)


def to_unit(img) -> np.ndarray:
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64)


def rgb_to_ycbcr(img) -> np.ndarray:
    """Full-range BT.601 on a [0, 1] scale: Y in [0, 1], Cb/Cr centred on 0.5."""
    ycc = to_unit(img) @ _BT601.T
    ycc[..., 1:] += 0.5
    return ycc


def luma(img) -> np.ndarray:
    return rgb_to_ycbcr(img)[..., 0]


def _check_pair(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(reference, output, channels: str = "Y") -> float:
    """PSNR in dB over ``"Y"`` or ``"CbCr"``; zero error is capped at 100 dB."""
    reference, output = _check_pair(reference, output)
    sel = {"Y": [0], "CbCr": [1, 2], "CBCR": [1, 2]}.get(channels)
    if sel is None:
        raise ValueError(f"unknown channel set {channels!r}")
    diff = rgb_to_ycbcr(reference)[..., sel] - rgb_to_ycbcr(output)[..., sel]
    mse = float(np.mean(diff**2))
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def ssim(reference, output) -> float:
    """Gaussian-window SSIM (sigma 1.5) on the luma channel."""
    reference, output = _check_pair(reference, output)
    ya, yb = luma(reference), luma(output)
    return float(
        structural_similarity(ya, yb, data_range=1.0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False)
    )


# --- LPIPS ------------------------------------------------------------------

_warned_untrained: set[str] = set()


@lru_cache(maxsize=4)
def get_lpips(net: str = "alex", weights: str = "auto"):
    """LPIPS model with the package's calibrated linear heads.

    `weights` selects the feature network: ``"pretrained"`` (torchvision
    ImageNet weights, error if unavailable), a path to a state-dict file,
    ``"random:<seed>"``, or ``"auto"`` (pretrained if retrievable, else a
    seeded untrained network with a warning).
    """
    try:
        import lpips
    except ImportError as exc:
        raise MetricUnavailable("the lpips package is not installed") from exc

    with torch.random.fork_rng(devices=[]):
        seed = int(weights.split(":", 1)[1]) if weights.startswith("random:") else 0
        torch.manual_seed(seed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            model = lpips.LPIPS(net=net, pretrained=True, pnet_rand=True, verbose=False)
    if not weights.startswith("random:"):
        state = _lpips_backbone_state(net, weights)
        if state is None:
            if weights != "auto":
                raise MetricUnavailable(f"pretrained {net} weights for LPIPS are not available")
            if net not in _warned_untrained:
                _warned_untrained.add(net)
                log.warning("LPIPS: pretrained %s weights unavailable; using a seeded untrained feature network", net)
        else:
            _load_lpips_backbone(model, net, state)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def _lpips_backbone_state(net: str, weights: str):
    import torchvision

    if weights not in ("auto", "pretrained"):
        try:
            return torch.load(weights, map_location="cpu", weights_only=True)
        except Exception as exc:
            raise MetricUnavailable(f"cannot load LPIPS backbone weights from {weights}: {exc}") from exc
    enum = {
        "alex": torchvision.models.AlexNet_Weights.IMAGENET1K_V1,
        "vgg": torchvision.models.VGG16_Weights.IMAGENET1K_V1,
        "squeeze": torchvision.models.SqueezeNet1_1_Weights.IMAGENET1K_V1,
    }[net]
    try:
        return enum.get_state_dict(progress=False)
    except Exception:
        return None


def _load_lpips_backbone(model, net: str, state) -> None:
    import torchvision

    full = {"alex": torchvision.models.alexnet, "vgg": torchvision.models.vgg16, "squeeze": torchvision.models.squeezenet1_1}[
        net
    ](weights=None)
    full.load_state_dict(state)
    layers = list(full.features.children())
    slices = [getattr(model.net, f"slice{i}") for i in range(1, model.net.N_slices + 1)]
    for sl in slices:
        for name, _ in sl.named_children():
            sl._modules[name] = layers[int(name)]


def _to_lpips_tensor(img) -> torch.Tensor:
    arr = to_unit(img).astype(np.float32)
    return torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0) * 2 - 1


@torch.no_grad()
def lpips_batch(reference: torch.Tensor, output: torch.Tensor, net="alex", weights="auto") -> torch.Tensor:
    """Per-sample LPIPS for NCHW tensors in [0, 1]."""
    if reference.shape != output.shape:
        raise ShapeMismatch(f"shapes differ: {tuple(reference.shape)} vs {tuple(output.shape)}")
    model = get_lpips(net, weights)
    return model(reference.float() * 2 - 1, output.float() * 2 - 1).reshape(-1)


@torch.no_grad()
def lpips_score(reference, output, net="alex", weights="auto") -> float:
    reference, output = _check_pair(reference, output)
    model = get_lpips(net, weights)
    return float(model(_to_lpips_tensor(reference), _to_lpips_tensor(output)).item())


# --- FID / KID ----------------------------------------------------------------

class InceptionEmbedder:
    """2048-d pool features of Inception-v3 at 299x299.

    `weights` is ``"pretrained"``, a state-dict path, ``"random:<seed>"`` or
    ``"auto"`` (pretrained when retrievable, else seeded random with a warning).
    """

    def __init__(self, weights: str = "auto", batch_size: int = 16):
        import torchvision

        self.batch_size = batch_size
        state = None
        if weights.startswith("random:"):
            seed = int(weights.split(":", 1)[1])
        else:
            seed = 0
            if weights in ("auto", "pretrained"):
                try:
                    state = torchvision.models.Inception_V3_Weights.IMAGENET1K_V1.get_state_dict(progress=False)
                except Exception as exc:
                    if weights == "pretrained":
                        raise MetricUnavailable(f"Inception weights unavailable: {exc}") from exc
                    log.warning("FID/KID: pretrained Inception weights unavailable; using a seeded untrained network")
            else:
                state = torch.load(weights, map_location="cpu", weights_only=True)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            net = torchvision.models.inception_v3(weights=None, aux_logits=True, init_weights=True)
            if state is None:
                # variance-preserving init keeps untrained activations O(1)
                for m in net.modules():
                    if isinstance(m, torch.nn.Conv2d):
                        torch.nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
        if state is not None:
            net.load_state_dict(state)
        net.aux_logits = False
        net.AuxLogits = None
        net.fc = torch.nn.Identity()
        self.net = net.eval()
        self.mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
        self.std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)

    @torch.no_grad()
    def __call__(self, images: Sequence) -> np.ndarray:
        feats = []
        for start in range(0, len(images), self.batch_size):
            batch = np.stack([to_unit(im) for im in images[start:start + self.batch_size]]).astype(np.float32)
            x = torch.from_numpy(batch).permute(0, 3, 1, 2)
            x = F.interpolate(x, size=(299, 299), mode="bilinear", align_corners=False)
            feats.append(self.net((x - self.mean) / self.std).double().numpy())
        return np.concatenate(feats)


@lru_cache(maxsize=2)
def default_embedder(weights: str = "auto") -> InceptionEmbedder:
    return InceptionEmbedder(weights)


def fid_from_features(a: np.ndarray, b: np.ndarray) -> float:
    """Fréchet distance between Gaussian fits of two feature sets.

    tr sqrt(S_a S_b) equals the nuclear norm of Xa Xb^T / sqrt((na-1)(nb-1))
    for centred data matrices, which avoids forming a d x d square root.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise SetTooSmall("FID needs at least two images per set")
    mu_a, mu_b = a.mean(0), b.mean(0)
    xa, xb = a - mu_a, b - mu_b
    na, nb = len(a) - 1, len(b) - 1
    tr_a = np.sum(xa**2) / na
    tr_b = np.sum(xb**2) / nb
    cross = np.linalg.svd(xa @ xb.T, compute_uv=False).sum() / np.sqrt(na * nb)
    value = float(np.sum((mu_a - mu_b) ** 2) + tr_a + tr_b - 2 * cross)
    return max(value, 0.0)


def _poly_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return (x @ y.T / x.shape[1] + 1.0) ** 3


def kid_from_features(a: np.ndarray, b: np.ndarray, estimator: str = "auto") -> float:
    """Unbiased MMD^2 with the cubic polynomial kernel (x.y/d + 1)^3.

    ``"u-statistic"`` treats equally sized sets as paired and drops the i == j
    cross terms (exactly zero for identical sets); ``"unbiased"`` averages all
    cross pairs. ``"auto"`` picks the former when the sizes match.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m, n = len(a), len(b)
    if m < 2 or n < 2:
        raise SetTooSmall("KID needs at least two images per set")
    if estimator == "auto":
        estimator = "u-statistic" if m == n else "unbiased"
    k_aa, k_bb, k_ab = _poly_kernel(a, a), _poly_kernel(b, b), _poly_kernel(a, b)
    within = (k_aa.sum() - np.trace(k_aa)) / (m * (m - 1)) + (k_bb.sum() - np.trace(k_bb)) / (n * (n - 1))
    if estimator == "unbiased":
        return float(within - 2 * k_ab.sum() / (m * n))
    if estimator == "u-statistic":
        if m != n:
            raise ValueError("the u-statistic estimator needs paired sets of equal size")
        return float(within - 2 * (k_ab.sum() - np.trace(k_ab)) / (m * (m - 1)))
    raise ValueError(f"unknown KID estimator {estimator!r}")


def fid(reference_set, output_set, embedder=None) -> float:
    if len(reference_set) < 2 or len(output_set) < 2:
        raise SetTooSmall("FID needs at least two images per set")
    embed = embedder or default_embedder()
    return fid_from_features(embed(reference_set), embed(output_set))


def kid(reference_set, output_set, embedder=None, estimator: str = "auto") -> float:
    if len(reference_set) < 2 or len(output_set) < 2:
        raise SetTooSmall("KID needs at least two images per set")
    embed = embedder or default_embedder()
    return kid_from_features(embed(reference_set), embed(output_set), estimator)


# --- VMAF (external) ------------------------------------------------------------

def vmaf(reference_frames: np.ndarray, output_frames: np.ndarray) -> float:
    """Pooled VMAF via ffmpeg's libvmaf filter; MissingMetricBackend if unsupported."""
    from ..data.codec import ffmpeg_exe

    reference_frames, output_frames = _check_pair(reference_frames, output_frames)
    if reference_frames.ndim == 3:
        reference_frames, output_frames = reference_frames[None], output_frames[None]
    t, h, w, _ = reference_frames.shape
    try:
        exe = ffmpeg_exe()
    except Exception as exc:
        raise MissingMetricBackend(str(exc)) from exc
    with tempfile.TemporaryDirectory() as tmp:
        ref_p, out_p, log_p = Path(tmp, "ref.rgb"), Path(tmp, "out.rgb"), Path(tmp, "vmaf.json")
        ref_p.write_bytes(np.ascontiguousarray(reference_frames, dtype=np.uint8).tobytes())
        out_p.write_bytes(np.ascontiguousarray(output_frames, dtype=np.uint8).tobytes())
        raw = ["-f", "rawvideo", "-pix_fmt", "rgb24", "-s", f"{w}x{h}", "-r", "25"]
        cmd = [exe, "-hide_banner", "-loglevel", "error", *raw, "-i", str(out_p), *raw, "-i", str(ref_p),
               "-lavfi", f"[0:v]format=yuv420p[d];[1:v]format=yuv420p[r];[d][r]libvmaf=log_fmt=json:log_path={log_p}",
               "-f", "null", "-"]
        try:
            proc = subprocess.run(cmd, capture_output=True)
        except OSError as exc:
            raise MissingMetricBackend(f"cannot run ffmpeg: {exc}") from exc
        if proc.returncode != 0 or not log_p.exists():
            raise MissingMetricBackend(f"libvmaf unavailable: {proc.stderr.decode(errors='replace')[-300:]}")
        doc = json.loads(log_p.read_text())
    return float(doc["pooled_metrics"]["vmaf"]["mean"])
