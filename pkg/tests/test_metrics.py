import cv2
import numpy as np
import pytest
from scipy.linalg import sqrtm

from conftest import requires_ffmpeg
from artifact.data.toy import _texture
from artifact.errors import MissingMetricBackend, SetTooSmall, ShapeMismatch
from artifact.evaluation import metrics as M


def _gray(level, size=32):
    return np.full((size, size, 3), level, np.uint8)


# --- colour / PSNR ------------------------------------------------------------------

def test_ycbcr_of_gray_and_primaries():
    ycc = M.rgb_to_ycbcr(_gray(128))
    np.testing.assert_allclose(ycc[0, 0], [128 / 255, 0.5, 0.5], atol=1e-12)
    red = M.rgb_to_ycbcr(np.array([[[255, 0, 0]]], np.uint8))[0, 0]
    np.testing.assert_allclose(red, [0.299, 0.5 - 0.168736, 1.0], atol=1e-12)


def test_psnr_examples():
    assert M.psnr(_gray(100), _gray(100)) == 100.0
    assert M.psnr(_gray(100), _gray(116)) == pytest.approx(10 * np.log10(255**2 / 16**2), abs=1e-9)
    assert M.psnr(_gray(100), _gray(116), "CbCr") == 100.0
    with pytest.raises(ShapeMismatch):
        M.psnr(_gray(100, 32), _gray(100, 16))


def test_psnr_strictly_falls_with_noise(rng):
    ref = _texture(rng, 64).astype(np.float64) / 255
    noise = rng.normal(size=ref.shape)
    values = [M.psnr(ref, ref + s * noise) for s in (0.01, 0.02, 0.05, 0.1, 0.2)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_psnr_is_symmetric(rng):
    a, b = _texture(rng, 32), _texture(rng, 32)
    assert M.psnr(a, b) == M.psnr(b, a)


# --- SSIM ----------------------------------------------------------------------------

def test_ssim_examples(rng):
    img = _texture(rng, 64)
    assert M.ssim(img, img) == pytest.approx(1.0, abs=1e-12)
    assert M.ssim(img, 255 - img) < 0
    a, b = 0.2, 0.6
    c1 = 0.01**2
    closed = (2 * a * b + c1) / (a * a + b * b + c1)
    got = M.ssim(np.full((32, 32, 3), a), np.full((32, 32, 3), b))
    assert got == pytest.approx(closed, abs=1e-9)
    assert got < 1
    with pytest.raises(ShapeMismatch):
        M.ssim(img, img[:32])


# --- LPIPS ---------------------------------------------------------------------------

def _pretrained_lpips() -> bool:
    return M._lpips_backbone_state("alex", "auto") is not None


def test_lpips_identity_and_shape(rng):
    img = _texture(rng, 64)
    assert M.lpips_score(img, img) <= 1e-4
    with pytest.raises(ShapeMismatch):
        M.lpips_score(img, img[:32])


def test_lpips_blur_ladder(rng):
    img = _texture(rng, 128)
    scores = [M.lpips_score(img, cv2.GaussianBlur(img, (0, 0), s)) for s in (0.5, 1.5, 3.0, 6.0)]
    assert all(a < b for a, b in zip(scores, scores[1:]))


def test_lpips_batch_matches_single(rng):
    import torch

    a = np.stack([_texture(rng, 64) for _ in range(3)]).astype(np.float32) / 255
    b = np.clip(a + 0.05 * rng.normal(size=a.shape), 0, 1).astype(np.float32)
    batch = M.lpips_batch(torch.from_numpy(a).permute(0, 3, 1, 2), torch.from_numpy(b).permute(0, 3, 1, 2))
    single = [M.lpips_score(x, y) for x, y in zip(a, b)]
    np.testing.assert_allclose(batch.numpy(), single, rtol=1e-5, atol=1e-6)


@pytest.mark.skipif(not _pretrained_lpips(), reason="pretrained AlexNet weights for LPIPS are not available offline")
def test_lpips_heavy_degradation_band(rng):
    img = _texture(rng, 256)
    heavy = cv2.GaussianBlur(img, (0, 0), 4.0)
    blocky = cv2.resize(cv2.resize(heavy, (32, 32), interpolation=cv2.INTER_AREA), (256, 256), interpolation=cv2.INTER_NEAREST)
    assert 0.3 <= M.lpips_score(img, blocky) <= 0.7


# --- FID / KID -----------------------------------------------------------------------

def test_fid_matches_sqrtm_oracle(rng):
    a = rng.normal(size=(40, 6))
    b = rng.normal(size=(30, 6)) * 1.5 + 0.3
    ca, cb = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
    oracle = np.sum((a.mean(0) - b.mean(0)) ** 2) + np.trace(ca + cb - 2 * np.real(sqrtm(ca @ cb)))
    assert M.fid_from_features(a, b) == pytest.approx(oracle, rel=1e-8)


def test_fid_kid_self_distance(rng):
    a = rng.normal(size=(20, 64))
    assert M.fid_from_features(a, a) <= 1e-3
    assert abs(M.kid_from_features(a, a)) <= 1e-4


def test_kid_estimators(rng):
    a, b = rng.normal(size=(30, 8)), rng.normal(size=(30, 8)) + 1.0
    assert M.kid_from_features(a, b) > 0
    assert M.kid_from_features(a, b, "unbiased") > 0
    c = rng.normal(size=(12, 8))
    assert M.kid_from_features(a, c) == M.kid_from_features(a, c, "unbiased")
    with pytest.raises(ValueError):
        M.kid_from_features(a, b[:10], "u-statistic")


def test_kid_unbiased_oracle(rng):
    a, b = rng.normal(size=(7, 4)), rng.normal(size=(5, 4))
    k = lambda x, y: (x @ y / 4 + 1) ** 3
    aa = np.mean([k(a[i], a[j]) for i in range(7) for j in range(7) if i != j])
    bb = np.mean([k(b[i], b[j]) for i in range(5) for j in range(5) if i != j])
    ab = np.mean([k(a[i], b[j]) for i in range(7) for j in range(5)])
    assert M.kid_from_features(a, b) == pytest.approx(aa + bb - 2 * ab, rel=1e-12)


def test_set_too_small(rng):
    one = rng.normal(size=(1, 8))
    with pytest.raises(SetTooSmall):
        M.fid_from_features(one, rng.normal(size=(5, 8)))
    with pytest.raises(SetTooSmall):
        M.kid_from_features(one, rng.normal(size=(5, 8)))
    with pytest.raises(SetTooSmall):
        M.fid([_gray(1)], [_gray(1), _gray(2)])


@pytest.fixture(scope="module")
def embedder():
    return M.InceptionEmbedder("random:0", batch_size=8)


def test_embedder_is_deterministic(embedder, rng):
    imgs = [_texture(rng, 64) for _ in range(3)]
    a, b = embedder(imgs), embedder(imgs)
    assert a.shape == (3, 2048)
    np.testing.assert_array_equal(a, b)
    assert np.isfinite(a).all()


def test_fid_natural_vs_noise(embedder):
    rng = np.random.default_rng(0)
    nat_a = [_texture(rng, 64) for _ in range(12)]
    nat_b = [_texture(rng, 64) for _ in range(12)]
    noise = [rng.integers(0, 256, (64, 64, 3), dtype=np.uint8) for _ in range(12)]
    same = M.fid(nat_a, nat_a, embedder)
    close = M.fid(nat_a, nat_b, embedder)
    far = M.fid(nat_a, noise, embedder)
    assert same <= 1e-3
    assert far > 0 and far > 2 * close
    assert M.kid(nat_a, noise, embedder) > M.kid(nat_a, nat_b, embedder)


# --- VMAF ----------------------------------------------------------------------------

@requires_ffmpeg
def test_vmaf_hook(rng):
    frames = np.stack([_texture(rng, 64) for _ in range(3)])
    try:
        same = M.vmaf(frames, frames)
    except MissingMetricBackend:
        pytest.skip("ffmpeg build lacks libvmaf")
    noisy = np.clip(frames + rng.normal(0, 40, frames.shape), 0, 255).astype(np.uint8)
    assert same > 90
    assert M.vmaf(frames, noisy) < same


def test_vmaf_missing_tool(tmp_path, monkeypatch):
    monkeypatch.setenv("ARTIFACT_FFMPEG", str(tmp_path / "absent"))
    with pytest.raises(MissingMetricBackend):
        M.vmaf(_gray(1)[None], _gray(1)[None])
