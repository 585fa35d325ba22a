import numpy as np
import pytest
import torch

from artifact.data.codec import ffmpeg_exe
from artifact.errors import EncoderUnavailable
from artifact.features import load_backbone


def _has_ffmpeg() -> bool:
    try:
        ffmpeg_exe()
    except EncoderUnavailable:
        return False
    return True


requires_ffmpeg = pytest.mark.skipif(not _has_ffmpeg(), reason="ffmpeg with libx265 not available")


@pytest.fixture(scope="session")
def backbone64():
    """Randomly initialised EfficientNet-B3 taking 64x64 inputs."""
    return load_backbone("efficientnet_b3", "random:0", input_size=64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
