import pytest
import torch

from architts.codec import CodecConfig, LatentCodec


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def codec():
    return LatentCodec(CodecConfig())
