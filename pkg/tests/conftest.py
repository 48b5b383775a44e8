import pytest
import torch

from styleguard.models import DenoiserModel, PixelEncoder, RandomConvEncoder
from styleguard.schedule import build_schedule


@pytest.fixture(scope="session")
def sched():
    return build_schedule(50)


@pytest.fixture(scope="session")
def sched_small():
    return build_schedule(10)


@pytest.fixture()
def tiny_model():
    return DenoiserModel(hidden=8, n_blocks=1, vocab_size=4, seed=1)


@pytest.fixture()
def encoders():
    return [PixelEncoder(), RandomConvEncoder(seed=7)]


def rand_images(n, size, seed, dtype=torch.float32):
    gen = torch.Generator().manual_seed(seed)
    return torch.rand((n, 3, size, size), generator=gen, dtype=dtype)


@pytest.fixture()
def images8():
    return rand_images(2, 8, 0)


class LinearDenoiser(torch.nn.Module):
    """Stub predictor eps_hat = a * x + b with hand-computable gradients."""

    vocab_size = 8
    in_channels = 3
    kind = "denoiser"

    def __init__(self, a=0.5, b=0.1, dtype=torch.float32):
        super().__init__()
        self.a = torch.nn.Parameter(torch.tensor(float(a), dtype=dtype))
        self.b = torch.nn.Parameter(torch.tensor(float(b), dtype=dtype))
        self.schedule = None

    def predict_noise(self, x_t, t, c, cond_embed=None):
        return self.a * x_t + self.b


class ZeroDenoiser(torch.nn.Module):
    """Predicts zero noise everywhere."""

    vocab_size = 8
    in_channels = 3
    kind = "denoiser"

    def __init__(self):
        super().__init__()
        self.schedule = None

    def predict_noise(self, x_t, t, c, cond_embed=None):
        return torch.zeros_like(x_t)


class OracleDenoiser(torch.nn.Module):
    """Returns a pre-recorded noise tensor (a 'perfect' denoiser for one draw)."""

    vocab_size = 8
    in_channels = 3
    kind = "denoiser"

    def __init__(self):
        super().__init__()
        self.playback = []
        self.schedule = None

    def predict_noise(self, x_t, t, c, cond_embed=None):
        return self.playback.pop(0)
