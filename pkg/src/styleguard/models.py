"""Toy generative stack: conditional denoiser, feature encoders, sampling.

The denoiser is a small fully-convolutional residual net with a
sinusoidal timestep embedding and an additive learned prompt embedding.
Being fully convolutional it runs at any spatial resolution, which the
noise-upscaling purifier exploits by refining at 2x scale.

Encoders stand in for the VAE/CLIP feature extractors of a full latent
diffusion system: one fixed near-identity strided projection and one
frozen random conv stack. Both are deterministic and differentiable
with respect to their input, which the style objective requires.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from styleguard.errors import ContractError, DataError, VocabularyError
from styleguard.schedule import NoiseSchedule, build_schedule

#: Reserved token id for unconditional prediction.
UNCOND_TOKEN = 0

CHECKPOINT_MAGIC = b"SGLAB1"


def sinusoidal_embedding(t: int, dim: int, dtype: torch.dtype) -> torch.Tensor:
    """Standard sin/cos positional features for a scalar timestep."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=dtype) / max(half - 1, 1)
    )
    args = float(t) * freqs
    return torch.cat([torch.sin(args), torch.cos(args)])


class DenoiserModel(nn.Module):
    """Conditional noise predictor eps(x_t, t, c).

    Three conv layers by default (stem + one residual block + head),
    widened or deepened via ``hidden`` / ``n_blocks`` for architecturally
    distinct ensemble members. Deterministic given (params, inputs);
    initialization is fully determined by ``seed``.
    """

    kind = "denoiser"

    def __init__(
        self,
        in_channels: int = 3,
        hidden: int = 32,
        cond_dim: int = 16,
        vocab_size: int = 8,
        n_blocks: int = 1,
        time_dim: int = 32,
        *,
        seed: int,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.in_channels = in_channels
        self.hidden = hidden
        self.cond_dim = cond_dim
        self.vocab_size = vocab_size
        self.n_blocks = n_blocks
        self.time_dim = time_dim
        self.seed = seed
        self.schedule: NoiseSchedule | None = None

        self.conv_in = nn.Conv2d(in_channels, hidden, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, hidden)
        self.prompt_embed = nn.Embedding(vocab_size, cond_dim)
        self.prompt_proj = nn.Linear(cond_dim, hidden)
        self.blocks = nn.ModuleList(
            nn.Conv2d(hidden, hidden, 3, padding=1) for _ in range(n_blocks)
        )
        self.conv_out = nn.Conv2d(hidden, in_channels, 3, padding=1)

        self._reset_parameters(seed)
        self.to(dtype)

    def _reset_parameters(self, seed: int) -> None:
        gen = torch.Generator(device="cpu").manual_seed(seed)
        for name, p in self.named_parameters():
            if p.ndim >= 2:
                fan_in = p[0].numel()
                std = math.sqrt(2.0 / fan_in)
                if name.startswith("conv_out"):
                    std *= 0.1  # near-zero initial prediction keeps early training stable
                if name.startswith("prompt_embed"):
                    std = 0.5
                with torch.no_grad():
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)
            else:
                with torch.no_grad():
                    p.zero_()

    @property
    def arch_spec(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "hidden": self.hidden,
            "cond_dim": self.cond_dim,
            "vocab_size": self.vocab_size,
            "n_blocks": self.n_blocks,
            "time_dim": self.time_dim,
        }

    def cond_embedding(self, c: int) -> torch.Tensor:
        if not 0 <= int(c) < self.vocab_size:
            raise VocabularyError(f"token id {c} outside vocabulary [0, {self.vocab_size})")
        return self.prompt_embed.weight[int(c)]

    def predict_noise(
        self,
        x_t: torch.Tensor,
        t: int,
        c: int,
        cond_embed: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Noise prediction, same shape as ``x_t``.

        ``cond_embed`` overrides the vocabulary lookup; token-embedding
        optimization passes its trainable leaf vector here.
        """
        if x_t.ndim != 4 or x_t.shape[1] != self.in_channels:
            raise ContractError(
                f"expected (N, {self.in_channels}, H, W) input, got {tuple(x_t.shape)}"
            )
        dtype = x_t.dtype
        if cond_embed is None:
            cond_embed = self.cond_embedding(c)
        temb = self.time_proj(sinusoidal_embedding(t, self.time_dim, dtype))
        pemb = self.prompt_proj(cond_embed.to(dtype))
        h = self.conv_in(x_t) + temb.view(1, -1, 1, 1) + pemb.view(1, -1, 1, 1)
        h = F.silu(h)
        for conv in self.blocks:
            h = h + F.silu(conv(h))
        return self.conv_out(h)

    forward = predict_noise


class PixelEncoder(nn.Module):
    """Near-identity 4-channel strided projection (VAE stand-in).

    Channels 0..2 are 2x2 box averages of R, G, B; channel 3 is a box
    average of the pixel mean. Fixed weights, no seed, linear.
    """

    kind = "encoder_pixel"
    out_channels = 4

    def __init__(self, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.conv = nn.Conv2d(3, 4, kernel_size=2, stride=2, bias=False)
        w = torch.zeros(4, 3, 2, 2)
        for ch in range(3):
            w[ch, ch] = 0.25
        w[3, :] = 0.25 / 3.0
        with torch.no_grad():
            self.conv.weight.copy_(w)
        self.requires_grad_(False)
        self.to(dtype)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)

    forward = encode


class RandomConvEncoder(nn.Module):
    """Frozen randomly-initialized conv encoder (CLIP-feature stand-in)."""

    kind = "encoder_random"

    def __init__(
        self,
        out_channels: int = 8,
        *,
        seed: int,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.out_channels = out_channels
        self.seed = seed
        self.conv1 = nn.Conv2d(3, out_channels, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        gen = torch.Generator(device="cpu").manual_seed(seed)
        for p in self.parameters():
            with torch.no_grad():
                if p.ndim >= 2:
                    p.copy_(
                        torch.randn(p.shape, generator=gen, dtype=p.dtype)
                        * math.sqrt(2.0 / p[0].numel())
                    )
                else:
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * 0.05)
        self.requires_grad_(False)
        self.to(dtype)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv2(torch.tanh(self.conv1(x)))

    forward = encode


@dataclass(frozen=True)
class LatentStats:
    """Per-image channel-wise mean and population standard deviation."""

    mu: torch.Tensor  # (N, C)
    sigma: torch.Tensor  # (N, C)


def feature_stats(latent: torch.Tensor) -> LatentStats:
    """Channel statistics over spatial positions, population convention."""
    if latent.ndim != 4:
        raise ContractError(f"expected (N, C, H, W) latent, got {tuple(latent.shape)}")
    if latent.shape[2] * latent.shape[3] < 2:
        raise ContractError("degenerate latent: need >= 2 spatial elements per channel")
    mu = latent.mean(dim=(2, 3))
    var = ((latent - mu[:, :, None, None]) ** 2).mean(dim=(2, 3))
    return LatentStats(mu=mu, sigma=torch.sqrt(var))


def sample_reverse(
    model: DenoiserModel,
    sched: NoiseSchedule,
    c: int,
    n: int,
    seed: int,
    size: tuple[int, int] = (32, 32),
) -> torch.Tensor:
    """Ancestral reverse sampling; deterministic per seed.

    Latents are never clamped mid-chain; only the final images are
    clamped to [0, 1].
    """
    if n < 1:
        raise ContractError(f"need n >= 1 samples, got {n}")
    dtype = next(model.parameters()).dtype if any(True for _ in model.parameters()) else torch.float32
    gen = torch.Generator(device="cpu").manual_seed(seed)
    shape = (n, model.in_channels, size[0], size[1])
    with torch.no_grad():
        x = torch.randn(shape, generator=gen, dtype=dtype)
        for t in range(sched.T, 0, -1):
            eps_hat = model.predict_noise(x, t, c)
            beta_t = sched.beta_at(t)
            alpha_t = sched.alpha_at(t)
            ab_t = sched.alpha_bar_at(t)
            x = (x - beta_t / math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(alpha_t)
            if t > 1:
                x = x + math.sqrt(beta_t) * torch.randn(shape, generator=gen, dtype=dtype)
    return x.clamp(0.0, 1.0)


# ---------------------------------------------------------------------------
# Checkpoint IO

_MODEL_CLASSES = {
    "denoiser": DenoiserModel,
    "encoder_pixel": PixelEncoder,
    "encoder_random": RandomConvEncoder,
}


def save_checkpoint(model: nn.Module, sched: NoiseSchedule | None, path) -> None:
    """Single binary file: magic, JSON header, flat parameter array."""
    params = list(model.named_parameters())
    header = {
        "kind": model.kind,
        "arch": getattr(model, "arch_spec", {"seed": getattr(model, "seed", 0)}),
        "seed": getattr(model, "seed", 0),
        "out_channels": getattr(model, "out_channels", None),
        "dtype": str(next(model.parameters()).dtype).removeprefix("torch."),
        "params": [[name, list(p.shape)] for name, p in params],
        "schedule": None
        if sched is None
        else {
            "T": sched.T,
            "beta_start": float(sched.beta[0]),
            "beta_end": float(sched.beta[-1]),
        },
    }
    blob = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(len(blob).to_bytes(8, "little"))
    buf.write(blob)
    flat = torch.cat([p.detach().reshape(-1) for _, p in params])
    buf.write(flat.numpy().tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> tuple[nn.Module, NoiseSchedule | None]:
    """Rebuild a model (and its schedule) from ``save_checkpoint`` output."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a model checkpoint (bad magic header)")
    off = len(CHECKPOINT_MAGIC)
    hlen = int.from_bytes(raw[off : off + 8], "little")
    off += 8
    header = json.loads(raw[off : off + hlen].decode())
    off += hlen

    dtype = getattr(torch, header["dtype"])
    kind = header["kind"]
    if kind not in _MODEL_CLASSES:
        raise DataError(f"{path}: unknown model kind {kind!r}")
    if kind == "denoiser":
        model = DenoiserModel(**header["arch"], seed=header["seed"], dtype=dtype)
    elif kind == "encoder_pixel":
        model = PixelEncoder(dtype=dtype)
    else:
        model = RandomConvEncoder(
            out_channels=header["out_channels"], seed=header["seed"], dtype=dtype
        )

    names = [name for name, _ in model.named_parameters()]
    saved_names = [name for name, _ in header["params"]]
    if names != saved_names:
        raise DataError(f"{path}: parameter layout mismatch")
    flat = torch.frombuffer(bytearray(raw[off:]), dtype=dtype)
    pos = 0
    with torch.no_grad():
        for _, p in model.named_parameters():
            p.copy_(flat[pos : pos + p.numel()].reshape(p.shape))
            pos += p.numel()
    if pos != flat.numel():
        raise DataError(f"{path}: parameter payload size mismatch")

    sched = None
    if header["schedule"] is not None:
        s = header["schedule"]
        sched = build_schedule(s["T"], s["beta_start"], s["beta_end"])
        model.schedule = sched
    return model, sched
