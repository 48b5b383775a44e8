"""Adversary preprocessing: random transforms and diffusion purifiers.

Every operation maps [0,1] images to [0,1] images of identical shape and
is differentiable with respect to the input, so crafting can take
expectation-over-transformation gradients straight through them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from styleguard.errors import ConfigError, ContractError
from styleguard.models import UNCOND_TOKEN, DenoiserModel
from styleguard.schedule import NoiseSchedule, forward_diffuse

TRANSFORM_KINDS = (
    "identity",
    "gaussian_noise",
    "center_crop_resize",
    "horizontal_flip",
    "gaussian_blur",
)


@dataclass(frozen=True)
class TransformSpec:
    """One random-transform family with its parameters."""

    kind: str
    noise_sigma: float = 0.05
    crop_ratio: float = 0.8
    blur_kernel: int = 3

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise ConfigError(f"unknown transform kind {self.kind!r}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not 0.0 < self.crop_ratio <= 1.0:
            raise ConfigError("crop_ratio must be in (0, 1]")
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise ConfigError("blur_kernel must be odd and >= 1")


@dataclass(frozen=True)
class PurifierSpec:
    """Diffusion-based purification settings.

    ``model`` is a noise-predicting denoiser; for ``noise_upscale`` it is
    run at 2x resolution, which its fully-convolutional architecture
    supports directly.
    """

    kind: str
    model: DenoiserModel
    steps: int = 5
    noise_sigma: float = 0.1

    def __post_init__(self):
        if self.kind not in ("diffpure", "noise_upscale"):
            raise ConfigError(f"unknown purifier kind {self.kind!r}")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")


def _gaussian_kernel(k: int, dtype: torch.dtype) -> torch.Tensor:
    sigma = 0.15 * k + 0.35
    coords = torch.arange(k, dtype=dtype) - (k - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def apply_transform(spec: TransformSpec, x: torch.Tensor, rng: torch.Generator) -> torch.Tensor:
    """Apply one transform; output has the input's spatial size."""
    if spec.kind == "identity":
        return x
    if spec.kind == "gaussian_noise":
        if spec.noise_sigma == 0:
            return x
        noise = torch.randn(x.shape, generator=rng, dtype=x.dtype)
        return (x + spec.noise_sigma * noise).clamp(0.0, 1.0)
    if spec.kind == "center_crop_resize":
        h, w = x.shape[-2:]
        ch = max(1, round(h * spec.crop_ratio))
        cw = max(1, round(w * spec.crop_ratio))
        top = (h - ch) // 2
        left = (w - cw) // 2
        cropped = x[..., top : top + ch, left : left + cw]
        return F.interpolate(cropped, size=(h, w), mode="bilinear", align_corners=False)
    if spec.kind == "horizontal_flip":
        return torch.flip(x, dims=[-1])
    if spec.kind == "gaussian_blur":
        k = spec.blur_kernel
        if k == 1:
            return x
        channels = x.shape[1]
        kernel = _gaussian_kernel(k, x.dtype).expand(channels, 1, k, k)
        pad = k // 2
        padded = F.pad(x, (pad, pad, pad, pad), mode="reflect")
        return F.conv2d(padded, kernel, groups=channels)
    raise ConfigError(f"unknown transform kind {spec.kind!r}")


def sample_transform(pool: list[TransformSpec], rng: torch.Generator) -> TransformSpec:
    """Uniform draw from a non-empty pool."""
    if not pool:
        raise ConfigError("transform pool is empty")
    idx = int(torch.randint(0, len(pool), (1,), generator=rng).item())
    return pool[idx]


def _deterministic_reverse(
    model: DenoiserModel, x_t: torch.Tensor, t_start: int, sched: NoiseSchedule
) -> torch.Tensor:
    """Mean-only reverse chain from t_start down to 0 (no fresh noise)."""
    x = x_t
    for t in range(t_start, 0, -1):
        eps_hat = model.predict_noise(x, t, UNCOND_TOKEN)
        beta_t = sched.beta_at(t)
        x = (x - beta_t / math.sqrt(1.0 - sched.alpha_bar_at(t)) * eps_hat) / math.sqrt(
            sched.alpha_at(t)
        )
    return x


def diffpure(
    x: torch.Tensor,
    spec: PurifierSpec,
    sched: NoiseSchedule,
    rng: torch.Generator,
) -> torch.Tensor:
    """Noise the image partway up the chain, then denoise it back."""
    if spec.kind != "diffpure":
        raise ContractError(f"diffpure called with spec kind {spec.kind!r}")
    if spec.steps > sched.T:
        raise ConfigError(f"purifier steps {spec.steps} exceed schedule T={sched.T}")
    if spec.steps == 0:
        return x
    eps = torch.randn(x.shape, generator=rng, dtype=x.dtype)
    x_t = forward_diffuse(x, spec.steps, eps, sched)
    return _deterministic_reverse(spec.model, x_t, spec.steps, sched).clamp(0.0, 1.0)


def noise_upscale(
    x: torch.Tensor,
    spec: PurifierSpec,
    rng: torch.Generator,
    sched: NoiseSchedule | None = None,
) -> torch.Tensor:
    """Gaussian pre-noise, learned 2x restoration, downsample back.

    The noisy image is lifted to 2x resolution bilinearly and restored
    there by the purifier's diffusion chain, then area-downsampled to the
    original resolution so the pipeline composes with fixed-size
    fine-tuning.
    """
    if spec.kind != "noise_upscale":
        raise ContractError(f"noise_upscale called with spec kind {spec.kind!r}")
    if sched is None:
        sched = spec.model.schedule
    if sched is None:
        raise ContractError("noise_upscale needs a schedule (pass one or attach to model)")
    if spec.steps > sched.T:
        raise ConfigError(f"purifier steps {spec.steps} exceed schedule T={sched.T}")
    noisy = x
    if spec.noise_sigma > 0:
        noisy = (x + spec.noise_sigma * torch.randn(x.shape, generator=rng, dtype=x.dtype)).clamp(
            0.0, 1.0
        )
    up = F.interpolate(noisy, scale_factor=2, mode="bilinear", align_corners=False)
    if spec.steps > 0:
        eps = torch.randn(up.shape, generator=rng, dtype=up.dtype)
        up = _deterministic_reverse(
            spec.model, forward_diffuse(up, spec.steps, eps, sched), spec.steps, sched
        )
    return F.avg_pool2d(up, kernel_size=2).clamp(0.0, 1.0)
