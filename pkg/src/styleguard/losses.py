"""Differentiable objectives for fine-tuning and perturbation crafting.

Conventions shared by every loss here:

* squared errors are reduced with ``mean`` over all elements, so values
  are comparable across batch sizes and resolutions;
* each call makes a single Monte-Carlo draw of (model, t, eps) from the
  supplied generator, with t uniform over {1..T} — variance is handled
  by the outer iteration counts, not by averaging inside one call;
* with a frozen generator every loss is a pure function of its inputs.

The crafting losses for the denoising error carry a leading minus sign,
so projected sign-gradient *ascent* on the combined objective increases
the error of the surrogate and purifier denoisers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from styleguard.errors import ConfigError, ContractError
from styleguard.models import DenoiserModel, feature_stats
from styleguard.schedule import NoiseSchedule, forward_diffuse


@dataclass(frozen=True)
class LossWeights:
    """Term weights and the purifier pre-noise level."""

    upscale_weight: float = 1.0
    style_weight: float = 10.0
    prior_weight: float = 1.0
    pre_noise_std: float = 0.1

    def __post_init__(self):
        for name in ("upscale_weight", "style_weight", "prior_weight", "pre_noise_std"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")


@dataclass(frozen=True)
class LossToggles:
    """Which crafting terms are active (ablation switches)."""

    denoise: bool = True
    upscale: bool = True
    style: bool = True

    def any_enabled(self) -> bool:
        return self.denoise or self.upscale or self.style


@dataclass
class EnsembleSpec:
    """Model pools used by the crafting objective."""

    surrogates: list = field(default_factory=list)
    purifiers: list = field(default_factory=list)
    encoders: list = field(default_factory=list)


def _draw_model(models, rng: torch.Generator):
    if len(models) == 0:
        raise ContractError("empty model ensemble")
    idx = int(torch.randint(0, len(models), (1,), generator=rng).item())
    return models[idx]


def _draw_timestep(sched: NoiseSchedule, rng: torch.Generator) -> int:
    return int(torch.randint(1, sched.T + 1, (1,), generator=rng).item())


def _noise_residual_mse(
    model: DenoiserModel,
    x: torch.Tensor,
    c: int,
    sched: NoiseSchedule,
    t: int,
    eps: torch.Tensor,
    cond_embed: torch.Tensor | None = None,
) -> torch.Tensor:
    """mean((eps - eps_hat(x_t, t, c))^2) at noise level t."""
    x_t = forward_diffuse(x, t, eps, sched)
    pred = model.predict_noise(x_t, t, c, cond_embed=cond_embed)
    return ((eps - pred) ** 2).mean()


def dreambooth_loss(
    model: DenoiserModel,
    x_inst: torch.Tensor,
    x_prior: torch.Tensor,
    c: int,
    c_pr: int,
    sched: NoiseSchedule,
    weights: LossWeights,
    rng: torch.Generator,
) -> torch.Tensor:
    """Instance denoising error plus weighted prior-preservation error.

    The prior term uses its own independently drawn (t', eps') on the
    prior image batch with the prior token.
    """
    if x_inst.numel() == 0 or x_prior.numel() == 0:
        raise ContractError("instance and prior batches must be non-empty")
    if c == c_pr:
        raise ContractError("instance and prior tokens must be distinct")
    t = _draw_timestep(sched, rng)
    eps = torch.randn(x_inst.shape, generator=rng, dtype=x_inst.dtype)
    loss = _noise_residual_mse(model, x_inst, c, sched, t, eps)
    if weights.prior_weight > 0:
        t_pr = _draw_timestep(sched, rng)
        eps_pr = torch.randn(x_prior.shape, generator=rng, dtype=x_prior.dtype)
        loss = loss + weights.prior_weight * _noise_residual_mse(
            model, x_prior, c_pr, sched, t_pr, eps_pr
        )
    return loss


def denoise_loss(
    surrogates: list,
    x_p: torch.Tensor,
    c: int,
    sched: NoiseSchedule,
    rng: torch.Generator,
) -> torch.Tensor:
    """Negative surrogate denoising error at a random noise level."""
    model = _draw_model(surrogates, rng)
    t = _draw_timestep(sched, rng)
    eps = torch.randn(x_p.shape, generator=rng, dtype=x_p.dtype)
    return -_noise_residual_mse(model, x_p, c, sched, t, eps)


def upscale_loss(
    purifiers: list,
    x_p: torch.Tensor,
    delta_noise: float,
    c: int,
    sched: NoiseSchedule,
    rng: torch.Generator,
) -> torch.Tensor:
    """Negative purifier denoising error on a Gaussian-pre-noised input.

    The pre-noise is drawn after (model, t, eps) so that with
    delta_noise = 0 the value collapses exactly to ``denoise_loss``
    evaluated on the purifier pool with the same generator state. The
    additive reparameterization keeps gradients flowing into ``x_p``.
    """
    if delta_noise < 0:
        raise ContractError("delta_noise must be >= 0")
    model = _draw_model(purifiers, rng)
    t = _draw_timestep(sched, rng)
    eps = torch.randn(x_p.shape, generator=rng, dtype=x_p.dtype)
    x_in = x_p
    if delta_noise > 0:
        pre = torch.randn(x_p.shape, generator=rng, dtype=x_p.dtype)
        x_in = x_p + delta_noise * pre
    return -_noise_residual_mse(model, x_in, c, sched, t, eps)


def style_loss(
    encoders: list,
    x_p: torch.Tensor,
    x_t: torch.Tensor,
    x_c: torch.Tensor,
) -> torch.Tensor:
    """Target-attraction minus clean-repulsion of encoder statistics.

    All three batches are index-paired (the caller samples target images
    to pair with each protected image). For each encoder and image pair
    the value is

        |mu_p - mu_t|^2 + |sigma_p - sigma_t|^2
        - |mu_p - mu_c|^2 - |sigma_p - sigma_c|^2

    averaged over pairs and encoders. May be negative; swapping the
    target and clean batches negates it exactly.
    """
    if len(encoders) == 0:
        raise ContractError("empty encoder ensemble")
    if x_p.numel() == 0:
        raise ContractError("empty protected batch")
    if x_t.shape[0] != x_p.shape[0] or x_c.shape[0] != x_p.shape[0]:
        raise ContractError(
            "style loss batches must be index-paired: "
            f"got sizes {x_p.shape[0]}, {x_t.shape[0]}, {x_c.shape[0]}"
        )
    total = None
    for enc in encoders:
        s_p = feature_stats(enc.encode(x_p))
        s_t = feature_stats(enc.encode(x_t))
        s_c = feature_stats(enc.encode(x_c))
        attract = ((s_p.mu - s_t.mu) ** 2).sum(dim=1) + ((s_p.sigma - s_t.sigma) ** 2).sum(dim=1)
        repel = ((s_p.mu - s_c.mu) ** 2).sum(dim=1) + ((s_p.sigma - s_c.sigma) ** 2).sum(dim=1)
        term = (attract - repel).mean()
        total = term if total is None else total + term
    return total / len(encoders)


def styleguard_loss(
    denoise: torch.Tensor | float | None,
    upscale: torch.Tensor | float | None,
    style: torch.Tensor | float | None,
    weights: LossWeights,
    toggles: LossToggles,
) -> torch.Tensor:
    """Weighted combination of the three crafting terms.

    Disabled terms contribute zero; enabling none is a configuration
    error. The style part is combined as given — any sign convention is
    applied by the caller before combination.
    """
    if not toggles.any_enabled():
        raise ConfigError("at least one loss term must be enabled")
    total = torch.zeros(())
    if toggles.denoise:
        total = total + denoise
    if toggles.upscale:
        total = total + weights.upscale_weight * upscale
    if toggles.style:
        total = total + weights.style_weight * style
    return total
