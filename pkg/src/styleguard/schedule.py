"""DDPM noise schedule and the closed-form forward noising process.

Timesteps are 1-based throughout the package: ``t`` ranges over
``{1, ..., T}`` and ``alpha_bar_at(1)`` is the first cumulative product.
Schedule constants are kept in float64 and cast to the sample dtype at
the point of use, so gradient checks can run the whole stack in double
precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from styleguard.errors import ConfigError, ContractError


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta DDPM coefficients over ``T`` timesteps.

    beta[t-1] is the noise variance added at step t, alpha = 1 - beta,
    and alpha_bar is the running product of alpha. beta is monotone
    non-decreasing in (0, 1), which makes alpha_bar strictly decreasing.
    """

    T: int
    beta: torch.Tensor
    alpha: torch.Tensor
    alpha_bar: torch.Tensor

    def beta_at(self, t: int) -> float:
        self._check_t(t)
        return float(self.beta[t - 1])

    def alpha_at(self, t: int) -> float:
        self._check_t(t)
        return float(self.alpha[t - 1])

    def alpha_bar_at(self, t: int) -> float:
        self._check_t(t)
        return float(self.alpha_bar[t - 1])

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise IndexError(f"timestep {t} outside [1, {self.T}]")


def build_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule with alpha_bar computed by running product."""
    if T < 2:
        raise ConfigError(f"schedule needs T >= 2, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
        )
    beta = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alpha = 1.0 - beta
    alpha_bar = torch.cumprod(alpha, dim=0)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def forward_diffuse(
    x0: torch.Tensor, t: int, eps: torch.Tensor, sched: NoiseSchedule
) -> torch.Tensor:
    """Noise a batch to level t: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps.

    Exact closed form, no clamping; latents may leave [0, 1].
    """
    if eps.shape != x0.shape:
        raise ContractError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    ab = sched.alpha_bar_at(t)
    dtype = x0.dtype
    sqrt_ab = torch.tensor(ab, dtype=dtype).sqrt()
    sqrt_one_minus = torch.tensor(1.0 - ab, dtype=dtype).sqrt()
    return sqrt_ab * x0 + sqrt_one_minus * eps
