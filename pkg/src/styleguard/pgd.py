"""Projected sign-gradient ascent under an L-infinity pixel budget.

States are immutable; each step returns a new state whose perturbed
batch provably satisfies both invariants (within budget of the anchor,
inside [0, 1]) because projection is the last thing applied.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch

from styleguard.errors import ConfigError, ContractError, NumericError
from styleguard.transforms import TransformSpec, apply_transform, sample_transform


@dataclass(frozen=True)
class PerturbationState:
    """Current perturbed batch tied to its immutable clean anchor."""

    x_orig: torch.Tensor
    x_adv: torch.Tensor
    budget: float
    step_size: float
    steps_done: int = 0

    def __post_init__(self):
        if self.x_adv.shape != self.x_orig.shape:
            raise ContractError("x_adv and x_orig shapes differ")
        if self.budget < 0:
            raise ConfigError("budget must be >= 0")
        if self.step_size <= 0:
            raise ConfigError("step_size must be > 0")

    def max_deviation(self) -> float:
        return float((self.x_adv - self.x_orig).abs().max())


def fresh_state(x_clean: torch.Tensor, budget: float, step_size: float) -> PerturbationState:
    """Start from the clean batch itself (zero perturbation)."""
    return PerturbationState(
        x_orig=x_clean, x_adv=x_clean.clone(), budget=budget, step_size=step_size
    )


def project_linf(x: torch.Tensor, x_orig: torch.Tensor, budget: float) -> torch.Tensor:
    """Clamp into the budget box around x_orig, then into [0, 1]."""
    if x.shape != x_orig.shape:
        raise ContractError("shapes differ in projection")
    return torch.clamp(x, min=x_orig - budget, max=x_orig + budget).clamp(0.0, 1.0)


def pgd_step(
    state: PerturbationState,
    objective,
    transform_pool: list[TransformSpec],
    j_samples: int,
    rng: torch.Generator,
) -> PerturbationState:
    """One ascent step: averaged transform gradients, sign, project.

    For each of the ``j_samples`` Monte-Carlo samples a transform g is
    drawn and the gradient of objective(g(x_adv)) is taken with respect
    to the untransformed batch, differentiating through g. sign(0) = 0,
    so dead pixels do not drift.
    """
    if j_samples < 1:
        raise ConfigError("j_samples must be >= 1")
    grad_sum = torch.zeros_like(state.x_adv)
    for _ in range(j_samples):
        spec = sample_transform(transform_pool, rng)
        x = state.x_adv.detach().clone().requires_grad_(True)
        value = objective(apply_transform(spec, x, rng))
        (grad,) = torch.autograd.grad(value, x, allow_unused=True)
        if grad is not None:
            if not torch.isfinite(grad).all():
                raise NumericError("non-finite gradient in PGD step")
            grad_sum = grad_sum + grad
    update = state.step_size * torch.sign(grad_sum / j_samples)
    x_new = project_linf(state.x_adv + update, state.x_orig, state.budget)
    return replace(state, x_adv=x_new.detach(), steps_done=state.steps_done + 1)


def run_pgd(
    state: PerturbationState,
    objective,
    k2: int,
    transform_pool: list[TransformSpec],
    j_samples: int,
    rng: torch.Generator,
) -> PerturbationState:
    """``k2`` sequential ascent steps."""
    if k2 < 1:
        raise ConfigError("k2 must be >= 1")
    for _ in range(k2):
        state = pgd_step(state, objective, transform_pool, j_samples, rng)
    return state
