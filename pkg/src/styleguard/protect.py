"""Alternating surrogate fine-tuning and perturbation crafting.

Each outer iteration: pick the next surrogate and purifier (round-robin
with a reshuffled order per epoch, so small runs still cover every
ensemble member), fine-tune a throwaway copy of the surrogate for a few
steps to look ahead at fine-tuning dynamics, craft against the copy with
projected sign-gradient ascent on the combined objective, then train the
real surrogate on the freshly perturbed images.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import torch

from styleguard.errors import ConfigError, ContractError, NumericError, StyleGuardError
from styleguard.losses import (
    EnsembleSpec,
    LossToggles,
    LossWeights,
    denoise_loss,
    dreambooth_loss,
    style_loss,
    styleguard_loss,
    upscale_loss,
)
from styleguard.models import DenoiserModel, sample_reverse
from styleguard.pgd import fresh_state, run_pgd
from styleguard.rng import derive_seed, make_generator
from styleguard.schedule import NoiseSchedule
from styleguard.transforms import TransformSpec


@dataclass(frozen=True)
class ProtectionConfig:
    """All crafting hyperparameters for one protection run.

    ``style_sign`` and ``error_sign`` set how the style bracket and the
    (negative) denoising-error terms enter the ascended objective. Both
    default to -1: ascent then pulls encoder statistics toward the
    target set and *maximizes* the surrogate/purifier denoising error,
    which is what corrupts fine-tuning. (+1 ascends the literal terms,
    which drives the statistics away from the target and makes the
    protected images easier, not harder, to denoise.)
    """

    n_iters: int = 100
    finetune_steps: int = 3
    pgd_steps: int = 6
    step_size: float = 0.005
    budget: float = 8.0 / 255.0
    surrogate_lr: float = 1e-3
    weights: LossWeights = field(default_factory=LossWeights)
    toggles: LossToggles = field(default_factory=LossToggles)
    style_sign: float = -1.0
    error_sign: float = -1.0
    transform_pool: tuple[TransformSpec, ...] = (TransformSpec("identity"),)
    eot_samples: int = 1
    instance_token: int = 1
    prior_token: int = 2
    n_prior_images: int = 8
    seed: int = 0
    save_checkpoints: bool = False

    def __post_init__(self):
        if self.n_iters < 1 or self.finetune_steps < 1 or self.pgd_steps < 1:
            raise ConfigError("n_iters, finetune_steps and pgd_steps must all be >= 1")
        if self.step_size <= 0 or self.surrogate_lr < 0:
            raise ConfigError("step_size must be > 0 and surrogate_lr >= 0")
        if self.budget < 0:
            raise ConfigError("budget must be >= 0")
        if self.eot_samples < 1:
            raise ConfigError("eot_samples must be >= 1")
        if not self.transform_pool:
            raise ConfigError("transform_pool must be non-empty")

    def echo(self) -> dict:
        """Serializable snapshot of every resolved hyperparameter."""
        return {
            "n_iters": self.n_iters,
            "finetune_steps": self.finetune_steps,
            "pgd_steps": self.pgd_steps,
            "step_size": self.step_size,
            "budget": self.budget,
            "surrogate_lr": self.surrogate_lr,
            "weights": vars(self.weights).copy(),
            "toggles": vars(self.toggles).copy(),
            "style_sign": self.style_sign,
            "error_sign": self.error_sign,
            "transform_pool": [vars(t).copy() for t in self.transform_pool],
            "eot_samples": self.eot_samples,
            "instance_token": self.instance_token,
            "prior_token": self.prior_token,
            "n_prior_images": self.n_prior_images,
            "seed": self.seed,
        }


@dataclass
class RunArtifacts:
    """Everything a protection run produces."""

    x_protected: torch.Tensor
    loss_trace: list[dict]
    config_echo: dict
    surrogate_checkpoints: list | None = None
    complete: bool = True


class ProtectionRunError(StyleGuardError):
    """A module error aborted the run; partial artifacts are attached."""

    def __init__(self, message: str, artifacts: RunArtifacts):
        super().__init__(message)
        self.artifacts = artifacts


def _sgd_steps(
    model: DenoiserModel,
    x_train: torch.Tensor,
    k1: int,
    lr: float,
    prompts: tuple[int, int],
    sched: NoiseSchedule,
    rng: torch.Generator,
    x_prior: torch.Tensor,
    weights: LossWeights,
) -> DenoiserModel:
    """Plain gradient steps on the fine-tuning loss, in place."""
    c, c_pr = prompts
    params = [p for p in model.parameters() if p.requires_grad]
    for _ in range(k1):
        loss = dreambooth_loss(model, x_train, x_prior, c, c_pr, sched, weights, rng)
        if not torch.isfinite(loss):
            raise NumericError("non-finite fine-tuning loss")
        grads = torch.autograd.grad(loss, params)
        with torch.no_grad():
            for p, g in zip(params, grads):
                p.add_(g, alpha=-lr)
    return model


def lookahead_finetune(
    theta: DenoiserModel,
    x_p: torch.Tensor,
    k1: int,
    beta_lr: float,
    prompts: tuple[int, int],
    sched: NoiseSchedule,
    rng: torch.Generator,
    x_prior: torch.Tensor,
    weights: LossWeights,
) -> DenoiserModel:
    """Fine-tune a copy for k1 steps; the input model is untouched."""
    if k1 < 1:
        raise ConfigError("k1 must be >= 1")
    return _sgd_steps(copy.deepcopy(theta), x_p, k1, beta_lr, prompts, sched, rng, x_prior, weights)


def update_surrogate(
    theta: DenoiserModel,
    x_p_new: torch.Tensor,
    k1: int,
    beta_lr: float,
    prompts: tuple[int, int],
    sched: NoiseSchedule,
    rng: torch.Generator,
    x_prior: torch.Tensor,
    weights: LossWeights,
) -> DenoiserModel:
    """Same update rule as the look-ahead, applied in place."""
    if k1 < 1:
        raise ConfigError("k1 must be >= 1")
    return _sgd_steps(theta, x_p_new, k1, beta_lr, prompts, sched, rng, x_prior, weights)


class _RoundRobin:
    """Cycles through a pool in a freshly shuffled order each epoch."""

    def __init__(self, pool: list, rng: torch.Generator):
        if not pool:
            raise ContractError("empty ensemble pool")
        self.pool = pool
        self.rng = rng
        self.order: list[int] = []

    def next(self):
        if not self.order:
            self.order = torch.randperm(len(self.pool), generator=self.rng).tolist()
        return self.pool[self.order.pop(0)]


def _pair_targets(x_target: torch.Tensor, n: int, rng: torch.Generator) -> torch.Tensor:
    idx = torch.randint(0, x_target.shape[0], (n,), generator=rng)
    return x_target[idx]


def run_styleguard(
    config: ProtectionConfig,
    x_clean: torch.Tensor,
    x_target: torch.Tensor,
    ensembles: EnsembleSpec,
    sched: NoiseSchedule,
) -> RunArtifacts:
    """Craft protected images over ``config.n_iters`` outer iterations.

    The clean batch is never mutated; protected images start as a copy
    of it and satisfy the budget and pixel-range invariants after every
    iteration. Surrogate models in ``ensembles`` are trained in place
    over the run.
    """
    if x_clean.numel() == 0 or x_target.numel() == 0:
        raise ContractError("clean and target batches must be non-empty")
    if config.toggles.denoise and not ensembles.surrogates:
        raise ConfigError("denoise term enabled but no surrogates supplied")
    if config.toggles.upscale and not ensembles.purifiers:
        raise ConfigError("upscale term enabled but no purifiers supplied")
    if config.toggles.style and not ensembles.encoders:
        raise ConfigError("style term enabled but no encoders supplied")
    if not config.toggles.any_enabled():
        raise ConfigError("at least one loss term must be enabled")

    seed = config.seed
    rng_loop = make_generator(seed, "loop")
    rng_rr = make_generator(seed, "roundrobin")
    c, c_pr = config.instance_token, config.prior_token
    weights, toggles = config.weights, config.toggles

    all_models = list(ensembles.surrogates) + list(ensembles.purifiers) + list(ensembles.encoders)
    model_dtype = next(all_models[0].parameters()).dtype if all_models else x_clean.dtype
    x_clean_ref = x_clean.detach().to(model_dtype)
    x_target_ref = x_target.detach().to(model_dtype)

    # Class-prior images come from the initial (pre-run) surrogate.
    prior_source = ensembles.surrogates[0] if ensembles.surrogates else None
    if prior_source is not None:
        x_prior = sample_reverse(
            prior_source,
            sched,
            c_pr,
            config.n_prior_images,
            derive_seed(seed, "prior"),
            size=tuple(x_clean.shape[-2:]),
        ).to(model_dtype)
    else:
        x_prior = x_clean_ref.clone()

    surrogate_rr = _RoundRobin(ensembles.surrogates, rng_rr) if ensembles.surrogates else None
    purifier_rr = _RoundRobin(ensembles.purifiers, rng_rr) if ensembles.purifiers else None

    # The perturbation lives in float64 so the budget projection is exact
    # far below the invariant tolerance; model evaluation casts down.
    state = fresh_state(x_clean.detach().to(torch.float64), config.budget, config.step_size)
    trace: list[dict] = []

    def partial(complete: bool) -> RunArtifacts:
        return RunArtifacts(
            x_protected=state.x_adv.detach().clone(),
            loss_trace=list(trace),
            config_echo=config.echo(),
            complete=complete,
        )

    try:
        for i in range(config.n_iters):
            theta = surrogate_rr.next() if surrogate_rr else None
            theta_pur = purifier_rr.next() if purifier_rr else None

            if theta is not None:
                theta_ahead = lookahead_finetune(
                    theta,
                    state.x_adv.to(model_dtype),
                    config.finetune_steps,
                    config.surrogate_lr,
                    (c, c_pr),
                    sched,
                    rng_loop,
                    x_prior,
                    weights,
                )
            else:
                theta_ahead = None

            def objective(z: torch.Tensor) -> torch.Tensor:
                zm = z.to(model_dtype)
                d = u = s = None
                if toggles.denoise:
                    d = config.error_sign * denoise_loss([theta_ahead], zm, c, sched, rng_loop)
                if toggles.upscale:
                    u = config.error_sign * upscale_loss(
                        [theta_pur], zm, weights.pre_noise_std, c, sched, rng_loop
                    )
                if toggles.style:
                    paired = _pair_targets(x_target_ref, zm.shape[0], rng_loop)
                    s = config.style_sign * style_loss(ensembles.encoders, zm, paired, x_clean_ref)
                return styleguard_loss(d, u, s, weights, toggles)

            state = run_pgd(
                state,
                objective,
                config.pgd_steps,
                list(config.transform_pool),
                config.eot_samples,
                rng_loop,
            )

            if theta is not None:
                update_surrogate(
                    theta,
                    state.x_adv.to(model_dtype),
                    config.finetune_steps,
                    config.surrogate_lr,
                    (c, c_pr),
                    sched,
                    rng_loop,
                    x_prior,
                    weights,
                )

            trace.append(_trace_row(i, state.x_adv.to(model_dtype), config, ensembles,
                                    theta_ahead, theta_pur, x_target_ref, x_clean_ref, sched))

            dev = state.max_deviation()
            if dev > config.budget + 1e-9:
                raise NumericError(f"budget invariant violated: {dev} > {config.budget}")
    except StyleGuardError as exc:
        raise ProtectionRunError(str(exc), partial(complete=False)) from exc

    artifacts = partial(complete=True)
    if config.save_checkpoints:
        artifacts.surrogate_checkpoints = [
            copy.deepcopy(m.state_dict()) for m in ensembles.surrogates
        ]
    return artifacts


def _trace_row(
    i: int,
    x_p: torch.Tensor,
    config: ProtectionConfig,
    ensembles: EnsembleSpec,
    theta_ahead,
    theta_pur,
    x_target: torch.Tensor,
    x_clean: torch.Tensor,
    sched: NoiseSchedule,
) -> dict:
    """Evaluate each enabled term of the ascent objective once per
    iteration, on the untransformed images.

    Uses a per-iteration stream derived from the run seed so the trace
    never perturbs the optimization's own draws. Recorded values are the
    signed parts actually ascended, so ``total`` trends upward over a
    healthy run.
    """
    rng = make_generator(config.seed, "trace", i)
    toggles, weights = config.toggles, config.weights
    row: dict = {"iteration": i}
    with torch.no_grad():
        d = u = s = None
        if toggles.denoise:
            d = config.error_sign * float(
                denoise_loss([theta_ahead], x_p, config.instance_token, sched, rng)
            )
        if toggles.upscale:
            u = config.error_sign * float(
                upscale_loss(
                    [theta_pur], x_p, weights.pre_noise_std, config.instance_token, sched, rng
                )
            )
        if toggles.style:
            paired = _pair_targets(x_target, x_p.shape[0], rng)
            s = config.style_sign * float(style_loss(ensembles.encoders, x_p, paired, x_clean))
        total = styleguard_loss(
            d if d is not None else 0.0,
            u if u is not None else 0.0,
            s if s is not None else 0.0,
            weights,
            toggles,
        )
    row.update({"denoise": d, "upscale": u, "style": s, "total": float(total)})
    return row
