"""Simulate the adversary and score protection.

Fine-tunes fresh toy models on (optionally purified) image sets, either
by full fine-tuning with the prior-preserving loss or by optimizing a
single token embedding, generates matched image sets and reports the
Frechet distance, manifold precision, and optionally an identity match
score. A single frozen randomly-initialized conv embedder extracts
features for every report, so numbers are comparable across runs.
"""

from __future__ import annotations

import copy
import functools
import math
from dataclasses import dataclass

import numpy as np
import torch

from styleguard.errors import ConfigError, ContractError, NumericError
from styleguard.models import DenoiserModel, RandomConvEncoder, sample_reverse
from styleguard.rng import derive_seed, make_generator
from styleguard.schedule import NoiseSchedule, forward_diffuse
from styleguard.transforms import (
    PurifierSpec,
    TransformSpec,
    apply_transform,
    diffpure,
    noise_upscale,
)

MIMICRY_METHODS = ("dreambooth_full", "textual_inversion")

#: Seed of the shared frozen feature embedder (never changes).
_EMBEDDER_SEED = 0x5EED

#: Output dimension of the shared embedder.
FEATURE_DIM = 16


@dataclass(frozen=True)
class MimicrySpec:
    """How the simulated adversary fine-tunes.

    ``draws_per_step`` averages that many Monte-Carlo loss draws per
    optimizer step; more draws give smoother, more reproducible
    fine-tuning trajectories (the toy models are small enough that
    single-draw gradients make the fitted model chaotic in its inputs).
    """

    method: str = "dreambooth_full"
    steps: int = 400
    lr: float = 1e-3
    instance_token: int = 1
    prior_token: int = 2
    prior_weight: float = 1.0
    n_prior_images: int = 8
    draws_per_step: int = 4
    preprocessing: TransformSpec | PurifierSpec | None = None

    def __post_init__(self):
        if self.method not in MIMICRY_METHODS:
            raise ConfigError(f"unknown mimicry method {self.method!r}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.draws_per_step < 1:
            raise ConfigError("draws_per_step must be >= 1")


@dataclass
class MimicFit:
    """Result of one fine-tuning run."""

    model: DenoiserModel
    loss_trace: list[float]
    token_embedding: torch.Tensor | None = None


@dataclass
class MetricsReport:
    """Protection scores for one (protected set, preprocessing) pair."""

    fid: float
    precision: float
    ims: float | None
    success_rate: float | None
    sample_counts: dict
    config_echo: dict

    def csv_row(self, run_id: str = "", method: str = "", preprocessing: str = "") -> dict:
        return {
            "run_id": run_id,
            "method": method,
            "preprocessing": preprocessing,
            "fid": self.fid,
            "precision": self.precision,
            "ims": "" if self.ims is None else self.ims,
            "success_rate": "" if self.success_rate is None else self.success_rate,
            "seeds": self.config_echo.get("seed", ""),
        }


def preprocess_images(
    x: torch.Tensor,
    spec: TransformSpec | PurifierSpec | None,
    rng: torch.Generator,
    sched: NoiseSchedule | None = None,
) -> torch.Tensor:
    """Apply the adversary's preprocessing, if any, before fine-tuning.

    Runs without autograd: the result is training data, not part of a
    differentiable objective (the crafting losses never pass through
    here).
    """
    if spec is None:
        return x
    with torch.no_grad():
        if isinstance(spec, TransformSpec):
            return apply_transform(spec, x, rng)
        if spec.kind == "diffpure":
            if sched is None:
                sched = spec.model.schedule
            return diffpure(x, spec, sched, rng)
        return noise_upscale(x, spec, rng, sched)


def mimic_finetune(
    base: DenoiserModel,
    x_train: torch.Tensor,
    spec: MimicrySpec,
    sched: NoiseSchedule,
    rng: torch.Generator,
) -> MimicFit:
    """Fit a fresh copy of ``base`` to the training images.

    ``dreambooth_full`` updates all parameters with the prior-preserving
    loss; ``textual_inversion`` freezes every parameter and optimizes
    only the instance token's embedding vector through the instance term.
    """
    x_train = preprocess_images(x_train, spec.preprocessing, rng, sched)
    model = copy.deepcopy(base)
    if spec.method == "dreambooth_full":
        return _fit_dreambooth(model, x_train, spec, sched, rng)
    return _fit_token_embedding(model, x_train, spec, sched, rng)


def _fit_dreambooth(
    model: DenoiserModel,
    x_train: torch.Tensor,
    spec: MimicrySpec,
    sched: NoiseSchedule,
    rng: torch.Generator,
) -> MimicFit:
    from styleguard.losses import LossWeights, dreambooth_loss

    x_prior = sample_reverse(
        model,
        sched,
        spec.prior_token,
        spec.n_prior_images,
        int(torch.randint(0, 2**62, (1,), generator=rng).item()),
        size=tuple(x_train.shape[-2:]),
    ).to(x_train.dtype)
    weights = LossWeights(prior_weight=spec.prior_weight)
    opt = torch.optim.Adam(model.parameters(), lr=spec.lr)
    trace = []
    for _ in range(spec.steps):
        loss = sum(
            dreambooth_loss(
                model,
                x_train,
                x_prior,
                spec.instance_token,
                spec.prior_token,
                sched,
                weights,
                rng,
            )
            for _ in range(spec.draws_per_step)
        ) / spec.draws_per_step
        if not torch.isfinite(loss):
            raise NumericError("non-finite mimicry fine-tuning loss")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        trace.append(float(loss.detach()))
    return MimicFit(model=model, loss_trace=trace)


def _fit_token_embedding(
    model: DenoiserModel,
    x_train: torch.Tensor,
    spec: MimicrySpec,
    sched: NoiseSchedule,
    rng: torch.Generator,
) -> MimicFit:
    model.requires_grad_(False)
    leaf = model.cond_embedding(spec.instance_token).detach().clone().requires_grad_(True)
    opt = torch.optim.Adam([leaf], lr=spec.lr)
    trace = []

    def one_draw():
        t = int(torch.randint(1, sched.T + 1, (1,), generator=rng).item())
        eps = torch.randn(x_train.shape, generator=rng, dtype=x_train.dtype)
        x_t = forward_diffuse(x_train, t, eps, sched)
        pred = model.predict_noise(x_t, t, spec.instance_token, cond_embed=leaf)
        return ((eps - pred) ** 2).mean()

    for _ in range(spec.steps):
        loss = sum(one_draw() for _ in range(spec.draws_per_step)) / spec.draws_per_step
        if not torch.isfinite(loss):
            raise NumericError("non-finite token-embedding loss")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        trace.append(float(loss.detach()))
    with torch.no_grad():
        model.prompt_embed.weight[spec.instance_token] = leaf.detach()
    return MimicFit(model=model, loss_trace=trace, token_embedding=leaf.detach().clone())


def generate_set(
    model: DenoiserModel,
    c: int,
    n: int,
    sched: NoiseSchedule,
    seed: int,
    size: tuple[int, int] = (32, 32),
) -> torch.Tensor:
    """Sample n images conditioned on token c."""
    return sample_reverse(model, sched, c, n, seed, size=size)


# ---------------------------------------------------------------------------
# Feature extraction


@functools.lru_cache(maxsize=1)
def feature_embedder() -> RandomConvEncoder:
    """The frozen embedder shared by all reports."""
    return RandomConvEncoder(out_channels=FEATURE_DIM, seed=_EMBEDDER_SEED)


def extract_features(x: torch.Tensor) -> np.ndarray:
    """Global-average-pooled embedder activations, one row per image."""
    emb = feature_embedder()
    with torch.no_grad():
        feats = emb.encode(x.to(torch.float32)).mean(dim=(2, 3))
    return feats.numpy().astype(np.float64)


# ---------------------------------------------------------------------------
# Metrics


def fid(feat_a: np.ndarray, feat_b: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    The matrix square root is taken by eigendecomposition of the
    symmetrized product; eigenvalues in [-1e-6, 0) are clamped to zero
    and anything more negative is a numeric error.
    """
    feat_a = np.asarray(feat_a, dtype=np.float64)
    feat_b = np.asarray(feat_b, dtype=np.float64)
    if feat_a.ndim != 2 or feat_b.ndim != 2 or feat_a.shape[1] != feat_b.shape[1]:
        raise ContractError("feature matrices must be 2-D with equal dimension")
    d = feat_a.shape[1]
    if feat_a.shape[0] < d + 1 or feat_b.shape[0] < d + 1:
        raise ContractError(f"need >= {d + 1} rows per matrix for a {d}-dim covariance")
    mu_a, mu_b = feat_a.mean(axis=0), feat_b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(feat_a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(feat_b, rowvar=False))
    if not (np.isfinite(cov_a).all() and np.isfinite(cov_b).all()):
        raise NumericError("non-finite covariance")

    def clamp_eigs(vals: np.ndarray) -> np.ndarray:
        if (vals < -1e-6).any():
            raise NumericError(f"covariance eigenvalue {vals.min()} below tolerance")
        return np.clip(vals, 0.0, None)

    vals_b, vecs_b = np.linalg.eigh((cov_b + cov_b.T) / 2.0)
    root_b = vecs_b @ np.diag(np.sqrt(clamp_eigs(vals_b))) @ vecs_b.T
    inner = root_b @ cov_a @ root_b
    vals, _ = np.linalg.eigh((inner + inner.T) / 2.0)
    trace_sqrt = np.sqrt(clamp_eigs(vals)).sum()
    value = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2.0 * trace_sqrt)
    if value < -1e-6:
        raise NumericError(f"negative Frechet distance {value}")
    return max(value, 0.0)


def precision_knn(feat_real: np.ndarray, feat_gen: np.ndarray, k: int) -> float:
    """Fraction of generated features inside any real k-NN hypersphere.

    Each real point's radius is its distance to its k-th nearest other
    real point; boundary hits count as inside. Duplicate real points
    legally produce zero radii.
    """
    feat_real = np.asarray(feat_real, dtype=np.float64)
    feat_gen = np.asarray(feat_gen, dtype=np.float64)
    if k < 1:
        raise ContractError("k must be >= 1")
    if feat_real.shape[0] <= k:
        raise ContractError(f"need more than k={k} real points, got {feat_real.shape[0]}")
    d2_real = ((feat_real[:, None, :] - feat_real[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2_real, np.inf)
    radii2 = np.sort(d2_real, axis=1)[:, k - 1]
    d2_cross = ((feat_gen[:, None, :] - feat_real[None, :, :]) ** 2).sum(axis=2)
    inside = (d2_cross <= radii2[None, :]).any(axis=1)
    return float(inside.mean())


def ims(gen_embeds: np.ndarray, ref_embeds: np.ndarray) -> float:
    """Mean cosine similarity to the mean reference embedding."""
    gen_embeds = np.asarray(gen_embeds, dtype=np.float64)
    ref_embeds = np.asarray(ref_embeds, dtype=np.float64)
    if gen_embeds.size == 0 or ref_embeds.size == 0:
        raise ContractError("embeddings must be non-empty")
    ref_mean = ref_embeds.mean(axis=0)
    ref_norm = np.linalg.norm(ref_mean)
    gen_norms = np.linalg.norm(gen_embeds, axis=1)
    if ref_norm == 0 or (gen_norms == 0).any():
        raise NumericError("zero-norm embedding vector")
    sims = gen_embeds @ ref_mean / (gen_norms * ref_norm)
    return float(sims.mean())


def success_rate(preferences: list[bool], n_prompts: int, n_annotators: int) -> float:
    """Fraction of pairwise comparisons preferring the robust mimicry."""
    if len(preferences) != n_prompts * n_annotators:
        raise ContractError(
            f"expected {n_prompts * n_annotators} preference records, got {len(preferences)}"
        )
    return float(sum(bool(p) for p in preferences)) / (n_prompts * n_annotators)


# ---------------------------------------------------------------------------
# End-to-end protocol


def evaluate_protection(
    x_clean: torch.Tensor,
    x_protected: torch.Tensor,
    mimicry: MimicrySpec,
    eval_prompts: tuple[int, ...] = (1,),
    seeds: int = 0,
    *,
    base_model: DenoiserModel | None = None,
    sched: NoiseSchedule | None = None,
    n_generate: int = 64,
    knn_k: int = 3,
    include_ims: bool = False,
) -> MetricsReport:
    """Train matched clean/protected models and score their generations.

    The clean-trained model's generations serve as the reference
    ("real") set; preprocessing applies only to the protected training
    images. Both fine-tuning runs and both generation passes use the
    same derived seeds, so identical inputs give identical pipelines.
    """
    if x_clean.shape != x_protected.shape:
        raise ContractError("clean and protected batches must have matching shapes")
    if sched is None:
        raise ContractError("a noise schedule is required")
    if base_model is None:
        base_model = DenoiserModel(seed=derive_seed(seeds, "base-model"))

    clean_spec = MimicrySpec(
        method=mimicry.method,
        steps=mimicry.steps,
        lr=mimicry.lr,
        instance_token=mimicry.instance_token,
        prior_token=mimicry.prior_token,
        prior_weight=mimicry.prior_weight,
        n_prior_images=mimicry.n_prior_images,
        preprocessing=None,
    )
    fit_clean = mimic_finetune(
        base_model, x_clean, clean_spec, sched, make_generator(seeds, "mimic")
    )
    fit_prot = mimic_finetune(
        base_model, x_protected, mimicry, sched, make_generator(seeds, "mimic")
    )

    size = tuple(x_clean.shape[-2:])
    fid_parts = []
    prec_parts = []
    counts = {"train": int(x_clean.shape[0]), "generate": n_generate, "prompts": len(eval_prompts)}
    gen_prot_all = []
    for prompt in eval_prompts:
        gen_seed = derive_seed(seeds, "generate", prompt)
        gen_clean = generate_set(fit_clean.model, prompt, n_generate, sched, gen_seed, size)
        gen_prot = generate_set(fit_prot.model, prompt, n_generate, sched, gen_seed, size)
        feats_clean = extract_features(gen_clean)
        feats_prot = extract_features(gen_prot)
        fid_parts.append(fid(feats_clean, feats_prot))
        prec_parts.append(precision_knn(feats_clean, feats_prot, knn_k))
        gen_prot_all.append(gen_prot)

    ims_value = None
    if include_ims:
        ims_value = ims(
            extract_features(torch.cat(gen_prot_all)), extract_features(x_clean)
        )

    return MetricsReport(
        fid=float(np.mean(fid_parts)),
        precision=float(np.mean(prec_parts)),
        ims=ims_value,
        success_rate=None,
        sample_counts=counts,
        config_echo={
            "seed": seeds,
            "method": mimicry.method,
            "steps": mimicry.steps,
            "lr": mimicry.lr,
            "knn_k": knn_k,
        },
    )
