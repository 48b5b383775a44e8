"""Pretrained toy model ensemble, built on first use and cached.

A protection run assumes pretrained generative models the way the real
pipeline assumes released diffusion checkpoints. Here they are trained
once on a generic synthetic corpus (a mix of all style kinds), saved
under a directory keyed by the hash of the model configuration, and
reloaded on subsequent runs. The cache directory comes from the
``STYLEGUARD_CACHE_DIR`` environment variable.

Members:

* two crafting surrogates (same architecture, different seeds — the
  analog of two releases of the same model family);
* one purifier inside the crafting ensemble and one architecturally
  distinct purifier held out for evaluation-time transfer;
* an attacker base model, never used for crafting, that the simulated
  adversary fine-tunes;
* two frozen feature encoders for the style objective.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F

from styleguard.data import STYLE_KINDS, synthetic_style_images
from styleguard.losses import EnsembleSpec
from styleguard.models import (
    UNCOND_TOKEN,
    DenoiserModel,
    PixelEncoder,
    RandomConvEncoder,
    load_checkpoint,
    save_checkpoint,
)
from styleguard.rng import make_generator
from styleguard.schedule import NoiseSchedule, build_schedule, forward_diffuse

CACHE_ENV_VAR = "STYLEGUARD_CACHE_DIR"


def cache_root() -> Path:
    env = os.environ.get(CACHE_ENV_VAR)
    if env:
        return Path(env)
    return Path.home() / ".cache" / "styleguard"


def zoo_key(models_cfg: dict) -> str:
    blob = json.dumps(models_cfg, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Zoo:
    """The pretrained ensemble for one model configuration."""

    sched: NoiseSchedule
    surrogates: list[DenoiserModel]
    purifier_craft: DenoiserModel
    purifier_heldout: DenoiserModel
    attacker_base: DenoiserModel
    encoders: list

    def crafting_ensembles(self) -> EnsembleSpec:
        return EnsembleSpec(
            surrogates=self.surrogates,
            purifiers=[self.purifier_craft],
            encoders=self.encoders,
        )


def pretrain_corpus(models_cfg: dict) -> torch.Tensor:
    """Generic mixed-style corpus the pretrained models learn from."""
    per_kind = max(1, models_cfg["pretrain_images"] // len(STYLE_KINDS))
    parts = [
        synthetic_style_images(kind, per_kind, models_cfg["image_size"], palette_seed=9000 + i)
        for i, kind in enumerate(STYLE_KINDS)
    ]
    return torch.cat(parts)


def train_denoiser(
    model: DenoiserModel,
    corpus: torch.Tensor,
    sched: NoiseSchedule,
    steps: int,
    lr: float,
    batch_size: int,
    rng: torch.Generator,
    include_2x: bool = False,
) -> DenoiserModel:
    """Noise-prediction pretraining on clean/noised pairs.

    ``include_2x`` alternates in batches of bilinearly upscaled images so
    purifiers also learn to denoise at the resolution the noise-upscaling
    pipeline runs them at.
    """
    corpus_2x = None
    if include_2x:
        corpus_2x = F.interpolate(corpus, scale_factor=2, mode="bilinear", align_corners=False)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    n = corpus.shape[0]
    for step in range(steps):
        source = corpus_2x if (include_2x and step % 2 == 1) else corpus
        idx = torch.randint(0, n, (min(batch_size, n),), generator=rng)
        x0 = source[idx]
        t = int(torch.randint(1, sched.T + 1, (1,), generator=rng).item())
        eps = torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
        # Mostly unconditional, sometimes a random token, so every
        # embedding row sees gradient before fine-tuning binds one.
        if int(torch.randint(0, 4, (1,), generator=rng).item()) == 0:
            c = int(torch.randint(0, model.vocab_size, (1,), generator=rng).item())
        else:
            c = UNCOND_TOKEN
        pred = model.predict_noise(forward_diffuse(x0, t, eps, sched), t, c)
        loss = ((eps - pred) ** 2).mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return model


_MEMBERS = ("surrogate_0", "surrogate_1", "purifier_craft", "purifier_heldout", "attacker_base")


def build_zoo(models_cfg: dict, cache_dir: Path | None = None, log=None) -> Zoo:
    """Load the ensemble from cache, pretraining it first if absent."""
    sched = build_schedule(
        models_cfg["timesteps"], models_cfg["beta_start"], models_cfg["beta_end"]
    )
    key = zoo_key(models_cfg)
    cache = (cache_dir or cache_root()) / key
    paths = {name: cache / f"{name}.ckpt" for name in _MEMBERS}

    if all(p.is_file() for p in paths.values()):
        members = {}
        for name, path in paths.items():
            model, _ = load_checkpoint(path)
            model.schedule = sched
            members[name] = model
    else:
        if log:
            log(f"pretraining toy ensemble (cache key {key})")
        members = _pretrain_members(models_cfg, sched)
        cache.mkdir(parents=True, exist_ok=True)
        for name, model in members.items():
            save_checkpoint(model, sched, paths[name])

    encoders = [
        PixelEncoder(),
        RandomConvEncoder(seed=models_cfg["encoder_seed"]),
    ]
    return Zoo(
        sched=sched,
        surrogates=[members["surrogate_0"], members["surrogate_1"]],
        purifier_craft=members["purifier_craft"],
        purifier_heldout=members["purifier_heldout"],
        attacker_base=members["attacker_base"],
        encoders=encoders,
    )


def _pretrain_members(models_cfg: dict, sched: NoiseSchedule) -> dict:
    corpus = pretrain_corpus(models_cfg)
    vocab = models_cfg["vocab_size"]
    steps = models_cfg["pretrain_steps"]
    lr = models_cfg["pretrain_lr"]
    batch = models_cfg["pretrain_batch"]
    s_seeds = models_cfg["surrogate_seeds"]

    def build(hidden, blocks, seed):
        m = DenoiserModel(hidden=hidden, n_blocks=blocks, vocab_size=vocab, seed=seed)
        m.schedule = sched
        return m

    members = {
        "surrogate_0": build(models_cfg["surrogate_hidden"], models_cfg["surrogate_blocks"], s_seeds[0]),
        "surrogate_1": build(models_cfg["surrogate_hidden"], models_cfg["surrogate_blocks"], s_seeds[1]),
        "purifier_craft": build(models_cfg["purifier_hidden"], models_cfg["purifier_blocks"], 31),
        "purifier_heldout": build(models_cfg["heldout_hidden"], models_cfg["heldout_blocks"], 32),
        "attacker_base": build(models_cfg["surrogate_hidden"], models_cfg["surrogate_blocks"],
                               models_cfg["attacker_seed"]),
    }
    for name, model in members.items():
        train_denoiser(
            model,
            corpus,
            sched,
            steps,
            lr,
            batch,
            make_generator(1234, "pretrain", name),
            include_2x=name.startswith("purifier"),
        )
    return members
