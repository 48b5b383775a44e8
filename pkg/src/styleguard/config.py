"""Run configuration: TOML schema, strict validation, defaults.

Unknown keys are rejected rather than ignored — a silently misspelled
hyperparameter invalidates an experiment. The fully resolved
configuration (defaults included) is echoed as JSON next to every run's
outputs so a run directory is self-describing.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from styleguard.errors import ConfigError
from styleguard.evaluate import MimicrySpec
from styleguard.losses import LossToggles, LossWeights
from styleguard.protect import ProtectionConfig
from styleguard.transforms import TransformSpec

DEFAULT_TRANSFORMS = [
    {"kind": "identity"},
    {"kind": "gaussian_noise", "noise_sigma": 0.05},
    {"kind": "center_crop_resize", "crop_ratio": 0.8},
    {"kind": "horizontal_flip"},
]

DEFAULT_ATTACKS = [
    {"name": "none", "kind": "identity"},
    {"name": "crop_resize", "kind": "center_crop_resize", "crop_ratio": 0.8},
    {"name": "gaussian_noise", "kind": "gaussian_noise", "noise_sigma": 0.05},
    {"name": "diffpure", "kind": "diffpure", "steps": 5, "purifier": "craft"},
    {
        "name": "noise_upscale",
        "kind": "noise_upscale",
        "steps": 5,
        "noise_sigma": 0.1,
        "purifier": "craft",
    },
]

DEFAULTS: dict = {
    "seed": 0,
    "data": {
        "source": "synthetic",
        "image_size": 32,
        "n_images": 10,
        "style": "stripes",
        "target_style": "blobs",
        "n_target": 10,
        "palette_seed": 0,
        "folder": "",
        "target_folder": "",
    },
    "models": {
        "timesteps": 50,
        "beta_start": 1e-4,
        "beta_end": 0.02,
        "vocab_size": 8,
        "image_size": 32,
        "surrogate_seeds": [11, 12],
        "surrogate_hidden": 32,
        "surrogate_blocks": 1,
        "purifier_hidden": 24,
        "purifier_blocks": 2,
        "heldout_hidden": 16,
        "heldout_blocks": 3,
        "attacker_seed": 21,
        "encoder_seed": 77,
        "pretrain_steps": 600,
        "pretrain_lr": 2e-3,
        "pretrain_batch": 16,
        "pretrain_images": 48,
    },
    "protect": {
        "n_iters": 100,
        "finetune_steps": 3,
        "pgd_steps": 6,
        "step_size": 0.005,
        "budget": 8.0 / 255.0,
        "surrogate_lr": 1e-3,
        "upscale_weight": 1.0,
        "style_weight": 10.0,
        "prior_weight": 1.0,
        "pre_noise_std": 0.1,
        "style_sign": -1.0,
        "error_sign": -1.0,
        "eot_samples": 1,
        "instance_token": 1,
        "prior_token": 2,
        "n_prior_images": 8,
        "denoise": True,
        "upscale": True,
        "style": True,
        "transforms": DEFAULT_TRANSFORMS,
    },
    "attack": DEFAULT_ATTACKS,
    "mimic": {
        "method": "dreambooth_full",
        "steps": 400,
        "lr": 1e-3,
        "instance_token": 1,
        "prior_token": 2,
        "prior_weight": 1.0,
        "n_prior_images": 8,
        "draws_per_step": 4,
        "preprocessing": "none",
    },
    "report": {
        "out_dir": "runs",
        "n_generate": 64,
        "knn_k": 3,
        "include_ims": False,
        "formats": ["csv", "txt"],
    },
}

_TRANSFORM_KEYS = {"kind", "noise_sigma", "crop_ratio", "blur_kernel"}
_ATTACK_KEYS = {"name", "kind", "noise_sigma", "crop_ratio", "blur_kernel", "steps", "purifier"}


def _check_keys(given: dict, allowed, where: str) -> None:
    unknown = set(given) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in [{where}]")


def _merge_section(defaults: dict, given: dict, where: str) -> dict:
    _check_keys(given, defaults, where)
    merged = copy.deepcopy(defaults)
    for key, value in given.items():
        default = defaults[key]
        if isinstance(default, bool) and not isinstance(value, bool):
            raise ConfigError(f"[{where}] {key} must be a boolean")
        if isinstance(default, (int, float)) and not isinstance(default, bool):
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"[{where}] {key} must be a number")
        if isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"[{where}] {key} must be a string")
        merged[key] = value
    return merged


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Parse and validate a TOML config, merging onto the defaults.

    ``path=None`` yields the pure defaults. ``overrides`` (e.g. a seed
    from the command line) are applied last.
    """
    raw: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    _check_keys(raw, DEFAULTS, "root")
    cfg = copy.deepcopy(DEFAULTS)
    if "seed" in raw:
        if isinstance(raw["seed"], bool) or not isinstance(raw["seed"], int):
            raise ConfigError("seed must be an integer")
        cfg["seed"] = raw["seed"]

    for section in ("data", "models", "mimic", "report"):
        if section in raw:
            if not isinstance(raw[section], dict):
                raise ConfigError(f"[{section}] must be a table")
            cfg[section] = _merge_section(DEFAULTS[section], raw[section], section)

    if "protect" in raw:
        given = dict(raw["protect"])
        transforms = given.pop("transforms", None)
        cfg["protect"] = _merge_section(
            {k: v for k, v in DEFAULTS["protect"].items() if k != "transforms"},
            given,
            "protect",
        )
        if transforms is not None:
            for i, entry in enumerate(transforms):
                _check_keys(entry, _TRANSFORM_KEYS, f"protect.transforms[{i}]")
            cfg["protect"]["transforms"] = transforms
        else:
            cfg["protect"]["transforms"] = copy.deepcopy(DEFAULT_TRANSFORMS)

    if "attack" in raw:
        attacks = raw["attack"]
        if not isinstance(attacks, list):
            raise ConfigError("[attack] must be an array of tables")
        names = set()
        for i, entry in enumerate(attacks):
            _check_keys(entry, _ATTACK_KEYS, f"attack[{i}]")
            if "name" not in entry or "kind" not in entry:
                raise ConfigError(f"attack[{i}] needs both 'name' and 'kind'")
            if entry["name"] in names:
                raise ConfigError(f"duplicate attack name {entry['name']!r}")
            names.add(entry["name"])
        cfg["attack"] = attacks

    if overrides:
        for key, value in overrides.items():
            if value is not None:
                cfg[key] = value
    return cfg


def dump_resolved(cfg: dict, path) -> None:
    """Write the resolved configuration as deterministic JSON."""
    with open(path, "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def build_transform_specs(entries: list[dict]) -> tuple[TransformSpec, ...]:
    return tuple(TransformSpec(**entry) for entry in entries)


def build_protection_config(cfg: dict) -> ProtectionConfig:
    p = cfg["protect"]
    return ProtectionConfig(
        n_iters=p["n_iters"],
        finetune_steps=p["finetune_steps"],
        pgd_steps=p["pgd_steps"],
        step_size=p["step_size"],
        budget=p["budget"],
        surrogate_lr=p["surrogate_lr"],
        weights=LossWeights(
            upscale_weight=p["upscale_weight"],
            style_weight=p["style_weight"],
            prior_weight=p["prior_weight"],
            pre_noise_std=p["pre_noise_std"],
        ),
        toggles=LossToggles(denoise=p["denoise"], upscale=p["upscale"], style=p["style"]),
        style_sign=p["style_sign"],
        error_sign=p["error_sign"],
        transform_pool=build_transform_specs(p["transforms"]),
        eot_samples=p["eot_samples"],
        instance_token=p["instance_token"],
        prior_token=p["prior_token"],
        n_prior_images=p["n_prior_images"],
        seed=cfg["seed"],
    )


def build_mimicry_spec(cfg: dict, preprocessing=None) -> MimicrySpec:
    m = cfg["mimic"]
    return MimicrySpec(
        method=m["method"],
        steps=m["steps"],
        lr=m["lr"],
        instance_token=m["instance_token"],
        prior_token=m["prior_token"],
        prior_weight=m["prior_weight"],
        n_prior_images=m["n_prior_images"],
        draws_per_step=m["draws_per_step"],
        preprocessing=preprocessing,
    )
