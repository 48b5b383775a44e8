"""Synthetic style datasets and PNG image handling.

Each generator kind (stripes, blobs, checker, gradient) is a stand-in
for an art style: two datasets built from different kinds are declared
style-distinct. Everything is deterministic from the palette seed.
PNG is the interchange format; quantization to 8 bits costs at most
1/255 per pixel, which downstream budget checks must allow for.
"""

from __future__ import annotations

import math
import os
import tempfile
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from styleguard.errors import ConfigError, DataError
from styleguard.rng import derive_seed

STYLE_KINDS = ("stripes", "blobs", "checker", "gradient")


def _palette(rng: np.random.Generator, n: int) -> np.ndarray:
    """Vivid, well-separated colors in [0.1, 0.9]."""
    return 0.1 + 0.8 * rng.random((n, 3))


def synthetic_style_images(
    kind: str,
    n: int,
    size: int = 32,
    palette_seed: int = 0,
) -> torch.Tensor:
    """Generate ``n`` images of one synthetic style, (n, 3, size, size)."""
    if kind not in STYLE_KINDS:
        raise ConfigError(f"unknown style kind {kind!r}")
    if n < 1 or size < 4:
        raise ConfigError("need n >= 1 images of size >= 4")
    rng = np.random.default_rng(derive_seed(palette_seed, "style", kind))
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    images = np.empty((n, 3, size, size), dtype=np.float64)
    for i in range(n):
        ca, cb = _palette(rng, 2)
        if kind == "stripes":
            angle = rng.uniform(0, math.pi)
            freq = rng.uniform(2.0, 5.0)
            phase = rng.uniform(0, 2 * math.pi)
            field = 0.5 + 0.5 * np.sin(
                2 * math.pi * freq * (xx * math.cos(angle) + yy * math.sin(angle)) + phase
            )
        elif kind == "blobs":
            field = np.zeros_like(xx)
            for _ in range(rng.integers(3, 7)):
                cx, cy = rng.random(2)
                width = rng.uniform(0.08, 0.25)
                field += np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * width**2))
            field = field / max(field.max(), 1e-9)
        elif kind == "checker":
            cells = int(rng.choice([4, 8]))
            ox, oy = rng.integers(0, cells, 2)
            field = (((xx * size + ox) // cells + (yy * size + oy) // cells) % 2).astype(float)
        else:  # gradient
            angle = rng.uniform(0, 2 * math.pi)
            proj = xx * math.cos(angle) + yy * math.sin(angle)
            field = (proj - proj.min()) / max(proj.max() - proj.min(), 1e-9)
        images[i] = ca[:, None, None] + field[None] * (cb - ca)[:, None, None]
    return torch.from_numpy(np.clip(images, 0.0, 1.0)).to(torch.float32)


# ---------------------------------------------------------------------------
# PNG IO


def to_uint8(x: torch.Tensor) -> np.ndarray:
    """Quantize a [0,1] float batch to 8-bit HWC arrays."""
    arr = (x.detach().clamp(0, 1) * 255.0).round().to(torch.uint8).numpy()
    return arr.transpose(0, 2, 3, 1)


def from_uint8(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(arr.transpose(0, 3, 1, 2).astype(np.float32) / 255.0)


def save_image_batch(directory, x: torch.Tensor, prefix: str = "img") -> list[Path]:
    """Write each image as ``<prefix>_NNN.png`` atomically."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(to_uint8(x)):
        path = directory / f"{prefix}_{i:03d}.png"
        fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
        os.close(fd)
        try:
            Image.fromarray(frame, mode="RGB").save(tmp, format="PNG")
            os.replace(tmp, path)
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)
        paths.append(path)
    return paths


def load_image_batch(directory) -> torch.Tensor:
    """Load every PNG in a directory, sorted by filename."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory} is not a directory")
    paths = sorted(directory.glob("*.png"))
    if not paths:
        raise DataError(f"no PNG images found in {directory}")
    frames = []
    shape = None
    for path in paths:
        try:
            with Image.open(path) as img:
                frame = np.asarray(img.convert("RGB"), dtype=np.uint8)
        except OSError as exc:
            raise DataError(f"unreadable image {path}: {exc}") from exc
        if shape is None:
            shape = frame.shape
        elif frame.shape != shape:
            raise DataError(f"{path}: image size {frame.shape} differs from {shape}")
        frames.append(frame)
    return from_uint8(np.stack(frames))
