"""Deterministic random-stream management.

Every stochastic operation in the package draws from an explicit
``torch.Generator`` so that runs are bitwise repeatable from a single
seed. ``derive_seed`` hashes a root seed with string tags to give each
subsystem (prior sampling, the optimization loop, trace evaluation, ...)
its own independent stream; the result is stable across processes,
unlike Python's builtin ``hash``.
"""

from __future__ import annotations

import hashlib

import torch


def derive_seed(seed: int, *tags: object) -> int:
    """Derive a stream seed from a root seed and a tag path."""
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    for tag in tags:
        h.update(b"/")
        h.update(str(tag).encode())
    return int.from_bytes(h.digest()[:8], "big") % (2**63 - 1)


def make_generator(seed: int, *tags: object) -> torch.Generator:
    """CPU generator seeded from ``derive_seed(seed, *tags)``."""
    gen = torch.Generator(device="cpu")
    gen.manual_seed(derive_seed(seed, *tags))
    return gen


def spawn(rng: torch.Generator) -> int:
    """Draw a fresh seed from an existing stream."""
    return int(torch.randint(0, 2**62, (1,), generator=rng).item())
