"""Deterministic seed derivation for independent random streams.

Parallel and serial schedulers must agree bit-for-bit, so every unit of work
gets its own stream keyed by a stable hash of (global seed, labels) rather
than by draw order.
"""

from __future__ import annotations

import hashlib

import torch


def standard_normal(shape, generator: torch.Generator, dtype: torch.dtype) -> torch.Tensor:
    """Standard normal draw that consumes the generator identically at any
    working precision: always drawn in f32, then cast."""
    return torch.randn(shape, generator=generator, dtype=torch.float32).to(dtype)


def derive_seed(global_seed: int, *labels: object) -> int:
    """Derive a 63-bit seed from a global seed and a label tuple.

    Stable across processes and platforms (unlike the builtin ``hash``).
    """
    h = hashlib.sha256()
    h.update(str(int(global_seed)).encode())
    for label in labels:
        h.update(b"\x1f")
        h.update(repr(label).encode())
    return int.from_bytes(h.digest()[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF
