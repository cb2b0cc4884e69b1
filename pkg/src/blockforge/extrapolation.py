"""Conditioned latent extrapolation: grow a new block from a known neighbor.

The new block Q is sampled by ancestral diffusion while the latent cells its
planes share with the known block P are overwritten, at every reverse step,
with freshly noised values of P's latent at the matching level.  Only the
two planes containing the slide axis carry overlap masks; the perpendicular
plane has no cell-to-cell correspondence and is generated freely.  Windowed
resampling (re-noise and redo the last J steps, R times) harmonizes the
synchronized strip with the free region.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import torch

from .latent_diffusion import (
    DenoiserNet,
    LayoutDocument,
    LayoutMap,
    NoiseSchedule,
    Standardizer,
    _layout_batch,
    reverse_step,
)
from .latent_vae import LatentTriPlane
from .mesh_geometry import Block
from .seeds import derive_seed, standard_normal
from .triplane_field import PLANE_AXES


@dataclass
class OverlapMask:
    """Per-plane cell masks of the new block Q plus source indices into P.

    masks[i] marks the cells of Q's plane i lying inside P's footprint;
    src_rows/src_cols give, for each masked cell, the P-plane cell holding
    the same world position.  axis is the slide axis, or None for the
    identity harness (identical blocks, full masks everywhere).
    """

    masks: torch.Tensor  # (3, n, n) bool
    src_rows: torch.Tensor  # (3, n, n) long, valid where masked
    src_cols: torch.Tensor  # (3, n, n) long
    axis: int | None

    def __post_init__(self):
        if self.masks.dtype != torch.bool or self.masks.ndim != 3 or self.masks.shape[0] != 3:
            raise ValueError("masks must be a (3, n, n) boolean tensor")
        if self.masks.shape[1] != self.masks.shape[2]:
            raise ValueError("masks must be square")
        for t in (self.src_rows, self.src_cols):
            if t.shape != self.masks.shape:
                raise ValueError("source index arrays must match the mask shape")
        n = self.resolution
        for plane in range(3):
            m = self.masks[plane]
            if not bool(m.any()):
                continue
            rows = self.src_rows[plane][m]
            cols = self.src_cols[plane][m]
            if int(rows.min()) < 0 or int(rows.max()) >= n:
                raise ValueError("remapped row index out of range")
            if int(cols.min()) < 0 or int(cols.max()) >= n:
                raise ValueError("remapped column index out of range")
        if self.axis is not None:
            for plane, axes in enumerate(PLANE_AXES):
                if self.axis not in axes and bool(self.masks[plane].any()):
                    raise ValueError(
                        f"plane {plane} does not contain slide axis {self.axis} "
                        "and must carry no mask"
                    )

    @property
    def resolution(self) -> int:
        return int(self.masks.shape[1])

    @property
    def is_empty(self) -> bool:
        return not bool(self.masks.any())

    @staticmethod
    def empty(n: int) -> "OverlapMask":
        zeros = torch.zeros((3, n, n), dtype=torch.long)
        return OverlapMask(zeros.bool(), zeros.clone(), zeros.clone(), axis=None)


def compute_overlap_masks(block_p: Block, block_q: Block, n: int) -> OverlapMask:
    """Latent-cell overlap masks for a new block Q sliding off a known P.

    Latent rasters are treated as n equal cells per side (cell centers at
    (j + 1/2)/n of the span); the slide must displace Q by a whole number of
    cells so masked cells correspond exactly.  Identical blocks are the
    identity harness: full masks on all three planes.
    """
    if block_p.side != block_q.side:
        raise ValueError("blocks must share one side length")
    offsets = block_q.origin_array - block_p.origin_array
    moved = [a for a in range(3) if offsets[a] != 0.0]

    if not moved:
        grid = torch.arange(n, dtype=torch.long)
        rows = grid[:, None].expand(n, n)
        cols = grid[None, :].expand(n, n)
        full = torch.ones((3, n, n), dtype=torch.bool)
        return OverlapMask(full, rows[None].repeat(3, 1, 1), cols[None].repeat(3, 1, 1), axis=None)

    if len(moved) > 1:
        raise ValueError(f"blocks must differ along exactly one axis, moved {moved}")
    axis = moved[0]
    d = float(offsets[axis])
    if abs(d) >= block_p.side:
        raise ValueError("blocks do not overlap")
    shift_cells = d * n / block_p.side
    shift = round(shift_cells)
    if abs(shift_cells - shift) > 1e-9 * n:
        raise ValueError(
            f"overlap does not quantize to whole latent cells (shift {shift_cells:.4f})"
        )

    masks = torch.zeros((3, n, n), dtype=torch.bool)
    src_rows = torch.zeros((3, n, n), dtype=torch.long)
    src_cols = torch.zeros((3, n, n), dtype=torch.long)
    grid = torch.arange(n, dtype=torch.long)
    for plane, axes in enumerate(PLANE_AXES):
        if axis not in axes:
            continue
        slot = axes.index(axis)
        along = grid + shift  # P-plane index of each Q cell on the slide slot
        ok = (along >= 0) & (along < n)
        if slot == 0:
            masks[plane] = ok[:, None].expand(n, n)
            src_rows[plane] = along.clamp(0, n - 1)[:, None].expand(n, n)
            src_cols[plane] = grid[None, :].expand(n, n)
        else:
            masks[plane] = ok[None, :].expand(n, n)
            src_rows[plane] = grid[:, None].expand(n, n)
            src_cols[plane] = along.clamp(0, n - 1)[None, :].expand(n, n)
    return OverlapMask(masks, src_rows, src_cols, axis=axis)


def synchronize(z_q: torch.Tensor, mask: OverlapMask, z_p: torch.Tensor) -> torch.Tensor:
    """Overwrite masked cells of z_q with the remapped values of z_p.

    A pure projection: idempotent, and cells outside the masks are returned
    bit-identical.
    """
    if z_q.shape != z_p.shape:
        raise ValueError(f"latent shapes differ: {tuple(z_q.shape)} vs {tuple(z_p.shape)}")
    if z_q.shape[-1] != mask.resolution or z_q.shape[-2] != mask.resolution:
        raise ValueError(
            f"mask resolution {mask.resolution} does not match latent "
            f"{tuple(z_q.shape[-2:])}"
        )
    out = z_q.clone()
    for plane in range(3):
        m = mask.masks[plane]
        if not bool(m.any()):
            continue
        rows = mask.src_rows[plane][m]
        cols = mask.src_cols[plane][m]
        out[plane][:, m] = z_p[plane][:, rows, cols]
    return out


@dataclass
class ExtrapolationConfig:
    """Resampling window length J and repeat count R."""

    window: int = 100
    repeats: int = 3

    def __post_init__(self):
        if self.window < 0:
            raise ValueError(f"window must be >= 0, got {self.window}")
        if self.repeats < 0:
            raise ValueError(f"repeats must be >= 0, got {self.repeats}")


@dataclass
class SyncRecord:
    """One synchronized reverse step, for the bit-level overwrite harness."""

    t: int
    condition: torch.Tensor  # the drawn z_P(t-1), full latent
    after_sync: torch.Tensor  # z_Q(t-1) after the overwrite


def _resample_windows(steps: int, window: int, repeats: int) -> list[tuple[int, int, int]]:
    """(t_hi, t_lo, extra_passes) segments tiling steps..1 from the top."""
    if window == 0 or repeats == 0:
        return [(steps, 1, 0)]
    out = []
    t_hi = steps
    while t_hi >= 1:
        t_lo = max(1, t_hi - window + 1)
        out.append((t_hi, t_lo, repeats))
        t_hi = t_lo - 1
    return out


def extrapolate(
    z_p: LatentTriPlane,
    mask: OverlapMask,
    net: DenoiserNet,
    sched: NoiseSchedule,
    layout: LayoutMap | None,
    cfg: ExtrapolationConfig,
    seed: int,
    *,
    standardizer: Standardizer | None = None,
    trace: list[SyncRecord] | None = None,
) -> LatentTriPlane:
    """Sample the new block's latent conditioned on the known neighbor's.

    Two independent generators are derived from the seed: the main stream
    (initial noise, reverse-step noise, roll-back noise) consumes exactly as
    unconditional sampling does, so with an empty mask and repeats = 0 the
    result is bit-identical to sample() at the same seed; the condition
    stream draws the noised neighbor values.  Condition values are drawn
    fresh at every step and every resampling pass, per pass order: condition
    first, then the main-stream step noise.
    """
    if cfg.window > sched.steps:
        raise ValueError(f"window {cfg.window} exceeds schedule length {sched.steps}")
    shape = (3, net.cfg.latent_channels, net.cfg.latent_resolution, net.cfg.latent_resolution)
    if tuple(z_p.data.shape) != shape:
        raise ValueError(f"condition latent shape {tuple(z_p.data.shape)} != net latent {shape}")
    if mask.resolution != net.cfg.latent_resolution:
        raise ValueError(
            f"mask resolution {mask.resolution} != latent resolution "
            f"{net.cfg.latent_resolution}"
        )
    if not torch.isfinite(z_p.data).all():
        raise ValueError("condition latent must be finite")

    gen_main = torch.Generator().manual_seed(seed)
    gen_cond = torch.Generator().manual_seed(derive_seed(seed, "condition"))
    chans = _layout_batch(net, layout, 1)
    chans = None if chans is None else chans[0]

    z_p0 = z_p.data if standardizer is None else standardizer.apply(z_p.data)
    z_p0 = z_p0.to(torch.float32)
    z = standard_normal(shape, gen_main, torch.float32)

    def one_step(z_t: torch.Tensor, t: int) -> torch.Tensor:
        a = math.sqrt(sched.alpha_bar[t])
        b = math.sqrt(sched.one_minus_alpha_bar[t])
        cond = a * z_p0 + b * standard_normal(shape, gen_cond, torch.float32)
        eps = standard_normal(shape, gen_main, torch.float32) if t > 1 else None
        z_next = reverse_step(net, z_t, t, sched, eps, chans)
        z_next = synchronize(z_next, mask, cond)
        if trace is not None:
            trace.append(SyncRecord(t, cond, z_next.clone()))
        return z_next

    for t_hi, t_lo, extra in _resample_windows(sched.steps, cfg.window, cfg.repeats):
        for t in range(t_hi, t_lo - 1, -1):
            z = one_step(z, t)
        for _ in range(extra):
            for t in range(t_lo, t_hi + 1):  # re-noise back up to the window top
                beta = sched.beta[t]
                z = math.sqrt(1.0 - beta) * z + math.sqrt(beta) * standard_normal(
                    shape, gen_main, torch.float32
                )
            for t in range(t_hi, t_lo - 1, -1):
                z = one_step(z, t)

    if standardizer is not None:
        z = standardizer.invert(z)
    return LatentTriPlane(z)


@dataclass
class ExpansionRequest:
    """Expansion job record, shared verbatim between the CLI and the service."""

    from_block: tuple[int, int, int]
    to_block: tuple[int, int, int]
    overlap_ratio: float
    resample_count: int  # R
    window: int  # J
    seed: int
    layout: LayoutDocument | None = None

    def __post_init__(self):
        if not (0.0 < self.overlap_ratio < 1.0):
            raise ValueError(f"overlap ratio must be in (0, 1), got {self.overlap_ratio}")
        if self.resample_count < 0 or self.window < 0:
            raise ValueError("R and J must be >= 0")

    def to_json(self) -> str:
        payload = {
            "from_block": list(self.from_block),
            "to_block": list(self.to_block),
            "overlap_ratio": self.overlap_ratio,
            "R": self.resample_count,
            "J": self.window,
            "seed": self.seed,
            "layout": None if self.layout is None else json.loads(self.layout.to_json()),
        }
        return json.dumps(payload, indent=2) + "\n"

    @staticmethod
    def from_json(text: str) -> "ExpansionRequest":
        raw = json.loads(text)
        layout = raw.get("layout")
        return ExpansionRequest(
            from_block=tuple(int(v) for v in raw["from_block"]),
            to_block=tuple(int(v) for v in raw["to_block"]),
            overlap_ratio=float(raw["overlap_ratio"]),
            resample_count=int(raw["R"]),
            window=int(raw["J"]),
            seed=int(raw["seed"]),
            layout=None if layout is None else LayoutDocument.from_json(json.dumps(layout)),
        )
