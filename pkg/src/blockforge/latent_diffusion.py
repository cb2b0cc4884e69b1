"""Denoising diffusion on latent tri-planes.

Covers the noise schedule and its posterior algebra, ground-plane layout
rasters for conditioning, the plane-aware denoiser (shared per-plane conv
stacks around attention over the concatenated plane tokens), the training
step, and ancestral sampling.  The net predicts z0 by default; noise
prediction is available behind a configuration flag.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import artifacts
from .latent_vae import LatentTriPlane
from .mesh_geometry import ROOM_CATEGORIES, Block
from .seeds import standard_normal
from .triplane_field import init_module

DIFFUSION_VERSION = 1


# ---------------------------------------------------------------------------
# noise schedule


@dataclass
class NoiseSchedule:
    """Linear beta schedule with derived tables, all length T+1 indexed by t.

    Index 0 is the convention row: alpha_bar[0] = 1 and beta[0] = 0.  The
    complement table one_minus_alpha_bar is accumulated by the recurrence
    1 - abar_t = (1 - abar_{t-1}) + abar_{t-1} * beta_t, which keeps it exact
    at t=1 (equal to beta_1) and free of cancellation while abar is near 1.
    """

    steps: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    one_minus_alpha_bar: np.ndarray
    beta_tilde: np.ndarray


def build_schedule(steps: int, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    if steps < 1:
        raise ValueError(f"schedule needs at least one step, got {steps}")
    if not (0.0 < beta_min < beta_max < 1.0):
        raise ValueError(f"need 0 < beta_min < beta_max < 1, got ({beta_min}, {beta_max})")
    beta = np.zeros(steps + 1)
    beta[1:] = np.linspace(beta_min, beta_max, steps)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    one_minus = np.zeros(steps + 1)
    for t in range(1, steps + 1):
        one_minus[t] = one_minus[t - 1] + alpha_bar[t - 1] * beta[t]
    beta_tilde = np.zeros(steps + 1)
    beta_tilde[1:] = one_minus[:-1] / one_minus[1:] * beta[1:]
    return NoiseSchedule(steps, beta, alpha, alpha_bar, one_minus, beta_tilde)


def _check_t(sched: NoiseSchedule, t, lo: int = 1) -> None:
    t_arr = np.asarray(t)
    if t_arr.min() < lo or t_arr.max() > sched.steps:
        raise ValueError(f"t must lie in [{lo}, {sched.steps}], got {t}")


def q_sample(z0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Forward marginal z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.

    t may be a python int (applied to the whole tensor) or a 1-D tensor of
    per-element steps for a leading batch dimension.  t = 0 is allowed and
    returns z0 unchanged under the abar_0 = 1 convention.
    """
    _check_t(sched, t, lo=0)
    if eps.shape != z0.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != z0 shape {tuple(z0.shape)}")
    if isinstance(t, int):
        a = math.sqrt(sched.alpha_bar[t])
        b = math.sqrt(sched.one_minus_alpha_bar[t])
        return a * z0 + b * eps
    t_idx = np.asarray(t, dtype=np.int64)
    shape = (len(t_idx),) + (1,) * (z0.ndim - 1)
    a = torch.from_numpy(np.sqrt(sched.alpha_bar[t_idx]).reshape(shape)).to(z0.dtype)
    b = torch.from_numpy(np.sqrt(sched.one_minus_alpha_bar[t_idx]).reshape(shape)).to(z0.dtype)
    return a * z0 + b * eps


def posterior_coefficients(sched: NoiseSchedule, t: int) -> tuple[float, float]:
    """The two published posterior-mean coefficients (on z0 and on z_t).

    Note these do not sum to 1 in general; see posterior_weights for the
    normalized convex form.
    """
    _check_t(sched, t)
    denom = sched.one_minus_alpha_bar[t]
    c0 = math.sqrt(sched.alpha_bar[t - 1]) * sched.beta[t] / denom
    ct = math.sqrt(sched.alpha[t]) * sched.one_minus_alpha_bar[t - 1] / denom
    return float(c0), float(ct)


def posterior_weights(sched: NoiseSchedule, t: int) -> tuple[float, float]:
    """Convex weights of the posterior mean: beta_t/(1-abar_t) on the clean
    signal and alpha_t(1-abar_{t-1})/(1-abar_t) on the noisy one.

    These always sum to 1 because beta_t + alpha_t - abar_t = 1 - abar_t;
    they are the coefficients stripped of the sqrt scale factors.
    """
    _check_t(sched, t)
    denom = sched.one_minus_alpha_bar[t]
    w0 = sched.beta[t] / denom
    wt = sched.alpha[t] * sched.one_minus_alpha_bar[t - 1] / denom
    return float(w0), float(wt)


def posterior_mean(z0: torch.Tensor, zt: torch.Tensor, t: int, sched: NoiseSchedule) -> torch.Tensor:
    """Mean of q(z_{t-1} | z_t, z0); the paired variance is beta_tilde[t]."""
    c0, ct = posterior_coefficients(sched, t)
    return c0 * z0 + ct * zt


# ---------------------------------------------------------------------------
# layouts


@dataclass
class LayoutMap:
    """Per-category binary ground-plane raster bound to one block."""

    raster: torch.Tensor  # (m, n, n) float32 of {0, 1}, indexed [category, x, y]
    categories: tuple[str, ...]
    block: Block

    def __post_init__(self):
        if self.raster.ndim != 3 or self.raster.shape[0] != len(self.categories):
            raise ValueError(
                f"raster shape {tuple(self.raster.shape)} does not match "
                f"{len(self.categories)} categories"
            )
        if self.raster.shape[1] != self.raster.shape[2]:
            raise ValueError("raster must be square")
        binary = (self.raster == 0.0) | (self.raster == 1.0)
        if not bool(binary.all()):
            raise ValueError("raster values must be 0 or 1")

    @property
    def resolution(self) -> int:
        return int(self.raster.shape[1])


def rasterize_layout(
    boxes: list[tuple[str, np.ndarray, np.ndarray]],
    block: Block,
    resolution: int,
    *,
    categories: tuple[str, ...] = ROOM_CATEGORIES,
    polylines: list[tuple[str, np.ndarray]] = (),
) -> LayoutMap:
    """Binary per-category raster over the block's ground-plane footprint.

    A cell is set for a box when its center lies inside the closed footprint
    rectangle, and for a polyline when any segment passes through the cell.
    """
    index = {name: i for i, name in enumerate(categories)}
    raster = torch.zeros((len(categories), resolution, resolution), dtype=torch.float32)
    lo = block.origin_array[:2]
    cell = block.side / resolution
    centers = lo[0] + (np.arange(resolution) + 0.5) * cell, lo[1] + (np.arange(resolution) + 0.5) * cell

    for label, bmin, bmax in boxes:
        if label not in index:
            raise ValueError(f"unknown category {label!r}")
        xs = (centers[0] >= bmin[0] - 1e-12) & (centers[0] <= bmax[0] + 1e-12)
        ys = (centers[1] >= bmin[1] - 1e-12) & (centers[1] <= bmax[1] + 1e-12)
        raster[index[label]][np.ix_(xs, ys)] = 1.0

    for label, points in polylines:
        if label not in index:
            raise ValueError(f"unknown category {label!r}")
        pts = np.asarray(points, dtype=np.float64)
        for a, b in zip(pts[:-1], pts[1:]):
            for ix, iy in _cells_on_segment(a, b, lo, cell, resolution):
                raster[index[label], ix, iy] = 1.0

    return LayoutMap(raster, tuple(categories), block)


def _cells_on_segment(a, b, lo, cell, resolution):
    """Grid cells a 2-D segment passes through (conservative sampling)."""
    length = float(np.hypot(*(b - a)))
    n_steps = max(2, int(math.ceil(length / (0.25 * cell))) + 1)
    for s in np.linspace(0.0, 1.0, n_steps):
        p = a + s * (b - a)
        ix = int(np.clip(np.floor((p[0] - lo[0]) / cell), 0, resolution - 1))
        iy = int(np.clip(np.floor((p[1] - lo[1]) / cell), 0, resolution - 1))
        yield ix, iy


def layout_plane_channels(layout: LayoutMap) -> torch.Tensor:
    """The raster broadcast onto each plane, shape (3, m, n, n).

    The ground plane takes the raster as-is (axes x, y).  Each vertical
    plane shares one horizontal axis with the ground; the raster is
    collapsed over the other horizontal axis (occupancy max) and broadcast
    along the vertical index, so a column of a vertical plane sees whether
    its ground row contains the category anywhere.
    """
    m, n, _ = layout.raster.shape
    ground = layout.raster  # (m, x, y)
    per_y = ground.amax(dim=1)  # (m, y) occupancy along each y row
    per_x = ground.amax(dim=2)  # (m, x)
    yz = per_y[:, :, None].expand(m, n, n)  # plane 1 axes (y, z)
    xz = per_x[:, :, None].expand(m, n, n)  # plane 2 axes (x, z)
    return torch.stack([ground, yz, xz], dim=0)


# layout documents: the editable JSON form shared by the CLI and the UI


@dataclass
class LayoutBox:
    label: str
    min_xy: tuple[float, float]
    max_xy: tuple[float, float]


@dataclass
class LayoutPolyline:
    label: str
    points: tuple[tuple[float, float], ...]


@dataclass
class LayoutDocument:
    block_index: tuple[int, int, int]
    categories: tuple[str, ...]
    boxes: tuple[LayoutBox, ...] = ()
    polylines: tuple[LayoutPolyline, ...] = ()

    def __post_init__(self):
        for item in (*self.boxes, *self.polylines):
            if item.label not in self.categories:
                raise ValueError(f"unknown category {item.label!r}")

    def to_json(self) -> str:
        payload = {
            "block": list(self.block_index),
            "categories": list(self.categories),
            "boxes": [
                {"label": b.label, "min": list(b.min_xy), "max": list(b.max_xy)}
                for b in self.boxes
            ],
            "polylines": [
                {"label": p.label, "points": [list(q) for q in p.points]}
                for p in self.polylines
            ],
        }
        return json.dumps(payload, indent=2) + "\n"

    @staticmethod
    def from_json(text: str) -> "LayoutDocument":
        raw = json.loads(text)
        return LayoutDocument(
            block_index=tuple(int(v) for v in raw["block"]),
            categories=tuple(raw["categories"]),
            boxes=tuple(
                LayoutBox(b["label"], tuple(b["min"]), tuple(b["max"]))
                for b in raw.get("boxes", ())
            ),
            polylines=tuple(
                LayoutPolyline(p["label"], tuple(tuple(q) for q in p["points"]))
                for p in raw.get("polylines", ())
            ),
        )

    def rasterize(self, block: Block, resolution: int) -> LayoutMap:
        boxes = [
            (b.label, np.asarray(b.min_xy, dtype=np.float64), np.asarray(b.max_xy, dtype=np.float64))
            for b in self.boxes
        ]
        polys = [
            (p.label, np.asarray(p.points, dtype=np.float64)) for p in self.polylines
        ]
        return rasterize_layout(
            boxes, block, resolution, categories=self.categories, polylines=polys
        )


# ---------------------------------------------------------------------------
# denoiser


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Classic sin/cos features of the integer step, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / (half - 1)
    )
    angles = t.double()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)


@dataclass
class DenoiserConfig:
    latent_resolution: int = 8
    latent_channels: int = 2
    layout_channels: int = 0  # 0 = unconditional
    conv_width: int = 64
    attn_width: int = 128
    attn_heads: int = 4
    blocks: int = 6
    down_stages: int = 1
    time_dim: int = 64
    parameterization: str = "z0"  # or "noise"

    def __post_init__(self):
        if self.latent_resolution % (2**self.down_stages) != 0 or self.down_stages < 1:
            raise ValueError(
                f"resolution {self.latent_resolution} not divisible by "
                f"2^{self.down_stages} stages"
            )
        if self.attn_width % self.attn_heads != 0:
            raise ValueError("attention width must divide evenly into heads")
        if self.parameterization not in ("z0", "noise"):
            raise ValueError(f"unknown parameterization {self.parameterization!r}")
        if self.layout_channels < 0:
            raise ValueError("layout_channels must be >= 0")

    @property
    def conditional(self) -> bool:
        return self.layout_channels > 0


class _ResBlock2d(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)

    def forward(self, x):
        h = self.conv1(F.silu(x))
        h = self.conv2(F.silu(h))
        return x + h


class _TimedAttentionBlock(nn.Module):
    """Self-attention + MLP residual pair with the step embedding added in."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.time_in = nn.Linear(width, width)
        self.norm1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, 4 * width), nn.SiLU(), nn.Linear(4 * width, width)
        )

    def forward(self, tokens, temb):  # (B, L, W), (B, W)
        tokens = tokens + self.time_in(temb)[:, None, :]
        b, l, w = tokens.shape
        qkv = self.qkv(self.norm1(tokens)).reshape(b, l, 3, self.heads, w // self.heads)
        q, k, v = (qkv[:, :, i].transpose(1, 2) for i in range(3))
        mixed = F.scaled_dot_product_attention(q, k, v)
        tokens = tokens + self.proj(mixed.transpose(1, 2).reshape(b, l, w))
        return tokens + self.mlp(self.norm2(tokens))


class DenoiserNet(nn.Module):
    """Plane-shared conv stacks around attention over all plane tokens.

    Layout channels, when configured, are concatenated to every plane before
    the downsampling stack.  The final convolution is zero-initialized so an
    untrained net predicts exactly zero.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        w, aw = cfg.conv_width, cfg.attn_width
        in_ch = cfg.latent_channels + cfg.layout_channels
        self.stem = nn.Conv2d(in_ch, w, 3, padding=1)
        self.res_in = _ResBlock2d(w)
        downs, reses = [], []
        for stage in range(cfg.down_stages):
            out_w = aw if stage == cfg.down_stages - 1 else w
            downs.append(nn.Conv2d(w if stage == 0 else downs[-1].out_channels,
                                   out_w, 3, stride=2, padding=1))
            reses.append(_ResBlock2d(out_w))
        self.downs = nn.ModuleList(downs)
        self.down_reses = nn.ModuleList(reses)

        inner = cfg.latent_resolution // (2**cfg.down_stages)
        self.plane_embed = nn.Parameter(torch.zeros(3, aw))
        self.pos_embed = nn.Parameter(torch.zeros(inner * inner, aw))
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_dim, aw), nn.SiLU(), nn.Linear(aw, aw)
        )
        self.blocks = nn.ModuleList(
            _TimedAttentionBlock(aw, cfg.attn_heads) for _ in range(cfg.blocks)
        )

        ups, up_reses = [], []
        for stage in range(cfg.down_stages):
            in_w = aw if stage == 0 else w
            ups.append(nn.Conv2d(in_w, w, 3, padding=1))
            up_reses.append(_ResBlock2d(w))
        self.ups = nn.ModuleList(ups)
        self.up_reses = nn.ModuleList(up_reses)
        self.head = nn.Conv2d(w, cfg.latent_channels, 3, padding=1)
        with torch.no_grad():
            self.head.weight.zero_()
            self.head.bias.zero_()

    def reset_parameters(self, generator: torch.Generator) -> None:
        init_module(self, generator)
        with torch.no_grad():
            self.plane_embed.normal_(0.0, 0.02, generator=generator)
            self.pos_embed.normal_(0.0, 0.02, generator=generator)
            self.head.weight.zero_()
            self.head.bias.zero_()

    def forward(
        self,
        z: torch.Tensor,  # (B, 3, c, n, n)
        t: torch.Tensor,  # (B,) integer steps
        layout_channels: torch.Tensor | None = None,  # (B, 3, m, n, n)
    ) -> torch.Tensor:
        cfg = self.cfg
        b = z.shape[0]
        if cfg.conditional:
            if layout_channels is None:
                raise ValueError("layout-conditioned denoiser requires a layout")
            z = torch.cat([z, layout_channels.to(z.dtype)], dim=2)
        elif layout_channels is not None:
            raise ValueError("denoiser is not layout-conditioned")

        h = z.reshape(b * 3, *z.shape[2:])
        h = self.res_in(self.stem(h))
        for down, res in zip(self.downs, self.down_reses):
            h = res(down(h))

        inner = h.shape[-1]
        temb = self.time_mlp(sinusoidal_embedding(t, cfg.time_dim).to(h.dtype))
        tokens = h.permute(0, 2, 3, 1).reshape(b, 3, inner * inner, -1)
        tokens = tokens + self.plane_embed[None, :, None, :] + self.pos_embed[None, None, :, :]
        tokens = tokens.reshape(b, 3 * inner * inner, -1)
        for block in self.blocks:
            tokens = block(tokens, temb)
        h = tokens.reshape(b * 3, inner, inner, -1).permute(0, 3, 1, 2)

        for up, res in zip(self.ups, self.up_reses):
            h = res(up(F.interpolate(h, scale_factor=2, mode="nearest")))
        out = self.head(F.silu(h))
        return out.reshape(b, 3, *out.shape[1:])


def _layout_batch(net: DenoiserNet, layout: LayoutMap | None, batch: int) -> torch.Tensor | None:
    if layout is None:
        return None
    if not net.cfg.conditional:
        raise ValueError("denoiser is not layout-conditioned")
    if layout.resolution != net.cfg.latent_resolution:
        raise ValueError(
            f"layout resolution {layout.resolution} != latent resolution "
            f"{net.cfg.latent_resolution}"
        )
    if len(layout.categories) != net.cfg.layout_channels:
        raise ValueError(
            f"layout has {len(layout.categories)} categories, net expects "
            f"{net.cfg.layout_channels}"
        )
    return layout_plane_channels(layout)[None].expand(batch, -1, -1, -1, -1)


def denoise_predict(
    net: DenoiserNet,
    z_t: LatentTriPlane,
    t: int,
    layout: LayoutMap | None = None,
    sched: NoiseSchedule | None = None,
) -> LatentTriPlane:
    """Single forward pass returning the clean-latent estimate.

    Under noise parameterization the net output is converted using the
    forward marginal, which requires the schedule.
    """
    with torch.no_grad():
        pred = net(z_t.data[None], torch.tensor([t]), _layout_batch(net, layout, 1))[0]
    if net.cfg.parameterization == "noise":
        if sched is None:
            raise ValueError("noise parameterization needs the schedule to recover z0")
        _check_t(sched, t)
        a = math.sqrt(sched.alpha_bar[t])
        b = math.sqrt(sched.one_minus_alpha_bar[t])
        pred = (z_t.data - b * pred) / a
    return LatentTriPlane(pred)


# ---------------------------------------------------------------------------
# standardization


@dataclass
class Standardizer:
    """Per-plane per-channel affine map to zero mean, unit variance."""

    mean: np.ndarray  # (3, c)
    std: np.ndarray  # (3, c)

    def __post_init__(self):
        if self.mean.shape != self.std.shape or self.mean.ndim != 2 or self.mean.shape[0] != 3:
            raise ValueError("statistics must be (3, channels) arrays")
        if (self.std <= 0).any():
            raise ValueError("standard deviations must be positive")

    def _as(self, arr: np.ndarray, like: torch.Tensor) -> torch.Tensor:
        return torch.from_numpy(arr).to(like.dtype)[..., None, None]

    def apply(self, z: torch.Tensor) -> torch.Tensor:
        return (z - self._as(self.mean, z)) / self._as(self.std, z)

    def invert(self, z: torch.Tensor) -> torch.Tensor:
        return z * self._as(self.std, z) + self._as(self.mean, z)


def fit_standardizer(latents: list[LatentTriPlane], *, floor: float = 1e-6) -> Standardizer:
    if not latents:
        raise ValueError("standardizer needs at least one latent")
    stack = torch.stack([z.data for z in latents]).double().numpy()  # (M, 3, c, n, n)
    mean = stack.mean(axis=(0, 3, 4))
    std = np.maximum(stack.std(axis=(0, 3, 4)), floor)
    return Standardizer(mean, std)


# ---------------------------------------------------------------------------
# training


def train_step(
    net: DenoiserNet,
    z0: torch.Tensor,  # (B, 3, c, n, n), already standardized
    layout_channels: torch.Tensor | None,  # (B, 3, m, n, n) or None
    sched: NoiseSchedule,
    opt: torch.optim.Optimizer,
    generator: torch.Generator,
) -> float:
    """One uniform-t denoising step; returns the scalar loss.

    Generator draw order is fixed: the step indices, then the noise.
    """
    if z0.ndim != 5 or z0.shape[0] == 0:
        raise ValueError("z0 batch must be nonempty (B, 3, c, n, n)")
    batch = z0.shape[0]
    t = torch.randint(1, sched.steps + 1, (batch,), generator=generator)
    eps = standard_normal(z0.shape, generator, z0.dtype)
    z_t = q_sample(z0, t, eps, sched)
    pred = net(z_t, t, layout_channels)
    target = z0 if net.cfg.parameterization == "z0" else eps
    loss = F.mse_loss(pred, target)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise RuntimeError(
            f"diffusion training diverged: loss={value} at t={t.tolist()}"
        )
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()
    return value


@dataclass
class DiffusionTrainConfig:
    steps: int = 20000
    batch: int = 8
    lr: float = 2e-4


def train_denoiser(
    latents: list[LatentTriPlane],
    layouts: list[LayoutMap] | None,
    cfg: DenoiserConfig,
    sched: NoiseSchedule,
    train: DiffusionTrainConfig,
    seed: int,
) -> tuple[DenoiserNet, Standardizer, list[float]]:
    """Standardize the corpus, then run uniform-t training steps."""
    if not latents:
        raise ValueError("training needs at least one latent")
    if cfg.conditional != (layouts is not None):
        raise ValueError("layouts must be given exactly when the net is conditional")
    if layouts is not None and len(layouts) != len(latents):
        raise ValueError("one layout per latent required")

    standardizer = fit_standardizer(latents)
    z0_all = torch.stack([standardizer.apply(z.data) for z in latents])
    chan_all = None
    if layouts is not None:
        chan_all = torch.stack([layout_plane_channels(lay) for lay in layouts])

    gen = torch.Generator().manual_seed(seed)
    net = DenoiserNet(cfg)
    net.reset_parameters(gen)
    net.train()
    opt = torch.optim.Adam(net.parameters(), lr=train.lr)
    history: list[float] = []
    for step in range(train.steps):
        lr = train.lr * 0.5 * (1.0 + math.cos(math.pi * step / train.steps))
        for g in opt.param_groups:
            g["lr"] = lr
        pick = torch.randint(0, len(latents), (train.batch,), generator=gen)
        z0 = z0_all[pick]
        chans = chan_all[pick] if chan_all is not None else None
        history.append(train_step(net, z0, chans, sched, opt, gen))
    net.eval()
    return net, standardizer, history


# ---------------------------------------------------------------------------
# sampling


def reverse_step(
    net: DenoiserNet,
    z_t: torch.Tensor,  # (3, c, n, n), standardized space
    t: int,
    sched: NoiseSchedule,
    eps: torch.Tensor | None,
    layout_channels: torch.Tensor | None = None,
) -> torch.Tensor:
    """One ancestral step z_t -> z_{t-1}; eps must be None exactly at t=1."""
    _check_t(sched, t)
    if (eps is None) != (t == 1):
        raise ValueError("noise must be omitted exactly at the final step")
    with torch.no_grad():
        pred = net(z_t[None], torch.tensor([t]),
                   None if layout_channels is None else layout_channels[None])[0]
    if net.cfg.parameterization == "noise":
        a = math.sqrt(sched.alpha_bar[t])
        b = math.sqrt(sched.one_minus_alpha_bar[t])
        pred = (z_t - b * pred) / a
    mu = posterior_mean(pred, z_t, t, sched)
    if t == 1:
        return mu
    return mu + math.sqrt(sched.beta_tilde[t]) * eps


def sample(
    net: DenoiserNet,
    sched: NoiseSchedule,
    layout: LayoutMap | None,
    generator: torch.Generator,
    *,
    standardizer: Standardizer | None = None,
) -> LatentTriPlane:
    """Ancestral sampling from z_T down to z0.

    Generator draw order is fixed: z_T first, then one noise tensor per step
    from T down to 2 (none at t=1), each drawn before its reverse step.
    """
    cfg = net.cfg
    shape = (3, cfg.latent_channels, cfg.latent_resolution, cfg.latent_resolution)
    chans = _layout_batch(net, layout, 1)
    chans = None if chans is None else chans[0]
    z = standard_normal(shape, generator, torch.float32)
    for t in range(sched.steps, 0, -1):
        eps = standard_normal(shape, generator, torch.float32) if t > 1 else None
        z = reverse_step(net, z, t, sched, eps, chans)
    if standardizer is not None:
        z = standardizer.invert(z)
    return LatentTriPlane(z)


# ---------------------------------------------------------------------------
# persistence


@dataclass
class DiffusionBundle:
    """Everything needed to sample: net, schedule, latent statistics."""

    net: DenoiserNet
    sched: NoiseSchedule
    standardizer: Standardizer
    categories: tuple[str, ...] = ()
    beta_min: float = 1e-4
    beta_max: float = 0.02

    def __post_init__(self):
        if self.net.cfg.conditional and len(self.categories) != self.net.cfg.layout_channels:
            raise ValueError("conditional bundle needs one category name per layout channel")


def save_diffusion(bundle: DiffusionBundle, path: str | Path) -> None:
    cfg = bundle.net.cfg
    meta = {
        "latent_resolution": cfg.latent_resolution,
        "latent_channels": cfg.latent_channels,
        "layout_channels": cfg.layout_channels,
        "conv_width": cfg.conv_width,
        "attn_width": cfg.attn_width,
        "attn_heads": cfg.attn_heads,
        "blocks": cfg.blocks,
        "down_stages": cfg.down_stages,
        "time_dim": cfg.time_dim,
        "parameterization": cfg.parameterization,
        "schedule": {
            "steps": bundle.sched.steps,
            "beta_min": bundle.beta_min,
            "beta_max": bundle.beta_max,
        },
        "standardizer": {
            "mean": bundle.standardizer.mean.tolist(),
            "std": bundle.standardizer.std.tolist(),
        },
        "categories": list(bundle.categories),
    }
    state = bundle.net.state_dict()
    with open(path, "wb") as f:
        artifacts.write_header(f, artifacts.MAGIC_DIFFUSION, DIFFUSION_VERSION)
        artifacts.write_json_block(f, meta)
        artifacts.write_json_block(f, {"keys": list(state.keys())})
        for v in state.values():
            artifacts.write_array(f, v.detach().cpu().numpy().astype(np.float32))


def load_diffusion(path: str | Path) -> DiffusionBundle:
    with open(path, "rb") as f:
        version = artifacts.read_header(f, artifacts.MAGIC_DIFFUSION, path)
        artifacts.check_version(version, DIFFUSION_VERSION, path)
        meta = artifacts.read_json_block(f, path)
        keys = artifacts.read_json_block(f, path)["keys"]
        arrays = [artifacts.read_array(f, path) for _ in keys]
    cfg = DenoiserConfig(
        latent_resolution=meta["latent_resolution"],
        latent_channels=meta["latent_channels"],
        layout_channels=meta["layout_channels"],
        conv_width=meta["conv_width"],
        attn_width=meta["attn_width"],
        attn_heads=meta["attn_heads"],
        blocks=meta["blocks"],
        down_stages=meta["down_stages"],
        time_dim=meta["time_dim"],
        parameterization=meta["parameterization"],
    )
    net = DenoiserNet(cfg)
    net.load_state_dict({k: torch.from_numpy(a) for k, a in zip(keys, arrays)})
    for p in net.parameters():
        p.requires_grad_(False)
    net.eval()
    sched_meta = meta["schedule"]
    sched = build_schedule(sched_meta["steps"], sched_meta["beta_min"], sched_meta["beta_max"])
    standardizer = Standardizer(
        np.asarray(meta["standardizer"]["mean"], dtype=np.float64),
        np.asarray(meta["standardizer"]["std"], dtype=np.float64),
    )
    return DiffusionBundle(
        net, sched, standardizer,
        categories=tuple(meta["categories"]),
        beta_min=sched_meta["beta_min"],
        beta_max=sched_meta["beta_max"],
    )
