"""Latent tri-plane autoencoding.

The encoder turns a raw tri-plane (3, C, N, N) into the parameters of a
Gaussian over a much smaller latent tri-plane (3, c, n, n); the decoder maps
a latent back to raw plane space.  Planes share convolution weights and talk
to each other only through cross-plane attention.  Training combines an L1
reconstruction term, a lightly weighted KL term, and the geometry loss of the
decoded field evaluated with a frozen SDF decoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import artifacts
from .mesh_geometry import SampleSet
from .seeds import standard_normal
from .triplane_field import (
    FitConfig,
    LossWeights,
    SdfDecoder,
    TriPlane,
    geometry_loss,
    init_module,
)

LATENT_VERSION = 1
VAE_VERSION = 1


# ---------------------------------------------------------------------------
# types


@dataclass
class LatentTriPlane:
    """Latent planes shaped (3, c, n, n), same axis conventions as TriPlane."""

    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[0] != 3:
            raise ValueError(f"latent must be (3, c, n, n), got {tuple(self.data.shape)}")
        if self.data.shape[2] != self.data.shape[3]:
            raise ValueError("latent planes must be square")
        if not torch.isfinite(self.data).all():
            raise ValueError("latent contains non-finite values")

    @property
    def resolution(self) -> int:
        return int(self.data.shape[2])

    @property
    def channels(self) -> int:
        return int(self.data.shape[1])


@dataclass
class LatentDistribution:
    """Diagonal Gaussian over latents: mean and log-variance tensors."""

    mean: torch.Tensor
    logvar: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.logvar.shape:
            raise ValueError("mean and log-variance shapes differ")
        if not torch.isfinite(self.logvar).all():
            raise ValueError("log-variance contains non-finite values")


def reparameterize(dist: LatentDistribution, generator: torch.Generator) -> LatentTriPlane:
    """Draw z = mean + exp(logvar/2) * eps with eps standard normal."""
    eps = standard_normal(dist.mean.shape, generator, dist.mean.dtype)
    return LatentTriPlane(dist.mean + torch.exp(0.5 * dist.logvar) * eps)


def kl_divergence(dist: LatentDistribution) -> torch.Tensor:
    """Mean per-element KL against the standard normal.

    expm1 keeps exp(logvar) - 1 - logvar nonnegative for tiny logvar, where
    the naive form rounds below zero.
    """
    return 0.5 * (dist.mean**2 + torch.expm1(dist.logvar) - dist.logvar).mean()


def compression_rate(plane_resolution: int, plane_channels: int,
                     latent_resolution: int, latent_channels: int) -> float:
    """Fraction of raw tri-plane values removed by the latent representation."""
    raw = 3 * plane_resolution**2 * plane_channels
    latent = 3 * latent_resolution**2 * latent_channels
    return 1.0 - latent / raw


# ---------------------------------------------------------------------------
# architecture


@dataclass
class VaeConfig:
    plane_resolution: int = 32
    plane_channels: int = 8
    latent_resolution: int = 8
    latent_channels: int = 2
    conv_width: int = 32
    attn_width: int = 64
    attn_heads: int = 4
    attn_layers: int = 2
    w_rec: float = 0.1
    w_kl: float = 1e-6
    geometry: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        ratio = self.plane_resolution / self.latent_resolution
        if ratio < 2 or ratio != 2 ** round(math.log2(ratio)):
            raise ValueError(
                "plane/latent resolution ratio must be a power of two >= 2, "
                f"got {self.plane_resolution}/{self.latent_resolution}"
            )
        if self.attn_width % self.attn_heads != 0:
            raise ValueError("attention width must divide evenly into heads")

    @property
    def down_stages(self) -> int:
        """Stride-2 stages implied by the plane/latent resolution ratio."""
        return round(math.log2(self.plane_resolution / self.latent_resolution))


class _ResBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)

    def forward(self, x):
        h = self.conv1(F.silu(x))
        h = self.conv2(F.silu(h))
        return x + h


class _AttentionBlock(nn.Module):
    """Pre-norm self-attention + MLP over flattened plane tokens."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, 4 * width), nn.SiLU(), nn.Linear(4 * width, width)
        )

    def forward(self, tokens):  # (B, L, W)
        b, l, w = tokens.shape
        qkv = self.qkv(self.norm1(tokens)).reshape(b, l, 3, self.heads, w // self.heads)
        q, k, v = (qkv[:, :, i].transpose(1, 2) for i in range(3))
        mixed = F.scaled_dot_product_attention(q, k, v)
        tokens = tokens + self.proj(mixed.transpose(1, 2).reshape(b, l, w))
        return tokens + self.mlp(self.norm2(tokens))


class PlaneEncoder(nn.Module):
    """Shared per-plane convolutions, cross-plane attention, Gaussian heads."""

    def __init__(self, cfg: VaeConfig):
        super().__init__()
        w, aw = cfg.conv_width, cfg.attn_width
        self.cfg = cfg
        self.stem = nn.Conv2d(cfg.plane_channels, w, 3, padding=1)
        self.res_in = _ResBlock(w)
        downs, reses = [], []
        for stage in range(cfg.down_stages):
            out_w = aw if stage == cfg.down_stages - 1 else w
            downs.append(nn.Conv2d(w if stage == 0 else downs[-1].out_channels,
                                   out_w, 3, stride=2, padding=1))
            reses.append(_ResBlock(out_w))
        self.downs = nn.ModuleList(downs)
        self.reses = nn.ModuleList(reses)
        self.plane_embed = nn.Parameter(torch.zeros(3, aw))
        self.attn = nn.ModuleList(
            _AttentionBlock(aw, cfg.attn_heads) for _ in range(cfg.attn_layers)
        )
        self.mean_head = nn.Conv2d(aw, cfg.latent_channels, 1)
        self.logvar_head = nn.Conv2d(aw, cfg.latent_channels, 1)

    def plane_features(self, x: torch.Tensor) -> torch.Tensor:
        """Pre-attention features, (B, 3, C, N, N) -> (B, 3, W, n, n).

        Planes are folded into the batch so the convolution weights are
        shared; plane identity enters only later via the embeddings.
        """
        b = x.shape[0]
        h = x.reshape(b * 3, *x.shape[2:])
        h = self.res_in(self.stem(h))
        for down, res in zip(self.downs, self.reses):
            h = res(down(h))
        return h.reshape(b, 3, *h.shape[1:])

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b = x.shape[0]
        f = self.plane_features(x)
        n = f.shape[-1]
        tokens = f.permute(0, 1, 3, 4, 2).reshape(b, 3, n * n, -1)
        tokens = tokens + self.plane_embed[None, :, None, :]
        tokens = tokens.reshape(b, 3 * n * n, -1)
        for block in self.attn:
            tokens = block(tokens)
        g = tokens.reshape(b * 3, n, n, -1).permute(0, 3, 1, 2)
        mean = self.mean_head(g).reshape(b, 3, self.cfg.latent_channels, n, n)
        logvar = self.logvar_head(g).reshape(b, 3, self.cfg.latent_channels, n, n)
        return mean, logvar


class PlaneDecoder(nn.Module):
    """Latent planes back to raw planes with multi-scale aggregation.

    Features from every scale of the upsampling path are projected, resized
    to the full resolution, and summed before the output head, so coarse
    structure and fine detail both reach the prediction directly.
    """

    def __init__(self, cfg: VaeConfig):
        super().__init__()
        w, aw = cfg.conv_width, cfg.attn_width
        self.cfg = cfg
        self.stem = nn.Conv2d(cfg.latent_channels, aw, 1)
        self.plane_embed = nn.Parameter(torch.zeros(3, aw))
        self.attn = nn.ModuleList(
            _AttentionBlock(aw, cfg.attn_heads) for _ in range(cfg.attn_layers)
        )
        self.res0 = _ResBlock(aw)
        ups, reses, lats = [], [], []
        for stage in range(cfg.down_stages):
            in_w = aw if stage == 0 else w
            ups.append(nn.Conv2d(in_w, w, 3, padding=1))
            reses.append(_ResBlock(w))
            lats.append(nn.Conv2d(in_w, w, 1))
        self.ups = nn.ModuleList(ups)
        self.reses = nn.ModuleList(reses)
        self.lats = nn.ModuleList(lats)
        self.head = nn.Conv2d(w, cfg.plane_channels, 3, padding=1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:  # (B, 3, c, n, n)
        b = z.shape[0]
        n = z.shape[-1]
        h = self.stem(z.reshape(b * 3, *z.shape[2:]))
        tokens = h.permute(0, 2, 3, 1).reshape(b, 3, n * n, -1)
        tokens = tokens + self.plane_embed[None, :, None, :]
        tokens = tokens.reshape(b, 3 * n * n, -1)
        for block in self.attn:
            tokens = block(tokens)
        h = tokens.reshape(b * 3, n, n, -1).permute(0, 3, 1, 2)
        h = self.res0(h)
        full = self.cfg.plane_resolution
        agg = None
        for up, res, lat in zip(self.ups, self.reses, self.lats):
            skip = F.interpolate(lat(h), size=(full, full), mode="nearest")
            agg = skip if agg is None else agg + skip
            h = res(up(F.interpolate(h, scale_factor=2, mode="nearest")))
        out = self.head(F.silu(h + agg))
        return out.reshape(b, 3, *out.shape[1:])


class VaeModel(nn.Module):
    def __init__(self, cfg: VaeConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = PlaneEncoder(cfg)
        self.decoder = PlaneDecoder(cfg)

    def reset_parameters(self, generator: torch.Generator) -> None:
        init_module(self, generator)
        for embed in (self.encoder.plane_embed, self.decoder.plane_embed):
            with torch.no_grad():
                embed.normal_(0.0, 0.02, generator=generator)


def _check_plane_shape(x: torch.Tensor, cfg: VaeConfig) -> None:
    want = (3, cfg.plane_channels, cfg.plane_resolution, cfg.plane_resolution)
    if tuple(x.shape) != want:
        raise ValueError(f"tri-plane shape {tuple(x.shape)} does not match model {want}")


def encode(model: VaeModel, x: TriPlane) -> LatentDistribution:
    _check_plane_shape(x.data, model.cfg)
    with torch.no_grad():
        mean, logvar = model.encoder(x.data[None])
    return LatentDistribution(mean[0], logvar[0])


def decode(model: VaeModel, z: LatentTriPlane) -> TriPlane:
    want = (3, model.cfg.latent_channels, model.cfg.latent_resolution,
            model.cfg.latent_resolution)
    if tuple(z.data.shape) != want:
        raise ValueError(f"latent shape {tuple(z.data.shape)} does not match model {want}")
    with torch.no_grad():
        out = model.decoder(z.data[None])
    return TriPlane(out[0])


# ---------------------------------------------------------------------------
# training


@dataclass
class VaeExample:
    """One training pair; constructing it asserts the block pairing.

    A SampleSet carries no identity of its own, so the loader that assembles
    examples from a workdir is responsible for matching each fitted tri-plane
    with the sample file of the same block id.
    """

    block_id: str
    triplane: TriPlane
    samples: SampleSet


def vae_loss(
    model: VaeModel,
    triplane: TriPlane,
    samples: SampleSet,
    frozen_decoder: SdfDecoder,
    *,
    generator: torch.Generator,
    surface_batch: int = 2048,
    volume_batch: int = 2048,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Reconstruction + KL + geometry objective for one block.

    The geometry term runs the frozen SDF decoder on the tri-plane decoded
    from the posterior mean, so its gradient flows through both halves of the
    autoencoder; the reconstruction term uses a sampled latent.  Generator
    draw order is fixed: latent noise, then the surface permutation, then the
    volume permutation.
    """
    cfg = model.cfg
    x = triplane.data
    _check_plane_shape(x, cfg)

    mean, logvar = model.encoder(x[None])
    dist = LatentDistribution(mean[0], logvar[0])
    eps = standard_normal(mean.shape, generator, mean.dtype)
    z_sampled = mean + torch.exp(0.5 * logvar) * eps
    x_rec = model.decoder(z_sampled)[0]
    x_geo = model.decoder(mean)[0]

    rec = (x_rec - x).abs().mean()
    kl = kl_divergence(dist)

    # one shared permutation per point family keeps points and their
    # companions (normals, distances) aligned
    if samples.n_surface > 0:
        surf_idx = torch.randperm(samples.n_surface, generator=generator)[:surface_batch]
        sp = torch.from_numpy(samples.surface_points)[surf_idx].to(x.dtype)
        sn = torch.from_numpy(samples.surface_normals)[surf_idx].to(x.dtype)
    else:
        sp = torch.zeros((0, 3), dtype=x.dtype)
        sn = torch.zeros((0, 3), dtype=x.dtype)
    vol_idx = torch.randperm(samples.n_volume, generator=generator)[:volume_batch]
    vp = torch.from_numpy(samples.volume_points)[vol_idx].to(x.dtype)
    vs = torch.from_numpy(samples.volume_sdf)[vol_idx].to(x.dtype)

    geo, geo_parts = geometry_loss(
        x_geo, frozen_decoder, sp, sn, vp, vs,
        weights=cfg.geometry, delta=2.0 / cfg.plane_resolution,
    )
    total = cfg.w_rec * rec + cfg.w_kl * kl + geo
    parts = {
        "rec_l1": float(rec.detach()),
        "kl": float(kl.detach()),
        "geo": float(geo.detach()),
        "total": float(total.detach()),
    }
    return total, parts


@dataclass
class VaeTrainConfig:
    steps: int = 2000
    lr: float = 3e-4
    surface_batch: int = 2048
    volume_batch: int = 2048


def train_vae(
    examples: list[VaeExample],
    frozen_decoder: SdfDecoder,
    cfg: VaeConfig,
    train: VaeTrainConfig,
    seed: int,
) -> tuple[VaeModel, list[float]]:
    """Train a VAE over fitted blocks; one block per optimizer step."""
    if not examples:
        raise ValueError("VAE training needs at least one example")
    gen = torch.Generator().manual_seed(seed)
    model = VaeModel(cfg)
    model.reset_parameters(gen)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=train.lr)
    history: list[float] = []
    order = torch.cat(
        [
            torch.randperm(len(examples), generator=gen)
            for _ in range(math.ceil(train.steps / len(examples)))
        ]
    )[: train.steps]
    for step, pick in enumerate(order.tolist()):
        lr = train.lr * 0.5 * (1.0 + math.cos(math.pi * step / train.steps))
        for g in opt.param_groups:
            g["lr"] = lr
        ex = examples[pick]
        total, parts = vae_loss(
            model, ex.triplane, ex.samples, frozen_decoder,
            generator=gen,
            surface_batch=train.surface_batch,
            volume_batch=train.volume_batch,
        )
        if not math.isfinite(parts["total"]):
            raise RuntimeError(f"VAE training diverged at step {step}: {parts}")
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        history.append(parts["total"])
    model.eval()
    return model, history


# ---------------------------------------------------------------------------
# size-matched single-vector baseline


class VectorAutoencoder(nn.Module):
    """Flat-vector autoencoder with the same total latent size.

    The latent has no spatial structure at all; it exists so the value of the
    latent tri-plane layout can be measured against a size-matched control.
    """

    def __init__(self, cfg: VaeConfig, hidden: int = 512):
        super().__init__()
        self.cfg = cfg
        raw = 3 * cfg.plane_resolution**2 * cfg.plane_channels
        latent = 3 * cfg.latent_resolution**2 * cfg.latent_channels
        self.latent_dim = latent
        self.enc = nn.Sequential(
            nn.Linear(raw, hidden), nn.SiLU(), nn.Linear(hidden, latent)
        )
        self.dec = nn.Sequential(
            nn.Linear(latent, hidden), nn.SiLU(), nn.Linear(hidden, raw)
        )

    def reset_parameters(self, generator: torch.Generator) -> None:
        init_module(self, generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:  # (B, 3, C, N, N)
        b = x.shape[0]
        flat = x.reshape(b, -1)
        return self.dec(self.enc(flat)).reshape(x.shape)


def train_vector_baseline(
    examples: list[VaeExample],
    frozen_decoder: SdfDecoder,
    cfg: VaeConfig,
    train: VaeTrainConfig,
    seed: int,
) -> tuple[VectorAutoencoder, list[float]]:
    """Train the baseline with the same objective minus the KL term."""
    if not examples:
        raise ValueError("baseline training needs at least one example")
    gen = torch.Generator().manual_seed(seed)
    model = VectorAutoencoder(cfg)
    model.reset_parameters(gen)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=train.lr)
    history: list[float] = []
    order = torch.cat(
        [
            torch.randperm(len(examples), generator=gen)
            for _ in range(math.ceil(train.steps / len(examples)))
        ]
    )[: train.steps]
    for step, pick in enumerate(order.tolist()):
        lr = train.lr * 0.5 * (1.0 + math.cos(math.pi * step / train.steps))
        for g in opt.param_groups:
            g["lr"] = lr
        ex = examples[pick]
        x = ex.triplane.data
        x_rec = model(x[None])[0]
        rec = (x_rec - x).abs().mean()

        samples = ex.samples
        if samples.n_surface > 0:
            surf_idx = torch.randperm(samples.n_surface, generator=gen)[: train.surface_batch]
            sp = torch.from_numpy(samples.surface_points)[surf_idx].to(x.dtype)
            sn = torch.from_numpy(samples.surface_normals)[surf_idx].to(x.dtype)
        else:
            sp = torch.zeros((0, 3), dtype=x.dtype)
            sn = torch.zeros((0, 3), dtype=x.dtype)
        vol_idx = torch.randperm(samples.n_volume, generator=gen)[: train.volume_batch]
        vp = torch.from_numpy(samples.volume_points)[vol_idx].to(x.dtype)
        vs = torch.from_numpy(samples.volume_sdf)[vol_idx].to(x.dtype)
        geo, _ = geometry_loss(
            x_rec, frozen_decoder, sp, sn, vp, vs,
            weights=cfg.geometry, delta=2.0 / cfg.plane_resolution,
        )
        total = cfg.w_rec * rec + geo
        if not math.isfinite(float(total.detach())):
            raise RuntimeError(f"baseline training diverged at step {step}")
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        history.append(float(total.detach()))
    model.eval()
    return model, history


def reconstruct_vector_baseline(model: VectorAutoencoder, x: TriPlane) -> TriPlane:
    with torch.no_grad():
        return TriPlane(model(x.data[None])[0])


# ---------------------------------------------------------------------------
# persistence


def save_latent(z: LatentTriPlane, path: str | Path) -> None:
    with open(path, "wb") as f:
        artifacts.write_header(f, artifacts.MAGIC_LATENT, LATENT_VERSION)
        artifacts.write_json_block(
            f, {"resolution": z.resolution, "channels": z.channels}
        )
        artifacts.write_array(f, z.data.detach().cpu().numpy().astype(np.float32))


def load_latent(path: str | Path, *, dtype: torch.dtype = torch.float32) -> LatentTriPlane:
    with open(path, "rb") as f:
        version = artifacts.read_header(f, artifacts.MAGIC_LATENT, path)
        artifacts.check_version(version, LATENT_VERSION, path)
        meta = artifacts.read_json_block(f, path)
        data = artifacts.read_array(f, path)
    if data.shape != (3, meta["channels"], meta["resolution"], meta["resolution"]):
        raise artifacts.ArtifactError(f"{path}: payload shape {data.shape} disagrees with header")
    return LatentTriPlane(torch.from_numpy(data).to(dtype))


def _write_module(f, model: nn.Module) -> None:
    state = model.state_dict()
    artifacts.write_json_block(f, {"keys": list(state.keys())})
    for v in state.values():
        artifacts.write_array(f, v.detach().cpu().numpy().astype(np.float32))


def _read_module(f, model: nn.Module, path) -> None:
    keys = artifacts.read_json_block(f, path)["keys"]
    arrays = [artifacts.read_array(f, path) for _ in keys]
    state = {k: torch.from_numpy(a) for k, a in zip(keys, arrays)}
    model.load_state_dict(state)
    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()


def _vae_meta(cfg: VaeConfig) -> dict:
    return {
        "plane_resolution": cfg.plane_resolution,
        "plane_channels": cfg.plane_channels,
        "latent_resolution": cfg.latent_resolution,
        "latent_channels": cfg.latent_channels,
        "conv_width": cfg.conv_width,
        "attn_width": cfg.attn_width,
        "attn_heads": cfg.attn_heads,
        "attn_layers": cfg.attn_layers,
    }


def save_vae(model: VaeModel | VectorAutoencoder, path: str | Path) -> None:
    kind = "triplane-vae" if isinstance(model, VaeModel) else "vector-ae"
    with open(path, "wb") as f:
        artifacts.write_header(f, artifacts.MAGIC_VAE, VAE_VERSION)
        meta = {"kind": kind, **_vae_meta(model.cfg)}
        if kind == "vector-ae":
            meta["hidden"] = model.enc[0].out_features
        artifacts.write_json_block(f, meta)
        _write_module(f, model)


def load_vae(path: str | Path) -> VaeModel | VectorAutoencoder:
    with open(path, "rb") as f:
        version = artifacts.read_header(f, artifacts.MAGIC_VAE, path)
        artifacts.check_version(version, VAE_VERSION, path)
        meta = artifacts.read_json_block(f, path)
        cfg = VaeConfig(
            plane_resolution=meta["plane_resolution"],
            plane_channels=meta["plane_channels"],
            latent_resolution=meta["latent_resolution"],
            latent_channels=meta["latent_channels"],
            conv_width=meta["conv_width"],
            attn_width=meta["attn_width"],
            attn_heads=meta["attn_heads"],
            attn_layers=meta["attn_layers"],
        )
        if meta["kind"] == "triplane-vae":
            model: VaeModel | VectorAutoencoder = VaeModel(cfg)
        elif meta["kind"] == "vector-ae":
            model = VectorAutoencoder(cfg, hidden=meta["hidden"])
        else:
            raise artifacts.ArtifactError(f"{path}: unknown model kind {meta['kind']!r}")
        _read_module(f, model, path)
    return model
