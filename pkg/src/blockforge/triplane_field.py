"""Tri-plane neural signed distance fields and per-block fitting.

A field is three axis-aligned feature planes (xy, yz, xz) at resolution N
with C channels plus a small shared MLP decoder.  A point's feature is the
sum of one bilinear lookup per plane; the decoder maps that feature to a
signed distance in block-local units.  Spatial gradients are central finite
differences of the field, and fitting backpropagates through the stencil.
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

TRIPLANE_VERSION = 1
DECODER_VERSION = 1

PLANE_AXES = ((0, 1), (1, 2), (0, 2))  # xy, yz, xz
PLANE_NAMES = ("xy", "yz", "xz")


# ---------------------------------------------------------------------------
# types


@dataclass
class TriPlane:
    """Feature planes shaped (3, C, N, N), indexed [plane, channel, a, b]."""

    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[0] != 3:
            raise ValueError(f"tri-plane must be (3, C, N, N), got {tuple(self.data.shape)}")
        if self.data.shape[2] != self.data.shape[3] or self.data.shape[2] < 2:
            raise ValueError(f"planes must be square with N >= 2, got {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise ValueError("tri-plane contains non-finite values")

    @property
    def resolution(self) -> int:
        return int(self.data.shape[2])

    @property
    def channels(self) -> int:
        return int(self.data.shape[1])


class SdfDecoder(nn.Module):
    """MLP from a C-channel plane feature to a scalar signed distance."""

    def __init__(self, channels: int, width: int = 64, hidden_layers: int = 4):
        super().__init__()
        if channels < 1 or width < 1 or hidden_layers < 1:
            raise ValueError("decoder dimensions must be positive")
        self.channels = channels
        self.width = width
        self.hidden_layers = hidden_layers
        layers: list[nn.Module] = [nn.Linear(channels, width)]
        for _ in range(hidden_layers - 1):
            layers.append(nn.Linear(width, width))
        self.hidden = nn.ModuleList(layers)
        self.out = nn.Linear(width, 1)
        self.act = nn.Softplus(beta=100)

    def forward(self, feature: torch.Tensor) -> torch.Tensor:
        h = feature
        for layer in self.hidden:
            h = self.act(layer(h))
        return self.out(h).squeeze(-1)


def init_module(module: nn.Module, generator: torch.Generator) -> None:
    """Deterministic parameter init driven by an explicit generator."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d)):
            fan_in = m.weight.shape[1] if isinstance(m, nn.Linear) else (
                m.weight.shape[1] * m.weight.shape[2] * m.weight.shape[3]
            )
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=generator)
        elif isinstance(m, (nn.LayerNorm, nn.Embedding, nn.MultiheadAttention)):
            # handled by owners where a custom init matters
            pass


# ---------------------------------------------------------------------------
# field evaluation


def query_feature(planes: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Sum of the three bilinear plane lookups for points in [-1, 1]^3.

    Planes use an align-corners node grid: coordinate -1 maps to node 0 and
    +1 to node N-1.  Points outside the cube are an error.
    """
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"points must be (B, 3), got {tuple(points.shape)}")
    if bool((points.abs() > 1.0 + 1e-9).any()):
        raise ValueError("query point outside the [-1, 1]^3 block frame")
    n = planes.shape[2]
    feature = None
    for k, (a0, a1) in enumerate(PLANE_AXES):
        u = (points[:, a0] + 1.0) * 0.5 * (n - 1)
        v = (points[:, a1] + 1.0) * 0.5 * (n - 1)
        i0 = u.floor().long().clamp(0, n - 2)
        j0 = v.floor().long().clamp(0, n - 2)
        fu = (u - i0).to(planes.dtype)
        fv = (v - j0).to(planes.dtype)
        p = planes[k]
        f00 = p[:, i0, j0]
        f10 = p[:, i0 + 1, j0]
        f01 = p[:, i0, j0 + 1]
        f11 = p[:, i0 + 1, j0 + 1]
        interp = (
            f00 * (1 - fu) * (1 - fv)
            + f10 * fu * (1 - fv)
            + f01 * (1 - fu) * fv
            + f11 * fu * fv
        ).transpose(0, 1)
        feature = interp if feature is None else feature + interp
    return feature


def phi(planes: torch.Tensor, decoder: SdfDecoder, points: torch.Tensor) -> torch.Tensor:
    """Signed distance prediction at local points."""
    return decoder(query_feature(planes, points))


def phi_gradient(
    planes: torch.Tensor,
    decoder: SdfDecoder,
    points: torch.Tensor,
    delta: float,
) -> torch.Tensor:
    """Central-difference spatial gradient of the field.

    Probe points are clamped to the cube, which degrades to a one-sided
    difference at the boundary; the divisor always matches the actual probe
    separation.  Gradients w.r.t. planes and decoder flow through the stencil.
    """
    if delta <= 0:
        raise ValueError(f"finite-difference step must be positive, got {delta}")
    grads = []
    for axis in range(3):
        plus = points.clone()
        minus = points.clone()
        plus[:, axis] = (points[:, axis] + delta).clamp(max=1.0)
        minus[:, axis] = (points[:, axis] - delta).clamp(min=-1.0)
        span = (plus[:, axis] - minus[:, axis]).detach()
        grads.append((phi(planes, decoder, plus) - phi(planes, decoder, minus)) / span)
    return torch.stack(grads, dim=1)


# ---------------------------------------------------------------------------
# loss


@dataclass(frozen=True)
class LossWeights:
    surface: float = 100.0
    volume: float = 3.0
    normal: float = 1.0
    eikonal: float = 0.5


def geometry_loss(
    planes: torch.Tensor,
    decoder: SdfDecoder,
    surface_points: torch.Tensor,
    surface_normals: torch.Tensor,
    volume_points: torch.Tensor,
    volume_sdf: torch.Tensor,
    *,
    weights: LossWeights,
    delta: float,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted SDF + normal + eikonal objective.

    Surface terms vanish when no surface points are given (empty blocks);
    an empty volume batch is an error.
    """
    if len(volume_points) == 0:
        raise ValueError("geometry loss needs at least one volume point")
    pred_vol = phi(planes, decoder, volume_points)
    volume_l1 = (pred_vol - volume_sdf).abs().mean()

    zero = volume_l1.new_zeros(())
    surface_abs = zero
    normal_l1 = zero
    eikonal = zero
    if len(surface_points) > 0:
        pred_surf = phi(planes, decoder, surface_points)
        surface_abs = pred_surf.abs().mean()
        grad = phi_gradient(planes, decoder, surface_points, delta)
        normal_l1 = (grad - surface_normals).abs().sum(dim=1).mean()
        eikonal = (grad.norm(dim=1) - 1.0).abs().mean()

    total = (
        weights.surface * surface_abs
        + weights.volume * volume_l1
        + weights.normal * normal_l1
        + weights.eikonal * eikonal
    )
    parts = {
        "surface_abs": float(surface_abs.detach()),
        "volume_l1": float(volume_l1.detach()),
        "normal_l1": float(normal_l1.detach()),
        "eikonal": float(eikonal.detach()),
        "total": float(total.detach()),
    }
    return total, parts


# ---------------------------------------------------------------------------
# fitting


@dataclass
class FitConfig:
    resolution: int = 32
    channels: int = 8
    ladder: tuple[int, ...] = (8, 16, 32)
    steps: tuple[int, ...] = (150, 150, 200)
    batch_surface: int = 4096
    batch_volume: int = 4096
    lr_planes: float = 1e-2
    lr_decoder: float = 1e-3
    weights: LossWeights = field(default_factory=LossWeights)
    decoder_width: int = 64
    decoder_layers: int = 4
    sphere_pretrain_steps: int = 200
    sphere_radius: float = 0.5
    plane_init_scale: float = 1e-2

    def __post_init__(self):
        if len(self.ladder) != len(self.steps):
            raise ValueError("ladder and steps must have matching lengths")
        if self.ladder[-1] != self.resolution:
            raise ValueError(
                f"ladder must end at the target resolution {self.resolution}, got {self.ladder}"
            )
        if any(a >= b for a, b in zip(self.ladder, self.ladder[1:])):
            raise ValueError(f"ladder must strictly increase, got {self.ladder}")

    def fd_delta(self, resolution: int) -> float:
        return 2.0 / resolution


@dataclass
class FitResult:
    triplane: TriPlane
    loss_history: list[float]
    final_parts: dict[str, float]


class _Batcher:
    """Deterministic reshuffled mini-batches over a fixed point set."""

    def __init__(self, n: int, batch: int, generator: torch.Generator):
        self.n = n
        self.batch = min(batch, n) if n else 0
        self.gen = generator
        self.order = None
        self.cursor = 0

    def next_indices(self) -> torch.Tensor | None:
        if self.n == 0:
            return None
        if self.order is None or self.cursor + self.batch > self.n:
            self.order = torch.randperm(self.n, generator=self.gen)
            self.cursor = 0
        idx = self.order[self.cursor : self.cursor + self.batch]
        self.cursor += self.batch
        return idx


def _sample_tensors(samples: SampleSet, dtype: torch.dtype):
    sp = torch.from_numpy(samples.surface_points).to(dtype)
    sn = torch.from_numpy(samples.surface_normals).to(dtype)
    vp = torch.from_numpy(samples.volume_points).to(dtype)
    vs = torch.from_numpy(samples.volume_sdf).to(dtype)
    return sp, sn, vp, vs


def _upsample_planes(planes: torch.Tensor, resolution: int) -> torch.Tensor:
    if planes.shape[2] == resolution:
        return planes.clone()
    return F.interpolate(
        planes, size=(resolution, resolution), mode="bilinear", align_corners=True
    )


def pretrain_sphere_decoder(
    cfg: FitConfig,
    seed: int,
    *,
    dtype: torch.dtype = torch.float32,
) -> tuple[SdfDecoder, torch.Tensor]:
    """Pretrain a decoder (plus coarse proxy planes) against an analytic sphere.

    The returned pair is used to initialize every fit, so optimization starts
    from a field that is approximately |p| - r.
    """
    gen = torch.Generator().manual_seed(seed)
    decoder = SdfDecoder(cfg.channels, cfg.decoder_width, cfg.decoder_layers).to(dtype)
    init_module(decoder, gen)
    res0 = cfg.ladder[0]
    planes = (
        torch.randn((3, cfg.channels, res0, res0), generator=gen, dtype=dtype)
        * cfg.plane_init_scale
    ).requires_grad_()
    opt = torch.optim.Adam(
        [
            {"params": [planes], "lr": cfg.lr_planes},
            {"params": decoder.parameters(), "lr": cfg.lr_decoder},
        ]
    )
    for _ in range(cfg.sphere_pretrain_steps):
        pts = torch.rand((2048, 3), generator=gen, dtype=dtype) * 2.0 - 1.0
        target = pts.norm(dim=1) - cfg.sphere_radius
        loss = (phi(planes, decoder, pts) - target).abs().mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return decoder, planes.detach()


def _cosine_lr(base: float, step: int, horizon: int) -> float:
    return base * 0.5 * (1.0 + math.cos(math.pi * step / max(horizon, 1)))


def fit_block(
    samples: SampleSet,
    cfg: FitConfig,
    decoder: SdfDecoder,
    *,
    train_decoder: bool = False,
    seed: int = 0,
    init_planes: torch.Tensor | None = None,
    dtype: torch.dtype = torch.float32,
    record_parts: bool = False,
) -> FitResult:
    """Fit a tri-plane to one block's samples over the coarse-to-fine ladder.

    One cosine decay spans the whole ladder; restarting it per stage bounces
    the nearly-converged planes around and hurts the final fit.  With
    ``train_decoder=False`` the decoder is frozen and the fit is
    bit-reproducible for a given (samples, config, seed, init).  Divergence
    (non-finite loss) aborts with diagnostics rather than writing garbage.
    """
    gen = torch.Generator().manual_seed(seed)
    sp, sn, vp, vs = _sample_tensors(samples, dtype)

    if init_planes is not None:
        planes = init_planes.detach().to(dtype)
        if planes.shape[1] != cfg.channels:
            raise ValueError("init planes channel count mismatch")
    else:
        res0 = cfg.ladder[0]
        planes = (
            torch.randn((3, cfg.channels, res0, res0), generator=gen, dtype=dtype)
            * cfg.plane_init_scale
        )

    decoder.train(train_decoder)
    for p in decoder.parameters():
        p.requires_grad_(train_decoder)

    history: list[float] = []
    parts: dict[str, float] = {}
    horizon = sum(cfg.steps)
    done = 0
    for stage, (res, n_steps) in enumerate(zip(cfg.ladder, cfg.steps)):
        planes = _upsample_planes(planes, res).detach().requires_grad_()
        groups = [{"params": [planes], "lr": cfg.lr_planes}]
        if train_decoder:
            groups.append({"params": list(decoder.parameters()), "lr": cfg.lr_decoder})
        opt = torch.optim.Adam(groups)
        base_lrs = [g["lr"] for g in opt.param_groups]
        delta = cfg.fd_delta(res)
        surf_batch = _Batcher(samples.n_surface, cfg.batch_surface, gen)
        vol_batch = _Batcher(samples.n_volume, cfg.batch_volume, gen)
        for step in range(n_steps):
            for g, base in zip(opt.param_groups, base_lrs):
                g["lr"] = _cosine_lr(base, done + step, horizon)
            si = surf_batch.next_indices()
            vi = vol_batch.next_indices()
            loss, parts = geometry_loss(
                planes,
                decoder,
                sp[si] if si is not None else sp[:0],
                sn[si] if si is not None else sn[:0],
                vp[vi],
                vs[vi],
                weights=cfg.weights,
                delta=delta,
            )
            if not math.isfinite(parts["total"]):
                raise RuntimeError(
                    f"fit diverged at stage {stage} step {step}: {parts}"
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            history.append(parts["total"])
        done += n_steps
    result_planes = planes.detach()
    if record_parts:
        with torch.no_grad():
            _, parts = geometry_loss(
                result_planes, decoder, sp, sn, vp, vs,
                weights=cfg.weights, delta=cfg.fd_delta(cfg.resolution),
            )
    return FitResult(TriPlane(result_planes), history, parts)


def fit_fleet_joint(
    samplesets: list[SampleSet],
    cfg: FitConfig,
    seed: int,
    *,
    dtype: torch.dtype = torch.float32,
) -> tuple[SdfDecoder, list[TriPlane]]:
    """Train the shared decoder jointly across blocks, then return it.

    Every block keeps its own planes; optimization interleaves blocks in a
    reshuffled order so the decoder sees all of them at every stage.  Callers
    freeze the returned decoder before fitting the full fleet.
    """
    if not samplesets:
        raise ValueError("joint fitting needs at least one block")
    decoder, proxy = pretrain_sphere_decoder(cfg, seed, dtype=dtype)
    gen = torch.Generator().manual_seed(seed + 1)

    tensors = [_sample_tensors(s, dtype) for s in samplesets]
    planes_list = [proxy.clone() for _ in samplesets]

    horizon = sum(cfg.steps) * len(samplesets)
    done = 0
    for stage, (res, n_steps) in enumerate(zip(cfg.ladder, cfg.steps)):
        planes_list = [
            _upsample_planes(p, res).detach().requires_grad_() for p in planes_list
        ]
        groups = [{"params": planes_list, "lr": cfg.lr_planes}]
        groups.append({"params": list(decoder.parameters()), "lr": cfg.lr_decoder})
        opt = torch.optim.Adam(groups)
        base_lrs = [g["lr"] for g in opt.param_groups]
        delta = cfg.fd_delta(res)
        batchers = [
            (
                _Batcher(s.n_surface, cfg.batch_surface, gen),
                _Batcher(s.n_volume, cfg.batch_volume, gen),
            )
            for s in samplesets
        ]
        order = torch.cat([torch.randperm(len(samplesets), generator=gen) for _ in range(n_steps)])
        for pick in order.tolist():
            for g, base in zip(opt.param_groups, base_lrs):
                g["lr"] = _cosine_lr(base, done, horizon)
            done += 1
            sp, sn, vp, vs = tensors[pick]
            sb, vb = batchers[pick]
            si = sb.next_indices()
            vi = vb.next_indices()
            loss, parts = geometry_loss(
                planes_list[pick],
                decoder,
                sp[si] if si is not None else sp[:0],
                sn[si] if si is not None else sn[:0],
                vp[vi],
                vs[vi],
                weights=cfg.weights,
                delta=delta,
            )
            if not math.isfinite(parts["total"]):
                raise RuntimeError(f"joint fit diverged on block {pick}: {parts}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()

    for p in decoder.parameters():
        p.requires_grad_(False)
    decoder.eval()
    return decoder, [TriPlane(p.detach()) for p in planes_list]


def sdf_grid(
    planes: torch.Tensor,
    decoder: SdfDecoder,
    resolution: int,
    *,
    chunk: int = 65536,
) -> np.ndarray:
    """Evaluate the field on a regular (R, R, R) node grid over [-1, 1]^3.

    Output is indexed [ix, iy, iz], ready for marching cubes.
    """
    if resolution < 2:
        raise ValueError("grid resolution must be at least 2")
    axis = torch.linspace(-1.0, 1.0, resolution, dtype=planes.dtype)
    gx, gy, gz = torch.meshgrid(axis, axis, axis, indexing="ij")
    pts = torch.stack([gx, gy, gz], dim=-1).reshape(-1, 3)
    out = torch.empty(len(pts), dtype=planes.dtype)
    with torch.no_grad():
        for start in range(0, len(pts), chunk):
            stop = min(start + chunk, len(pts))
            out[start:stop] = phi(planes, decoder, pts[start:stop])
    return out.reshape(resolution, resolution, resolution).numpy()


# ---------------------------------------------------------------------------
# persistence


def save_triplane(triplane: TriPlane, path: str | Path) -> None:
    with open(path, "wb") as f:
        artifacts.write_header(f, artifacts.MAGIC_TRIPLANE, TRIPLANE_VERSION)
        artifacts.write_json_block(
            f,
            {
                "resolution": triplane.resolution,
                "channels": triplane.channels,
                "planes": list(PLANE_NAMES),
            },
        )
        artifacts.write_array(f, triplane.data.detach().cpu().numpy().astype(np.float32))


def load_triplane(path: str | Path, *, dtype: torch.dtype = torch.float32) -> TriPlane:
    with open(path, "rb") as f:
        version = artifacts.read_header(f, artifacts.MAGIC_TRIPLANE, path)
        artifacts.check_version(version, TRIPLANE_VERSION, path)
        meta = artifacts.read_json_block(f, path)
        data = artifacts.read_array(f, path)
    if list(meta.get("planes", [])) != list(PLANE_NAMES):
        raise artifacts.ArtifactError(f"{path}: unexpected plane order {meta.get('planes')}")
    if data.shape != (3, meta["channels"], meta["resolution"], meta["resolution"]):
        raise artifacts.ArtifactError(f"{path}: payload shape {data.shape} disagrees with header")
    return TriPlane(torch.from_numpy(data).to(dtype))


def save_decoder(decoder: SdfDecoder, path: str | Path) -> None:
    with open(path, "wb") as f:
        artifacts.write_header(f, artifacts.MAGIC_DECODER, DECODER_VERSION)
        artifacts.write_json_block(
            f,
            {
                "channels": decoder.channels,
                "width": decoder.width,
                "hidden_layers": decoder.hidden_layers,
            },
        )
        state = decoder.state_dict()
        artifacts.write_json_block(f, {"keys": list(state.keys())})
        for v in state.values():
            artifacts.write_array(f, v.detach().cpu().numpy().astype(np.float32))


def load_decoder(path: str | Path, *, dtype: torch.dtype = torch.float32) -> SdfDecoder:
    with open(path, "rb") as f:
        version = artifacts.read_header(f, artifacts.MAGIC_DECODER, path)
        artifacts.check_version(version, DECODER_VERSION, path)
        meta = artifacts.read_json_block(f, path)
        keys = artifacts.read_json_block(f, path)["keys"]
        arrays = [artifacts.read_array(f, path) for _ in keys]
    decoder = SdfDecoder(meta["channels"], meta["width"], meta["hidden_layers"]).to(dtype)
    state = {k: torch.from_numpy(a).to(dtype) for k, a in zip(keys, arrays)}
    decoder.load_state_dict(state)
    for p in decoder.parameters():
        p.requires_grad_(False)
    decoder.eval()
    return decoder
