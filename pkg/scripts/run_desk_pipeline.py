#!/usr/bin/env python3
"""Run the block pipeline end to end.

Default mode reproduces the reference experiment at full scale: the 272-block
corpus, the tri-plane fleet, the latent autoencoder, both denoisers, a batch
of unconditional samples, and two 3x3 scene builds (unconditional, then
conditioned on full-floor layouts).  Every stage resumes from artifacts
already in the workspace, so an interrupted run picks up where it stopped.

--tiny instead drives every moving part through the core APIs in miniature
(one synthetic floor+cabinet block, ladder 8->16, 60-step budgets, a 1x2
scene) and asserts the expected behavior: losses descend, the sampled latent
meshes, persistence round-trips bit-for-bit, and a rebuild of the same scene
is bit-identical without mutating the caller's grid.  It finishes in well
under a minute on one core and is the pre-commit smoke drive.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

import numpy as np
import torch

from blockforge.config import (
    apply_env_overrides,
    config_from_dict,
    config_to_dict,
    config_to_json,
    load_config,
)
from blockforge.extrapolation import ExtrapolationConfig
from blockforge.latent_diffusion import (
    DenoiserConfig,
    DiffusionBundle,
    DiffusionTrainConfig,
    LayoutBox,
    LayoutDocument,
    build_schedule,
    load_diffusion,
    sample,
    save_diffusion,
    train_denoiser,
)
from blockforge.latent_vae import (
    LatentTriPlane,
    VaeConfig,
    VaeExample,
    VaeTrainConfig,
    encode,
    train_vae,
)
from blockforge.mesh_geometry import (
    AnalyticScene,
    Block,
    BoxPrimitive,
    SlabPrimitive,
    crop_block,
    sample_training_points,
)
from blockforge.pipeline import (
    Workspace,
    assemble_scene,
    fit_triplanes,
    generate_data,
    sample_meshes,
    train_autoencoder,
    train_generator,
)
from blockforge.scene_builder import (
    SceneBuildConfig,
    SceneModels,
    build_scene,
    mesh_from_latent,
    plan_grid,
)
from blockforge.triplane_field import (
    FitConfig,
    TriPlane,
    fit_block,
    pretrain_sphere_decoder,
)


def check(passed: bool, message: str) -> None:
    print(f"  {'ok' if passed else 'FAIL'}: {message}")
    if not passed:
        raise AssertionError(message)


def run_tiny() -> None:
    t0 = time.time()

    print("[block] synthetic floor+cabinet, supervision samples")
    scene = AnalyticScene(
        primitives=[
            SlabPrimitive("floor", z_min=-0.3, z_max=0.0),
            BoxPrimitive("cabinet", center=(1.6, 1.4, 0.45), half_extent=(0.55, 0.4, 0.45)),
        ],
        extent_min=(0.0, 0.0, -0.3),
        extent_max=(4.8, 3.2, 2.9),
    )
    block = Block((0, 0, 0), (0.0, 0.0, -0.3), 3.2)
    cropped = crop_block(scene, block)
    samples = sample_training_points(cropped, 1024, 1024, seed=0)

    print("[fit] shared decoder pretrain, tri-plane ladder 8->16")
    fit_cfg = FitConfig(
        resolution=16, channels=4, ladder=(8, 16), steps=(60, 60),
        batch_surface=512, batch_volume=512,
        decoder_width=32, decoder_layers=2, sphere_pretrain_steps=60,
    )
    decoder, proxy = pretrain_sphere_decoder(fit_cfg, seed=1)
    for p in decoder.parameters():
        p.requires_grad_(False)
    result = fit_block(samples, fit_cfg, decoder, seed=2, init_planes=proxy)
    start, end = result.loss_history[0], result.loss_history[-1]
    check(end < 0.1 * start, f"fit loss fell {start:.4f} -> {end:.4f} (<10% of start)")

    print("[vae] train on 8 jittered copies, encode to latents")
    vae_cfg = VaeConfig(
        plane_resolution=16, plane_channels=4, latent_resolution=4,
        latent_channels=2, conv_width=16, attn_width=16, attn_heads=2, attn_layers=1,
    )
    gen = torch.Generator().manual_seed(3)
    base = result.triplane.data
    examples = []
    for k in range(8):
        jitter = torch.randn(base.shape, generator=gen) * 0.02
        examples.append(VaeExample(f"jit{k}", TriPlane(base + jitter), samples))
    vae, vae_hist = train_vae(
        examples, decoder, vae_cfg,
        VaeTrainConfig(steps=60, surface_batch=256, volume_batch=256), seed=4,
    )
    check(
        np.mean(vae_hist[-10:]) < np.mean(vae_hist[:10]),
        f"VAE loss fell {np.mean(vae_hist[:10]):.4f} -> {np.mean(vae_hist[-10:]):.4f}",
    )
    with torch.no_grad():
        latents = [LatentTriPlane(encode(vae, ex.triplane).mean) for ex in examples]

    print("[diffusion] micro denoiser, n=4 c=2 T=40")
    sched = build_schedule(40)
    dn_cfg = DenoiserConfig(
        latent_resolution=4, latent_channels=2, layout_channels=0,
        conv_width=16, attn_width=16, attn_heads=2, blocks=2,
        down_stages=1, time_dim=16,
    )
    net, stdz, dn_hist = train_denoiser(
        latents, None, dn_cfg, sched,
        DiffusionTrainConfig(steps=150, batch=4, lr=2e-3), seed=5,
    )
    check(
        np.mean(dn_hist[-25:]) < np.mean(dn_hist[:25]),
        f"diffusion loss fell {np.mean(dn_hist[:25]):.4f} -> {np.mean(dn_hist[-25:]):.4f}",
    )

    print("[sample] unconditional latent -> SDF grid -> mesh")
    models = SceneModels(decoder=decoder, vae=vae, diffusion=DiffusionBundle(net, sched, stdz))
    z = sample(net, sched, None, torch.Generator().manual_seed(6), standardizer=stdz)
    mesh = mesh_from_latent(z, models, block, resolution=24)
    local = block.to_local(mesh.vertices)
    inside = int(np.sum(np.all(np.abs(local) <= 1.0 + 1e-6, axis=1)))
    check(inside > 100, f"sampled mesh has {inside} in-frame vertices (>100)")

    print("[conditional] layout-rastered denoiser trains and samples")
    doc = LayoutDocument(
        block_index=(0, 0, 0),
        categories=("floor", "cabinet"),
        boxes=(
            LayoutBox("floor", (0.0, 0.0), (3.2, 3.2)),
            LayoutBox("cabinet", (1.05, 1.0), (2.15, 1.8)),
        ),
    )
    layout = doc.rasterize(block, 4)
    cond_cfg = DenoiserConfig(
        latent_resolution=4, latent_channels=2, layout_channels=2,
        conv_width=16, attn_width=16, attn_heads=2, blocks=2,
        down_stages=1, time_dim=16,
    )
    cnet, cstd, _ = train_denoiser(
        latents, [layout] * len(latents), cond_cfg, sched,
        DiffusionTrainConfig(steps=60, batch=4, lr=2e-3), seed=7,
    )
    cz = sample(cnet, sched, layout, torch.Generator().manual_seed(8), standardizer=cstd)
    check(bool(torch.isfinite(cz.data).all()), "conditional sample is finite")

    print("[persistence] denoiser bundle round-trips")
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "uncond.bfdm"
        save_diffusion(DiffusionBundle(net, sched, stdz), path)
        loaded = load_diffusion(path)
    z2 = sample(
        loaded.net, loaded.sched, None,
        torch.Generator().manual_seed(6), standardizer=loaded.standardizer,
    )
    check(torch.equal(z.data, z2.data), "save/load reproduces the sample bit-for-bit")

    print("[scene] 1x2 grid at 50% overlap, build twice")
    grid = plan_grid((4.8, 3.2, 3.2), 3.2, 0.5, latent_resolution=4, origin=(0.0, 0.0, -0.3))
    check(len(grid.blocks) == 2, f"planned {len(grid.blocks)} blocks (expected 2)")
    build_cfg = SceneBuildConfig(
        extrapolation=ExtrapolationConfig(window=20, repeats=1),
        mesh_resolution=16, seam_samples=256, registration=True,
        seam_threshold_cells=4.0,  # micro model; the drive checks machinery, not quality
    )
    first = build_scene(grid, models, None, build_cfg, seed=9)
    check(first.merged.vertices.shape[0] > 0, f"merged mesh has {first.merged.vertices.shape[0]} vertices")
    check(len(first.seams) == 1, f"{len(first.seams)} seam record (expected 1)")
    second = build_scene(grid, models, None, build_cfg, seed=9)
    same_latents = all(
        torch.equal(first.latents[c].data, second.latents[c].data) for c in first.latents
    )
    same_mesh = np.array_equal(first.merged.vertices, second.merged.vertices) and np.array_equal(
        first.merged.faces, second.merged.faces
    )
    check(same_latents and same_mesh, "rerun of the same build is bit-identical")
    untouched = all(grid.records[c].status == "empty" for c in grid.records)
    check(untouched, "caller's grid was not mutated")

    print(f"tiny drive passed in {time.time() - t0:.1f}s")


def write_floor_layouts(cfg, extent, out_dir: Path) -> Path:
    """Full-footprint floor layouts for every block of the planned grid."""
    grid = plan_grid(
        extent, cfg.blocks.side, cfg.blocks.overlap,
        latent_resolution=cfg.vae.latent_resolution,
        origin=(0.0, 0.0, cfg.blocks.origin_z),
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    for coord, block in grid.blocks.items():
        lo = block.origin_array[:2]
        hi = lo + block.side
        doc = LayoutDocument(
            block_index=coord,
            categories=tuple(cfg.categories),
            boxes=(LayoutBox("floor", (float(lo[0]), float(lo[1])), (float(hi[0]), float(hi[1]))),),
        )
        stem = "_".join(str(v) for v in coord)
        (out_dir / f"{stem}.json").write_text(doc.to_json())
    return out_dir


def stage(label: str, fn) -> None:
    t0 = time.time()
    out = fn()
    note = f" {out}" if isinstance(out, dict) else ""
    print(f"[{label}] {time.time() - t0:.1f}s{note}")


def run_desk(args: argparse.Namespace) -> None:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = config_from_dict(apply_env_overrides({}, os.environ))
    if args.artifacts:
        raw = config_to_dict(cfg)
        raw["artifact_dir"] = args.artifacts
        cfg = config_from_dict(raw)
    extent = tuple(float(v) for v in args.scene_extent.split(","))
    if len(extent) != 3:
        raise SystemExit(f"--scene-extent needs X,Y,Z, got {args.scene_extent!r}")

    ws = Workspace(cfg.artifact_dir)
    ws.root.mkdir(parents=True, exist_ok=True)
    (ws.root / "config.resolved.json").write_text(config_to_json(cfg))

    stage("gen-data", lambda: generate_data(cfg))
    stage("fit", lambda: fit_triplanes(cfg))
    stage("train-vae", lambda: train_autoencoder(cfg))
    stage("train-diff", lambda: train_generator(cfg, conditional=False))
    stage("train-diff --layout", lambda: train_generator(cfg, conditional=True))
    stage("sample", lambda: sample_meshes(cfg, args.samples, seed=0))
    stage("build desk", lambda: assemble_scene(cfg, extent, "desk", seed=0))
    layouts = write_floor_layouts(cfg, extent, ws.root / "layouts_floor")
    stage(
        "build desk_cond",
        lambda: assemble_scene(cfg, extent, "desk_cond", seed=0, layouts_dir=layouts),
    )
    print(f"workspace ready at {ws.root}")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--tiny", action="store_true", help="run the miniature smoke drive")
    parser.add_argument("--config", help="pipeline config JSON (default: built-in values)")
    parser.add_argument("--artifacts", help="override the workspace directory")
    parser.add_argument("--samples", type=int, default=8, help="unconditional samples to draw")
    parser.add_argument(
        "--scene-extent", default="6.4,6.4,3.3",
        help="world extent X,Y,Z of the demo scenes (default: a 3x3 grid)",
    )
    args = parser.parse_args()
    if args.tiny:
        run_tiny()
    else:
        run_desk(args)


if __name__ == "__main__":
    main()
