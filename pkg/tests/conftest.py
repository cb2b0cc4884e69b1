"""Shared fixtures: a micro workspace with every pipeline stage trained.

The models are far too small to generate good geometry; the point is that
every stage runs end to end in seconds so the pipeline, CLI, and service
contracts can be tested against real artifacts.
"""

import shutil
from pathlib import Path

import pytest

from blockforge import pipeline
from blockforge.config import PipelineConfig, config_from_dict
from blockforge.latent_diffusion import LayoutBox, LayoutDocument

MICRO_CONFIG = {
    "seed": 0,
    "workers": 1,
    "blocks": {"side": 3.2, "overlap": 0.5, "origin_z": -0.3},
    "data": {
        "seed": 0,
        "train_blocks": 6,
        "holdout_blocks": 2,
        "blocks_per_scene": 4,
        "joint_blocks": 2,
        "n_surface": 256,
        "n_volume": 256,
    },
    "fit": {
        "resolution": 8,
        "channels": 4,
        "ladder": [8],
        "steps": [30],
        "batch_surface": 256,
        "batch_volume": 256,
        "decoder_width": 24,
        "decoder_layers": 2,
        "sphere_pretrain_steps": 30,
    },
    "vae": {
        "plane_resolution": 8,
        "plane_channels": 4,
        "latent_resolution": 4,
        "latent_channels": 2,
        "conv_width": 12,
        "attn_width": 12,
        "attn_heads": 2,
        "attn_layers": 1,
    },
    "vae_train": {"steps": 30, "surface_batch": 128, "volume_batch": 128},
    "diffusion": {
        "steps": 20,
        "train_steps": 40,
        "batch": 2,
        "conv_width": 12,
        "attn_width": 12,
        "attn_heads": 2,
        "blocks": 2,
        "down_stages": 1,
        "time_dim": 16,
    },
    "extrapolation": {"window": 20, "repeats": 1},
    "build": {"mesh_resolution": 12, "seam_samples": 128, "seam_threshold_cells": 1e6},
}


def micro_config(artifact_dir) -> PipelineConfig:
    payload = {**MICRO_CONFIG, "artifact_dir": str(artifact_dir)}
    return config_from_dict(payload)


@pytest.fixture(scope="session")
def micro_ws(tmp_path_factory) -> PipelineConfig:
    """Workspace with corpus, tri-planes, VAE, and the unconditional denoiser."""
    cfg = micro_config(tmp_path_factory.mktemp("micro_ws"))
    pipeline.generate_data(cfg)
    pipeline.fit_triplanes(cfg)
    pipeline.train_autoencoder(cfg)
    pipeline.train_generator(cfg, conditional=False)
    return cfg


@pytest.fixture(scope="session")
def micro_scene(micro_ws):
    """A built 2x1x2-block scene; mutate only through scene_copy."""
    return pipeline.assemble_scene(micro_ws, (4.8, 3.2, 3.3), "base", seed=3)


@pytest.fixture()
def scene_copy(micro_scene, tmp_path):
    """Fresh copy of the base scene for tests that mutate it."""
    dst = tmp_path / "scene"
    shutil.copytree(micro_scene.parent, dst)
    return dst / "manifest.json"


def write_floor_layouts(grid, categories, out_dir) -> Path:
    """One full-footprint floor box per planned block, as layout JSON files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for coord in sorted(grid.blocks):
        block = grid.blocks[coord]
        lo = block.origin_array[:2]
        doc = LayoutDocument(
            block_index=coord,
            categories=tuple(categories),
            boxes=(
                LayoutBox(
                    "floor",
                    (float(lo[0]), float(lo[1])),
                    (float(lo[0]) + block.side, float(lo[1]) + block.side),
                ),
            ),
            polylines=(),
        )
        (out_dir / f"{block.id.replace(',', '_')}.json").write_text(doc.to_json())
    return out_dir


@pytest.fixture(scope="session")
def micro_cond_ws(micro_ws, tmp_path_factory) -> PipelineConfig:
    """Copy of micro_ws plus a layout-conditioned denoiser.

    A copy so that micro_ws keeps exactly one trained bundle; tests assert on
    the missing-artifact message for the other one.
    """
    root = tmp_path_factory.mktemp("micro_cond") / "ws"
    shutil.copytree(micro_ws.artifact_dir, root)
    cfg = micro_config(root)
    pipeline.train_generator(cfg, conditional=True)
    return cfg
