"""Run configuration: one JSON document, validated, with env overrides.

A single resolved configuration drives the CLI and the HTTP service and is
embedded verbatim in every scene manifest, so a build can be reproduced from
the manifest alone.  Overrides follow BLOCKFORGE_<SECTION>_<FIELD> naming
(``BLOCKFORGE_DIFFUSION_TRAIN_STEPS=400``), parsed as JSON when possible.
"""

from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

from .extrapolation import ExtrapolationConfig
from .latent_vae import VaeConfig, VaeTrainConfig
from .mesh_geometry import ROOM_CATEGORIES, SceneRecipe
from .triplane_field import FitConfig

ENV_PREFIX = "BLOCKFORGE_"


@dataclass
class BlocksConfig:
    """Block geometry shared by training crops and scene grids."""

    side: float = 3.2
    overlap: float = 0.5
    origin_z: float = -0.3  # scene grids start at the floor slab's bottom

    def __post_init__(self):
        if self.side <= 0:
            raise ValueError(f"blocks.side must be positive, got {self.side}")
        if not 0.0 <= self.overlap < 1.0:
            raise ValueError(f"blocks.overlap must be in [0, 1), got {self.overlap}")


@dataclass
class DataConfig:
    """Synthetic training corpus: scenes to generate and blocks to crop."""

    seed: int = 0
    train_blocks: int = 256
    holdout_blocks: int = 16
    blocks_per_scene: int = 16
    joint_blocks: int = 8  # decoder-training subset for the first fit phase
    n_surface: int = 4096
    n_volume: int = 4096
    recipe: SceneRecipe = field(default_factory=SceneRecipe)

    def __post_init__(self):
        for name in ("train_blocks", "holdout_blocks", "blocks_per_scene",
                     "joint_blocks", "n_surface", "n_volume"):
            value = getattr(self, name)
            if name == "holdout_blocks":
                if value < 0:
                    raise ValueError(f"data.{name} must be >= 0, got {value}")
            elif value <= 0:
                raise ValueError(f"data.{name} must be positive, got {value}")
        if self.joint_blocks > self.train_blocks:
            raise ValueError(
                f"data.joint_blocks ({self.joint_blocks}) cannot exceed "
                f"data.train_blocks ({self.train_blocks})"
            )


@dataclass
class DiffusionConfig:
    """Schedule, denoiser width, and training budget."""

    steps: int = 200  # T
    beta_min: float = 1e-4
    beta_max: float = 0.02
    train_steps: int = 20000  # K
    batch: int = 8
    lr: float = 2e-4
    conv_width: int = 64
    attn_width: int = 128
    attn_heads: int = 4
    blocks: int = 6
    down_stages: int = 1
    time_dim: int = 64

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"diffusion.steps must be >= 1, got {self.steps}")
        if not 0.0 < self.beta_min <= self.beta_max < 1.0:
            raise ValueError(
                f"diffusion betas must satisfy 0 < beta_min <= beta_max < 1, "
                f"got ({self.beta_min}, {self.beta_max})"
            )
        if self.train_steps < 1 or self.batch < 1:
            raise ValueError("diffusion.train_steps and diffusion.batch must be >= 1")


@dataclass
class BuildConfig:
    """Scene assembly settings not owned by another module's config."""

    mesh_resolution: int = 48
    seam_samples: int = 4096
    seam_threshold_cells: float = 1.0
    registration: bool = True

    def __post_init__(self):
        if self.mesh_resolution < 2:
            raise ValueError(
                f"build.mesh_resolution must be >= 2, got {self.mesh_resolution}"
            )
        if self.seam_samples < 1:
            raise ValueError(f"build.seam_samples must be >= 1, got {self.seam_samples}")
        if self.seam_threshold_cells <= 0:
            raise ValueError(
                f"build.seam_threshold_cells must be positive, got {self.seam_threshold_cells}"
            )


@dataclass
class PipelineConfig:
    """Everything a run needs, cross-validated across module boundaries."""

    artifact_dir: str = "workspace"
    seed: int = 0
    workers: int = field(default_factory=lambda: os.cpu_count() or 1)
    categories: tuple[str, ...] = ROOM_CATEGORIES
    blocks: BlocksConfig = field(default_factory=BlocksConfig)
    data: DataConfig = field(default_factory=DataConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)
    vae_train: VaeTrainConfig = field(default_factory=VaeTrainConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    extrapolation: ExtrapolationConfig = field(default_factory=ExtrapolationConfig)
    build: BuildConfig = field(default_factory=BuildConfig)

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")
        if not self.categories:
            raise ValueError("categories must not be empty")
        if self.vae.plane_resolution != self.fit.resolution:
            raise ValueError(
                f"vae.plane_resolution ({self.vae.plane_resolution}) must equal "
                f"fit.resolution ({self.fit.resolution}): the autoencoder consumes "
                "the fitted tri-planes directly"
            )
        if self.vae.plane_channels != self.fit.channels:
            raise ValueError(
                f"vae.plane_channels ({self.vae.plane_channels}) must equal "
                f"fit.channels ({self.fit.channels})"
            )
        if self.extrapolation.window > self.diffusion.steps:
            raise ValueError(
                f"extrapolation.window ({self.extrapolation.window}) cannot exceed "
                f"diffusion.steps ({self.diffusion.steps}): a resampling window is "
                "a span of reverse-diffusion steps"
            )
        cells = self.blocks.overlap * self.vae.latent_resolution
        if abs(cells - round(cells)) > 1e-9:
            raise ValueError(
                f"blocks.overlap ({self.blocks.overlap}) times vae.latent_resolution "
                f"({self.vae.latent_resolution}) must be a whole number of latent "
                f"cells, got {cells}; synchronization copies whole cells only"
            )

    @property
    def latent_resolution(self) -> int:
        return self.vae.latent_resolution

    @property
    def latent_channels(self) -> int:
        return self.vae.latent_channels


# ---------------------------------------------------------------------------
# dict <-> dataclass plumbing


def _field_types(cls) -> dict[str, type]:
    """Field name -> resolved annotation (modules use deferred annotations)."""
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def _tuplify(value, annotation):
    origin = typing.get_origin(annotation)
    if origin is tuple and isinstance(value, (list, tuple)):
        args = typing.get_args(annotation)
        inner = args[0] if args else None
        return tuple(_tuplify(v, inner) for v in value)
    return value


def _build_dataclass(cls, raw: dict, path: str):
    if not isinstance(raw, dict):
        raise ValueError(
            f"config section {path or cls.__name__} must be an object, got {type(raw).__name__}"
        )
    types = _field_types(cls)
    unknown = sorted(set(raw) - set(types))
    if unknown:
        where = f"{path}." if path else ""
        raise ValueError(
            f"unknown config key {where}{unknown[0]}; known keys: {', '.join(sorted(types))}"
        )
    kwargs = {}
    for name, value in raw.items():
        sub = f"{path}.{name}" if path else name
        ftype = types[name]
        if is_dataclass(ftype) and isinstance(value, dict):
            kwargs[name] = _build_dataclass(ftype, value, sub)
        else:
            kwargs[name] = _tuplify(value, ftype)
    return cls(**kwargs)


def config_from_dict(raw: dict) -> PipelineConfig:
    """Build and validate a PipelineConfig from plain JSON data."""
    return _build_dataclass(PipelineConfig, raw, "")


def config_to_dict(cfg: PipelineConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_to_json(cfg: PipelineConfig) -> str:
    """Canonical serialization: stable key order, trailing newline."""
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# environment overrides


def _env_overrides(environ) -> list[tuple[str, str]]:
    out = []
    for key in sorted(environ):
        if key.startswith(ENV_PREFIX) and key != ENV_PREFIX.rstrip("_"):
            out.append((key, environ[key]))
    return out


def _parse_env_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_env_overrides(raw: dict, environ=os.environ) -> dict:
    """Overlay BLOCKFORGE_* variables onto the raw config dict.

    The part after the prefix names either a top-level field or a
    section + field pair; every split point is tried, and the variable must
    resolve to exactly one existing location.
    """
    top = _field_types(PipelineConfig)
    for key, text in _env_overrides(environ):
        spec = key[len(ENV_PREFIX):].lower()
        targets = []
        if spec in top and not is_dataclass(top[spec]):
            targets.append((spec, None))
        for i in range(1, len(spec)):
            if spec[i] != "_":
                continue
            section, name = spec[:i], spec[i + 1:]
            if section in top and is_dataclass(top[section]):
                if name in _field_types(top[section]):
                    targets.append((section, name))
        if not targets:
            raise ValueError(
                f"{key} does not name a config field; expected "
                f"{ENV_PREFIX}<FIELD> or {ENV_PREFIX}<SECTION>_<FIELD>"
            )
        if len(targets) > 1:
            spots = ", ".join(s if n is None else f"{s}.{n}" for s, n in targets)
            raise ValueError(f"{key} is ambiguous between {spots}")
        section, name = targets[0]
        value = _parse_env_value(text)
        if name is None:
            raw[section] = value
        else:
            raw.setdefault(section, {})
            if not isinstance(raw[section], dict):
                raise ValueError(f"{key} overrides a field inside non-object section {section!r}")
            raw[section][name] = value
    return raw


def load_config(path: str | Path, environ=os.environ) -> PipelineConfig:
    """Read a JSON config file, apply env overrides, validate."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ValueError(f"config file not found: {path}")
    except json.JSONDecodeError as err:
        raise ValueError(f"{path} is not valid JSON: {err}")
    if not isinstance(raw, dict):
        raise ValueError(f"{path} must contain a JSON object")
    raw = apply_env_overrides(raw, environ)
    return config_from_dict(raw)
