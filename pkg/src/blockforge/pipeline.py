"""Pipeline stages and the on-disk workspace shared by the CLI and service.

Layout under ``cfg.artifact_dir``:

    config.resolved.json
    data/index.json               corpus index (names, splits, origins)
    data/samples/<name>.bfss      supervision points per block
    data/layouts/<name>.json      layout document per block
    fit/theta.bfdc                shared SDF decoder, frozen after phase one
    fit/proxy.bftp                sphere-pretrained proxy planes (fit init)
    fit/triplanes/<name>.bftp     fitted raw tri-planes
    vae/model.bfva                latent autoencoder
    vae/latents/<name>.bflt       posterior-mean latents, all splits
    diffusion/uncond.bfdm         unconditional denoiser bundle
    diffusion/layout.bfdm         layout-conditioned denoiser bundle
    samples/                      `sample` verb outputs
    scenes/<name>/                one built scene: manifest + blocks

Every stage derives its randomness from the config seed and block names, so
reruns and resumed runs are byte-identical; the scene manifest embeds the
resolved config, which makes a scene reproducible from the manifest alone.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .config import PipelineConfig, config_from_dict, config_to_dict
from .latent_diffusion import (
    DenoiserConfig,
    DiffusionBundle,
    DiffusionTrainConfig,
    LayoutBox,
    LayoutDocument,
    LayoutMap,
    build_schedule,
    load_diffusion,
    sample,
    save_diffusion,
    train_denoiser,
)
from .latent_vae import (
    LatentTriPlane,
    VaeExample,
    encode,
    load_latent,
    load_vae,
    save_latent,
    save_vae,
    train_vae,
)
from .mesh_geometry import (
    Block,
    TriangleMesh,
    crop_block,
    generate_scene,
    load_obj,
    load_samples,
    sample_training_points,
    save_obj,
    save_samples,
)
from .metrics import MetricReport, PointCloud, chamfer, generation_metrics
from .scene_builder import (
    GridCoord,
    SceneBuildConfig,
    SceneGrid,
    SceneModels,
    _region_populated,
    _run_jobs,
    build_scene,
    default_warp_levels,
    expand_block_latent,
    merge_blocks,
    mesh_from_latent,
    overlap_box,
    plan_grid,
    register_seams,
    seam_error,
)
from .seeds import derive_seed
from .triplane_field import (
    TriPlane,
    fit_block,
    fit_fleet_joint,
    load_decoder,
    load_triplane,
    pretrain_sphere_decoder,
    save_decoder,
    save_triplane,
)


class BlockPopulatedError(ValueError):
    """Raised when a mutation targets a block that already holds content."""


def _stem(block_id: str) -> str:
    """Filesystem-friendly form of a block id: '1,0,0' -> '1_0_0'."""
    return block_id.replace(",", "_")


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


class Workspace:
    """Path arithmetic for one artifact directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    @property
    def data_index(self) -> Path:
        return self.root / "data" / "index.json"

    def samples_path(self, name: str) -> Path:
        return self.root / "data" / "samples" / f"{name}.bfss"

    def data_layout_path(self, name: str) -> Path:
        return self.root / "data" / "layouts" / f"{name}.json"

    @property
    def theta_path(self) -> Path:
        return self.root / "fit" / "theta.bfdc"

    @property
    def proxy_path(self) -> Path:
        return self.root / "fit" / "proxy.bftp"

    def triplane_path(self, name: str) -> Path:
        return self.root / "fit" / "triplanes" / f"{name}.bftp"

    @property
    def vae_path(self) -> Path:
        return self.root / "vae" / "model.bfva"

    def latent_path(self, name: str) -> Path:
        return self.root / "vae" / "latents" / f"{name}.bflt"

    def diffusion_path(self, conditional: bool) -> Path:
        return self.root / "diffusion" / ("layout.bfdm" if conditional else "uncond.bfdm")

    def diffusion_history_path(self, conditional: bool) -> Path:
        return self.root / "diffusion" / (
            "layout_history.json" if conditional else "uncond_history.json"
        )

    @property
    def samples_dir(self) -> Path:
        return self.root / "samples"

    def scene_dir(self, name: str) -> Path:
        return self.root / "scenes" / name

    def require(self, path: Path, produced_by: str) -> Path:
        if not path.exists():
            raise ValueError(
                f"missing artifact {path}; run `blockforge {produced_by}` first"
            )
        return path


def _load_index(ws: Workspace) -> dict:
    ws.require(ws.data_index, "gen-data")
    return json.loads(ws.data_index.read_text())


def _index_blocks(index: dict, split: str | None = None) -> list[dict]:
    rows = index["blocks"]
    if split is None:
        return rows
    return [row for row in rows if row["split"] == split]


def _block_of(row: dict, side: float) -> Block:
    return Block(tuple(row["index"]), tuple(row["origin"]), side)


# ---------------------------------------------------------------------------
# stage: gen-data


def generate_data(cfg: PipelineConfig, out: str | Path | None = None) -> dict:
    """Emit the synthetic corpus: blocks, supervision samples, layouts."""
    ws = Workspace(out or cfg.artifact_dir)
    (ws.root / "data" / "samples").mkdir(parents=True, exist_ok=True)
    (ws.root / "data" / "layouts").mkdir(parents=True, exist_ok=True)

    data = cfg.data
    recipe = data.recipe
    lo = np.asarray(recipe.extent_min[:2], dtype=np.float64)
    hi = np.asarray(recipe.extent_max[:2], dtype=np.float64)
    span = hi - lo - cfg.blocks.side
    if np.any(span < -1e-9):
        raise ValueError(
            f"blocks.side ({cfg.blocks.side}) exceeds the scene extent "
            f"{tuple(recipe.extent_max[:2])}; shrink the side or grow the recipe"
        )
    span = np.maximum(span, 0.0)

    total = data.train_blocks + data.holdout_blocks
    rows = []
    for i in range(total):
        scene_seed = derive_seed(data.seed, "scene", i // data.blocks_per_scene)
        scene = generate_scene(scene_seed, recipe)
        rng = np.random.Generator(np.random.PCG64(derive_seed(data.seed, "crop", i)))
        xy = lo + rng.uniform(0.0, 1.0, size=2) * span
        origin = (float(xy[0]), float(xy[1]), cfg.blocks.origin_z)
        name = f"b{i:04d}"
        block = Block((i, 0, 0), origin, cfg.blocks.side)
        cropped = crop_block(scene, block)
        samples = sample_training_points(
            cropped,
            0 if cropped.empty else data.n_surface,
            data.n_volume,
            derive_seed(data.seed, "points", i),
        )
        save_samples(samples, ws.samples_path(name))
        doc = LayoutDocument(
            block_index=(i, 0, 0),
            categories=tuple(cfg.categories),
            boxes=tuple(
                LayoutBox(label, (float(b_lo[0]), float(b_lo[1])), (float(b_hi[0]), float(b_hi[1])))
                for label, b_lo, b_hi in cropped.layout_objects()
            ),
            polylines=(),
        )
        ws.data_layout_path(name).write_text(doc.to_json())
        rows.append(
            {
                "name": name,
                "split": "train" if i < data.train_blocks else "holdout",
                "index": [i, 0, 0],
                "origin": list(origin),
                "scene_seed": scene_seed,
                "empty": cropped.empty,
            }
        )
    index = {
        "side": cfg.blocks.side,
        "categories": list(cfg.categories),
        "blocks": rows,
    }
    _write_json(ws.data_index, index)
    return index


# ---------------------------------------------------------------------------
# stage: fit (two-phase, resumable)


def fit_triplanes(cfg: PipelineConfig) -> dict:
    """Phase one trains the shared decoder jointly on a block subset; phase
    two fits every block against the frozen decoder, skipping existing files."""
    ws = Workspace(cfg.artifact_dir)
    index = _load_index(ws)
    (ws.root / "fit" / "triplanes").mkdir(parents=True, exist_ok=True)

    joint_seed = derive_seed(cfg.seed, "joint")
    if ws.theta_path.exists() and ws.proxy_path.exists():
        decoder = load_decoder(ws.theta_path)
        proxy = load_triplane(ws.proxy_path).data
    else:
        subset = [
            row for row in _index_blocks(index, "train") if not row["empty"]
        ][: cfg.data.joint_blocks]
        if not subset:
            raise ValueError("decoder training needs at least one non-empty train block")
        samplesets = [load_samples(ws.samples_path(row["name"])) for row in subset]
        decoder, joint_planes = fit_fleet_joint(samplesets, cfg.fit, joint_seed)
        # Pretraining is deterministic in (cfg, seed), so this reproduces the
        # proxy planes the joint phase started from; the fleet phase inits
        # every remaining block from them.
        _, proxy = pretrain_sphere_decoder(cfg.fit, joint_seed)
        save_decoder(decoder, ws.theta_path)
        save_triplane(TriPlane(proxy), ws.proxy_path)
        for row, planes in zip(subset, joint_planes):
            save_triplane(planes, ws.triplane_path(row["name"]))

    for p in decoder.parameters():
        p.requires_grad_(False)

    pending = [
        row["name"] for row in index["blocks"]
        if not ws.triplane_path(row["name"]).exists()
    ]

    def fit_one(name: str) -> Path:
        samples = load_samples(ws.samples_path(name))
        result = fit_block(
            samples, cfg.fit, decoder,
            train_decoder=False,
            seed=derive_seed(cfg.seed, "fit", name),
            init_planes=proxy,
        )
        save_triplane(result.triplane, ws.triplane_path(name))
        return ws.triplane_path(name)

    _run_jobs(pending, fit_one, cfg.workers)
    return {"fitted": len(pending), "total": len(index["blocks"])}


# ---------------------------------------------------------------------------
# stage: train-vae


def train_autoencoder(cfg: PipelineConfig) -> dict:
    """Train the latent autoencoder on the train split, then store the
    posterior-mean latent of every block (holdout included)."""
    ws = Workspace(cfg.artifact_dir)
    index = _load_index(ws)
    decoder = load_decoder(ws.require(ws.theta_path, "fit"))
    for p in decoder.parameters():
        p.requires_grad_(False)
    (ws.root / "vae" / "latents").mkdir(parents=True, exist_ok=True)

    examples = []
    for row in _index_blocks(index, "train"):
        name = row["name"]
        examples.append(
            VaeExample(
                name,
                load_triplane(ws.require(ws.triplane_path(name), "fit")),
                load_samples(ws.samples_path(name)),
            )
        )
    model, history = train_vae(
        examples, decoder, cfg.vae, cfg.vae_train, seed=derive_seed(cfg.seed, "vae")
    )
    save_vae(model, ws.vae_path)

    for row in index["blocks"]:
        name = row["name"]
        triplane = load_triplane(ws.require(ws.triplane_path(name), "fit"))
        with torch.no_grad():
            dist = encode(model, triplane)
        save_latent(LatentTriPlane(dist.mean.detach()), ws.latent_path(name))
    return {"examples": len(examples), "final_loss": history[-1] if history else None}


# ---------------------------------------------------------------------------
# stage: train-diff


def train_generator(cfg: PipelineConfig, conditional: bool) -> dict:
    """Train the denoiser (optionally layout-conditioned) on train latents."""
    ws = Workspace(cfg.artifact_dir)
    index = _load_index(ws)
    ws.diffusion_path(conditional).parent.mkdir(parents=True, exist_ok=True)

    latents = []
    layouts = [] if conditional else None
    n = cfg.latent_resolution
    for row in _index_blocks(index, "train"):
        name = row["name"]
        latents.append(load_latent(ws.require(ws.latent_path(name), "train-vae")))
        if conditional:
            doc = LayoutDocument.from_json(ws.data_layout_path(name).read_text())
            block = _block_of(row, cfg.blocks.side)
            layouts.append(doc.rasterize(block, n))

    den_cfg = DenoiserConfig(
        latent_resolution=n,
        latent_channels=cfg.latent_channels,
        layout_channels=len(cfg.categories) if conditional else 0,
        conv_width=cfg.diffusion.conv_width,
        attn_width=cfg.diffusion.attn_width,
        attn_heads=cfg.diffusion.attn_heads,
        blocks=cfg.diffusion.blocks,
        down_stages=cfg.diffusion.down_stages,
        time_dim=cfg.diffusion.time_dim,
    )
    sched = build_schedule(cfg.diffusion.steps, cfg.diffusion.beta_min, cfg.diffusion.beta_max)
    tag = "layout" if conditional else "uncond"
    net, stats, history = train_denoiser(
        latents,
        layouts,
        den_cfg,
        sched,
        DiffusionTrainConfig(cfg.diffusion.train_steps, cfg.diffusion.batch, cfg.diffusion.lr),
        seed=derive_seed(cfg.seed, "diffusion", tag),
    )
    bundle = DiffusionBundle(
        net, sched, stats,
        categories=cfg.categories if conditional else (),
        beta_min=cfg.diffusion.beta_min,
        beta_max=cfg.diffusion.beta_max,
    )
    save_diffusion(bundle, ws.diffusion_path(conditional))
    _write_json(
        ws.diffusion_history_path(conditional),
        {"loss": history, "steps": cfg.diffusion.train_steps},
    )
    return {"latents": len(latents), "final_loss": history[-1] if history else None}


# ---------------------------------------------------------------------------
# model loading


def load_models(cfg: PipelineConfig, conditional: bool) -> SceneModels:
    ws = Workspace(cfg.artifact_dir)
    decoder = load_decoder(ws.require(ws.theta_path, "fit"))
    for p in decoder.parameters():
        p.requires_grad_(False)
    vae = load_vae(ws.require(ws.vae_path, "train-vae"))
    verb = "train-diff --layout" if conditional else "train-diff"
    bundle = load_diffusion(ws.require(ws.diffusion_path(conditional), verb))
    return SceneModels(decoder, vae, bundle)


# ---------------------------------------------------------------------------
# stage: sample


def sample_meshes(
    cfg: PipelineConfig,
    count: int,
    seed: int,
    layout_doc: LayoutDocument | None = None,
    out_dir: str | Path | None = None,
) -> list[Path]:
    """Draw block samples, decode, and mesh them into OBJ files."""
    conditional = layout_doc is not None
    models = load_models(cfg, conditional)
    ws = Workspace(cfg.artifact_dir)
    out = Path(out_dir) if out_dir is not None else ws.samples_dir
    out.mkdir(parents=True, exist_ok=True)

    block = Block((0, 0, 0), (0.0, 0.0, cfg.blocks.origin_z), cfg.blocks.side)
    layout = None
    if conditional:
        _check_categories(layout_doc.categories, models.diffusion.categories)
        layout = layout_doc.rasterize(block, cfg.latent_resolution)

    bundle = models.diffusion
    paths = []
    for k in range(count):
        gen = torch.Generator().manual_seed(derive_seed(seed, "sample", k))
        z = sample(bundle.net, bundle.sched, layout, gen, standardizer=bundle.standardizer)
        mesh = mesh_from_latent(z, models, block, cfg.build.mesh_resolution)
        path = out / f"sample_{k:04d}.obj"
        save_obj(mesh, path)
        paths.append(path)
    return paths


def _check_categories(given: tuple[str, ...], expected: tuple[str, ...]) -> None:
    if tuple(given) != tuple(expected):
        raise ValueError(
            f"layout categories {list(given)} do not match the trained model's "
            f"{list(expected)}"
        )


# ---------------------------------------------------------------------------
# scenes on disk


class SceneStore:
    """One built scene: manifest, per-block artifacts, and the update logic
    shared by the CLI and the HTTP service.

    Mutations rewrite the touched artifacts, advance the manifest revision,
    and keep ``merged.obj`` current.  The store itself is not thread-safe;
    the service serializes mutations through its single writer.
    """

    def __init__(self, root: str | Path, manifest: dict):
        self.root = Path(root)
        self.manifest = manifest
        self.grid = SceneGrid.from_json(json.dumps(manifest["grid"]))

    # -- persistence --------------------------------------------------------

    @classmethod
    def open(cls, root: str | Path) -> "SceneStore":
        root = Path(root)
        path = root / "manifest.json"
        if not path.exists():
            raise ValueError(f"no scene manifest at {path}")
        return cls(root, json.loads(path.read_text()))

    def commit(self) -> int:
        """Persist the current grid under the next revision.

        Builds a fresh manifest dict and swaps the reference once, so readers
        holding ``self.manifest`` always see a complete revision.
        """
        manifest = dict(self.manifest)
        manifest["revision"] = self.revision + 1
        manifest["grid"] = json.loads(self.grid.to_json())
        self.manifest = manifest
        _write_json(self.root / "manifest.json", manifest)
        return manifest["revision"]

    @property
    def revision(self) -> int:
        return int(self.manifest["revision"])

    @property
    def config(self) -> PipelineConfig:
        return config_from_dict(self.manifest["config"])

    @property
    def conditional(self) -> bool:
        return bool(self.manifest["conditional"])

    # -- per-block paths ----------------------------------------------------

    def coord_of(self, block_id: str) -> GridCoord:
        parts = block_id.split(",")
        if len(parts) != 3:
            raise KeyError(block_id)
        try:
            coord = tuple(int(v) for v in parts)
        except ValueError:
            raise KeyError(block_id)
        if coord not in self.grid.blocks:
            raise KeyError(block_id)
        return coord

    def latent_file(self, coord: GridCoord) -> Path:
        return self.root / "latents" / f"{_stem(self.grid.blocks[coord].id)}.bflt"

    def mesh_file(self, coord: GridCoord) -> Path:
        return self.root / "meshes" / f"{_stem(self.grid.blocks[coord].id)}.obj"

    def layout_file(self, coord: GridCoord) -> Path:
        return self.root / "layouts" / f"{_stem(self.grid.blocks[coord].id)}.json"

    @property
    def merged_file(self) -> Path:
        return self.root / "merged.obj"

    # -- layouts ------------------------------------------------------------

    def read_layout(self, coord: GridCoord) -> bytes | None:
        path = self.layout_file(coord)
        return path.read_bytes() if path.exists() else None

    def put_layout(self, coord: GridCoord, body: bytes) -> int:
        """Validate and store a layout document byte-for-byte."""
        try:
            doc = LayoutDocument.from_json(body.decode("utf-8"))
        except (KeyError, TypeError, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ValueError(f"invalid layout document: {exc}")
        block = self.grid.blocks[coord]
        if tuple(doc.block_index) != tuple(coord):
            raise ValueError(
                f"layout is for block {list(doc.block_index)}, not {list(coord)}"
            )
        _check_categories(doc.categories, tuple(self.manifest["categories"]))
        lo = block.origin_array[:2]
        hi = block.max_corner[:2]
        footprint = f"[{tuple(float(v) for v in lo)}, {tuple(float(v) for v in hi)}]"
        for box in doc.boxes:
            bmin, bmax = np.asarray(box.min_xy), np.asarray(box.max_xy)
            if np.any(bmax < bmin) or np.any(bmin < lo - 1e-9) or np.any(bmax > hi + 1e-9):
                raise ValueError(
                    f"box {box.label!r} [{box.min_xy}, {box.max_xy}] is outside "
                    f"block {block.id} footprint {footprint}"
                )
        for line in doc.polylines:
            pts = np.asarray(line.points, dtype=np.float64)
            if np.any(pts < lo - 1e-9) or np.any(pts > hi + 1e-9):
                raise ValueError(
                    f"polyline {line.label!r} leaves block {block.id} footprint"
                )
        self.layout_file(coord).parent.mkdir(parents=True, exist_ok=True)
        self.layout_file(coord).write_bytes(body)
        return self.commit()

    def _layout_map(self, coord: GridCoord, doc: LayoutDocument | None) -> LayoutMap | None:
        if not self.conditional:
            return None
        if doc is None:
            raw = self.read_layout(coord)
            if raw is None:
                raise ValueError(
                    f"block {self.grid.blocks[coord].id} needs a layout: the scene "
                    "uses the layout-conditioned model and none is stored"
                )
            doc = LayoutDocument.from_json(raw.decode("utf-8"))
        _check_categories(doc.categories, tuple(self.manifest["categories"]))
        n = int(self.manifest["grid"]["latent_resolution"])
        return doc.rasterize(self.grid.blocks[coord], n)

    # -- queries -------------------------------------------------------------

    def status(self, coord: GridCoord) -> str:
        return self.grid.records[coord].status

    def populated_neighbors(self, coord: GridCoord) -> tuple[GridCoord, ...]:
        return tuple(
            nb for nb in self.grid.neighbors(coord) if self.status(nb) != "empty"
        )

    def load_block_latents(self, coords) -> dict[GridCoord, LatentTriPlane]:
        return {c: load_latent(self.latent_file(c)) for c in coords}

    # -- mutations -----------------------------------------------------------

    def _commit_block(
        self,
        coord: GridCoord,
        latent: LatentTriPlane,
        mesh: TriangleMesh,
        rng_seed: int,
    ) -> None:
        self.latent_file(coord).parent.mkdir(parents=True, exist_ok=True)
        self.mesh_file(coord).parent.mkdir(parents=True, exist_ok=True)
        save_latent(latent, self.latent_file(coord))
        save_obj(mesh, self.mesh_file(coord))
        record = self.grid.records[coord]
        record.rng_seed = rng_seed
        record.latent_path = str(self.latent_file(coord).relative_to(self.root))
        record.mesh_path = str(self.mesh_file(coord).relative_to(self.root))
        self.grid.advance(coord, "latent")
        self.grid.advance(coord, "meshed")
        self._remerge()

    def _remerge(self) -> None:
        meshes = {
            c: load_obj(self.mesh_file(c))
            for c in sorted(self.grid.blocks)
            if self.status(c) == "meshed"
        }
        save_obj(merge_blocks(meshes, self.grid), self.merged_file)

    def generate_block(self, models: SceneModels, coord: GridCoord, seed: int) -> dict:
        """Sample one block independently (a seed block), mesh, commit."""
        if coord not in self.grid.blocks:
            raise KeyError(",".join(str(v) for v in coord))
        if self.status(coord) != "empty":
            raise BlockPopulatedError(
                f"block {self.grid.blocks[coord].id} is already populated"
            )
        cfg = self.config
        layout = self._layout_map(coord, None)
        bundle = models.diffusion
        block_seed = derive_seed(seed, "block", self.grid.blocks[coord].id)
        gen = torch.Generator().manual_seed(block_seed)
        latent = sample(bundle.net, bundle.sched, layout, gen, standardizer=bundle.standardizer)
        mesh = mesh_from_latent(latent, models, self.grid.blocks[coord], cfg.build.mesh_resolution)
        self._commit_block(coord, latent, mesh, block_seed)
        rev = self.commit()
        return {
            "block": self.grid.blocks[coord].id,
            "revision": rev,
            "mesh": str(self.mesh_file(coord).relative_to(self.root)),
        }

    def expand_block(
        self,
        models: SceneModels,
        coord: GridCoord,
        seed: int,
        layout_doc: LayoutDocument | None = None,
    ) -> dict:
        """One extrapolation into ``coord`` plus registration against the
        populated neighbors; grows the plan when the coord is new."""
        cfg = self.config
        self.grid.ensure_block(coord)
        if self.status(coord) != "empty":
            raise BlockPopulatedError(
                f"block {self.grid.blocks[coord].id} is already populated"
            )
        sources = tuple(sorted(self.populated_neighbors(coord)))
        if not sources:
            raise ValueError(
                f"block {self.grid.blocks[coord].id} has no populated neighbor "
                "to expand from"
            )
        layout = self._layout_map(coord, layout_doc)
        latents = self.load_block_latents(sources)
        latent = expand_block_latent(
            self.grid, latents, coord, sources, models, layout,
            cfg.extrapolation, seed,
        )
        mesh = mesh_from_latent(latent, models, self.grid.blocks[coord], cfg.build.mesh_resolution)

        levels = default_warp_levels(self.grid.side)
        threshold = cfg.build.seam_threshold_cells * self.grid.side / (cfg.build.mesh_resolution - 1)
        meshed = [c for c in sources if self.status(c) == "meshed"]
        neighbor_meshes = {c: load_obj(self.mesh_file(c)) for c in meshed}
        if cfg.build.registration:
            for p in meshed:
                region = overlap_box(self.grid.blocks[p], self.grid.blocks[coord])
                if _region_populated(neighbor_meshes[p], mesh, region):
                    result = register_seams(
                        neighbor_meshes[p], mesh, region, levels,
                        samples=cfg.build.seam_samples,
                        seed=derive_seed(seed, "register", coord, p, False),
                    )
                    mesh = result.mesh
        seams = []
        for p in meshed:
            region = overlap_box(self.grid.blocks[p], self.grid.blocks[coord])
            rms = seam_error(
                neighbor_meshes[p], mesh, region,
                samples=cfg.build.seam_samples,
                seed=derive_seed(seed, "seam", coord, p),
            )
            seams.append(
                {
                    "neighbor": self.grid.blocks[p].id,
                    "rms": rms,
                    "cd": None if rms is None else 2.0 * rms * rms,
                    "threshold": threshold,
                    "passed": rms is None or rms <= threshold,
                }
            )

        rng_seed = derive_seed(seed, "expand", self.grid.blocks[coord].id, len(sources), 0)
        self._commit_block(coord, latent, mesh, rng_seed)
        rev = self.commit()
        return {
            "block": self.grid.blocks[coord].id,
            "revision": rev,
            "mesh": str(self.mesh_file(coord).relative_to(self.root)),
            "seams": seams,
        }


# ---------------------------------------------------------------------------
# stage: build


def assemble_scene(
    cfg: PipelineConfig,
    extent: tuple[float, float, float],
    name: str,
    seed: int,
    layouts_dir: str | Path | None = None,
) -> Path:
    """Plan, build, register, merge, and persist one scene."""
    conditional = layouts_dir is not None
    models = load_models(cfg, conditional)
    ws = Workspace(cfg.artifact_dir)
    grid = plan_grid(
        extent, cfg.blocks.side, cfg.blocks.overlap,
        latent_resolution=cfg.latent_resolution,
        origin=(0.0, 0.0, cfg.blocks.origin_z),
    )

    layouts = None
    docs: dict[GridCoord, bytes] = {}
    if conditional:
        layouts = {}
        for coord in sorted(grid.blocks):
            path = Path(layouts_dir) / f"{_stem(grid.blocks[coord].id)}.json"
            if not path.exists():
                raise ValueError(
                    f"layout-conditioned build needs a layout for block "
                    f"{grid.blocks[coord].id}: missing {path}"
                )
            body = path.read_bytes()
            doc = LayoutDocument.from_json(body.decode("utf-8"))
            _check_categories(doc.categories, models.diffusion.categories)
            layouts[coord] = doc.rasterize(grid.blocks[coord], cfg.latent_resolution)
            docs[coord] = body

    scfg = SceneBuildConfig(
        extrapolation=cfg.extrapolation,
        mesh_resolution=cfg.build.mesh_resolution,
        warp_levels=None,
        seam_samples=cfg.build.seam_samples,
        seam_threshold_cells=cfg.build.seam_threshold_cells,
        registration=cfg.build.registration,
        workers=cfg.workers,
    )
    result = build_scene(grid, models, layouts, scfg, seed)

    root = ws.scene_dir(name)
    (root / "latents").mkdir(parents=True, exist_ok=True)
    (root / "meshes").mkdir(parents=True, exist_ok=True)
    for coord in sorted(result.grid.blocks):
        stem = _stem(result.grid.blocks[coord].id)
        save_latent(result.latents[coord], root / "latents" / f"{stem}.bflt")
        save_obj(result.meshes[coord], root / "meshes" / f"{stem}.obj")
        record = result.grid.records[coord]
        record.latent_path = f"latents/{stem}.bflt"
        record.mesh_path = f"meshes/{stem}.obj"
    save_obj(result.merged, root / "merged.obj")
    if conditional:
        (root / "layouts").mkdir(exist_ok=True)
        for coord, body in docs.items():
            (root / "layouts" / f"{_stem(result.grid.blocks[coord].id)}.json").write_bytes(body)

    manifest = {
        "name": name,
        "revision": 1,
        "seed": seed,
        "extent": list(extent),
        "conditional": conditional,
        "categories": list(cfg.categories),
        "config": config_to_dict(cfg),
        "grid": json.loads(result.grid.to_json()),
        "merged": "merged.obj",
        "seams": [
            {
                "block": result.grid.blocks[s.block].id,
                "neighbor": result.grid.blocks[s.neighbor].id,
                "rms": s.rms,
                "threshold": s.threshold,
                "passed": s.passed,
                "retried": s.retried,
            }
            for s in result.seams
        ],
    }
    _write_json(root / "manifest.json", manifest)
    return root / "manifest.json"


def rebuild_scene(manifest_path: str | Path, out_name: str) -> Path:
    """Re-run a build from the config embedded in a manifest."""
    manifest = json.loads(Path(manifest_path).read_text())
    cfg = config_from_dict(manifest["config"])
    layouts_dir = None
    if manifest["conditional"]:
        layouts_dir = Path(manifest_path).parent / "layouts"
    return assemble_scene(
        cfg,
        tuple(manifest["extent"]),
        out_name,
        int(manifest["seed"]),
        layouts_dir=layouts_dir,
    )


def expand_scene(
    cfg: PipelineConfig,
    manifest_path: str | Path,
    to: GridCoord,
    seed: int,
    layout_doc: LayoutDocument | None = None,
) -> dict:
    """CLI form of expansion: open the store, expand once, report."""
    store = SceneStore.open(Path(manifest_path).parent)
    models = load_models(cfg, store.conditional)
    return store.expand_block(models, to, seed, layout_doc)


# ---------------------------------------------------------------------------
# stage: eval


def evaluate_meshes(
    pred: str | Path,
    ref: str | Path,
    *,
    points: int = 4096,
    seed: int = 0,
) -> MetricReport:
    """Chamfer per name-matched pair plus set-level generation metrics."""
    pred_files = _obj_files(pred)
    ref_files = _obj_files(ref)
    pred_names = [p.name for p in pred_files]
    ref_names = [p.name for p in ref_files]
    if pred_names != ref_names:
        raise ValueError(
            f"prediction and reference sets differ: {sorted(set(pred_names) ^ set(ref_names))}"
        )

    metrics: dict[str, float] = {}
    pred_clouds, ref_clouds = [], []
    cds = []
    for p_path, r_path in zip(pred_files, ref_files):
        a = PointCloud.from_mesh(load_obj(p_path), points, seed)
        b = PointCloud.from_mesh(load_obj(r_path), points, seed)
        pred_clouds.append(a)
        ref_clouds.append(b)
        cd = chamfer(a, b)
        cds.append(cd)
        metrics[f"cd/{p_path.stem}"] = cd
    metrics["cd_mean"] = float(np.mean(cds))
    if len(pred_clouds) >= 2:
        metrics.update(generation_metrics(pred_clouds, ref_clouds))
    return MetricReport(metrics)


def _obj_files(path: str | Path) -> list[Path]:
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.obj"))
    elif path.exists():
        files = [path]
    else:
        raise ValueError(f"no meshes at {path}")
    if not files:
        raise ValueError(f"no .obj files under {path}")
    return files
