"""Sliding-window scene assembly.

A scene is a grid of overlapping cubic blocks.  A strided subset with
pairwise-disjoint footprints (the seed blocks) is sampled independently and
in parallel; every other block is extrapolated from its already-populated
neighbors in dependency waves, one extrapolation pass per neighbor.  After
meshing, each new block is pulled onto its neighbors by a coarse-to-fine
deformation field fitted on overlap-region surface samples, and the
per-block meshes are merged into one scene mesh by Voronoi trimming.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from scipy.spatial import cKDTree

from .extrapolation import (
    ExtrapolationConfig,
    OverlapMask,
    compute_overlap_masks,
    extrapolate,
    synchronize,
)
from .latent_diffusion import DiffusionBundle, LayoutMap, sample
from .latent_vae import LatentTriPlane, VaeModel, decode
from .mesh_geometry import Block, TriangleMesh, marching_cubes
from .metrics import chamfer
from .seeds import derive_seed
from .triplane_field import SdfDecoder, sdf_grid

GridCoord = tuple[int, int, int]

BLOCK_STATUSES = ("empty", "latent", "meshed")


# ---------------------------------------------------------------------------
# grid planning


@dataclass
class BlockRecord:
    """Build state and artifact bookkeeping for one block."""

    status: str = "empty"
    rng_seed: int | None = None
    latent_path: str | None = None
    mesh_path: str | None = None

    def __post_init__(self):
        if self.status not in BLOCK_STATUSES:
            raise ValueError(f"unknown block status {self.status!r}")


@dataclass
class SceneGrid:
    """Planned block grid: geometry, seed subset, and per-block state."""

    blocks: dict[GridCoord, Block]
    side: float
    overlap: float
    latent_resolution: int
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    seeds: frozenset[GridCoord] = frozenset()
    records: dict[GridCoord, BlockRecord] = field(default_factory=dict)

    def __post_init__(self):
        if self.side <= 0:
            raise ValueError(f"block side must be positive, got {self.side}")
        if not (0.0 <= self.overlap < 1.0):
            raise ValueError(f"overlap ratio must be in [0, 1), got {self.overlap}")
        _check_cell_quantization(self.overlap, self.latent_resolution)
        if not self.seeds <= set(self.blocks):
            raise ValueError("seed set contains unknown block coordinates")
        for coord in self.blocks:
            self.records.setdefault(coord, BlockRecord())
        for a, b in _pairs(sorted(self.seeds)):
            if _footprints_overlap(self.blocks[a], self.blocks[b]):
                raise ValueError(f"seed blocks {a} and {b} overlap")

    @property
    def stride(self) -> float:
        return self.side * (1.0 - self.overlap)

    @property
    def extras(self) -> tuple[GridCoord, ...]:
        return tuple(c for c in sorted(self.blocks) if c not in self.seeds)

    def neighbors(self, coord: GridCoord) -> tuple[GridCoord, ...]:
        """Blocks overlapping ``coord`` along exactly one axis."""
        out = []
        block = self.blocks[coord]
        for other in sorted(self.blocks):
            if other == coord:
                continue
            deltas = [a - b for a, b in zip(other, coord)]
            if sum(d != 0 for d in deltas) != 1:
                continue
            if _footprints_overlap(block, self.blocks[other]):
                out.append(other)
        return tuple(out)

    def ensure_block(self, coord: GridCoord) -> Block:
        """Return the block at ``coord``, adding it to the plan if missing.

        Grown blocks are always extras: the seed set is fixed at planning
        time and extrapolation fills everything else.
        """
        coord = tuple(int(v) for v in coord)  # type: ignore[assignment]
        if coord not in self.blocks:
            origin = tuple(
                o + i * self.stride for o, i in zip(self.origin, coord)
            )
            self.blocks[coord] = Block(index=coord, origin=origin, side=self.side)
            self.records[coord] = BlockRecord()
        return self.blocks[coord]

    def advance(self, coord: GridCoord, status: str) -> None:
        """Move a block's status forward (never backward)."""
        record = self.records[coord]
        if BLOCK_STATUSES.index(status) < BLOCK_STATUSES.index(record.status):
            raise ValueError(
                f"block {coord} cannot go from {record.status!r} back to {status!r}"
            )
        record.status = status

    def to_json(self) -> str:
        rows = []
        for coord in sorted(self.blocks):
            record = self.records[coord]
            rows.append(
                {
                    "index": list(coord),
                    "seed": coord in self.seeds,
                    "status": record.status,
                    "rng_seed": record.rng_seed,
                    "latent": record.latent_path,
                    "mesh": record.mesh_path,
                }
            )
        lo = [min(c[a] for c in self.blocks) for a in range(3)]
        hi = [max(c[a] for c in self.blocks) for a in range(3)]
        payload = {
            "grid_shape": [h - l + 1 for l, h in zip(lo, hi)],
            "side": self.side,
            "overlap": self.overlap,
            "latent_resolution": self.latent_resolution,
            "origin": list(self.origin),
            "blocks": rows,
        }
        return json.dumps(payload, indent=2) + "\n"

    @staticmethod
    def from_json(text: str) -> "SceneGrid":
        raw = json.loads(text)
        side = float(raw["side"])
        origin = tuple(float(v) for v in raw["origin"])
        stride = side * (1.0 - float(raw["overlap"]))
        blocks: dict[GridCoord, Block] = {}
        seeds = set()
        records = {}
        for row in raw["blocks"]:
            coord = tuple(int(v) for v in row["index"])
            blocks[coord] = Block(
                index=coord,
                origin=tuple(o + i * stride for o, i in zip(origin, coord)),
                side=side,
            )
            if row["seed"]:
                seeds.add(coord)
            records[coord] = BlockRecord(
                status=row["status"],
                rng_seed=row["rng_seed"],
                latent_path=row["latent"],
                mesh_path=row["mesh"],
            )
        return SceneGrid(
            blocks=blocks,
            side=side,
            overlap=float(raw["overlap"]),
            latent_resolution=int(raw["latent_resolution"]),
            origin=origin,  # type: ignore[arg-type]
            seeds=frozenset(seeds),
            records=records,
        )


def _pairs(items):
    for i, a in enumerate(items):
        for b in items[i + 1 :]:
            yield a, b


def _footprints_overlap(a: Block, b: Block) -> bool:
    """True when the two closed cubes share positive volume."""
    lo = np.maximum(a.origin_array, b.origin_array)
    hi = np.minimum(a.max_corner, b.max_corner)
    return bool(np.all(hi - lo > 1e-9 * a.side))


def _check_cell_quantization(overlap: float, n: int) -> None:
    cells = overlap * n
    if abs(cells - round(cells)) > 1e-9 * n:
        raise ValueError(
            f"overlap ratio {overlap} does not quantize to whole latent cells "
            f"at resolution {n} ({cells:.4f} cells)"
        )


def plan_grid(
    extent: tuple[float, float, float],
    side: float,
    overlap: float,
    *,
    latent_resolution: int,
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0),
) -> SceneGrid:
    """Plan the block grid covering an axis-aligned world extent.

    Blocks are laid on a stride of ``side * (1 - overlap)`` per axis, with
    enough blocks that the union reaches ``origin + extent``.  The overlap
    ratio must land on whole latent cells, otherwise extrapolation masks
    could not be built.
    """
    if side <= 0:
        raise ValueError(f"block side must be positive, got {side}")
    if not (0.0 <= overlap < 1.0):
        raise ValueError(f"overlap ratio must be in [0, 1), got {overlap}")
    _check_cell_quantization(overlap, latent_resolution)
    extent = tuple(float(v) for v in extent)  # type: ignore[assignment]
    if len(extent) != 3 or any(v <= 0 for v in extent):
        raise ValueError(f"extent must be three positive lengths, got {extent}")

    stride = side * (1.0 - overlap)
    counts = []
    for length in extent:
        if length <= side * (1.0 + 1e-12):
            counts.append(1)
        else:
            counts.append(1 + math.ceil((length - side) / stride - 1e-9))

    blocks: dict[GridCoord, Block] = {}
    for i in range(counts[0]):
        for j in range(counts[1]):
            for k in range(counts[2]):
                coord = (i, j, k)
                blocks[coord] = Block(
                    index=coord,
                    origin=tuple(o + c * stride for o, c in zip(origin, coord)),
                    side=side,
                )
    grid = SceneGrid(
        blocks=blocks,
        side=side,
        overlap=overlap,
        latent_resolution=latent_resolution,
        origin=origin,
    )
    seed_coords, _ = select_seeds(grid)
    return replace(grid, seeds=frozenset(seed_coords), records=grid.records)


def select_seeds(grid: SceneGrid) -> tuple[tuple[GridCoord, ...], tuple[GridCoord, ...]]:
    """Split the grid into seed blocks and extras.

    Seeds are the lexicographic-first maximal strided subset: every k-th
    block per axis starting at index 0, with k the smallest integer stride
    whose world footprints no longer overlap.
    """
    if grid.overlap == 0.0:
        k = 1
    else:
        k = math.ceil(1.0 / (1.0 - grid.overlap) - 1e-9)
    seeds = tuple(c for c in sorted(grid.blocks) if all(v % k == 0 for v in c))
    extras = tuple(c for c in sorted(grid.blocks) if not all(v % k == 0 for v in c))
    return seeds, extras


def schedule_waves(grid: SceneGrid) -> list[list[GridCoord]]:
    """Extras grouped into dependency waves.

    A block joins the earliest wave in which at least one of its neighbors
    is already populated; the grid state advances only between waves, so the
    schedule depends on the plan alone, never on execution timing.
    """
    populated = set(grid.seeds)
    remaining = set(grid.blocks) - populated
    waves: list[list[GridCoord]] = []
    while remaining:
        ready = sorted(
            c for c in remaining if any(nb in populated for nb in grid.neighbors(c))
        )
        if not ready:
            stuck = ", ".join(str(c) for c in sorted(remaining))
            raise RuntimeError(
                f"blocks {stuck} have no populated neighbor to extrapolate from; "
                "the grid plan is disconnected"
            )
        waves.append(ready)
        populated.update(ready)
        remaining.difference_update(ready)
    return waves


# ---------------------------------------------------------------------------
# deformation field


@dataclass(frozen=True)
class WarpLevel:
    """One level of the deformation hierarchy.

    ``controls`` is the number of control nodes per axis and
    ``max_displacement`` a hard cap (world units) on how far this level can
    move any point.
    """

    controls: int
    max_displacement: float
    iterations: int = 60
    lr: float | None = None

    def __post_init__(self):
        if self.controls < 2:
            raise ValueError(f"need at least 2 control nodes per axis, got {self.controls}")
        if self.max_displacement <= 0:
            raise ValueError("displacement cap must be positive")
        if self.iterations < 0:
            raise ValueError("iteration count must be >= 0")

    @property
    def step_size(self) -> float:
        return self.lr if self.lr is not None else 0.15 * self.max_displacement


def default_warp_levels(side: float) -> tuple[WarpLevel, ...]:
    """Three-level hierarchy whose caps sum to 10% of the block side."""
    return (
        WarpLevel(4, 0.05 * side),
        WarpLevel(8, 0.03 * side),
        WarpLevel(16, 0.02 * side),
    )


class DeformationField(torch.nn.Module):
    """Coarse-to-fine displacement warp parameterized by control grids.

    Each level stores a (m, m, m, 3) grid of control vectors over the domain
    box; the displacement at a point is the trilinear blend of the controls
    after a radial tanh squash keeps each control under the level cap.  A
    convex blend of capped vectors is itself capped, so no level can move a
    point farther than its cap and the whole field never exceeds the cap
    sum.  Zero controls give the identity map, and levels compose by
    sequential application, coarse first.
    """

    def __init__(self, levels: tuple[WarpLevel, ...], lo, hi):
        super().__init__()
        if not levels:
            raise ValueError("need at least one warp level")
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        if np.any(hi <= lo):
            raise ValueError("domain box must have positive extent")
        self.levels = tuple(levels)
        self.register_buffer("lo", torch.from_numpy(lo).to(torch.float32))
        self.register_buffer("span", torch.from_numpy(hi - lo).to(torch.float32))
        self.controls = torch.nn.ParameterList(
            torch.nn.Parameter(torch.zeros(l.controls, l.controls, l.controls, 3))
            for l in levels
        )

    @property
    def max_total_displacement(self) -> float:
        return sum(l.max_displacement for l in self.levels)

    def level_displacement(self, index: int, points: torch.Tensor) -> torch.Tensor:
        level = self.levels[index]
        raw = self.controls[index]
        norm = raw.norm(dim=-1, keepdim=True)
        factor = torch.where(
            norm > 1e-12,
            torch.tanh(norm / level.max_displacement)
            * (level.max_displacement / norm.clamp_min(1e-12)),
            torch.ones_like(norm),
        )
        capped = raw * factor

        m = level.controls
        u = ((points - self.lo) / self.span).clamp(0.0, 1.0) * (m - 1)
        i0 = u.floor().long().clamp(max=m - 2)
        f = u - i0.to(u.dtype)
        out = torch.zeros_like(points)
        for dx in (0, 1):
            wx = f[:, 0] if dx else 1.0 - f[:, 0]
            for dy in (0, 1):
                wy = f[:, 1] if dy else 1.0 - f[:, 1]
                for dz in (0, 1):
                    wz = f[:, 2] if dz else 1.0 - f[:, 2]
                    w = (wx * wy * wz)[:, None]
                    out = out + w * capped[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
        return out

    def warp(self, points: torch.Tensor) -> torch.Tensor:
        for index in range(len(self.levels)):
            points = points + self.level_displacement(index, points)
        return points

    def warp_array(self, points: np.ndarray) -> np.ndarray:
        """Warp f64 points, adding the f32 displacement to full precision."""
        pts = torch.from_numpy(np.asarray(points, dtype=np.float64)).to(torch.float32)
        with torch.no_grad():
            disp = (self.warp(pts) - pts).to(torch.float64).numpy()
        return np.asarray(points, dtype=np.float64) + disp


# ---------------------------------------------------------------------------
# seam registration


def sample_in_region(mesh: TriangleMesh, lo, hi, count: int, seed: int) -> np.ndarray | None:
    """Area-uniform samples of the faces whose centroids fall in the box.

    Returns None when no sampleable face lies inside; faces are selected
    whole, so samples near the box boundary may stick out slightly.
    """
    inside = _faces_in_box(mesh, lo, hi)
    if not inside.any():
        return None
    sub = TriangleMesh(mesh.vertices, mesh.faces[inside])
    if sub.area() <= 0.0:
        return None
    return sub.sample_surface(count, seed)


def _faces_in_box(mesh: TriangleMesh, lo, hi) -> np.ndarray:
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if mesh.n_faces == 0:
        return np.zeros(0, dtype=bool)
    centroids = mesh.vertices[mesh.faces].mean(axis=1)
    return np.all((centroids >= lo) & (centroids <= hi), axis=1)


def overlap_box(block_p: Block, block_q: Block) -> tuple[np.ndarray, np.ndarray]:
    lo = np.maximum(block_p.origin_array, block_q.origin_array)
    hi = np.minimum(block_p.max_corner, block_q.max_corner)
    if np.any(hi <= lo):
        raise ValueError(f"blocks {block_p.id} and {block_q.id} do not overlap")
    return lo, hi


def _chamfer_torch(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Differentiable sum of mean squared nearest distances.

    Nearest indices come from the fast expanded-square form; the value is
    recomputed from the matched pairs, so coincident points contribute an
    exact zero with a zero (not infinite) gradient.
    """
    with torch.no_grad():
        a2 = (a * a).sum(dim=1)
        b2 = (b * b).sum(dim=1)
        d2 = a2[:, None] + b2[None, :] - 2.0 * (a @ b.T)
        nearest_b = d2.argmin(dim=1)
        nearest_a = d2.argmin(dim=0)
    forward = ((a - b[nearest_b]) ** 2).sum(dim=1).mean()
    backward = ((b - a[nearest_a]) ** 2).sum(dim=1).mean()
    return forward + backward


@dataclass
class RegistrationResult:
    """Warped mesh plus the fitted field and the per-level loss trail."""

    mesh: TriangleMesh
    field: DeformationField
    losses: list[float]  # [identity, after level 1, after level 2, ...]
    displacements: np.ndarray  # per-vertex displacement length

    @property
    def max_displacement(self) -> float:
        return float(self.displacements.max()) if len(self.displacements) else 0.0


def register_seams(
    mesh_p: TriangleMesh,
    mesh_q: TriangleMesh,
    region: tuple[np.ndarray, np.ndarray],
    levels: tuple[WarpLevel, ...],
    *,
    samples: int = 4096,
    seed: int = 0,
) -> RegistrationResult:
    """Pull mesh Q onto mesh P inside their shared overlap region.

    Minimizes, over the deformation field, the Chamfer distance from the
    warp of Q's overlap samples to P's overlap samples (alignment) plus the
    Chamfer distance from the warp of Q's outside samples to their original
    positions (anchor), one level at a time from coarse to fine.  Every
    level starts at identity and keeps its best parameters, so the loss
    trail never increases.  Returns mesh Q with the fitted warp applied to
    all its vertices.

    Both overlap sample draws share one RNG stream, so registering a mesh
    against an identical copy sees a loss of exactly zero at identity and
    returns the mesh unchanged.
    """
    lo = np.asarray(region[0], dtype=np.float64)
    hi = np.asarray(region[1], dtype=np.float64)
    if np.any(hi <= lo):
        raise ValueError("overlap region must have positive extent")

    overlap_seed = derive_seed(seed, "overlap")
    p_ol = sample_in_region(mesh_p, lo, hi, samples, overlap_seed)
    q_ol = sample_in_region(mesh_q, lo, hi, samples, overlap_seed)
    if p_ol is None or q_ol is None:
        raise ValueError("no overlap surface to register: a region sample set is empty")
    q_new = None
    outside = ~_faces_in_box(mesh_q, lo, hi)
    if outside.any():
        sub = TriangleMesh(mesh_q.vertices, mesh_q.faces[outside])
        if sub.area() > 0.0:
            q_new = sub.sample_surface(samples, derive_seed(seed, "new"))

    pts = mesh_q.vertices
    dom_lo = np.minimum(pts.min(axis=0), lo)
    dom_hi = np.maximum(pts.max(axis=0), hi)
    pad = 1e-3 * float((dom_hi - dom_lo).max()) + 1e-9
    warp_field = DeformationField(tuple(levels), dom_lo - pad, dom_hi + pad)

    p_t = torch.from_numpy(p_ol).to(torch.float32)
    cur_ol = torch.from_numpy(q_ol).to(torch.float32)
    cur_new = anchor = None
    if q_new is not None:
        cur_new = torch.from_numpy(q_new).to(torch.float32)
        anchor = cur_new.clone()

    def level_loss(index: int) -> torch.Tensor:
        warped = cur_ol + warp_field.level_displacement(index, cur_ol)
        loss = _chamfer_torch(warped, p_t)
        if cur_new is not None:
            moved = cur_new + warp_field.level_displacement(index, cur_new)
            loss = loss + _chamfer_torch(moved, anchor)
        return loss

    losses: list[float] = []
    for index, level in enumerate(warp_field.levels):
        param = warp_field.controls[index]
        with torch.no_grad():
            best = float(level_loss(index))
        if index == 0:
            losses.append(best)  # the identity field
        best_state = param.detach().clone()
        opt = torch.optim.Adam([param], lr=level.step_size)
        for _ in range(level.iterations):
            opt.zero_grad()
            loss = level_loss(index)
            value = float(loss.detach())
            if value < best:
                best = value
                best_state = param.detach().clone()
            loss.backward()
            opt.step()
        with torch.no_grad():
            final = float(level_loss(index))
            if final < best:
                best = final
                best_state = param.detach().clone()
            param.copy_(best_state)
            # bake this level into the sample sets; the next level then
            # starts from exactly this loss and can only improve on it
            cur_ol = cur_ol + warp_field.level_displacement(index, cur_ol)
            if cur_new is not None:
                cur_new = cur_new + warp_field.level_displacement(index, cur_new)
        losses.append(best)

    warped_vertices = warp_field.warp_array(mesh_q.vertices)
    return RegistrationResult(
        mesh=TriangleMesh(warped_vertices, mesh_q.faces.copy()),
        field=warp_field,
        losses=losses,
        displacements=np.linalg.norm(warped_vertices - mesh_q.vertices, axis=1),
    )


def seam_error(
    mesh_a: TriangleMesh,
    mesh_b: TriangleMesh,
    region: tuple[np.ndarray, np.ndarray],
    *,
    samples: int = 4096,
    seed: int = 0,
) -> float | None:
    """RMS surface distance (length units) between two meshes in a region.

    The Chamfer distance sums two means of squared distances, so
    sqrt(CD / 2) is the root-mean-square gap, directly comparable to a
    length threshold.  None when either mesh has no faces in the region.
    """
    lo, hi = region
    sa = sample_in_region(mesh_a, lo, hi, samples, derive_seed(seed, "a"))
    sb = sample_in_region(mesh_b, lo, hi, samples, derive_seed(seed, "b"))
    if sa is None or sb is None:
        return None
    return math.sqrt(chamfer(sa, sb) / 2.0)


# ---------------------------------------------------------------------------
# mesh merging


def merge_blocks(meshes: dict[GridCoord, TriangleMesh], grid: SceneGrid) -> TriangleMesh:
    """Merge per-block meshes into one scene mesh.

    Every block keeps the triangles whose centroids fall in its Voronoi cell
    of the face-bearing block centers (ties go to the lexicographically
    first block), then coincident vertices from different blocks within
    1e-5 of the block side are welded.  A single block passes through
    unchanged.
    """
    if not meshes:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    if len(meshes) == 1:
        only = next(iter(meshes.values()))
        return TriangleMesh(only.vertices.copy(), only.faces.copy())
    coords = [c for c in sorted(meshes) if meshes[c].n_faces > 0]
    if not coords:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    if len(coords) == 1:
        only = meshes[coords[0]]
        return TriangleMesh(only.vertices.copy(), only.faces.copy())

    centers = np.array([grid.blocks[c].center for c in coords])
    parts_v, parts_f, parts_owner = [], [], []
    offset = 0
    for bi, coord in enumerate(coords):
        mesh = meshes[coord]
        centroids = mesh.vertices[mesh.faces].mean(axis=1)
        d2 = ((centroids[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        keep = d2.argmin(axis=1) == bi
        faces = mesh.faces[keep]
        if len(faces) == 0:
            continue
        used = np.unique(faces)
        remap = np.full(mesh.n_vertices, -1, dtype=np.int64)
        remap[used] = np.arange(len(used)) + offset
        parts_v.append(mesh.vertices[used])
        parts_f.append(remap[faces])
        parts_owner.append(np.full(len(used), bi, dtype=np.int64))
        offset += len(used)

    if not parts_v:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    vertices = np.concatenate(parts_v)
    faces = np.concatenate(parts_f)
    owner = np.concatenate(parts_owner)

    # weld boundary duplicates across blocks (within a block the mesh is
    # already welded by construction)
    tol = 1e-5 * grid.side
    pairs = cKDTree(vertices).query_pairs(tol, output_type="ndarray")
    root = np.arange(len(vertices))

    def find(i: int) -> int:
        while root[i] != i:
            root[i] = root[root[i]]
            i = root[i]
        return i

    for a, b in pairs:
        if owner[a] == owner[b]:
            continue
        ra, rb = find(int(a)), find(int(b))
        if ra != rb:
            lo_r, hi_r = (ra, rb) if ra < rb else (rb, ra)
            root[hi_r] = lo_r

    rep = np.array([find(i) for i in range(len(vertices))])
    faces = rep[faces]
    faces = faces[
        (faces[:, 0] != faces[:, 1])
        & (faces[:, 1] != faces[:, 2])
        & (faces[:, 0] != faces[:, 2])
    ]
    used = np.unique(faces)
    remap = np.full(len(vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriangleMesh(vertices[used], remap[faces])


# ---------------------------------------------------------------------------
# scene build


@dataclass
class SceneModels:
    """The trained stack that turns noise into block meshes."""

    decoder: SdfDecoder
    vae: VaeModel
    diffusion: DiffusionBundle


@dataclass
class SceneBuildConfig:
    extrapolation: ExtrapolationConfig = field(default_factory=ExtrapolationConfig)
    mesh_resolution: int = 48
    warp_levels: tuple[WarpLevel, ...] | None = None  # None: default_warp_levels(side)
    seam_samples: int = 4096
    seam_threshold_cells: float = 1.0
    registration: bool = True
    workers: int = 1

    def __post_init__(self):
        if self.mesh_resolution < 2:
            raise ValueError("mesh resolution must be at least 2")
        if self.seam_samples < 1:
            raise ValueError("seam sample count must be positive")
        if self.workers < 1:
            raise ValueError("worker count must be positive")


@dataclass
class SeamRecord:
    block: GridCoord
    neighbor: GridCoord
    rms: float | None  # None: nothing to compare in the overlap
    threshold: float
    passed: bool
    retried: bool = False


@dataclass
class BuildResult:
    grid: SceneGrid
    latents: dict[GridCoord, LatentTriPlane]
    meshes: dict[GridCoord, TriangleMesh]
    merged: TriangleMesh
    waves: list[list[GridCoord]]
    seams: list[SeamRecord]


def mesh_from_latent(
    latent: LatentTriPlane,
    models: SceneModels,
    block: Block,
    resolution: int,
) -> TriangleMesh:
    """Decode a latent to raw planes, evaluate the SDF grid, and mesh it."""
    planes = decode(models.vae, latent)
    values = sdf_grid(planes.data, models.decoder, resolution)
    local = marching_cubes(
        values, origin=(-1.0, -1.0, -1.0), spacing=2.0 / (resolution - 1)
    )
    return TriangleMesh(block.to_world(local.vertices), local.faces)


def _run_jobs(jobs, fn, workers: int) -> list:
    """Order-preserving map, threaded when workers > 1.

    Each job only reads shared model state and owns its RNG stream, so the
    threaded and serial paths produce bit-identical results.
    """
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, jobs))
    return [fn(job) for job in jobs]


def _identity_union_mask(masks: torch.Tensor) -> OverlapMask:
    """Target-frame mask: pin the given cells to same-position condition cells."""
    n = masks.shape[1]
    grid = torch.arange(n, dtype=torch.long)
    rows = grid[:, None].expand(n, n)[None].repeat(3, 1, 1)
    cols = grid[None, :].expand(n, n)[None].repeat(3, 1, 1)
    return OverlapMask(masks.clone(), rows, cols, axis=None)


def expand_block_latent(
    grid: SceneGrid,
    latents: dict[GridCoord, LatentTriPlane],
    coord: GridCoord,
    sources: tuple[GridCoord, ...],
    models: SceneModels,
    layout: LayoutMap | None,
    ext_cfg: ExtrapolationConfig,
    seed: int,
    *,
    attempt: int = 0,
) -> LatentTriPlane:
    """Extrapolate one block from its populated neighbors.

    One pass per source, in the given order: the first uses the native
    overlap mask against that neighbor, every later pass synchronizes the
    next neighbor's cells into the running result and re-extrapolates under
    the identity-remap union of all masks so far, keeping earlier passes'
    cells pinned.  Noise is keyed (seed, "expand", block id, pass, attempt),
    so the result depends only on the inputs, never on scheduling.
    """
    if not sources:
        raise ValueError(f"block {coord} has no populated neighbor to expand from")
    bundle = models.diffusion
    n = bundle.net.cfg.latent_resolution
    target = grid.blocks[coord]
    running: LatentTriPlane | None = None
    union: torch.Tensor | None = None
    for k, src in enumerate(sources, start=1):
        mask = compute_overlap_masks(grid.blocks[src], target, n)
        pass_seed = derive_seed(seed, "expand", target.id, k, attempt)
        if running is None:
            condition, call_mask = latents[src], mask
            union = mask.masks.clone()
        else:
            data = synchronize(running.data, mask, latents[src].data)
            union = union | mask.masks
            condition, call_mask = LatentTriPlane(data), _identity_union_mask(union)
        running = extrapolate(
            condition,
            call_mask,
            bundle.net,
            bundle.sched,
            layout,
            ext_cfg,
            pass_seed,
            standardizer=bundle.standardizer,
        )
    return running


def build_scene(
    grid: SceneGrid,
    models: SceneModels,
    layouts: dict[GridCoord, LayoutMap] | None,
    cfg: SceneBuildConfig,
    seed: int,
) -> BuildResult:
    """Populate, mesh, register, and merge a planned scene.

    Phase 1 samples all seed blocks (concurrently when configured); phase 2
    extrapolates the extras wave by wave, one pass per already-populated
    neighbor, every later pass conditioning on the running result with the
    previously pinned cells carried along; phase 3 meshes the blocks,
    registers every extra against its earlier neighbors, and merges.  All
    per-block randomness is keyed by block id, so any worker count gives
    bit-identical scenes.

    The caller's grid is never mutated; the returned result carries a copy
    whose records hold the final statuses and RNG seeds.
    """
    grid = replace(
        grid,
        blocks=dict(grid.blocks),
        records={c: replace(r) for c, r in grid.records.items()},
    )
    bundle = models.diffusion
    net, sched, stats = bundle.net, bundle.sched, bundle.standardizer
    n = net.cfg.latent_resolution
    if n != grid.latent_resolution:
        raise ValueError(
            f"grid latent resolution {grid.latent_resolution} != model {n}"
        )
    if net.cfg.conditional:
        missing = [c for c in sorted(grid.blocks) if not layouts or c not in layouts]
        if missing:
            raise ValueError(f"layout-conditioned model needs layouts for blocks {missing}")
    elif layouts:
        raise ValueError("model is not layout-conditioned but layouts were given")

    def layout_for(coord: GridCoord) -> LayoutMap | None:
        return layouts[coord] if net.cfg.conditional else None

    waves = schedule_waves(grid)
    rank: dict[GridCoord, int] = {c: 0 for c in grid.seeds}
    for w, wave in enumerate(waves, start=1):
        for c in wave:
            rank[c] = w
    sources_of = {
        c: tuple(nb for nb in grid.neighbors(c) if rank[nb] < rank[c])
        for wave in waves
        for c in wave
    }

    latents: dict[GridCoord, LatentTriPlane] = {}

    def sample_seed_block(coord: GridCoord) -> LatentTriPlane:
        block_seed = derive_seed(seed, "block", grid.blocks[coord].id)
        grid.records[coord].rng_seed = block_seed
        generator = torch.Generator().manual_seed(block_seed)
        return sample(net, sched, layout_for(coord), generator, standardizer=stats)

    def populate_extra(coord: GridCoord, attempt: int) -> LatentTriPlane:
        sources = sources_of[coord]
        grid.records[coord].rng_seed = derive_seed(
            seed, "expand", grid.blocks[coord].id, len(sources), attempt
        )
        return expand_block_latent(
            grid, latents, coord, sources, models, layout_for(coord),
            cfg.extrapolation, seed, attempt=attempt,
        )

    # phase 1: seeds
    seed_coords = sorted(grid.seeds)
    for coord, latent in zip(seed_coords, _run_jobs(seed_coords, sample_seed_block, cfg.workers)):
        latents[coord] = latent
        grid.advance(coord, "latent")

    # phase 2: extras, wave by wave
    for wave in waves:
        results = _run_jobs(wave, lambda c: populate_extra(c, attempt=0), cfg.workers)
        for coord, latent in zip(wave, results):
            latents[coord] = latent
            grid.advance(coord, "latent")

    # phase 3: mesh, register, merge
    def mesh_block(coord: GridCoord) -> TriangleMesh:
        return mesh_from_latent(latents[coord], models, grid.blocks[coord], cfg.mesh_resolution)

    order = seed_coords + [c for wave in waves for c in wave]
    meshes: dict[GridCoord, TriangleMesh] = {}
    for coord, mesh in zip(order, _run_jobs(order, mesh_block, cfg.workers)):
        meshes[coord] = mesh
        grid.advance(coord, "meshed")

    levels = cfg.warp_levels if cfg.warp_levels is not None else default_warp_levels(grid.side)
    threshold = cfg.seam_threshold_cells * grid.side / (cfg.mesh_resolution - 1)
    seams: list[SeamRecord] = []
    build_rank = {c: i for i, c in enumerate(order)}

    def register_block(coord: GridCoord, retried: bool) -> tuple[TriangleMesh, list[SeamRecord]]:
        mesh_q = meshes[coord]
        earlier = [p for p in grid.neighbors(coord) if build_rank[p] < build_rank[coord]]
        for p in earlier:
            region = overlap_box(grid.blocks[p], grid.blocks[coord])
            if cfg.registration and _region_populated(meshes[p], mesh_q, region):
                result = register_seams(
                    meshes[p],
                    mesh_q,
                    region,
                    levels,
                    samples=cfg.seam_samples,
                    seed=derive_seed(seed, "register", coord, p, retried),
                )
                mesh_q = result.mesh
        records = []
        for p in earlier:
            region = overlap_box(grid.blocks[p], grid.blocks[coord])
            rms = seam_error(
                meshes[p],
                mesh_q,
                region,
                samples=cfg.seam_samples,
                seed=derive_seed(seed, "seam", coord, p),
            )
            records.append(
                SeamRecord(
                    block=coord,
                    neighbor=p,
                    rms=rms,
                    threshold=threshold,
                    passed=rms is None or rms <= threshold,
                    retried=retried,
                )
            )
        return mesh_q, records

    for coord in order:
        if coord in grid.seeds:
            continue
        mesh_q, records = register_block(coord, retried=False)
        if not all(r.passed for r in records):
            # one fresh attempt with re-derived noise before giving up
            latents[coord] = populate_extra(coord, attempt=1)
            meshes[coord] = mesh_block(coord)
            mesh_q, records = register_block(coord, retried=True)
            if not all(r.passed for r in records):
                worst = min(records, key=lambda r: r.passed)
                raise RuntimeError(
                    f"seam between blocks {coord} and {worst.neighbor} stayed above "
                    f"threshold {threshold:.4g} after one retry (rms {worst.rms})"
                )
        meshes[coord] = mesh_q
        seams.extend(records)

    merged = merge_blocks(meshes, grid)
    return BuildResult(
        grid=grid,
        latents=latents,
        meshes=meshes,
        merged=merged,
        waves=waves,
        seams=seams,
    )


def _region_populated(mesh_a: TriangleMesh, mesh_b: TriangleMesh, region) -> bool:
    lo, hi = region
    return bool(_faces_in_box(mesh_a, lo, hi).any()) and bool(
        _faces_in_box(mesh_b, lo, hi).any()
    )
