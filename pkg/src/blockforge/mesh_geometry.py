"""Analytic scenes, block cropping, SDF point sampling, and mesh utilities.

World axes: z is up, the ground plane is xy.  A block is an axis-aligned cube
addressed by an integer grid index; its local frame maps the cube to
[-1, 1]^3.  Training data (surface points with normals, volume points with
signed distances) is always expressed in block-local coordinates, so the
world scale re-enters only at meshing and evaluation time.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import artifacts
from .mc_tables import CASE_EDGE_FLAGS, CASE_TRIANGLES, CORNER_OFFSETS, EDGE_CORNERS

ROOM_CATEGORIES = (
    "floor",
    "wall",
    "chair",
    "cabinet",
    "sofa",
    "table",
    "lighting",
    "bed",
    "stool",
)

SAMPLES_VERSION = 1


# ---------------------------------------------------------------------------
# blocks


@dataclass(frozen=True)
class Block:
    """Axis-aligned cube at grid index ``index`` with min corner ``origin``."""

    index: tuple[int, int, int]
    origin: tuple[float, float, float]
    side: float

    def __post_init__(self):
        if self.side <= 0:
            raise ValueError(f"block side must be positive, got {self.side}")

    @property
    def id(self) -> str:
        return ",".join(str(i) for i in self.index)

    @property
    def origin_array(self) -> np.ndarray:
        return np.asarray(self.origin, dtype=np.float64)

    @property
    def center(self) -> np.ndarray:
        return self.origin_array + 0.5 * self.side

    @property
    def max_corner(self) -> np.ndarray:
        return self.origin_array + self.side

    def to_local(self, points: np.ndarray) -> np.ndarray:
        """Map world points into the [-1, 1]^3 local frame."""
        return 2.0 * (np.asarray(points, dtype=np.float64) - self.origin_array) / self.side - 1.0

    def to_world(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) + 1.0) * (self.side / 2.0) + self.origin_array

    def length_to_local(self, d: np.ndarray | float):
        """Convert world lengths (signed distances included) to local units."""
        return np.asarray(d, dtype=np.float64) * (2.0 / self.side)


def parse_block_id(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise ValueError(f"block id must be 'i,j,k', got {text!r}")
    return tuple(int(p) for p in parts)  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# analytic primitives

_LOCAL_HALF_DIAGONAL = float(np.sqrt(3.0))


def _abs_range(lo: float, hi: float, c: float) -> tuple[float, float]:
    """Range of |x - c| when x spans [lo, hi]."""
    a, b = abs(lo - c), abs(hi - c)
    if lo <= c <= hi:
        return 0.0, max(a, b)
    return min(a, b), max(a, b)


@dataclass(frozen=True)
class BoxPrimitive:
    category: str
    center: tuple[float, float, float]
    half_extent: tuple[float, float, float]

    def sdf(self, p: np.ndarray) -> np.ndarray:
        q = np.abs(p - np.asarray(self.center)) - np.asarray(self.half_extent)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside

    def normal(self, p: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(p)
        rel = p - np.asarray(self.center)
        q = np.abs(rel) - np.asarray(self.half_extent)
        pos = np.maximum(q, 0.0)
        out = pos * np.sign(rel)
        norms = np.linalg.norm(out, axis=-1, keepdims=True)
        inside = norms[:, 0] == 0.0
        if np.any(inside):
            axis = np.argmax(q[inside], axis=-1)
            onehot = np.zeros((int(inside.sum()), 3))
            onehot[np.arange(len(axis)), axis] = np.sign(rel[inside, axis])
            onehot[onehot.sum(axis=-1) == 0.0, 2] = 1.0  # dead center
            out[inside] = onehot
            norms[inside] = 1.0
        return out / norms

    def sdf_range(self, lo: np.ndarray, hi: np.ndarray) -> tuple[float, float]:
        h = np.asarray(self.half_extent)
        c = np.asarray(self.center)
        q_lo = np.empty(3)
        q_hi = np.empty(3)
        for a in range(3):
            r0, r1 = _abs_range(float(lo[a]), float(hi[a]), float(c[a]))
            q_lo[a], q_hi[a] = r0 - h[a], r1 - h[a]
        # the box SDF is monotone nondecreasing in each component of q
        def f(q):
            return float(np.linalg.norm(np.maximum(q, 0.0)) + min(np.max(q), 0.0))
        return f(q_lo), f(q_hi)

    def footprint(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center[:2])
        h = np.asarray(self.half_extent[:2])
        return c - h, c + h


@dataclass(frozen=True)
class SpherePrimitive:
    category: str
    center: tuple[float, float, float]
    radius: float

    def sdf(self, p: np.ndarray) -> np.ndarray:
        return np.linalg.norm(p - np.asarray(self.center), axis=-1) - self.radius

    def normal(self, p: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(p)
        rel = p - np.asarray(self.center)
        norms = np.linalg.norm(rel, axis=-1, keepdims=True)
        rel = np.where(norms > 0.0, rel, np.array([0.0, 0.0, 1.0]))
        norms = np.where(norms > 0.0, norms, 1.0)
        return rel / norms

    def sdf_range(self, lo: np.ndarray, hi: np.ndarray) -> tuple[float, float]:
        c = np.asarray(self.center)
        nearest = np.clip(c, lo, hi)
        d_min = float(np.linalg.norm(nearest - c))
        far = np.where(np.abs(lo - c) > np.abs(hi - c), lo, hi)
        d_max = float(np.linalg.norm(far - c))
        return d_min - self.radius, d_max - self.radius

    def footprint(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center[:2])
        return c - self.radius, c + self.radius


@dataclass(frozen=True)
class SlabPrimitive:
    """Infinite horizontal slab, used for the always-present floor."""

    category: str
    z_min: float
    z_max: float

    @property
    def _mid(self) -> float:
        return 0.5 * (self.z_min + self.z_max)

    @property
    def _half(self) -> float:
        return 0.5 * (self.z_max - self.z_min)

    def sdf(self, p: np.ndarray) -> np.ndarray:
        return np.abs(p[..., 2] - self._mid) - self._half

    def normal(self, p: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(p)
        n = np.zeros((p.shape[0], 3))
        n[:, 2] = np.where(p[:, 2] >= self._mid, 1.0, -1.0)
        return n

    def sdf_range(self, lo: np.ndarray, hi: np.ndarray) -> tuple[float, float]:
        r0, r1 = _abs_range(float(lo[2]), float(hi[2]), self._mid)
        return r0 - self._half, r1 - self._half

    def footprint(self) -> None:
        return None


Primitive = BoxPrimitive | SpherePrimitive | SlabPrimitive


@dataclass
class AnalyticScene:
    """Union of primitives; the scene SDF is the pointwise minimum."""

    primitives: list[Primitive]
    extent_min: tuple[float, float, float]
    extent_max: tuple[float, float, float]

    def sdf(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        values = np.stack([prim.sdf(p) for prim in self.primitives], axis=0)
        return values.min(axis=0)

    def sdf_and_normal(self, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Scene SDF plus the normal of the closest primitive at each point."""
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        values = np.stack([prim.sdf(p) for prim in self.primitives], axis=0)
        winner = np.argmin(values, axis=0)
        normals = np.empty_like(p)
        for k, prim in enumerate(self.primitives):
            mask = winner == k
            if np.any(mask):
                normals[mask] = prim.normal(p[mask])
        return values.min(axis=0), normals

    def normal(self, p: np.ndarray) -> np.ndarray:
        return self.sdf_and_normal(p)[1]

    def footprints(self) -> list[tuple[str, np.ndarray, np.ndarray]]:
        """Ground-plane bounding boxes (label, min_xy, max_xy) of the objects."""
        out = []
        for prim in self.primitives:
            fp = prim.footprint()
            if fp is None:
                lo = np.asarray(self.extent_min[:2], dtype=np.float64)
                hi = np.asarray(self.extent_max[:2], dtype=np.float64)
                out.append((prim.category, lo, hi))
            else:
                out.append((prim.category, fp[0], fp[1]))
        return out


# ---------------------------------------------------------------------------
# scene generation


@dataclass(frozen=True)
class SceneRecipe:
    """Sampling ranges for random synthetic room scenes."""

    extent_min: tuple[float, float, float] = (0.0, 0.0, -0.3)
    extent_max: tuple[float, float, float] = (12.8, 12.8, 3.0)
    floor_top: float = 0.0
    floor_thickness: float = 0.3
    object_count: tuple[int, int] = (6, 14)
    size_range: tuple[float, float] = (0.5, 1.8)
    height_range: tuple[float, float] = (0.4, 1.6)
    category_weights: tuple[tuple[str, float], ...] = (
        ("chair", 2.0),
        ("cabinet", 1.0),
        ("sofa", 1.0),
        ("table", 2.0),
        ("lighting", 1.0),
        ("bed", 1.0),
        ("stool", 1.5),
    )
    sphere_categories: tuple[str, ...] = ("lighting",)
    lighting_height_range: tuple[float, float] = (1.6, 2.4)

    def __post_init__(self):
        for cat, _ in self.category_weights:
            if cat not in ROOM_CATEGORIES:
                raise ValueError(f"unknown category {cat!r}")
        if self.object_count[0] < 0 or self.object_count[1] < self.object_count[0]:
            raise ValueError(f"bad object_count range {self.object_count}")


def generate_scene(seed: int, recipe: SceneRecipe | None = None) -> AnalyticScene:
    """Generate a random analytic scene; identical seeds give identical scenes."""
    recipe = recipe or SceneRecipe()
    rng = np.random.Generator(np.random.PCG64(seed))
    lo = np.asarray(recipe.extent_min, dtype=np.float64)
    hi = np.asarray(recipe.extent_max, dtype=np.float64)

    primitives: list[Primitive] = [
        SlabPrimitive(
            category="floor",
            z_min=recipe.floor_top - recipe.floor_thickness,
            z_max=recipe.floor_top,
        )
    ]

    categories = [c for c, _ in recipe.category_weights]
    weights = np.asarray([w for _, w in recipe.category_weights], dtype=np.float64)
    if len(categories) == 0 or weights.sum() <= 0:
        count = 0
    else:
        weights = weights / weights.sum()
        count = int(rng.integers(recipe.object_count[0], recipe.object_count[1] + 1))

    for _ in range(count):
        category = categories[int(rng.choice(len(categories), p=weights))]
        size = float(rng.uniform(*recipe.size_range))
        if category in recipe.sphere_categories:
            radius = 0.5 * size * 0.6
            cz = float(rng.uniform(*recipe.lighting_height_range))
            cx = float(rng.uniform(lo[0] + radius, hi[0] - radius))
            cy = float(rng.uniform(lo[1] + radius, hi[1] - radius))
            primitives.append(
                SpherePrimitive(category=category, center=(cx, cy, cz), radius=radius)
            )
        else:
            hx = 0.5 * size
            hy = 0.5 * float(rng.uniform(*recipe.size_range))
            hz = 0.5 * float(rng.uniform(*recipe.height_range))
            cx = float(rng.uniform(lo[0] + hx, hi[0] - hx))
            cy = float(rng.uniform(lo[1] + hy, hi[1] - hy))
            cz = recipe.floor_top + hz
            primitives.append(
                BoxPrimitive(
                    category=category,
                    center=(cx, cy, cz),
                    half_extent=(hx, hy, hz),
                )
            )

    return AnalyticScene(
        primitives=primitives,
        extent_min=recipe.extent_min,
        extent_max=recipe.extent_max,
    )


# ---------------------------------------------------------------------------
# block cropping


@dataclass
class CroppedBlock:
    """A block's view of a scene.

    Signed distances are always evaluated against the uncut scene, so samples
    near the crop boundary stay consistent with the neighbors.  ``empty`` is
    set when no surface crosses the block.
    """

    block: Block
    scene: AnalyticScene
    empty: bool

    def sdf_local(self, local_points: np.ndarray) -> np.ndarray:
        world = self.block.to_world(local_points)
        return self.block.length_to_local(self.scene.sdf(world))

    def layout_objects(self) -> list[tuple[str, np.ndarray, np.ndarray]]:
        """Object footprints clipped to the block footprint (world xy coords)."""
        b_lo = self.block.origin_array[:2]
        b_hi = self.block.max_corner[:2]
        out = []
        for label, lo, hi in self.scene.footprints():
            clo = np.maximum(lo, b_lo)
            chi = np.minimum(hi, b_hi)
            if np.all(chi > clo):
                out.append((label, clo, chi))
        return out


def crop_block(scene: AnalyticScene, block: Block, *, grid: int = 24) -> CroppedBlock:
    """Bind a block to a scene and decide whether any surface crosses it.

    A primitive's surface can only cross the block when its SDF interval over
    the block straddles zero; that cheap certificate is confirmed with a sign
    scan of the union SDF (the union SDF is 1-Lipschitz, so a grid whose cell
    half-diagonal is below the scanned minimum magnitude cannot hide a zero).
    """
    lo = block.origin_array
    hi = block.max_corner
    candidates = [
        prim for prim in scene.primitives
        if (lambda r: r[0] <= 0.0 <= r[1])(prim.sdf_range(lo, hi))
    ]
    empty = True
    if candidates:
        axes = [np.linspace(lo[a], hi[a], grid + 1) for a in range(3)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        values = scene.sdf(pts)
        cell = block.side / grid
        half_diag = 0.5 * cell * np.sqrt(3.0)
        if values.min() < 0.0 < values.max() or np.abs(values).min() <= half_diag:
            empty = False
    return CroppedBlock(block=block, scene=scene, empty=empty)


# ---------------------------------------------------------------------------
# training samples


@dataclass
class SampleSet:
    """Surface and volume supervision for one block, in local coordinates."""

    surface_points: np.ndarray  # (S, 3) f32
    surface_normals: np.ndarray  # (S, 3) f32
    volume_points: np.ndarray  # (V, 3) f32
    volume_sdf: np.ndarray  # (V,) f32
    empty: bool = False

    def __post_init__(self):
        s, v = len(self.surface_points), len(self.volume_points)
        if self.surface_normals.shape != (s, 3):
            raise ValueError("surface_normals shape mismatch")
        if self.volume_sdf.shape != (v,):
            raise ValueError("volume_sdf shape mismatch")

    @property
    def n_surface(self) -> int:
        return len(self.surface_points)

    @property
    def n_volume(self) -> int:
        return len(self.volume_points)


def sample_training_points(
    cropped: CroppedBlock,
    n_surface: int,
    n_volume: int,
    seed: int,
    *,
    band: float = 0.08,
    max_rounds: int = 200,
) -> SampleSet:
    """Draw volume and surface supervision for a block.

    Volume points are uniform in the local cube with exact signed distances;
    surface points come from rejection sampling a band |sdf| < band·side
    followed by one projection step along the analytic gradient (exact for
    these primitives).  Projected points falling outside the block or onto a
    surface patch swallowed by another primitive are rejected.
    """
    if n_volume <= 0:
        raise ValueError("n_volume must be positive")
    if cropped.empty and n_surface > 0:
        raise ValueError(
            f"block {cropped.block.id} is empty; surface samples are undefined"
        )
    rng = np.random.Generator(np.random.PCG64(seed))
    block = cropped.block
    scene = cropped.scene

    volume_local = rng.uniform(-1.0, 1.0, size=(n_volume, 3))
    volume_sdf = cropped.sdf_local(volume_local)
    if cropped.empty:
        volume_sdf = np.clip(volume_sdf, -_LOCAL_HALF_DIAGONAL, _LOCAL_HALF_DIAGONAL)

    surface_pts = np.zeros((0, 3))
    surface_nrm = np.zeros((0, 3))
    if n_surface > 0:
        band_world = band * block.side
        chunks_p, chunks_n = [], []
        collected = 0
        for _ in range(max_rounds):
            cand_local = rng.uniform(-1.0, 1.0, size=(max(4 * n_surface, 1024), 3))
            cand_world = block.to_world(cand_local)
            d, n = scene.sdf_and_normal(cand_world)
            keep = np.abs(d) < band_world
            if not np.any(keep):
                continue
            proj = cand_world[keep] - d[keep, None] * n[keep]
            d2, n2 = scene.sdf_and_normal(proj)
            ok = np.abs(d2) <= 1e-9 * block.side
            local = block.to_local(proj)
            ok &= np.all(np.abs(local) <= 1.0, axis=1)
            if not np.any(ok):
                continue
            chunks_p.append(local[ok])
            chunks_n.append(n2[ok])
            collected += int(ok.sum())
            if collected >= n_surface:
                break
        else:
            raise RuntimeError(
                f"block {cropped.block.id}: could not collect {n_surface} surface "
                f"samples in {max_rounds} rounds (thin or tangent geometry?)"
            )
        surface_pts = np.concatenate(chunks_p)[:n_surface]
        surface_nrm = np.concatenate(chunks_n)[:n_surface]

    return SampleSet(
        surface_points=surface_pts.astype(np.float32),
        surface_normals=surface_nrm.astype(np.float32),
        volume_points=volume_local.astype(np.float32),
        volume_sdf=volume_sdf.astype(np.float32),
        empty=cropped.empty,
    )


def save_samples(samples: SampleSet, path: str | Path) -> None:
    with open(path, "wb") as f:
        artifacts.write_header(f, artifacts.MAGIC_SAMPLES, SAMPLES_VERSION)
        f.write(struct.pack("<I", 1 if samples.empty else 0))
        f.write(struct.pack("<QQ", samples.n_surface, samples.n_volume))
        artifacts.write_array(f, samples.surface_points.astype(np.float32))
        artifacts.write_array(f, samples.surface_normals.astype(np.float32))
        artifacts.write_array(f, samples.volume_points.astype(np.float32))
        artifacts.write_array(f, samples.volume_sdf.astype(np.float32))


def load_samples(path: str | Path) -> SampleSet:
    with open(path, "rb") as f:
        version = artifacts.read_header(f, artifacts.MAGIC_SAMPLES, path)
        artifacts.check_version(version, SAMPLES_VERSION, path)
        (flags,) = struct.unpack("<I", f.read(4))
        n_surface, n_volume = struct.unpack("<QQ", f.read(16))
        surface_points = artifacts.read_array(f, path)
        surface_normals = artifacts.read_array(f, path)
        volume_points = artifacts.read_array(f, path)
        volume_sdf = artifacts.read_array(f, path)
    if surface_points.shape != (n_surface, 3) or volume_points.shape != (n_volume, 3):
        raise artifacts.ArtifactError(f"{path}: count fields disagree with payload")
    return SampleSet(
        surface_points=surface_points,
        surface_normals=surface_normals,
        volume_points=volume_points,
        volume_sdf=volume_sdf,
        empty=bool(flags & 1),
    )


# ---------------------------------------------------------------------------
# triangle meshes


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) f64
    faces: np.ndarray  # (F, 3) i64

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def validate(self) -> None:
        """Check index ranges and reject degenerate triangles."""
        if self.n_faces and (self.faces.min() < 0 or self.faces.max() >= self.n_vertices):
            raise ValueError("face index out of range")
        areas = self.face_areas()
        scale = self.bbox_diagonal()
        tol = 1e-12 * max(scale * scale, 1e-30)
        if np.any(areas < tol):
            bad = int(np.argmin(areas))
            raise ValueError(f"degenerate face {bad} with area {areas[bad]:.3e}")

    def bbox_diagonal(self) -> float:
        if not self.n_vertices:
            return 0.0
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))

    def face_areas(self) -> np.ndarray:
        v = self.vertices
        f = self.faces
        cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        return 0.5 * np.linalg.norm(cross, axis=-1)

    def face_normals(self) -> np.ndarray:
        v = self.vertices
        f = self.faces
        cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        norms = np.linalg.norm(cross, axis=-1, keepdims=True)
        return cross / np.maximum(norms, 1e-300)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def is_watertight(self) -> bool:
        """Closed 2-manifold test: every directed edge matched by its reverse."""
        if not self.n_faces:
            return False
        f = self.faces
        directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        fwd = {}
        for a, b in directed:
            key = (int(a), int(b))
            fwd[key] = fwd.get(key, 0) + 1
        for (a, b), count in fwd.items():
            if count != 1 or fwd.get((b, a), 0) != 1:
                return False
        return True

    def euler_characteristic(self) -> int:
        f = self.faces
        edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        edges = np.sort(edges, axis=1)
        n_edges = len(np.unique(edges, axis=0))
        return self.n_vertices - n_edges + self.n_faces

    def sample_surface(self, n: int, seed: int) -> np.ndarray:
        """Area-uniform surface samples."""
        rng = np.random.Generator(np.random.PCG64(seed))
        areas = self.face_areas()
        total = areas.sum()
        if total <= 0:
            raise ValueError("mesh has no area to sample")
        idx = rng.choice(self.n_faces, size=n, p=areas / total)
        u = rng.uniform(size=(n, 1))
        v = rng.uniform(size=(n, 1))
        flip = (u + v) > 1.0
        u = np.where(flip, 1.0 - u, u)
        v = np.where(flip, 1.0 - v, v)
        tri = self.vertices[self.faces[idx]]
        return tri[:, 0] + u * (tri[:, 1] - tri[:, 0]) + v * (tri[:, 2] - tri[:, 0])


# ---------------------------------------------------------------------------
# signed distance to a mesh


def _point_triangle_distance_sq(points: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Squared distances between P points and F triangles, shape (P, F).

    Region-based closest-point computation on the triangle plane.
    """
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab = b - a
    ac = c - a
    ap = points[:, None, :] - a[None, :, :]

    d1 = np.einsum("fk,pfk->pf", ab, ap)
    d2 = np.einsum("fk,pfk->pf", ac, ap)

    bp = points[:, None, :] - b[None, :, :]
    d3 = np.einsum("fk,pfk->pf", ab, bp)
    d4 = np.einsum("fk,pfk->pf", ac, bp)

    cp = points[:, None, :] - c[None, :, :]
    d5 = np.einsum("fk,pfk->pf", ab, cp)
    d6 = np.einsum("fk,pfk->pf", ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    denom_v = np.maximum(d1 - d3, 1e-300)
    denom_w = np.maximum(d2 - d6, 1e-300)
    denom_vw = np.maximum((d4 - d3) + (d5 - d6), 1e-300)
    denom_bary = np.maximum(va + vb + vc, 1e-300)

    # candidate closest points per region
    closest = np.empty(ap.shape, dtype=np.float64)

    # interior (barycentric)
    v_bar = (vb / denom_bary)[..., None]
    w_bar = (vc / denom_bary)[..., None]
    closest[:] = a[None, :, :] + v_bar * ab[None, :, :] + w_bar * ac[None, :, :]

    # edge AC
    w_ac = np.clip(d2 / denom_w, 0.0, 1.0)[..., None]
    on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    closest = np.where(on_ac[..., None], a[None, :, :] + w_ac * ac[None, :, :], closest)

    # edge BC
    t_bc = np.clip((d4 - d3) / denom_vw, 0.0, 1.0)[..., None]
    on_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
    closest = np.where(
        on_bc[..., None], b[None, :, :] + t_bc * (c - b)[None, :, :], closest
    )

    # edge AB
    v_ab = np.clip(d1 / denom_v, 0.0, 1.0)[..., None]
    on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    closest = np.where(on_ab[..., None], a[None, :, :] + v_ab * ab[None, :, :], closest)

    # vertex regions override edges
    closest = np.where(((d1 <= 0) & (d2 <= 0))[..., None], a[None, :, :], closest)
    closest = np.where(((d3 >= 0) & (d4 <= d3))[..., None], b[None, :, :], closest)
    closest = np.where(((d6 >= 0) & (d5 <= d6))[..., None], c[None, :, :], closest)

    diff = points[:, None, :] - closest
    return np.einsum("pfk,pfk->pf", diff, diff)


def _ray_crossings(points: np.ndarray, direction: np.ndarray, tri: np.ndarray):
    """Count ray-triangle crossings for each point; returns (counts, suspect)."""
    eps = 1e-12
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    e1 = b - a
    e2 = c - a
    pvec = np.cross(direction, e2)
    det = np.einsum("fk,fk->f", e1, pvec)
    tvec = points[:, None, :] - a[None, :, :]
    u = np.einsum("pfk,fk->pf", tvec, pvec)
    qvec = np.cross(tvec, e1[None, :, :])
    v = np.einsum("pfk,k->pf", qvec, direction)
    t = np.einsum("pfk,fk->pf", qvec, e2)

    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(np.abs(det) > eps, 1.0 / det, 0.0)
    u = u * inv
    v = v * inv
    t = t * inv

    margin = 1e-9
    inside = (u > margin) & (v > margin) & (u + v < 1.0 - margin) & (t > margin)
    near_edge = (
        (np.abs(u) <= margin)
        | (np.abs(v) <= margin)
        | (np.abs(u + v - 1.0) <= margin)
        | (np.abs(t) <= margin)
    ) & (u > -margin) & (v > -margin) & (u + v < 1.0 + margin) & (t > -margin)
    degenerate = np.abs(det)[None, :] <= eps
    hits = inside & (np.abs(det)[None, :] > eps)
    suspect = (near_edge | (degenerate & near_edge)).any(axis=1)
    return hits.sum(axis=1), suspect


def signed_distance_to_mesh(
    points: np.ndarray,
    mesh: TriangleMesh,
    *,
    chunk: int = 512,
) -> np.ndarray:
    """Exact signed distance to a watertight mesh.

    Magnitude is the minimum point-triangle distance; sign comes from ray
    crossing parity along +x, re-cast with a jittered direction whenever a
    hit lands too close to an edge, vertex, or degenerate triangle.
    """
    if not mesh.is_watertight():
        raise ValueError("signed distance requires a watertight mesh")
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    tri = mesh.vertices[mesh.faces]

    out = np.empty(len(points), dtype=np.float64)
    for start in range(0, len(points), chunk):
        sl = slice(start, min(start + chunk, len(points)))
        d2 = _point_triangle_distance_sq(points[sl], tri)
        dist = np.sqrt(d2.min(axis=1))

        chunk_pts = points[sl]
        pending = np.arange(len(chunk_pts))
        inside = np.zeros(len(chunk_pts), dtype=bool)
        direction = np.array([1.0, 0.0, 0.0])
        rng = np.random.Generator(np.random.PCG64(0xB10C))
        for _ in range(16):
            counts, suspect = _ray_crossings(chunk_pts[pending], direction, tri)
            ok = ~suspect
            inside[pending[ok]] = counts[ok] % 2 == 1
            pending = pending[suspect]
            if len(pending) == 0:
                break
            jitter = rng.normal(scale=1e-7, size=3)
            direction = direction + jitter
            direction = direction / np.linalg.norm(direction)
        else:
            raise RuntimeError("ray parity did not stabilize after 16 jittered casts")

        out[sl] = np.where(inside, -dist, dist)
    return out


# ---------------------------------------------------------------------------
# marching cubes

# canonical node of an edge: the componentwise-minimum corner (some table
# edges are listed in the negative axis direction)
_EDGE_NODE_OFFSET = np.array(
    [
        np.minimum(CORNER_OFFSETS[EDGE_CORNERS[e, 0]], CORNER_OFFSETS[EDGE_CORNERS[e, 1]])
        for e in range(12)
    ],
    dtype=np.int64,
)
_EDGE_AXIS = np.array(
    [
        int(np.nonzero(CORNER_OFFSETS[EDGE_CORNERS[e, 1]] != CORNER_OFFSETS[EDGE_CORNERS[e, 0]])[0][0])
        for e in range(12)
    ],
    dtype=np.int64,
)
def marching_cubes(
    values: np.ndarray,
    *,
    origin: np.ndarray | tuple[float, float, float] = (0.0, 0.0, 0.0),
    spacing: float | tuple[float, float, float] = 1.0,
    iso: float = 0.0,
) -> TriangleMesh:
    """Extract the iso-surface of a scalar grid as a welded triangle mesh.

    ``values[i, j, k]`` sits at ``origin + (i, j, k) * spacing``.  Vertices are
    placed by linear interpolation along grid edges (interpolation parameter
    clamped to [1e-6, 1-1e-6] so exact node hits cannot produce coincident
    vertices) and shared between all incident triangles.  Triangles are wound
    so face normals point toward increasing field values.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 3 or min(values.shape) < 2:
        raise ValueError(f"need a 3d grid with at least 2 nodes per axis, got {values.shape}")
    origin = np.asarray(origin, dtype=np.float64)
    spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (3,)).copy()
    nx, ny, nz = values.shape

    below = (values < iso).astype(np.int64)
    # case index per cell from the 8 corner signs
    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int64)
    for bit, (dx, dy, dz) in enumerate(CORNER_OFFSETS):
        case |= below[dx : dx + nx - 1, dy : dy + ny - 1, dz : dz + nz - 1] << bit

    active = np.nonzero(CASE_EDGE_FLAGS[case] != 0)
    if len(active[0]) == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    cx, cy, cz = (a.astype(np.int64) for a in active)
    cell_case = case[cx, cy, cz]

    # collect triangles (cell-local edge indices)
    tri_rows = CASE_TRIANGLES[cell_case]  # (M, 16)
    flat = tri_rows[:, :15].reshape(-1, 3)
    keep = flat[:, 0] >= 0
    cell_of_tri = np.repeat(np.arange(len(cx)), 5)[keep]
    tri_edges = flat[keep]  # (T, 3) local edge ids

    # map (cell, local edge) -> global edge id
    gids = np.empty_like(tri_edges)
    for corner in range(3):
        local = tri_edges[:, corner]
        off = _EDGE_NODE_OFFSET[local]
        ex = cx[cell_of_tri] + off[:, 0]
        ey = cy[cell_of_tri] + off[:, 1]
        ez = cz[cell_of_tri] + off[:, 2]
        node = (ex * ny + ey) * nz + ez
        gids[:, corner] = _EDGE_AXIS[local] * (nx * ny * nz) + node

    unique_ids, inverse = np.unique(gids.reshape(-1), return_inverse=True)
    faces = inverse.reshape(-1, 3)

    # vertex positions for each unique edge
    axis = unique_ids // (nx * ny * nz)
    node = unique_ids % (nx * ny * nz)
    ix = node // (ny * nz)
    iy = (node // nz) % ny
    iz = node % nz
    base = np.stack([ix, iy, iz], axis=1)
    step = np.eye(3, dtype=np.int64)[axis]
    v0 = values[ix, iy, iz]
    jx, jy, jz = (base + step).T
    v1 = values[jx, jy, jz]
    denom = v1 - v0
    denom = np.where(np.abs(denom) < 1e-300, 1e-300, denom)
    t = np.clip((iso - v0) / denom, 1e-6, 1.0 - 1e-6)
    verts = (base + t[:, None] * step) * spacing[None, :] + origin[None, :]

    mesh = TriangleMesh(verts, faces)
    # orient triangles so normals point toward positive field values
    if len(faces):
        normals = mesh.face_normals()
        centers = mesh.vertices[mesh.faces].mean(axis=1)
        probe = centers + normals * (1e-4 * spacing.min())
        grad_sign = _trilinear(values, origin, spacing, probe) - _trilinear(
            values, origin, spacing, centers
        )
        if np.median(grad_sign) < 0:
            mesh.faces = mesh.faces[:, [0, 2, 1]]
    return mesh


def _trilinear(
    values: np.ndarray,
    origin: np.ndarray,
    spacing: np.ndarray,
    points: np.ndarray,
) -> np.ndarray:
    """Trilinear interpolation of a node grid at world points."""
    g = (np.asarray(points, dtype=np.float64) - origin) / spacing
    shape = np.asarray(values.shape)
    g = np.clip(g, 0.0, shape - 1.000001)
    i0 = np.floor(g).astype(np.int64)
    i0 = np.minimum(i0, shape - 2)
    frac = g - i0
    out = np.zeros(len(g))
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = (
                    (frac[:, 0] if dx else 1 - frac[:, 0])
                    * (frac[:, 1] if dy else 1 - frac[:, 1])
                    * (frac[:, 2] if dz else 1 - frac[:, 2])
                )
                out += w * values[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
    return out


# ---------------------------------------------------------------------------
# OBJ I/O


def obj_text(mesh: TriangleMesh) -> str:
    """Vertices and faces as ASCII OBJ (1-based indices).

    Coordinates use the shortest decimal form that parses back to the same
    float64, so save/load round trips are lossless.
    """
    lines = []
    for v in mesh.vertices:
        lines.append(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}")
    for f in mesh.faces:
        lines.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    return "\n".join(lines) + "\n"


def save_obj(mesh: TriangleMesh, path: str | Path) -> None:
    Path(path).write_text(obj_text(mesh))


def load_obj(path: str | Path) -> TriangleMesh:
    vertices = []
    faces = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0] in ("#", "vn", "vt", "o", "g", "s", "usemtl", "mtllib"):
            continue
        if parts[0] == "v":
            if len(parts) < 4:
                raise ValueError(f"{path}:{lineno}: malformed vertex record")
            vertices.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            if len(idx) != 3:
                raise ValueError(f"{path}:{lineno}: only triangle faces are supported")
            faces.append([i - 1 for i in idx])
        else:
            raise ValueError(f"{path}:{lineno}: unsupported record {parts[0]!r}")
    return TriangleMesh(
        np.asarray(vertices, dtype=np.float64).reshape(-1, 3),
        np.asarray(faces, dtype=np.int64).reshape(-1, 3),
    )
