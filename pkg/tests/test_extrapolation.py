"""Overlap masks, synchronization semantics, and conditioned sampling."""

import json
import math

import numpy as np
import pytest
import torch

from blockforge.extrapolation import (
    ExpansionRequest,
    ExtrapolationConfig,
    OverlapMask,
    SyncRecord,
    _resample_windows,
    compute_overlap_masks,
    extrapolate,
    synchronize,
)
from blockforge.latent_diffusion import (
    DenoiserConfig,
    DenoiserNet,
    LayoutBox,
    LayoutDocument,
    LayoutMap,
    Standardizer,
    build_schedule,
    sample,
)
from blockforge.latent_vae import LatentTriPlane
from blockforge.mesh_geometry import Block
from blockforge.triplane_field import PLANE_AXES


def oracle_overlap_masks(block_p: Block, block_q: Block, n: int):
    """Brute-force cell-center containment check in world coordinates.

    A plane participates only when it contains the slide axis; each of its Q
    cells is masked when the cell center lies inside P's span along both
    plane axes, and the source cell is found by world-coordinate flooring.
    """
    offsets = block_q.origin_array - block_p.origin_array
    moved = [a for a in range(3) if offsets[a] != 0.0]
    masks = np.zeros((3, n, n), dtype=bool)
    rows = np.zeros((3, n, n), dtype=np.int64)
    cols = np.zeros((3, n, n), dtype=np.int64)
    cell = block_p.side / n
    for plane, axes in enumerate(PLANE_AXES):
        if moved and not set(moved) <= set(axes):
            continue
        for i in range(n):
            for j in range(n):
                world = {}
                for slot, axis in enumerate(axes):
                    idx = (i, j)[slot]
                    world[axis] = block_q.origin[axis] + (idx + 0.5) * cell
                lo = {a: block_p.origin[a] for a in axes}
                if not all(lo[a] < world[a] < lo[a] + block_p.side for a in axes):
                    continue
                src = {a: int(math.floor((world[a] - lo[a]) / cell)) for a in axes}
                masks[plane, i, j] = True
                rows[plane, i, j] = src[axes[0]]
                cols[plane, i, j] = src[axes[1]]
    return masks, rows, cols


def assert_matches_oracle(mask: OverlapMask, block_p: Block, block_q: Block, n: int):
    masks, rows, cols = oracle_overlap_masks(block_p, block_q, n)
    assert np.array_equal(mask.masks.numpy(), masks)
    m = masks
    assert np.array_equal(mask.src_rows.numpy()[m], rows[m])
    assert np.array_equal(mask.src_cols.numpy()[m], cols[m])


def micro_net(seed: int = 0, **overrides) -> DenoiserNet:
    base = dict(
        latent_resolution=4,
        latent_channels=2,
        conv_width=8,
        attn_width=16,
        attn_heads=2,
        blocks=1,
        down_stages=1,
        time_dim=16,
    )
    base.update(overrides)
    net = DenoiserNet(DenoiserConfig(**base))
    net.reset_parameters(torch.Generator().manual_seed(seed))
    gen = torch.Generator().manual_seed(seed + 1000)
    with torch.no_grad():
        net.head.weight.normal_(0.0, 0.1, generator=gen)
        net.head.bias.normal_(0.0, 0.1, generator=gen)
    return net


def block_at(origin, side=3.2) -> Block:
    return Block((0, 0, 0), tuple(float(v) for v in origin), side)


def random_latent(seed: int, n: int = 4, c: int = 2) -> LatentTriPlane:
    gen = torch.Generator().manual_seed(seed)
    return LatentTriPlane(torch.randn((3, c, n, n), generator=gen))


# ---------------------------------------------------------------------------
# overlap masks


def test_masks_half_overlap_along_x():
    n = 32
    p = block_at((0.0, 0.0, 0.0))
    q = block_at((1.6, 0.0, 0.0))  # 50% slide along x
    mask = compute_overlap_masks(p, q, n)
    assert mask.axis == 0
    for plane in (0, 2):  # xy and xz contain the slide axis
        assert int(mask.masks[plane].sum()) == 16 * n
        assert bool(mask.masks[plane][:16].all())
        assert not bool(mask.masks[plane][16:].any())
    assert not bool(mask.masks[1].any())  # yz has no cell correspondence
    # first 16 rows of Q read the last 16 rows of P
    assert torch.equal(
        mask.src_rows[0][mask.masks[0]].reshape(16, n)[:, 0],
        torch.arange(16, 32),
    )
    assert_matches_oracle(mask, p, q, n)


def test_masks_quarter_overlap_is_eight_cells():
    n = 32
    p = block_at((0.0, 0.0, 0.0))
    q = block_at((2.4, 0.0, 0.0))  # 25% overlap
    mask = compute_overlap_masks(p, q, n)
    assert int(mask.masks[0].sum()) == 8 * n
    assert int(mask.masks[2].sum()) == 8 * n
    assert_matches_oracle(mask, p, q, n)


def test_masks_negative_slide_mirrors_indices():
    n = 8
    p = block_at((0.0, 0.0, 0.0))
    q = block_at((-1.6, 0.0, 0.0))
    mask = compute_overlap_masks(p, q, n)
    assert bool(mask.masks[0][4:].all()) and not bool(mask.masks[0][:4].any())
    assert torch.equal(
        mask.src_rows[0][mask.masks[0]].reshape(4, n)[:, 0],
        torch.arange(0, 4),
    )
    assert_matches_oracle(mask, p, q, n)


def test_masks_for_y_and_z_slides():
    n = 8
    p = block_at((0.0, 0.0, 0.0))
    q_y = block_at((0.0, 1.6, 0.0))
    mask_y = compute_overlap_masks(p, q_y, n)
    assert mask_y.axis == 1
    assert bool(mask_y.masks[0].any()) and bool(mask_y.masks[1].any())
    assert not bool(mask_y.masks[2].any())  # xz lacks the y axis
    assert_matches_oracle(mask_y, p, q_y, n)

    q_z = block_at((0.0, 0.0, 1.6))
    mask_z = compute_overlap_masks(p, q_z, n)
    assert mask_z.axis == 2
    assert not bool(mask_z.masks[0].any())  # xy lacks the z axis
    assert bool(mask_z.masks[1].any()) and bool(mask_z.masks[2].any())
    assert_matches_oracle(mask_z, p, q_z, n)


def test_masks_identical_blocks_give_full_identity():
    n = 4
    p = block_at((1.0, 2.0, 3.0))
    mask = compute_overlap_masks(p, block_at((1.0, 2.0, 3.0)), n)
    assert mask.axis is None
    assert bool(mask.masks.all())
    grid = torch.arange(n)
    for plane in range(3):
        assert torch.equal(mask.src_rows[plane], grid[:, None].expand(n, n))
        assert torch.equal(mask.src_cols[plane], grid[None, :].expand(n, n))


def test_masks_reject_bad_placements():
    p = block_at((0.0, 0.0, 0.0))
    with pytest.raises(ValueError, match="exactly one axis"):
        compute_overlap_masks(p, block_at((1.6, 1.6, 0.0)), 8)
    with pytest.raises(ValueError, match="overlap"):
        compute_overlap_masks(p, block_at((3.2, 0.0, 0.0)), 8)
    with pytest.raises(ValueError, match="quantize"):
        compute_overlap_masks(p, block_at((2.24, 0.0, 0.0)), 8)
    with pytest.raises(ValueError, match="side"):
        compute_overlap_masks(p, Block((0, 0, 0), (1.6, 0.0, 0.0), 6.4), 8)


def test_mask_validation_rejects_inconsistent_tensors():
    n = 4
    zeros = torch.zeros((3, n, n), dtype=torch.long)
    with pytest.raises(ValueError, match="boolean"):
        OverlapMask(zeros, zeros, zeros, axis=None)
    bad_rows = zeros.clone()
    bad_rows[0, 0, 0] = n  # out of range
    full = torch.ones((3, n, n), dtype=torch.bool)
    with pytest.raises(ValueError, match="out of range"):
        OverlapMask(full, bad_rows, zeros, axis=None)
    off_plane = torch.zeros((3, n, n), dtype=torch.bool)
    off_plane[1, 0, 0] = True  # yz masked under an x slide
    with pytest.raises(ValueError, match="slide axis"):
        OverlapMask(off_plane, zeros, zeros, axis=0)


# ---------------------------------------------------------------------------
# synchronization


def test_synchronize_is_idempotent_projection():
    n = 8
    mask = compute_overlap_masks(block_at((0, 0, 0)), block_at((1.6, 0, 0)), n)
    gen = torch.Generator().manual_seed(1)
    z_p = torch.randn((3, 2, n, n), generator=gen)
    sentinel = torch.full((3, 2, n, n), -7.25)
    once = synchronize(sentinel, mask, z_p)
    twice = synchronize(once, mask, z_p)
    assert torch.equal(once, twice)
    for plane in range(3):
        m = mask.masks[plane]
        assert torch.equal(once[plane][:, ~m], sentinel[plane][:, ~m])
        if bool(m.any()):
            rows = mask.src_rows[plane][m]
            cols = mask.src_cols[plane][m]
            assert torch.equal(once[plane][:, m], z_p[plane][:, rows, cols])


def test_synchronize_rejects_shape_mismatches():
    mask = OverlapMask.empty(4)
    z = torch.zeros((3, 2, 4, 4))
    with pytest.raises(ValueError, match="shapes differ"):
        synchronize(z, mask, torch.zeros((3, 2, 8, 8)))
    with pytest.raises(ValueError, match="resolution"):
        synchronize(torch.zeros((3, 2, 8, 8)), mask, torch.zeros((3, 2, 8, 8)))


# ---------------------------------------------------------------------------
# resampling windows


def test_resample_windows_tile_from_the_top():
    assert _resample_windows(200, 100, 2) == [(200, 101, 2), (100, 1, 2)]
    assert _resample_windows(7, 3, 1) == [(7, 5, 1), (4, 2, 1), (1, 1, 1)]
    assert _resample_windows(10, 0, 5) == [(10, 1, 0)]
    assert _resample_windows(10, 4, 0) == [(10, 1, 0)]


def test_extrapolation_config_validation():
    ExtrapolationConfig(window=0, repeats=0)
    with pytest.raises(ValueError, match="window"):
        ExtrapolationConfig(window=-1)
    with pytest.raises(ValueError, match="repeats"):
        ExtrapolationConfig(repeats=-2)


# ---------------------------------------------------------------------------
# extrapolation


def test_empty_mask_no_resampling_equals_unconditional_sampling():
    net = micro_net(seed=2)
    sched = build_schedule(12)
    z_p = random_latent(3)
    cfg = ExtrapolationConfig(window=5, repeats=0)
    got = extrapolate(z_p, OverlapMask.empty(4), net, sched, None, cfg, seed=123)
    ref = sample(net, sched, None, torch.Generator().manual_seed(123))
    assert torch.equal(got.data, ref.data)


def test_empty_mask_with_standardizer_still_matches_sampling():
    net = micro_net(seed=4)
    sched = build_schedule(9)
    stats = Standardizer(np.full((3, 2), 0.5), np.full((3, 2), 2.0))
    cfg = ExtrapolationConfig(window=0, repeats=0)
    got = extrapolate(random_latent(5), OverlapMask.empty(4), net, sched, None,
                      cfg, seed=9, standardizer=stats)
    ref = sample(net, sched, None, torch.Generator().manual_seed(9),
                 standardizer=stats)
    assert torch.equal(got.data, ref.data)


def test_full_mask_overwrites_every_step_and_orders_windows():
    net = micro_net(seed=6)
    sched = build_schedule(6, 0.1, 0.4)
    block = block_at((0, 0, 0))
    mask = compute_overlap_masks(block, block, 4)  # identity harness
    z_p = random_latent(7)
    trace: list[SyncRecord] = []
    cfg = ExtrapolationConfig(window=2, repeats=1)
    out = extrapolate(z_p, mask, net, sched, None, cfg, seed=11, trace=trace)
    # windows (6,5), (4,3), (2,1), each run twice
    assert [r.t for r in trace] == [6, 5, 6, 5, 4, 3, 4, 3, 2, 1, 2, 1]
    for record in trace:
        assert torch.equal(record.after_sync, record.condition)
    assert torch.equal(out.data, trace[-1].after_sync)


def test_partial_mask_matches_condition_bitwise_in_masked_cells():
    net = micro_net(seed=8)
    sched = build_schedule(5, 0.05, 0.3)
    mask = compute_overlap_masks(block_at((0, 0, 0)), block_at((1.6, 0, 0)), 4)
    z_p = random_latent(9)
    trace: list[SyncRecord] = []
    out = extrapolate(z_p, mask, net, sched, None,
                      ExtrapolationConfig(window=0, repeats=0), seed=13, trace=trace)
    assert len(trace) == sched.steps
    for record in trace:
        for plane in range(3):
            m = mask.masks[plane]
            if not bool(m.any()):
                continue
            rows = mask.src_rows[plane][m]
            cols = mask.src_cols[plane][m]
            assert torch.equal(record.after_sync[plane][:, m],
                               record.condition[plane][:, rows, cols])
    assert torch.equal(out.data, trace[-1].after_sync)


def test_extrapolate_is_deterministic_per_seed():
    net = micro_net(seed=10)
    sched = build_schedule(8)
    mask = compute_overlap_masks(block_at((0, 0, 0)), block_at((1.6, 0, 0)), 4)
    z_p = random_latent(11)
    cfg = ExtrapolationConfig(window=3, repeats=2)
    a = extrapolate(z_p, mask, net, sched, None, cfg, seed=21)
    b = extrapolate(z_p, mask, net, sched, None, cfg, seed=21)
    c = extrapolate(z_p, mask, net, sched, None, cfg, seed=22)
    assert torch.equal(a.data, b.data)
    assert not torch.equal(a.data, c.data)


def test_resampling_changes_the_result_but_keeps_masked_cells_synced():
    net = micro_net(seed=12)
    sched = build_schedule(8)
    mask = compute_overlap_masks(block_at((0, 0, 0)), block_at((1.6, 0, 0)), 4)
    z_p = random_latent(13)
    plain = extrapolate(z_p, mask, net, sched, None,
                        ExtrapolationConfig(window=4, repeats=0), seed=31)
    resampled = extrapolate(z_p, mask, net, sched, None,
                            ExtrapolationConfig(window=4, repeats=2), seed=31)
    assert not torch.equal(plain.data, resampled.data)


def test_extrapolate_validation():
    net = micro_net(seed=14)
    sched = build_schedule(6)
    z_p = random_latent(15)
    empty = OverlapMask.empty(4)
    with pytest.raises(ValueError, match="exceeds schedule"):
        extrapolate(z_p, empty, net, sched, None,
                    ExtrapolationConfig(window=7, repeats=0), seed=0)
    with pytest.raises(ValueError, match="shape"):
        extrapolate(LatentTriPlane(torch.zeros((3, 2, 8, 8))), empty, net, sched,
                    None, ExtrapolationConfig(window=2, repeats=0), seed=0)
    with pytest.raises(ValueError, match="resolution"):
        extrapolate(z_p, OverlapMask.empty(8), net, sched, None,
                    ExtrapolationConfig(window=2, repeats=0), seed=0)
    bad = LatentTriPlane(torch.zeros((3, 2, 4, 4)))
    bad.data[0, 0, 0, 0] = float("inf")
    with pytest.raises(ValueError, match="finite"):
        extrapolate(bad, empty, net, sched, None,
                    ExtrapolationConfig(window=2, repeats=0), seed=0)


def test_extrapolate_conditional_layout_paths():
    net = micro_net(seed=16, layout_channels=2)
    sched = build_schedule(5)
    z_p = random_latent(17)
    mask = OverlapMask.empty(4)
    raster = torch.zeros((2, 4, 4))
    raster[0, :2, :] = 1.0
    layout = LayoutMap(raster, ("floor", "wall"), block_at((0, 0, 0)))
    out = extrapolate(z_p, mask, net, sched, layout,
                      ExtrapolationConfig(window=0, repeats=0), seed=41)
    assert torch.isfinite(out.data).all()
    with pytest.raises(ValueError, match="requires a layout"):
        extrapolate(z_p, mask, net, sched, None,
                    ExtrapolationConfig(window=0, repeats=0), seed=41)


# ---------------------------------------------------------------------------
# expansion request record


def test_expansion_request_roundtrip():
    doc = LayoutDocument(
        block_index=(2, 0, 0),
        categories=("floor", "wall"),
        boxes=(LayoutBox("wall", (0.0, 0.0), (1.0, 3.2)),),
    )
    req = ExpansionRequest(
        from_block=(1, 0, 0), to_block=(2, 0, 0), overlap_ratio=0.5,
        resample_count=3, window=100, seed=77, layout=doc,
    )
    text = req.to_json()
    raw = json.loads(text)
    assert set(raw) == {"from_block", "to_block", "overlap_ratio", "R", "J",
                        "seed", "layout"}
    assert raw["R"] == 3 and raw["J"] == 100
    assert ExpansionRequest.from_json(text) == req
    assert req.to_json() == text

    bare = ExpansionRequest(
        from_block=(0, 0, 0), to_block=(1, 0, 0), overlap_ratio=0.25,
        resample_count=0, window=0, seed=1,
    )
    assert ExpansionRequest.from_json(bare.to_json()) == bare


def test_expansion_request_validation():
    with pytest.raises(ValueError, match="overlap ratio"):
        ExpansionRequest((0, 0, 0), (1, 0, 0), 1.5, 0, 0, 0)
    with pytest.raises(ValueError, match=">= 0"):
        ExpansionRequest((0, 0, 0), (1, 0, 0), 0.5, -1, 0, 0)
