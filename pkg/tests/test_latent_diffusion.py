"""Noise schedule algebra, layout rasters, the denoiser, training, sampling."""

import io
import math

import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from blockforge import artifacts
from blockforge.latent_diffusion import (
    DenoiserConfig,
    DenoiserNet,
    DiffusionBundle,
    DiffusionTrainConfig,
    LayoutBox,
    LayoutDocument,
    LayoutMap,
    LayoutPolyline,
    NoiseSchedule,
    Standardizer,
    build_schedule,
    denoise_predict,
    fit_standardizer,
    layout_plane_channels,
    load_diffusion,
    posterior_coefficients,
    posterior_mean,
    posterior_weights,
    q_sample,
    rasterize_layout,
    reverse_step,
    sample,
    save_diffusion,
    sinusoidal_embedding,
    train_denoiser,
    train_step,
)
from blockforge.latent_vae import LatentTriPlane
from blockforge.mesh_geometry import ROOM_CATEGORIES, Block
from blockforge.seeds import standard_normal

TOY_BETAS = (0.1, 0.2, 0.3, 0.4)

# Frozen outputs of oracle_posterior_coefficients(TOY_BETAS, t=3).
TOY_T3_C0 = 0.5132226637644297
TOY_T3_CT = 0.4723080794950425
TOY_T3_SUM = 0.9855307432594722
TOY_T3_MEAN_1_2 = 1.4578388227545147


def oracle_posterior_coefficients(betas, t):
    """Direct evaluation of the two published posterior fractions."""
    alphas = [1.0 - b for b in betas]
    abar = [1.0]
    for a in alphas:
        abar.append(abar[-1] * a)
    c0 = math.sqrt(abar[t - 1]) * betas[t - 1] / (1.0 - abar[t])
    ct = math.sqrt(alphas[t - 1]) * (1.0 - abar[t - 1]) / (1.0 - abar[t])
    return c0, ct


def toy_schedule() -> NoiseSchedule:
    return build_schedule(4, 0.1, 0.4)


def unit_block(side: float = 3.2) -> Block:
    return Block((0, 0, 0), (0.0, 0.0, 0.0), side)


def micro_config(**overrides) -> DenoiserConfig:
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
    return DenoiserConfig(**base)


def micro_net(seed: int = 0, **overrides) -> DenoiserNet:
    net = DenoiserNet(micro_config(**overrides))
    net.reset_parameters(torch.Generator().manual_seed(seed))
    return net


def randomize_head(net: DenoiserNet, seed: int = 11) -> DenoiserNet:
    """Give the zero-initialized output layer nontrivial weights."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        net.head.weight.normal_(0.0, 0.1, generator=gen)
        net.head.bias.normal_(0.0, 0.1, generator=gen)
    return net


class _FixedPrediction(nn.Module):
    """Stub denoiser returning a stored tensor, with a live grad path."""

    def __init__(self, cfg: DenoiserConfig, value: torch.Tensor):
        super().__init__()
        self.cfg = cfg
        self.value = value
        self.knob = nn.Parameter(torch.zeros(()))

    def forward(self, z_t, t, layout_channels=None):
        out = self.value.to(z_t.dtype).expand(z_t.shape[0], -1, -1, -1, -1)
        return out + self.knob * 0.0


# ---------------------------------------------------------------------------
# noise schedule


def test_schedule_toy_values():
    sched = toy_schedule()
    assert sched.alpha_bar[0] == 1.0
    assert abs(sched.alpha_bar[4] - 0.3024) < 1e-12
    assert sched.beta_tilde[1] == 0.0
    assert np.allclose(sched.beta[1:], TOY_BETAS, atol=1e-12)


def test_schedule_rejects_bad_ranges():
    with pytest.raises(ValueError, match="at least one"):
        build_schedule(0, 0.1, 0.2)
    for lo, hi in [(0.2, 0.1), (0.0, 0.1), (0.1, 1.0), (-0.1, 0.5), (0.1, 0.1)]:
        with pytest.raises(ValueError, match="beta"):
            build_schedule(10, lo, hi)


@settings(max_examples=40, deadline=None)
@given(
    steps=st.integers(min_value=2, max_value=300),
    a=st.floats(min_value=1e-6, max_value=0.99),
    b=st.floats(min_value=1e-6, max_value=0.99),
)
def test_schedule_invariants(steps, a, b):
    if abs(a - b) < 1e-9:
        return
    lo, hi = min(a, b), max(a, b)
    sched = build_schedule(steps, lo, hi)
    beta = sched.beta[1:]
    assert (beta > 0).all() and (beta < 1).all()
    assert (np.diff(beta) > 0).all()
    # strictly decreasing until extreme schedules underflow abar to exactly 0
    abar = sched.alpha_bar
    assert ((np.diff(abar) < 0) | (abar[:-1] == 0.0)).all()
    assert (abar >= 0).all()
    assert sched.beta_tilde[1] == 0.0
    tail = sched.beta_tilde[2:]
    assert (tail > 0).all()
    assert (tail <= beta[1:] + 1e-15).all()
    recon = sched.alpha_bar + sched.one_minus_alpha_bar
    assert np.allclose(recon, 1.0, atol=1e-12)


# ---------------------------------------------------------------------------
# forward marginal


def test_q_sample_identity_at_t0():
    sched = toy_schedule()
    gen = torch.Generator().manual_seed(0)
    z0 = torch.randn((3, 2, 4, 4), generator=gen)
    eps = torch.randn((3, 2, 4, 4), generator=gen)
    assert torch.equal(q_sample(z0, 0, eps, sched), z0)


def test_q_sample_scalar_toy():
    sched = build_schedule(1, 0.75, 0.9)  # single step with beta_1 = 0.75
    assert sched.alpha_bar[1] == 0.25
    z0 = torch.tensor([2.0], dtype=torch.float64)
    eps = torch.tensor([1.0], dtype=torch.float64)
    got = float(q_sample(z0, 1, eps, sched)[0])
    assert abs(got - (1.0 + math.sqrt(0.75))) < 1e-15
    assert got == pytest.approx(1.8660, abs=5e-5)


def test_q_sample_empirical_variance():
    sched = toy_schedule()
    t = 3
    gen = torch.Generator().manual_seed(42)
    draws = 10_000
    z0 = torch.zeros((draws,))
    eps = torch.randn((draws,), generator=gen)
    var = float(q_sample(z0, t, eps, sched).var(unbiased=True))
    expected = sched.one_minus_alpha_bar[t]
    se = expected * math.sqrt(2.0 / (draws - 1))
    assert abs(var - expected) <= 3.0 * se


def test_q_sample_batched_steps_match_scalar_calls():
    sched = toy_schedule()
    gen = torch.Generator().manual_seed(1)
    z0 = torch.randn((3, 3, 2, 4, 4), generator=gen)
    eps = torch.randn((3, 3, 2, 4, 4), generator=gen)
    t = torch.tensor([1, 3, 4])
    batched = q_sample(z0, t, eps, sched)
    for i, ti in enumerate(t.tolist()):
        single = q_sample(z0[i], ti, eps[i], sched)
        assert torch.allclose(batched[i], single, atol=0.0, rtol=0.0)


def test_q_sample_rejects_bad_steps_and_shapes():
    sched = toy_schedule()
    z0 = torch.zeros((2, 2))
    eps = torch.zeros((2, 2))
    for t in (-1, 5):
        with pytest.raises(ValueError, match="must lie in"):
            q_sample(z0, t, eps, sched)
    with pytest.raises(ValueError, match="shape"):
        q_sample(z0, 1, torch.zeros((2, 3)), sched)


# ---------------------------------------------------------------------------
# posterior


def test_posterior_t1_boundary_is_exact():
    sched = toy_schedule()
    c0, ct = posterior_coefficients(sched, 1)
    assert c0 == 1.0
    assert ct == 0.0
    gen = torch.Generator().manual_seed(2)
    z0 = torch.randn((3, 2, 4, 4), generator=gen)
    zt = torch.randn((3, 2, 4, 4), generator=gen)
    assert torch.equal(posterior_mean(z0, zt, 1, sched), z0)


def test_posterior_toy_matches_independent_fractions():
    sched = toy_schedule()
    c0, ct = posterior_coefficients(sched, 3)
    ref_c0, ref_ct = oracle_posterior_coefficients(TOY_BETAS, 3)
    assert c0 == pytest.approx(ref_c0, rel=1e-12)
    assert ct == pytest.approx(ref_ct, rel=1e-12)
    assert c0 == pytest.approx(TOY_T3_C0, rel=1e-12)
    assert ct == pytest.approx(TOY_T3_CT, rel=1e-12)
    z0 = torch.tensor([1.0], dtype=torch.float64)
    zt = torch.tensor([2.0], dtype=torch.float64)
    got = float(posterior_mean(z0, zt, 3, sched)[0])
    assert got == pytest.approx(TOY_T3_MEAN_1_2, rel=1e-12)


def test_posterior_weights_sum_to_one_over_whole_schedule():
    for sched in (toy_schedule(), build_schedule(200)):
        for t in range(1, sched.steps + 1):
            w0, wt = posterior_weights(sched, t)
            assert abs((w0 + wt) - 1.0) < 1e-12


def test_posterior_printed_coefficients_do_not_sum_to_one():
    # The published sqrt-scaled coefficients are not the convex weights; at
    # the toy t=3 they sum to ~0.9855, while the normalized weights sum to 1.
    sched = toy_schedule()
    c0, ct = posterior_coefficients(sched, 3)
    assert c0 + ct == pytest.approx(TOY_T3_SUM, rel=1e-12)
    assert abs((c0 + ct) - 1.0) > 1e-3
    gen = torch.Generator().manual_seed(3)
    v = torch.randn((3, 2, 4, 4), generator=gen, dtype=torch.float64)
    got = posterior_mean(v, v, 3, sched)
    assert torch.allclose(got, (c0 + ct) * v, atol=0.0, rtol=1e-15)


def test_posterior_noise_free_consistency():
    sched = build_schedule(50)
    for t in range(1, sched.steps + 1):
        c0, ct = posterior_coefficients(sched, t)
        lhs = c0 + ct * math.sqrt(sched.alpha_bar[t])
        rhs = math.sqrt(sched.alpha_bar[t - 1])
        assert abs(lhs - rhs) < 1e-12


def test_posterior_repeated_application_recovers_z0_exactly():
    sched = toy_schedule()
    gen = torch.Generator().manual_seed(4)
    z_true = torch.randn((3, 2, 4, 4), generator=gen)
    z = torch.randn((3, 2, 4, 4), generator=gen)
    for t in range(sched.steps, 0, -1):
        z = posterior_mean(z_true, z, t, sched)
    assert torch.equal(z, z_true)


def test_posterior_rejects_t_out_of_range():
    sched = toy_schedule()
    z = torch.zeros((1,))
    for t in (0, 5):
        with pytest.raises(ValueError, match="must lie in"):
            posterior_mean(z, z, t, sched)


# ---------------------------------------------------------------------------
# layout rasters


def test_rasterize_ne_quadrant_covers_quarter():
    n = 8
    block = unit_block(3.2)
    boxes = [("chair", np.array([1.6, 1.6]), np.array([3.2, 3.2]))]
    layout = rasterize_layout(boxes, block, n)
    channel = layout.raster[ROOM_CATEGORIES.index("chair")]
    assert float(channel.sum()) == n * n / 4
    assert torch.equal(channel[n // 2 :, n // 2 :], torch.ones(n // 2, n // 2))
    assert float(layout.raster.sum()) == n * n / 4  # other channels untouched


def test_rasterize_no_objects_gives_zero_raster():
    layout = rasterize_layout([], unit_block(), 8)
    assert torch.equal(layout.raster, torch.zeros(len(ROOM_CATEGORIES), 8, 8))


def test_rasterize_rejects_unknown_category():
    boxes = [("spaceship", np.zeros(2), np.ones(2))]
    with pytest.raises(ValueError, match="unknown category"):
        rasterize_layout(boxes, unit_block(), 8)
    with pytest.raises(ValueError, match="unknown category"):
        rasterize_layout([], unit_block(), 8,
                         polylines=[("spaceship", np.zeros((2, 2)))])


def test_room_category_table():
    assert len(ROOM_CATEGORIES) == 9
    for name in ("floor", "wall", "chair"):
        assert name in ROOM_CATEGORIES


def test_rasterize_polyline_marks_cells_along_path():
    n = 8
    block = unit_block(3.2)  # cell = 0.4
    path = np.array([[0.2, 1.0], [3.0, 1.0]])
    layout = rasterize_layout([], block, n, polylines=[("wall", path)])
    channel = layout.raster[ROOM_CATEGORIES.index("wall")]
    expected = torch.zeros(n, n)
    expected[:, 2] = 1.0  # y = 1.0 falls in cell [0.8, 1.2)
    assert torch.equal(channel, expected)


def test_layout_map_validation():
    block = unit_block()
    good = torch.zeros((2, 4, 4))
    LayoutMap(good, ("floor", "wall"), block)
    with pytest.raises(ValueError, match="categories"):
        LayoutMap(good, ("floor",), block)
    with pytest.raises(ValueError, match="square"):
        LayoutMap(torch.zeros((2, 4, 5)), ("floor", "wall"), block)
    bad = good.clone()
    bad[0, 0, 0] = 0.5
    with pytest.raises(ValueError, match="0 or 1"):
        LayoutMap(bad, ("floor", "wall"), block)


def test_layout_plane_channels_broadcast():
    n, block = 4, unit_block()
    raster = torch.zeros((2, n, n))
    raster[0, 1, 2] = 1.0
    raster[0, 1, 3] = 1.0
    layout = LayoutMap(raster, ("floor", "wall"), block)
    channels = layout_plane_channels(layout)
    assert channels.shape == (3, 2, n, n)
    assert torch.equal(channels[0], raster)  # ground plane verbatim
    yz = torch.zeros((2, n, n))
    yz[0, 2, :] = 1.0  # rows y=2,3 occupied somewhere in x
    yz[0, 3, :] = 1.0
    assert torch.equal(channels[1], yz)
    xz = torch.zeros((2, n, n))
    xz[0, 1, :] = 1.0  # row x=1 occupied somewhere in y
    assert torch.equal(channels[2], xz)


def test_layout_document_roundtrip_and_raster():
    doc = LayoutDocument(
        block_index=(1, 2, 0),
        categories=ROOM_CATEGORIES,
        boxes=(LayoutBox("chair", (1.6, 1.6), (3.2, 3.2)),),
        polylines=(LayoutPolyline("wall", ((0.2, 1.0), (3.0, 1.0))),),
    )
    text = doc.to_json()
    assert doc.to_json() == text  # byte-stable serialization
    back = LayoutDocument.from_json(text)
    assert back == doc
    block = unit_block(3.2)
    direct = rasterize_layout(
        [("chair", np.array([1.6, 1.6]), np.array([3.2, 3.2]))],
        block, 8,
        polylines=[("wall", np.array([[0.2, 1.0], [3.0, 1.0]]))],
    )
    assert torch.equal(doc.rasterize(block, 8).raster, direct.raster)


def test_layout_document_rejects_unknown_label():
    with pytest.raises(ValueError, match="unknown category"):
        LayoutDocument((0, 0, 0), ("floor",), boxes=(LayoutBox("pony", (0, 0), (1, 1)),))


# ---------------------------------------------------------------------------
# denoiser


def test_sinusoidal_embedding_basics():
    t = torch.tensor([0, 1, 7])
    emb = sinusoidal_embedding(t, 64)
    assert emb.shape == (3, 64)
    assert float(emb.abs().max()) <= 1.0
    assert torch.allclose(emb[0, :32], torch.zeros(32, dtype=torch.float64))
    assert torch.allclose(emb[0, 32:], torch.ones(32, dtype=torch.float64))
    assert not torch.allclose(emb[1], emb[2])


def test_denoiser_output_shape_matches_input():
    net = micro_net()
    z = torch.randn((2, 3, 2, 4, 4), generator=torch.Generator().manual_seed(5))
    out = net(z, torch.tensor([1, 3]))
    assert out.shape == z.shape


def test_denoiser_zero_initialized_head_predicts_zero():
    z = torch.randn((1, 3, 2, 4, 4), generator=torch.Generator().manual_seed(6))
    fresh = DenoiserNet(micro_config())  # constructed, never reset
    assert torch.equal(fresh(z, torch.tensor([2])), torch.zeros_like(z))
    reset = micro_net(seed=9)
    assert torch.equal(reset(z, torch.tensor([2])), torch.zeros_like(z))
    pred = denoise_predict(reset, LatentTriPlane(z[0]), 2)
    assert torch.equal(pred.data, torch.zeros_like(z[0]))


def test_denoiser_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        micro_config(latent_resolution=5)
    with pytest.raises(ValueError, match="heads"):
        micro_config(attn_width=15)
    with pytest.raises(ValueError, match="parameterization"):
        micro_config(parameterization="score")


def test_conditional_net_requires_layout():
    cond = micro_net(layout_channels=2)
    z = LatentTriPlane(torch.zeros((3, 2, 4, 4)))
    with pytest.raises(ValueError, match="requires a layout"):
        denoise_predict(cond, z, 1)
    layout = LayoutMap(torch.zeros((2, 4, 4)), ("floor", "wall"), unit_block())
    uncond = micro_net()
    with pytest.raises(ValueError, match="not layout-conditioned"):
        denoise_predict(uncond, z, 1, layout)


def test_layout_mismatches_are_rejected():
    cond = micro_net(layout_channels=2)
    z = LatentTriPlane(torch.zeros((3, 2, 4, 4)))
    wrong_res = LayoutMap(torch.zeros((2, 8, 8)), ("floor", "wall"), unit_block())
    with pytest.raises(ValueError, match="resolution"):
        denoise_predict(cond, z, 1, wrong_res)
    wrong_cats = LayoutMap(torch.zeros((3, 4, 4)), ("floor", "wall", "chair"), unit_block())
    with pytest.raises(ValueError, match="categories"):
        denoise_predict(cond, z, 1, wrong_cats)


def test_zero_layout_matches_unconditional_net():
    uncond = randomize_head(micro_net(seed=21), seed=22)
    cond = micro_net(seed=23, layout_channels=2)
    base = uncond.state_dict()
    surgery = {k: v.clone() for k, v in base.items()}
    stem = torch.zeros_like(cond.state_dict()["stem.weight"])
    stem[:, : uncond.cfg.latent_channels] = base["stem.weight"]
    surgery["stem.weight"] = stem
    cond.load_state_dict(surgery)

    z = LatentTriPlane(torch.randn((3, 2, 4, 4), generator=torch.Generator().manual_seed(24)))
    layout = LayoutMap(torch.zeros((2, 4, 4)), ("floor", "wall"), unit_block())
    with_layout = denoise_predict(cond, z, 3, layout)
    without = denoise_predict(uncond, z, 3)
    assert torch.allclose(with_layout.data, without.data, atol=1e-7)


def test_denoise_predict_is_deterministic():
    net = randomize_head(micro_net(seed=25))
    z = LatentTriPlane(torch.randn((3, 2, 4, 4), generator=torch.Generator().manual_seed(26)))
    a = denoise_predict(net, z, 2)
    b = denoise_predict(net, z, 2)
    assert torch.equal(a.data, b.data)


def test_noise_parameterization_recovers_z0():
    sched = toy_schedule()
    cfg = micro_config(parameterization="noise")
    gen = torch.Generator().manual_seed(27)
    z0 = torch.randn((3, 2, 4, 4), generator=gen)
    eps = torch.randn((3, 2, 4, 4), generator=gen)
    t = 3
    z_t = q_sample(z0, t, eps, sched)
    net = _FixedPrediction(cfg, eps)
    got = denoise_predict(net, LatentTriPlane(z_t), t, sched=sched)
    assert torch.allclose(got.data, z0, atol=1e-5)
    with pytest.raises(ValueError, match="schedule"):
        denoise_predict(net, LatentTriPlane(z_t), t)


# ---------------------------------------------------------------------------
# training


def test_train_step_zero_loss_for_oracle_net():
    sched = toy_schedule()
    cfg = micro_config()
    gen = torch.Generator().manual_seed(28)
    z_star = torch.randn((3, 2, 4, 4), generator=gen)
    net = _FixedPrediction(cfg, z_star)
    opt = torch.optim.SGD(net.parameters(), lr=0.1)
    z0 = z_star[None].repeat(4, 1, 1, 1, 1)
    loss = train_step(net, z0, None, sched, opt, gen)
    assert loss == 0.0


def test_train_step_toy_squared_error():
    sched = toy_schedule()
    cfg = micro_config()
    net = _FixedPrediction(cfg, torch.zeros((3, 2, 4, 4)))
    opt = torch.optim.SGD(net.parameters(), lr=0.1)
    z0 = torch.full((2, 3, 2, 4, 4), 2.0)
    loss = train_step(net, z0, None, sched, opt, torch.Generator().manual_seed(29))
    assert loss == 4.0


def test_train_step_aborts_on_nan():
    sched = toy_schedule()
    net = _FixedPrediction(micro_config(), torch.full((3, 2, 4, 4), float("nan")))
    opt = torch.optim.SGD(net.parameters(), lr=0.1)
    z0 = torch.zeros((1, 3, 2, 4, 4))
    with pytest.raises(RuntimeError, match="diverged"):
        train_step(net, z0, None, sched, opt, torch.Generator().manual_seed(30))


def test_train_step_rejects_empty_batch():
    sched = toy_schedule()
    net = micro_net()
    opt = torch.optim.SGD(net.parameters(), lr=0.1)
    with pytest.raises(ValueError, match="nonempty"):
        train_step(net, torch.zeros((0, 3, 2, 4, 4)), None, sched, opt,
                   torch.Generator().manual_seed(0))


def test_train_step_updates_parameters():
    sched = toy_schedule()
    net = micro_net(seed=31)
    opt = torch.optim.Adam(net.parameters(), lr=1e-3)
    gen = torch.Generator().manual_seed(32)
    z0 = torch.randn((4, 3, 2, 4, 4), generator=gen)
    assert torch.equal(net.head.weight, torch.zeros_like(net.head.weight))
    loss = train_step(net, z0, None, sched, opt, gen)
    assert math.isfinite(loss) and loss > 0.0
    assert not torch.equal(net.head.weight, torch.zeros_like(net.head.weight))


def _structured_latents(count: int, seed: int) -> list[LatentTriPlane]:
    """Low-rank latent corpus: two fixed patterns with random coefficients."""
    gen = torch.Generator().manual_seed(seed)
    basis = torch.randn((2, 3, 2, 4, 4), generator=gen)
    out = []
    for _ in range(count):
        coef = torch.randn((2,), generator=gen)
        data = coef[0] * basis[0] + coef[1] * basis[1]
        out.append(LatentTriPlane(data + 1.5))  # offset exercises normalization
    return out


def test_training_halves_loss_on_toy_corpus():
    latents = _structured_latents(64, seed=33)
    cfg = micro_config(conv_width=16, attn_width=32, attn_heads=4, blocks=2,
                       time_dim=32)
    sched = build_schedule(50)
    train = DiffusionTrainConfig(steps=2000, batch=16, lr=1e-3)
    net, standardizer, history = train_denoiser(latents, None, cfg, sched, train, seed=34)
    assert len(history) == train.steps
    assert all(math.isfinite(v) for v in history)
    head = sum(history[:200]) / 200
    tail = sum(history[-200:]) / 200
    assert tail <= 0.5 * head, f"loss went {head:.4f} -> {tail:.4f}"
    assert not net.training
    assert standardizer.mean.shape == (3, 2)


def test_train_denoiser_validates_inputs():
    cfg = micro_config()
    sched = toy_schedule()
    train = DiffusionTrainConfig(steps=1, batch=2)
    with pytest.raises(ValueError, match="at least one"):
        train_denoiser([], None, cfg, sched, train, seed=0)
    latents = _structured_latents(2, seed=35)
    layout = LayoutMap(torch.zeros((2, 4, 4)), ("floor", "wall"), unit_block())
    with pytest.raises(ValueError, match="conditional"):
        train_denoiser(latents, [layout, layout], cfg, sched, train, seed=0)
    cond = micro_config(layout_channels=2)
    with pytest.raises(ValueError, match="conditional"):
        train_denoiser(latents, None, cond, sched, train, seed=0)
    with pytest.raises(ValueError, match="one layout per latent"):
        train_denoiser(latents, [layout], cond, sched, train, seed=0)


def test_train_denoiser_conditional_smoke():
    latents = _structured_latents(4, seed=36)
    raster = torch.zeros((2, 4, 4))
    raster[0, :2, :2] = 1.0
    layouts = [LayoutMap(raster, ("floor", "wall"), unit_block())] * 4
    cfg = micro_config(layout_channels=2)
    net, _, history = train_denoiser(
        latents, layouts, cfg, toy_schedule(),
        DiffusionTrainConfig(steps=5, batch=2, lr=1e-3), seed=37,
    )
    assert net.cfg.conditional
    assert len(history) == 5 and all(math.isfinite(v) for v in history)


def test_train_loss_gradients_match_finite_differences():
    seed = 7
    cfg = micro_config()  # n=4, c=2, one attention block
    sched = build_schedule(8)
    net = micro_net(seed=16)
    randomize_head(net, seed=18)
    gen = torch.Generator().manual_seed(17)
    z0 = torch.randn((2, 3, 2, 4, 4), generator=gen)

    def replay_loss(model, z0_batch):
        g = torch.Generator().manual_seed(seed)
        t = torch.randint(1, sched.steps + 1, (z0_batch.shape[0],), generator=g)
        eps = standard_normal(z0_batch.shape, g, z0_batch.dtype)
        z_t = q_sample(z0_batch, t, eps, sched)
        return F.mse_loss(model(z_t, t), z0_batch)

    loss = replay_loss(net, z0)
    net.zero_grad()
    loss.backward()
    auto = {name: p.grad.clone() for name, p in net.named_parameters()}

    twin = DenoiserNet(cfg).to(torch.float64)
    twin.load_state_dict({k: v.double() for k, v in net.state_dict().items()})
    z0_64 = z0.double()

    def loss64() -> float:
        with torch.no_grad():
            return float(replay_loss(twin, z0_64))

    params = list(twin.named_parameters())
    sizes = np.array([p.numel() for _, p in params])
    rng = np.random.default_rng(3)
    picks = rng.choice(sizes.sum(), size=100, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    checked = 0
    for pick in picks:
        which = int(np.searchsorted(offsets, pick, side="right") - 1)
        name, p = params[which]
        idx = int(pick - offsets[which])
        flat = p.data.view(-1)
        h = 1e-6 * max(1.0, abs(float(flat[idx])))
        keep = float(flat[idx])
        flat[idx] = keep + h
        f_plus = loss64()
        flat[idx] = keep - h
        f_minus = loss64()
        flat[idx] = keep
        fd = (f_plus - f_minus) / (2 * h)
        got = float(auto[name].view(-1)[idx])
        assert abs(fd - got) <= 1e-3 * max(abs(fd), abs(got), 1e-4), (
            f"{name}[{idx}]: fd={fd:.6g} autograd={got:.6g}"
        )
        checked += 1
    assert checked == 100


# ---------------------------------------------------------------------------
# sampling


def test_reverse_step_noise_boundary():
    sched = toy_schedule()
    net = micro_net()
    z = torch.zeros((3, 2, 4, 4))
    eps = torch.zeros_like(z)
    with pytest.raises(ValueError, match="final step"):
        reverse_step(net, z, 1, sched, eps)
    with pytest.raises(ValueError, match="final step"):
        reverse_step(net, z, 2, sched, None)


def test_sample_oracle_net_returns_target_exactly():
    sched = toy_schedule()
    cfg = micro_config()
    gen = torch.Generator().manual_seed(38)
    z_star = torch.randn((3, 2, 4, 4), generator=gen)
    net = _FixedPrediction(cfg, z_star)
    out = sample(net, sched, None, torch.Generator().manual_seed(39))
    assert torch.equal(out.data, z_star)


def test_sample_is_bit_reproducible():
    sched = toy_schedule()
    net = randomize_head(micro_net(seed=40), seed=41)
    a = sample(net, sched, None, torch.Generator().manual_seed(42))
    b = sample(net, sched, None, torch.Generator().manual_seed(42))
    c = sample(net, sched, None, torch.Generator().manual_seed(43))
    assert torch.equal(a.data, b.data)
    assert not torch.equal(a.data, c.data)


def test_sample_follows_canonical_draw_order():
    # z_T first, then one noise tensor per step T..2, none at t=1; the
    # expansion machinery replays this order and relies on it bit-for-bit.
    sched = toy_schedule()
    net = randomize_head(micro_net(seed=44), seed=45)
    shape = (3, 2, 4, 4)
    gen = torch.Generator().manual_seed(46)
    z = standard_normal(shape, gen, torch.float32)
    for t in range(sched.steps, 1, -1):
        eps = standard_normal(shape, gen, torch.float32)
        z = reverse_step(net, z, t, sched, eps)
    z = reverse_step(net, z, 1, sched, None)
    direct = sample(net, sched, None, torch.Generator().manual_seed(46))
    assert torch.equal(direct.data, z)


def test_sample_destandardizes_output():
    sched = toy_schedule()
    cfg = micro_config()
    z_star = torch.randn((3, 2, 4, 4), generator=torch.Generator().manual_seed(47))
    net = _FixedPrediction(cfg, z_star)
    stats = Standardizer(np.full((3, 2), 2.0), np.full((3, 2), 3.0))
    out = sample(net, sched, None, torch.Generator().manual_seed(48),
                 standardizer=stats)
    assert torch.equal(out.data, stats.invert(z_star))


def test_sample_conditional_uses_layout():
    sched = toy_schedule()
    net = randomize_head(micro_net(seed=49, layout_channels=2), seed=50)
    raster = torch.zeros((2, 4, 4))
    raster[1, 1:3, 1:3] = 1.0
    layout = LayoutMap(raster, ("floor", "wall"), unit_block())
    empty = LayoutMap(torch.zeros((2, 4, 4)), ("floor", "wall"), unit_block())
    with_objects = sample(net, sched, layout, torch.Generator().manual_seed(51))
    without = sample(net, sched, empty, torch.Generator().manual_seed(51))
    assert not torch.equal(with_objects.data, without.data)


# ---------------------------------------------------------------------------
# standardization


def test_fit_standardizer_known_statistics():
    a = LatentTriPlane(torch.full((3, 2, 4, 4), 1.0))
    b = LatentTriPlane(torch.full((3, 2, 4, 4), 3.0))
    stats = fit_standardizer([a, b])
    assert np.allclose(stats.mean, 2.0, atol=1e-12)
    assert np.allclose(stats.std, 1.0, atol=1e-12)
    z = stats.apply(a.data)
    assert torch.allclose(z, torch.full_like(z, -1.0), atol=1e-6)
    back = stats.invert(z)
    assert torch.allclose(back, a.data, atol=1e-6)


def test_fit_standardizer_applies_floor_to_constant_channels():
    a = LatentTriPlane(torch.full((3, 2, 4, 4), 5.0))
    stats = fit_standardizer([a, a])
    assert np.allclose(stats.std, 1e-6)
    z = stats.apply(a.data)
    assert torch.isfinite(z).all()


def test_standardizer_validation():
    with pytest.raises(ValueError, match="at least one"):
        fit_standardizer([])
    with pytest.raises(ValueError, match="\\(3, channels\\)"):
        Standardizer(np.zeros((2, 2)), np.ones((2, 2)))
    with pytest.raises(ValueError, match="positive"):
        Standardizer(np.zeros((3, 2)), np.zeros((3, 2)))


# ---------------------------------------------------------------------------
# persistence


def _micro_bundle(conditional: bool = False) -> DiffusionBundle:
    kwargs = dict(layout_channels=len(ROOM_CATEGORIES)) if conditional else {}
    net = randomize_head(micro_net(seed=52, **kwargs), seed=53)
    latents = _structured_latents(3, seed=54)
    return DiffusionBundle(
        net,
        build_schedule(10, 1e-3, 0.1),
        fit_standardizer(latents),
        categories=ROOM_CATEGORIES if conditional else (),
        beta_min=1e-3,
        beta_max=0.1,
    )


def test_diffusion_checkpoint_roundtrip(tmp_path):
    bundle = _micro_bundle()
    path = tmp_path / "model.bfdm"
    save_diffusion(bundle, path)
    loaded = load_diffusion(path)

    for (ka, va), (kb, vb) in zip(
        bundle.net.state_dict().items(), loaded.net.state_dict().items()
    ):
        assert ka == kb
        assert torch.equal(va, vb)
    assert all(not p.requires_grad for p in loaded.net.parameters())
    assert not loaded.net.training
    assert loaded.sched.steps == 10
    assert np.array_equal(loaded.sched.beta, bundle.sched.beta)
    assert np.array_equal(loaded.standardizer.mean, bundle.standardizer.mean)
    assert np.array_equal(loaded.standardizer.std, bundle.standardizer.std)

    z = LatentTriPlane(torch.randn((3, 2, 4, 4), generator=torch.Generator().manual_seed(55)))
    before = denoise_predict(bundle.net, z, 4)
    after = denoise_predict(loaded.net, z, 4)
    assert torch.equal(before.data, after.data)


def test_diffusion_checkpoint_conditional_roundtrip(tmp_path):
    bundle = _micro_bundle(conditional=True)
    path = tmp_path / "cond.bfdm"
    save_diffusion(bundle, path)
    loaded = load_diffusion(path)
    assert loaded.net.cfg.conditional
    assert loaded.net.cfg.layout_channels == len(ROOM_CATEGORIES)
    assert loaded.categories == ROOM_CATEGORIES


def test_diffusion_checkpoint_rejects_wrong_magic(tmp_path):
    path = tmp_path / "bogus.bfdm"
    with open(path, "wb") as f:
        artifacts.write_header(f, artifacts.MAGIC_LATENT, 1)
    with pytest.raises(artifacts.ArtifactError):
        load_diffusion(path)


def test_diffusion_bundle_rejects_category_mismatch():
    net = micro_net(seed=56, layout_channels=3)
    latents = _structured_latents(2, seed=57)
    with pytest.raises(ValueError, match="category name"):
        DiffusionBundle(net, toy_schedule(), fit_standardizer(latents),
                        categories=("floor",))
