"""Encoder architecture: patch layout, positional resampling, forward
semantics, and the capacity bookkeeping."""

import numpy as np
import pytest

from sapiens_desk import autodiff as ad
from sapiens_desk import vit
from sapiens_desk.autodiff import Tensor
from sapiens_desk.errors import (
    BadGridError,
    IndivisibleImageError,
    MissingWeightError,
    UnknownModelError,
)


def test_registry_lookup():
    cfg = vit.get_config("desk-tiny")
    assert cfg.hidden_size == 64 and cfg.layers == 4
    assert cfg.n_tokens == 64
    with pytest.raises(UnknownModelError):
        vit.get_config("desk-huge")


def test_config_validation():
    with pytest.raises(BadGridError):
        vit.ViTConfig("bad", 65, 2, 4, 8, 64, 64)
    with pytest.raises(IndivisibleImageError):
        vit.ViTConfig("bad", 64, 2, 4, 8, 60, 64)


def test_patchify_roundtrip_bitwise(rng):
    img = rng.random((64, 48, 3)).astype(np.float32)
    grid = vit.patchify(img, 8)
    assert grid.tokens.shape == (48, 192)
    assert (grid.grid_h, grid.grid_w) == (8, 6)
    back = vit.unpatchify(grid)
    np.testing.assert_array_equal(back.data, img)


def test_patchify_token_ordering(rng):
    # token k must hold patch (k // gw, k % gw) in (row, col, channel) order
    img = np.arange(16 * 16 * 3, dtype=np.float32).reshape(16, 16, 3)
    grid = vit.patchify(img, 8)
    want = img[8:16, 8:16, :].reshape(-1)
    np.testing.assert_array_equal(grid.tokens.data[3], want)


def test_patchify_rejects_indivisible():
    with pytest.raises(IndivisibleImageError):
        vit.patchify(np.zeros((60, 64, 3), dtype=np.float32), 8)


def test_pos_embed_interpolation_identity(rng):
    pos = rng.normal(size=(48, 32))
    out = vit.interpolate_pos_embed(pos, (8, 6), (8, 6))
    np.testing.assert_array_equal(out, pos)


def test_pos_embed_interpolation_linear_field():
    # a channel holding a linear function of grid position stays linear
    gh, gw = 8, 8
    yy, xx = np.mgrid[0:gh, 0:gw].astype(np.float64)
    pos = np.stack([xx.reshape(-1), yy.reshape(-1)], axis=1)
    out = vit.interpolate_pos_embed(pos, (gh, gw), (4, 4))
    xs = out[:, 0].reshape(4, 4)
    np.testing.assert_allclose(xs[0], [0.5, 2.5, 4.5, 6.5], atol=1e-6)
    with pytest.raises(BadGridError):
        vit.interpolate_pos_embed(pos, (7, 8), (4, 4))


def test_zero_layer_encoder_is_embedding(rng):
    cfg = vit.ViTConfig("probe", 32, 0, 4, 8, 32, 32, decoder_hidden=16,
                        decoder_layers=1, decoder_heads=4)
    params = vit.init_params(cfg, np.random.default_rng(0), dtype=np.float64)
    imgs = rng.random((2, 32, 32, 3))
    out = vit.encode(imgs, params, cfg)
    tokens = vit._patchify_batch(imgs, 8)
    want = tokens @ params["enc.patch_embed.w"].data + params["enc.patch_embed.b"].data
    want = want + params["enc.pos_embed"].data
    np.testing.assert_allclose(out.data, want, atol=1e-12)


def test_visible_subset_matches_full_encode_rows(rng):
    # gathering all tokens in order must reproduce the unmasked pass
    cfg = vit.get_config("desk-tiny")
    params = vit.init_params(cfg, np.random.default_rng(3), dtype=np.float64)
    imgs = rng.random((2, 64, 64, 3))
    full = vit.encode(imgs, params, cfg)
    idx = np.tile(np.arange(64), (2, 1))
    again = vit.encode(imgs, params, cfg, visible=idx)
    np.testing.assert_allclose(again.data, full.data, atol=1e-10)


def test_visible_subset_ordering(rng):
    # with zero layers the output rows are exactly the gathered embeddings
    cfg = vit.ViTConfig("probe0", 32, 0, 4, 8, 32, 32)
    params = vit.init_params(cfg, np.random.default_rng(1), dtype=np.float64)
    imgs = rng.random((1, 32, 32, 3))
    full = vit.encode(imgs, params, cfg)
    idx = np.array([[5, 2, 11]])
    sub = vit.encode(imgs, params, cfg, visible=idx)
    np.testing.assert_allclose(sub.data[0], full.data[0][idx[0]], atol=1e-12)


def test_encode_validates_input_and_weights(rng):
    cfg = vit.get_config("desk-tiny")
    params = vit.init_params(cfg, np.random.default_rng(0))
    with pytest.raises(IndivisibleImageError):
        vit.encode(rng.random((1, 32, 64, 3)), params, cfg)
    del params["enc.blocks.2.mlp.fc1.w"]
    with pytest.raises(MissingWeightError):
        vit.encode(rng.random((1, 64, 64, 3)).astype(np.float32), params, cfg)


def test_encode_deterministic(rng):
    cfg = vit.get_config("desk-tiny")
    imgs = rng.random((2, 64, 64, 3)).astype(np.float32)
    a = vit.encode(imgs, vit.init_params(cfg, np.random.default_rng(7)), cfg)
    b = vit.encode(imgs, vit.init_params(cfg, np.random.default_rng(7)), cfg)
    np.testing.assert_array_equal(a.data, b.data)


def test_gradient_reaches_patch_embedding(rng):
    cfg = vit.get_config("desk-tiny")
    params = vit.init_params(cfg, np.random.default_rng(5), dtype=np.float64)
    imgs = rng.random((1, 64, 64, 3))
    out = vit.encode(imgs, params, cfg)
    (out * out).sum().backward()
    g = params["enc.patch_embed.w"].grad
    assert g is not None and np.abs(g).max() > 0


def test_trunc_normal_bounds(rng):
    x = vit.trunc_normal(np.random.default_rng(0), (10000,), std=0.02)
    assert np.abs(x).max() <= 0.04 + 1e-12
    # truncation at 2 std squeezes the sample std to about 0.88 of nominal
    assert 0.8 * 0.02 < x.std() < 0.95 * 0.02


def test_count_params_matches_allocated_buffers():
    # closed-form count vs an actual allocation sweep
    for name in ("desk-tiny", "desk-small"):
        cfg = vit.get_config(name)
        params = vit.init_params(cfg, np.random.default_rng(0), include_decoder=True)
        allocated = sum(int(np.prod(p.shape)) for p in params.values())
        assert vit.count_params(cfg) == allocated


def test_count_params_hits_reference_capacity():
    for name in ("sapiens-0.3b", "sapiens-0.6b", "sapiens-1b", "sapiens-2b"):
        cfg = vit.get_config(name)
        got = vit.count_params(cfg)
        rel = abs(got - cfg.reference_params) / cfg.reference_params
        assert rel < 0.05, f"{name}: {got} vs {cfg.reference_params} ({rel:.2%})"


def test_estimate_flops_hand_computed():
    cfg = vit.get_config("desk-tiny")
    n, d, p = 64, 64, 192
    embed = 2 * n * p * d
    qkv = 2 * n * d * 3 * d
    scores = 2 * n * n * d
    apply_v = 2 * n * n * d
    proj = 2 * n * d * d
    mlp = 2 * (2 * n * d * 4 * d)
    want = embed + 4 * (qkv + scores + apply_v + proj + mlp)
    assert vit.estimate_flops(cfg) == want


def test_estimate_flops_monotone_in_tokens():
    cfg = vit.get_config("desk-tiny")
    vals = [vit.estimate_flops(cfg, n) for n in (16, 48, 64, 256)]
    assert vals == sorted(vals) and len(set(vals)) == len(vals)


def test_calibration_report_structure():
    rows = vit.calibration_report()
    assert [r["name"] for r in rows] == ["sapiens-0.3b", "sapiens-0.6b",
                                         "sapiens-1b", "sapiens-2b"]
    for r in rows:
        assert r["params_rel_err"] < 0.05
        assert r["flops_ratio_vs_smallest"] >= 1.0
