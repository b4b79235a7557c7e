"""Task heads: shapes, heatmap synthesis/decoding round trips, and the four
loss functions against hand-computed and finite-difference oracles."""

import numpy as np
import pytest

from sapiens_desk import heads, vit
from sapiens_desk.autodiff import Tensor
from sapiens_desk.errors import (
    ClassOutOfRangeError,
    DegenerateDepthError,
    EmptyMaskError,
    NonPositiveDepthError,
    ShapeMismatchError,
)
from sapiens_desk.gradcheck import gradcheck


CFG = vit.get_config("desk-tiny").with_image(64, 48)


def _tokens(rng, b=1):
    return Tensor(rng.normal(size=(b, CFG.n_tokens, CFG.hidden_size)),
                  requires_grad=True, dtype=np.float64)


def test_head_output_shapes(rng):
    tokens = _tokens(rng)
    for task, c in heads.TASK_CHANNELS.items():
        params = heads.init_head_params(CFG, c, np.random.default_rng(0),
                                        dtype=np.float64)
        oh, ow = heads.task_output_size(task, 64, 48)
        out = heads.head_forward(tokens, params, CFG, oh, ow)
        assert out.shape == (1, c, oh, ow)
    assert heads.task_output_size("pose", 64, 48) == (16, 12)
    assert heads.task_output_size("seg", 64, 48) == (64, 48)


def test_head_gradient_flow(rng):
    params = heads.init_head_params(CFG, 3, np.random.default_rng(1), dtype=np.float64)
    tokens = _tokens(rng)
    out = heads.head_forward(tokens, params, CFG, 64, 48)
    (out * out).mean().backward()
    assert np.abs(params["head.up1.w"].grad).max() > 0
    assert np.abs(tokens.grad).max() > 0


# -- heatmaps -----------------------------------------------------------------


def test_heatmap_peak_is_one_on_grid_centre():
    # input pixel that maps exactly onto heatmap cell (3, 2)
    x = (2 + 0.5) * 4 - 0.5
    y = (3 + 0.5) * 4 - 0.5
    hm = heads.make_heatmaps(np.array([[x, y]]), np.array([2]), 16, 12)
    assert hm.maps[0, 3, 2] == 1.0
    assert hm.maps[0].max() == 1.0


def test_heatmap_sigma_profile():
    x = (2 + 0.5) * 4 - 0.5
    y = (3 + 0.5) * 4 - 0.5
    hm = heads.make_heatmaps(np.array([[x, y]]), np.array([2]), 16, 12, sigma=2.0)
    # one sigma away along x: exp(-1/2)
    np.testing.assert_allclose(hm.maps[0, 3, 4], np.exp(-0.5), atol=1e-6)


def test_heatmap_absent_keypoint_zero_and_invalid():
    hm = heads.make_heatmaps(np.array([[5.0, 5.0], [7.0, 7.0]]),
                             np.array([0, 2]), 16, 12)
    assert not hm.valid[0] and hm.valid[1]
    assert hm.maps[0].sum() == 0.0


def test_decode_round_trips_within_half_stride(rng):
    coords = np.stack([rng.uniform(4, 44, size=8), rng.uniform(4, 60, size=8)], axis=1)
    vis = np.full(8, 2)
    hm = heads.make_heatmaps(coords, vis, 16, 12)
    dec, scores = heads.decode_keypoints(hm.maps)
    err = np.abs(dec - coords).max()
    assert err <= 0.5 * heads.POSE_STRIDE
    assert (scores > 0.9).all()


def test_decode_quarter_pixel_shift():
    m = np.zeros((1, 5, 7), dtype=np.float64)
    m[0, 2, 3] = 1.0
    m[0, 2, 4] = 0.5   # right neighbour larger than left
    m[0, 1, 3] = 0.3   # upper neighbour larger than lower
    dec, _ = heads.decode_keypoints(m, stride=1.0)
    np.testing.assert_allclose(dec[0], [3.25, 1.75])


def test_decode_tie_breaks_row_major():
    m = np.zeros((1, 4, 4), dtype=np.float64)
    m[0, 1, 2] = 1.0
    m[0, 3, 0] = 1.0  # equal value later in row-major order loses
    dec, _ = heads.decode_keypoints(m, stride=1.0)
    assert tuple(np.round(dec[0]).astype(int)) == (2, 1)


# -- losses ---------------------------------------------------------------------


def test_pose_loss_masks_invalid_channels(rng):
    pred = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True, dtype=np.float64)
    target = np.zeros((1, 2, 4, 4))
    valid = np.array([[True, False]])
    loss = heads.pose_loss(pred, target, valid)
    want = (pred.data[0, 0] ** 2).mean()
    np.testing.assert_allclose(loss.item(), want, rtol=1e-12)
    loss.backward()
    assert np.all(pred.grad[0, 1] == 0)
    with pytest.raises(EmptyMaskError):
        heads.pose_loss(pred, target, np.array([[False, False]]))


def test_seg_loss_uniform_logits_is_log_c():
    c = 8
    logits = Tensor(np.zeros((1, c, 3, 3)), requires_grad=True, dtype=np.float64)
    target = np.zeros((1, 3, 3), dtype=np.int64)
    loss = heads.seg_loss(logits, target, np.ones(c))
    np.testing.assert_allclose(loss.item(), np.log(c), atol=1e-12)


def test_seg_loss_weighted_hand_case():
    # two pixels, classes 0 and 1, weights 1 and 2, uniform logits
    logits = Tensor(np.zeros((1, 2, 1, 2)), dtype=np.float64, requires_grad=True)
    target = np.array([[[0, 1]]])
    loss = heads.seg_loss(logits, target, np.array([1.0, 2.0]))
    np.testing.assert_allclose(loss.item(), 1.5 * np.log(2), atol=1e-12)


def test_seg_loss_confident_logits_drive_loss_to_zero():
    logits_data = np.zeros((1, 3, 2, 2))
    target = np.ones((1, 2, 2), dtype=np.int64)
    logits_data[0, 1] = 50.0
    loss = heads.seg_loss(Tensor(logits_data, dtype=np.float64), target, np.ones(3))
    assert loss.item() < 1e-12


def test_seg_loss_class_range_checked():
    logits = Tensor(np.zeros((1, 3, 2, 2)), dtype=np.float64)
    bad = np.full((1, 2, 2), 3, dtype=np.int64)
    with pytest.raises(ClassOutOfRangeError):
        heads.seg_loss(logits, bad, np.ones(3))


def test_inverse_frequency_weights():
    w = heads.inverse_frequency_weights(np.array([100, 50, 0, 25]))
    assert w[2] == 0.0
    present = w[[0, 1, 3]]
    np.testing.assert_allclose(present.mean(), 1.0, atol=1e-12)
    assert present[2] > present[1] > present[0]


def test_depth_loss_doubling_oracle(rng):
    d = rng.uniform(0.5, 3.0, size=(6, 5))
    mask = np.ones((6, 5), dtype=bool)
    pred = Tensor(2.0 * d, dtype=np.float64)
    loss = heads.depth_loss(pred, d, mask)
    np.testing.assert_allclose(loss.item(), np.log(2) / np.sqrt(2), atol=1e-9)


def test_depth_loss_unit_invariance(rng):
    # scaling gt and prediction together (a change of units) leaves the
    # log-space residuals, and hence the loss, untouched
    d = rng.uniform(0.5, 3.0, size=(6, 5))
    p = rng.uniform(0.5, 3.0, size=(6, 5))
    mask = np.ones((6, 5), dtype=bool)
    a = heads.depth_loss(Tensor(p, dtype=np.float64), d, mask).item()
    b = heads.depth_loss(Tensor(7.5 * p, dtype=np.float64), 7.5 * d, mask).item()
    np.testing.assert_allclose(a, b, atol=1e-9)
    # a pure prediction-side scale error costs |ln s| / sqrt(2)
    c = heads.depth_loss(Tensor(3.0 * d, dtype=np.float64), d, mask).item()
    np.testing.assert_allclose(c, np.log(3.0) / np.sqrt(2), atol=1e-9)


def test_depth_loss_guards():
    d = np.ones((2, 2))
    with pytest.raises(EmptyMaskError):
        heads.depth_loss(Tensor(d, dtype=np.float64), d, np.zeros((2, 2), bool))
    with pytest.raises(NonPositiveDepthError):
        heads.depth_loss(Tensor(-d, dtype=np.float64), d, np.ones((2, 2), bool))
    # zero target depth is lifted, not rejected
    z = d.copy()
    z[0, 0] = 0.0
    loss = heads.depth_loss(Tensor(d, dtype=np.float64), z, np.ones((2, 2), bool))
    assert np.isfinite(loss.item())


def test_normal_loss_aligned_and_antipodal():
    h, w = 3, 4
    t = np.zeros((3, h, w))
    t[2] = 1.0
    mask = np.ones((h, w), dtype=bool)
    aligned = heads.normal_loss(Tensor(t.copy(), dtype=np.float64), t, mask)
    np.testing.assert_allclose(aligned.item(), 0.0, atol=1e-12)
    flipped = heads.normal_loss(Tensor(-t.copy(), dtype=np.float64), t, mask)
    np.testing.assert_allclose(flipped.item(), 4.0, atol=1e-9)


def test_normal_loss_normalizes_prediction(rng):
    t = np.zeros((3, 2, 2))
    t[0] = 1.0
    mask = np.ones((2, 2), dtype=bool)
    scaled = heads.normal_loss(Tensor(5.0 * t.copy(), dtype=np.float64), t, mask)
    np.testing.assert_allclose(scaled.item(), 0.0, atol=1e-9)


def test_normalize_depth():
    d = np.array([[2.0, 3.0], [4.0, 9.0]])
    mask = np.array([[True, True], [True, False]])
    out = heads.normalize_depth(d, mask)
    np.testing.assert_allclose(out, [[0.0, 0.5], [1.0, 0.0]])
    with pytest.raises(DegenerateDepthError):
        heads.normalize_depth(np.full((2, 2), 3.0), mask)


def test_loss_shape_validation(rng):
    with pytest.raises(ShapeMismatchError):
        heads.pose_loss(Tensor(np.zeros((1, 2, 4, 4))), np.zeros((1, 2, 3, 4)),
                        np.ones((1, 2), bool))
    with pytest.raises(ShapeMismatchError):
        heads.normal_loss(Tensor(np.zeros((2, 4, 4))), np.zeros((2, 4, 4)),
                          np.ones((4, 4), bool))


# every loss gradient against central differences

def test_all_losses_pass_gradcheck(rng):
    pred = rng.normal(size=(1, 3, 6, 5))
    target = rng.normal(size=(1, 3, 6, 5))
    valid = np.array([[True, False, True]])
    rep = gradcheck(lambda p: heads.pose_loss(p, target, valid),
                    [Tensor(pred, dtype=np.float64)])
    assert rep.passed, f"pose: {rep}"

    logits = rng.normal(size=(1, 4, 5, 5))
    seg_t = rng.integers(0, 4, size=(1, 5, 5))
    w = heads.inverse_frequency_weights(np.bincount(seg_t.ravel(), minlength=4))
    rep = gradcheck(lambda p: heads.seg_loss(p, seg_t, w),
                    [Tensor(logits, dtype=np.float64)])
    assert rep.passed, f"seg: {rep}"

    d_gt = rng.uniform(0.5, 4.0, size=(6, 6))
    d_pred = rng.uniform(0.5, 4.0, size=(6, 6))
    mask = rng.random((6, 6)) > 0.3
    rep = gradcheck(lambda p: heads.depth_loss(p, d_gt, mask),
                    [Tensor(d_pred, dtype=np.float64)])
    assert rep.passed, f"depth: {rep}"

    n_t = rng.normal(size=(3, 5, 5))
    n_t /= np.linalg.norm(n_t, axis=0, keepdims=True)
    n_p = rng.normal(size=(3, 5, 5)) + 0.5
    rep = gradcheck(lambda p: heads.normal_loss(p, n_t, mask[:5, :5]),
                    [Tensor(n_p, dtype=np.float64)])
    assert rep.passed, f"normal: {rep}"
