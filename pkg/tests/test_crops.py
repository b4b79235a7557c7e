import numpy as np
import pytest

from sapiens_desk import crops
from sapiens_desk.errors import DegenerateBoxError


def test_pad_box_preserves_center():
    box = [10.0, 20.0, 30.0, 30.0]
    out = crops.pad_box_to_aspect(box, 4 / 3)
    np.testing.assert_allclose(out, [10.0, 15.0, 30.0, 40.0])
    # already at aspect: unchanged
    np.testing.assert_allclose(crops.pad_box_to_aspect(out, 4 / 3), out)
    # too tall: widen instead
    tall = crops.pad_box_to_aspect([0.0, 0.0, 10.0, 40.0], 4 / 3)
    np.testing.assert_allclose(tall, [-10.0, 0.0, 30.0, 40.0])


def test_pad_box_rejects_degenerate():
    with pytest.raises(DegenerateBoxError):
        crops.pad_box_to_aspect([0, 0, 0.0, 10.0], 1.0)
    with pytest.raises(DegenerateBoxError):
        crops.pad_box_to_aspect([0, 0, 5.0, 10.0], -1.0)


def test_coordinate_maps_are_inverse():
    rng = np.random.default_rng(5)
    box = np.array([3.0, -2.0, 17.0, 29.0])
    pts = rng.uniform(-5, 40, size=(50, 2))
    fwd = crops.image_to_crop_coords(pts, box, 64, 48)
    back = crops.crop_to_image_coords(fwd, box, 64, 48)
    np.testing.assert_allclose(back, pts, atol=1e-10)


def test_crop_resize_identity():
    rng = np.random.default_rng(6)
    img = rng.uniform(size=(8, 6, 3))
    out = crops.crop_resize(img, [0.0, 0.0, 6.0, 8.0], 8, 6)
    np.testing.assert_allclose(out, img, atol=1e-12)


def test_crop_resize_doubles_with_interpolation():
    img = np.arange(4, dtype=np.float64).reshape(1, 4)[..., None] * np.ones(3)
    img = np.broadcast_to(img, (2, 4, 3)).copy()
    out = crops.crop_resize(img, [0.0, 0.0, 4.0, 2.0], 2, 8)
    # interior samples interpolate the linear ramp exactly
    np.testing.assert_allclose(out[0, 2:6, 0], [0.75, 1.25, 1.75, 2.25])


def test_crop_resize_zero_pads_outside():
    img = np.ones((4, 4, 3))
    out = crops.crop_resize(img, [-4.0, 0.0, 8.0, 4.0], 4, 8)
    # left half samples land fully outside the image
    assert out[:, :3].max() == 0.0
    np.testing.assert_allclose(out[:, 5:], 1.0)


def test_crop_resize_supports_single_channel():
    img = np.ones((4, 4))
    out = crops.crop_resize(img, [0.0, 0.0, 4.0, 4.0], 2, 2)
    assert out.shape == (2, 2)
    np.testing.assert_allclose(out, 1.0)
