"""Box cropping shared by pose training and top-down inference.

The same affine mapping is used in both directions so that a keypoint
projected into a crop and decoded back lands on its original image
position: src = box_origin + (dst + 0.5) * (box_extent / out_extent) - 0.5,
following the half-pixel-center convention used everywhere else.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateBoxError

__all__ = ["pad_box_to_aspect", "crop_resize", "crop_to_image_coords",
           "image_to_crop_coords"]


def _check_box(box) -> np.ndarray:
    box = np.asarray(box, dtype=np.float64)
    if box.shape != (4,) or box[2] <= 0 or box[3] <= 0:
        raise DegenerateBoxError(f"box must be (x, y, w, h) with positive size, got {box}")
    return box


def pad_box_to_aspect(box, aspect: float) -> np.ndarray:
    """Grow the box symmetrically about its center until h/w == aspect."""
    x, y, w, h = _check_box(box)
    if aspect <= 0:
        raise DegenerateBoxError(f"aspect must be positive, got {aspect}")
    if h / w < aspect:
        nh, nw = w * aspect, w
    else:
        nh, nw = h, h / aspect
    cx, cy = x + w / 2, y + h / 2
    return np.array([cx - nw / 2, cy - nh / 2, nw, nh])


def crop_resize(image: np.ndarray, box, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of the box interior to [out_h, out_w, C]; samples
    falling outside the image read as zero."""
    box = _check_box(box)
    img = np.asarray(image, dtype=np.float64)
    H, W = img.shape[:2]
    sx = box[0] + (np.arange(out_w) + 0.5) * (box[2] / out_w) - 0.5
    sy = box[1] + (np.arange(out_h) + 0.5) * (box[3] / out_h) - 0.5
    gx, gy = np.meshgrid(sx, sy)

    x0 = np.floor(gx).astype(int)
    y0 = np.floor(gy).astype(int)
    fx = gx - x0
    fy = gy - y0
    out = np.zeros((out_h, out_w) + img.shape[2:], dtype=np.float64)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            xi = x0 + dx
            yi = y0 + dy
            valid = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
            vals = img[np.clip(yi, 0, H - 1), np.clip(xi, 0, W - 1)]
            w = (wy * wx) * valid
            out += vals * (w[..., None] if img.ndim == 3 else w)
    return out


def crop_to_image_coords(coords: np.ndarray, box, out_h: int, out_w: int) -> np.ndarray:
    """Map (x, y) positions measured in crop pixels back to image pixels."""
    box = _check_box(box)
    coords = np.asarray(coords, dtype=np.float64)
    out = np.empty_like(coords)
    out[..., 0] = box[0] + (coords[..., 0] + 0.5) * (box[2] / out_w) - 0.5
    out[..., 1] = box[1] + (coords[..., 1] + 0.5) * (box[3] / out_h) - 0.5
    return out


def image_to_crop_coords(coords: np.ndarray, box, out_h: int, out_w: int) -> np.ndarray:
    box = _check_box(box)
    coords = np.asarray(coords, dtype=np.float64)
    out = np.empty_like(coords)
    out[..., 0] = (coords[..., 0] - box[0] + 0.5) * (out_w / box[2]) - 0.5
    out[..., 1] = (coords[..., 1] - box[1] + 0.5) * (out_h / box[3]) - 0.5
    return out
