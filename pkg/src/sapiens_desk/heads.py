"""Task heads and the four task losses.

Each dense task (pose heatmaps, part segmentation, relative depth, surface
normals) shares one head shape: encoder tokens are reassembled into the
feature grid, upsampled by two stride-2 transposed convolutions, projected
to the task's channel count by a 3x3 convolution, and bilinearly resized
onto the task's output grid. Pose predicts at a quarter of the input
resolution; the dense tasks predict at full input resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import vit
from .autodiff import Tensor
from .errors import (
    BadSizeError,
    ClassOutOfRangeError,
    EmptyMaskError,
    MissingWeightError,
    NonPositiveDepthError,
    DegenerateDepthError,
    ShapeMismatchError,
)
from .skeleton import N_KEYPOINTS, N_PARTS

__all__ = [
    "TASK_CHANNELS", "POSE_STRIDE", "HEATMAP_SIGMA", "Heatmaps",
    "head_param_shapes", "init_head_params", "head_forward", "task_output_size",
    "make_heatmaps", "decode_keypoints",
    "pose_loss", "seg_loss", "depth_loss", "normal_loss",
    "normalize_depth", "inverse_frequency_weights",
]

TASK_CHANNELS = {
    "pose": N_KEYPOINTS,
    "seg": N_PARTS,
    "depth": 1,
    "normal": 3,
}

POSE_STRIDE = 4       # heatmap grid is input size / 4
HEATMAP_SIGMA = 2.0   # in heatmap pixels
_DEPTH_EPS = 1e-6
_NORMAL_EPS = 1e-6


def task_output_size(task: str, input_h: int, input_w: int) -> tuple[int, int]:
    if task == "pose":
        return input_h // POSE_STRIDE, input_w // POSE_STRIDE
    return input_h, input_w


# -- head --------------------------------------------------------------------


def head_param_shapes(cfg: vit.ViTConfig, out_channels: int) -> dict[str, tuple[int, ...]]:
    d = cfg.hidden_size
    c1, c2 = max(d // 2, 16), max(d // 4, 16)
    return {
        "head.norm.g": (d,), "head.norm.b": (d,),
        "head.up1.w": (d, c1, 4, 4), "head.up1.b": (c1,),
        "head.up2.w": (c1, c2, 4, 4), "head.up2.b": (c2,),
        "head.out.w": (out_channels, c2, 3, 3), "head.out.b": (out_channels,),
    }


def init_head_params(cfg: vit.ViTConfig, out_channels: int,
                     rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for name, shape in head_param_shapes(cfg, out_channels).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "head.norm.g":
            data = np.ones(shape)
        elif leaf == "b":
            data = np.zeros(shape)
        else:
            data = vit.trunc_normal(rng, shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True)
    return params


def head_forward(tokens: Tensor, params: dict[str, Tensor], cfg: vit.ViTConfig,
                 out_h: int, out_w: int) -> Tensor:
    """Tokens [B, N, D] to dense maps [B, C, out_h, out_w]."""
    if out_h < 1 or out_w < 1:
        raise BadSizeError(f"head output {out_h}x{out_w} must be positive")
    b, n, d = tokens.shape
    gh, gw = cfg.grid_h, cfg.grid_w
    if n != gh * gw:
        raise ShapeMismatchError(f"head: {n} tokens vs grid {gh}x{gw}")
    for name in head_param_shapes(cfg, 1):
        if name not in params and not name.startswith("head.out"):
            raise MissingWeightError(f"weight {name!r} not found")
    x = ad.layer_norm(tokens) * params["head.norm.g"] + params["head.norm.b"]
    x = ad.transpose(x, (0, 2, 1))
    x = ad.reshape(x, (b, d, gh, gw))
    x = ad.gelu(ad.conv_transpose2d(x, params["head.up1.w"], params["head.up1.b"],
                                    stride=2, padding=1))
    x = ad.gelu(ad.conv_transpose2d(x, params["head.up2.w"], params["head.up2.b"],
                                    stride=2, padding=1))
    x = ad.conv2d(x, params["head.out.w"], params["head.out.b"], stride=1, padding=1)
    if x.shape[2:] != (out_h, out_w):
        x = ad.bilinear_resize(x, out_h, out_w)
    return x


# -- pose heatmaps --------------------------------------------------------------


@dataclass
class Heatmaps:
    maps: np.ndarray    # [K, H, W]
    valid: np.ndarray   # [K] bool, false for absent keypoints
    stride: float
    sigma: float


def make_heatmaps(coords: np.ndarray, vis: np.ndarray, out_h: int, out_w: int,
                  sigma: float = HEATMAP_SIGMA, stride: float = POSE_STRIDE) -> Heatmaps:
    """Unnormalized Gaussian targets, peak exactly 1 at the keypoint.

    `coords` are [K, 2] x,y in input pixels; the map grid places heatmap
    pixel (i, j) at input position ((j+.5)*stride-.5, (i+.5)*stride-.5).
    Absent keypoints (vis == 0) get an all-zero map and valid = False.
    """
    k = coords.shape[0]
    maps = np.zeros((k, out_h, out_w), dtype=np.float32)
    valid = np.asarray(vis) > 0
    ys, xs = np.mgrid[0:out_h, 0:out_w]
    for i in range(k):
        if not valid[i]:
            continue
        u = (coords[i, 0] + 0.5) / stride - 0.5
        v = (coords[i, 1] + 0.5) / stride - 0.5
        maps[i] = np.exp(-((xs - u) ** 2 + (ys - v) ** 2) / (2.0 * sigma ** 2))
    return Heatmaps(maps, valid, float(stride), float(sigma))


def decode_keypoints(maps: np.ndarray, stride: float = POSE_STRIDE
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Peak positions in input pixels plus peak scores.

    Argmax per channel (row-major order breaks ties toward the earlier
    pixel), then a quarter-pixel shift toward the larger neighbour on each
    axis, then the grid-to-input mapping.
    """
    maps = np.asarray(maps)
    k, h, w = maps.shape
    coords = np.zeros((k, 2), dtype=np.float64)
    scores = np.zeros(k, dtype=np.float64)
    for i in range(k):
        flat = int(np.argmax(maps[i]))
        r, c = divmod(flat, w)
        scores[i] = maps[i, r, c]
        x, y = float(c), float(r)
        if 0 < c < w - 1:
            x += 0.25 * np.sign(maps[i, r, c + 1] - maps[i, r, c - 1])
        if 0 < r < h - 1:
            y += 0.25 * np.sign(maps[i, r + 1, c] - maps[i, r - 1, c])
        coords[i, 0] = (x + 0.5) * stride - 0.5
        coords[i, 1] = (y + 0.5) * stride - 0.5
    return coords, scores


# -- losses ----------------------------------------------------------------------


def pose_loss(pred: Tensor, target: np.ndarray, valid: np.ndarray) -> Tensor:
    """Mean squared heatmap error over valid keypoint channels.

    pred and target are [B, K, H, W]; valid is [B, K] (or [K]) and keypoints
    with valid == False contribute nothing.
    """
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"pose_loss: pred {pred.shape} vs target {target.shape}")
    v = np.asarray(valid, dtype=bool)
    if v.ndim == 1:
        v = v[None, :]
    n_valid = int(v.sum())
    if n_valid == 0:
        raise EmptyMaskError("pose_loss: no valid keypoints")
    b, k, h, w = pred.shape
    gate = Tensor(v.astype(pred.dtype)[:, :, None, None])
    diff = pred - Tensor(target.astype(pred.dtype, copy=False))
    total = ((diff * diff) * gate).sum()
    return total * (1.0 / (n_valid * h * w))


def inverse_frequency_weights(counts: np.ndarray) -> np.ndarray:
    """Class weights proportional to 1/frequency, rescaled to mean 1 over
    classes that actually occur; absent classes get weight 0."""
    counts = np.asarray(counts, dtype=np.float64)
    w = np.zeros_like(counts)
    present = counts > 0
    w[present] = 1.0 / counts[present]
    if present.any():
        w[present] /= w[present].mean()
    return w


def seg_loss(logits: Tensor, target: np.ndarray, weights: np.ndarray) -> Tensor:
    """Class-weighted cross entropy, averaged over all pixels.

    logits [B, C, H, W]; target [B, H, W] integer class ids; weights [C].
    """
    target = np.asarray(target)
    b, c, h, w = logits.shape
    if target.shape != (b, h, w):
        raise ShapeMismatchError(f"seg_loss: target {target.shape} vs logits {logits.shape}")
    if target.min() < 0 or target.max() >= c:
        raise ClassOutOfRangeError(
            f"seg_loss: class ids span [{target.min()}, {target.max()}], have {c} classes")
    weights = np.asarray(weights, dtype=np.float64)
    onehot = np.zeros((b, c, h, w), dtype=logits.dtype)
    np.put_along_axis(onehot, target[:, None, :, :], 1.0, axis=1)
    # stable log-sum-exp with a detached per-pixel shift
    m = logits.data.max(axis=1, keepdims=True)
    z = logits - Tensor(m.astype(logits.dtype, copy=False))
    lse = ad.log(ad.sum_(ad.exp(z), axes=(1,)))               # [B, H, W]
    picked = ad.channel_dot(z, Tensor(onehot), axis=1)        # [B, H, W]
    wmap = Tensor(weights[target].astype(logits.dtype, copy=False))
    return ((lse - picked) * wmap).mean()


def normalize_depth(depth: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Min-max normalize depth over masked pixels to [0, 1]; pixels outside
    the mask are zeroed."""
    depth = np.asarray(depth, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise EmptyMaskError("normalize_depth: empty mask")
    vals = depth[m]
    lo, hi = float(vals.min()), float(vals.max())
    if hi == lo:
        raise DegenerateDepthError("normalize_depth: constant depth on mask")
    out = np.zeros_like(depth)
    out[m] = (vals - lo) / (hi - lo)
    return out


def depth_loss(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Scale-invariant log-depth error over masked pixels:
    sqrt(mean(delta^2) - 0.5 * mean(delta)^2), delta = log(d) - log(d_hat).

    Depths below 1e-6 are lifted to 1e-6 before the log so exact zeros from
    synthetic renders stay finite; negative depths are rejected.
    """
    target = np.asarray(target)
    m = np.asarray(mask, dtype=bool)
    if pred.shape != target.shape or m.shape != target.shape:
        raise ShapeMismatchError(
            f"depth_loss: pred {pred.shape} target {target.shape} mask {m.shape}")
    if not m.any():
        raise EmptyMaskError("depth_loss: empty mask")
    if target[m].min() < 0 or pred.data[m].min() < 0:
        raise NonPositiveDepthError("depth_loss: negative depth")
    t = np.log(np.maximum(target[m], _DEPTH_EPS))
    p = ad.log(ad.clamp_min(ad.masked_select(pred, m), _DEPTH_EPS))
    delta = Tensor(t.astype(pred.dtype, copy=False)) - p
    msq = (delta * delta).mean()
    mean = delta.mean()
    return ad.sqrt(msq - (mean * mean) * 0.5)


def normal_loss(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Per-pixel L1 plus cosine alignment against unit target normals:
    mean over masked pixels of |n - n_hat|_1 + (1 - n . n_hat).

    pred is [3, H, W] raw head output (L2-normalized here); target holds
    unit normals of the same shape; mask is [H, W].
    """
    target = np.asarray(target)
    if pred.shape != target.shape or pred.shape[0] != 3:
        raise ShapeMismatchError(
            f"normal_loss: pred {pred.shape} vs target {target.shape}")
    m = np.asarray(mask, dtype=bool)
    if m.shape != pred.shape[1:]:
        raise ShapeMismatchError(f"normal_loss: mask {m.shape} vs maps {pred.shape[1:]}")
    if not m.any():
        raise EmptyMaskError("normal_loss: empty mask")
    norm = ad.clamp_min(ad.l2_norm(pred, axes=(0,), keepdims=True), _NORMAL_EPS)
    unit = pred / norm
    t = Tensor(target.astype(pred.dtype, copy=False))
    l1 = ad.l1_norm(unit - t, axes=(0,))          # [H, W]
    dot = ad.channel_dot(unit, t, axis=0)         # [H, W]
    per_pixel = l1 + (1.0 - dot)
    return ad.masked_select(per_pixel, m).mean()

# -- bundled model -----------------------------------------------------------------


@dataclass
class TaskModel:
    """Encoder plus one task head, with the readout that turns raw head
    activations into task-space predictions: depth maps go through exp (the
    head regresses log meters), normals are L2-normalized, pose and seg
    stay as heatmaps / logits."""
    cfg: vit.ViTConfig
    task: str
    params: dict

    def out_size(self) -> tuple[int, int]:
        return task_output_size(self.task, self.cfg.image_height, self.cfg.image_width)

    def forward(self, images) -> Tensor:
        """[B, H, W, C] images to [B, C_task, out_h, out_w] raw maps."""
        tokens = vit.encode(images, self.params, self.cfg)
        oh, ow = self.out_size()
        return head_forward(tokens, self.params, self.cfg, oh, ow)

    def predict(self, images) -> np.ndarray:
        with ad.no_grad():
            raw = self.forward(images).data
        return self.readout(raw)

    def readout(self, raw: np.ndarray) -> np.ndarray:
        if self.task == "depth":
            return np.exp(raw)
        if self.task == "normal":
            norms = np.linalg.norm(raw, axis=1, keepdims=True)
            return raw / np.maximum(norms, _NORMAL_EPS)
        return raw
