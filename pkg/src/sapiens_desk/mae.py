"""Masked-autoencoder pretraining objective.

A random subset of patch tokens is hidden from the encoder; a small
decoder, fed the visible features plus a shared learned mask token (with
positional embeddings restored), predicts the pixel content of every
patch. The loss is mean squared error against per-patch normalized pixels,
measured on masked patches only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import vit
from .autodiff import Tensor
from .errors import BadRatioError, PlanMismatchError

__all__ = [
    "MaskPlan", "MAEOutput", "sample_mask", "normalize_patch_targets",
    "mae_forward", "psnr", "mask_sweep", "PSNR_CAP",
]

PSNR_CAP = 99.0
_NORM_EPS = 1e-6


@dataclass
class MaskPlan:
    """A partition of token indices into visible and masked sets."""
    n_tokens: int
    ratio: float
    visible: np.ndarray  # sorted indices the encoder sees
    masked: np.ndarray   # sorted indices the loss covers
    restore: np.ndarray  # position of each original token in [visible|masked]


def sample_mask(n_tokens: int, ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Draw a uniformly random mask covering round(ratio * n_tokens) tokens.

    The ratio must lie in [0, 1) and leave at least one token visible.
    """
    if not (0.0 <= ratio < 1.0):
        raise BadRatioError(f"mask ratio {ratio} outside [0, 1)")
    n_masked = int(round(ratio * n_tokens))
    if n_masked >= n_tokens:
        raise BadRatioError(f"mask ratio {ratio} leaves no visible token")
    perm = rng.permutation(n_tokens)
    masked = np.sort(perm[:n_masked])
    visible = np.sort(perm[n_masked:])
    restore = np.argsort(np.concatenate([visible, masked]), kind="stable")
    return MaskPlan(n_tokens, ratio, visible, masked, restore)


def normalize_patch_targets(patches: np.ndarray, eps: float = _NORM_EPS) -> np.ndarray:
    """Zero-mean unit-variance normalization of each patch row (last axis)."""
    mu = patches.mean(axis=-1, keepdims=True)
    var = patches.var(axis=-1, keepdims=True)
    return (patches - mu) / np.sqrt(var + eps)


@dataclass
class MAEOutput:
    loss: Tensor                  # scalar, masked patches only
    pred: Tensor                  # [B, N, patch_dim] normalized-pixel prediction
    plans: list[MaskPlan]
    reconstruction: np.ndarray    # [B, H, W, C]; visible patches are ground truth


def mae_forward(images: np.ndarray, params: dict[str, Tensor], cfg: vit.ViTConfig,
                plans: list[MaskPlan]) -> MAEOutput:
    """Encode visible tokens, decode all positions, score masked patches.

    The returned reconstruction composites ground-truth pixels at visible
    patches with predictions at masked ones; predictions are mapped back
    from normalized space using the target patch statistics.
    """
    images = np.asarray(images)
    b = images.shape[0]
    if len(plans) != b:
        raise PlanMismatchError(f"{len(plans)} mask plans for batch of {b}")
    for plan in plans:
        if plan.n_tokens != cfg.n_tokens:
            raise PlanMismatchError(
                f"plan covers {plan.n_tokens} tokens, encoder grid has {cfg.n_tokens}")
        if plan.visible.size != plans[0].visible.size:
            raise PlanMismatchError("mask plans in a batch must share one ratio")
    dd = cfg.decoder_hidden
    n, p = cfg.n_tokens, cfg.patch_dim
    vis_idx = np.stack([plan.visible for plan in plans])      # [B, V]
    restore = np.stack([plan.restore for plan in plans])      # [B, N]
    n_masked = plans[0].masked.size

    feats = vit.encode(images, params, cfg, visible=vis_idx)  # [B, V, D]
    feats = ad.layer_norm(feats) * params["dec.norm_in.g"] + params["dec.norm_in.b"]
    feats = feats @ params["dec.embed.w"] + params["dec.embed.b"]

    ones = Tensor(np.ones((b, n_masked, 1), dtype=feats.dtype))
    mask_tokens = ones * ad.reshape(params["dec.mask_token"], (1, 1, dd))
    seq = ad.concat([feats, mask_tokens], axis=1)             # [B, N, dd]
    seq = ad.index_select(seq, np.broadcast_to(restore[:, :, None], (b, n, dd)), axis=1)
    seq = seq + params["dec.pos_embed"]
    seq = vit.transformer_blocks(seq, params, "dec", cfg.decoder_layers,
                                 cfg.decoder_heads)
    seq = ad.layer_norm(seq) * params["dec.norm_out.g"] + params["dec.norm_out.b"]
    pred = seq @ params["dec.pred.w"] + params["dec.pred.b"]  # [B, N, P]

    patches = vit._patchify_batch(images.astype(pred.dtype, copy=False), cfg.patch_size)
    targets = normalize_patch_targets(patches)

    if n_masked:
        midx = np.stack([plan.masked for plan in plans])
        gather = np.broadcast_to(midx[:, :, None], (b, n_masked, p))
        pred_m = ad.index_select(pred, gather, axis=1)
        target_m = Tensor(np.take_along_axis(targets, gather, axis=1))
        diff = pred_m - target_m
        loss = (diff * diff).mean()
    else:
        loss = Tensor(np.zeros((), dtype=pred.dtype))

    recon = _composite(images, pred.data, patches, plans, cfg)
    return MAEOutput(loss, pred, plans, recon)


def _composite(images: np.ndarray, pred: np.ndarray, patches: np.ndarray,
               plans: list[MaskPlan], cfg: vit.ViTConfig) -> np.ndarray:
    """Splice predicted masked patches (un-normalized with target patch
    statistics) into the original images."""
    mu = patches.mean(axis=-1, keepdims=True)
    sd = np.sqrt(patches.var(axis=-1, keepdims=True) + _NORM_EPS)
    out = []
    gh, gw, ps = cfg.grid_h, cfg.grid_w, cfg.patch_size
    for i, plan in enumerate(plans):
        mixed = patches[i].copy()
        if plan.masked.size:
            mixed[plan.masked] = pred[i, plan.masked] * sd[i, plan.masked] + mu[i, plan.masked]
        img = mixed.reshape(gh, gw, ps, ps, cfg.in_channels)
        img = img.transpose(0, 2, 1, 3, 4).reshape(gh * ps, gw * ps, cfg.in_channels)
        out.append(img)
    return np.stack(out).astype(images.dtype, copy=False)


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0,
         cap: float = PSNR_CAP) -> float:
    """Peak signal-to-noise ratio in dB for same-shaped arrays; identical
    inputs report the cap instead of infinity."""
    mse = float(np.mean((np.asarray(a, dtype=np.float64) -
                         np.asarray(b, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * np.log10(peak * peak / mse))


def mask_sweep(images: np.ndarray, params: dict[str, Tensor], cfg: vit.ViTConfig,
               ratios: list[float], seed: int) -> list[tuple[float, float]]:
    """Mean composited-reconstruction PSNR per masking ratio.

    Each (image, ratio) pair draws its mask from a seed derived from the
    sweep seed and the image index, so rerunning the sweep is reproducible
    and ratios see the same stream of masks.
    """
    images = np.asarray(images)
    rows = []
    for ri, ratio in enumerate(ratios):
        vals = []
        for i in range(images.shape[0]):
            rng = np.random.default_rng((seed, ri, i))
            plan = sample_mask(cfg.n_tokens, ratio, rng)
            with ad.no_grad():
                out = mae_forward(images[i:i + 1], params, cfg, [plan])
            vals.append(psnr(images[i], out.reconstruction[0]))
        rows.append((float(ratio), float(np.mean(vals))))
    return rows
