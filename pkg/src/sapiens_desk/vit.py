"""Vision-transformer encoder with a model-size registry.

The encoder is plain pre-norm ViT: linear patch embedding, learned
positional table, then layers of multi-head self-attention and GELU MLP
blocks with residual connections. No class token; the final layer norm is
owned by whatever consumes the features (reconstruction decoder or task
head), so a zero-layer encoder returns exactly patch embedding plus
positional embedding.

A config also carries the width/depth of the reconstruction decoder used
during pretraining, because the registry's capacity accounting covers the
full pretraining model (encoder plus decoder).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (
    BadGridError,
    IndivisibleImageError,
    MissingWeightError,
    UnknownModelError,
)

__all__ = [
    "ViTConfig", "TokenGrid", "get_config", "register_config", "registry_names",
    "patchify", "unpatchify", "interpolate_pos_embed", "trunc_normal",
    "init_params", "param_shapes", "encode", "count_params", "estimate_flops",
    "calibration_report",
]


@dataclass(frozen=True)
class ViTConfig:
    name: str
    hidden_size: int
    layers: int
    heads: int
    patch_size: int
    image_height: int
    image_width: int
    mlp_ratio: int = 4
    in_channels: int = 3
    # reconstruction decoder (pretraining only)
    decoder_hidden: int = 0
    decoder_layers: int = 0
    decoder_heads: int = 0
    # externally published capacity figures this family is calibrated against
    reference_params: int | None = None
    reference_flops: float | None = None

    def __post_init__(self):
        if self.hidden_size % self.heads:
            raise BadGridError(
                f"{self.name}: hidden {self.hidden_size} not divisible by "
                f"{self.heads} heads")
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise IndivisibleImageError(
                f"{self.name}: image {self.image_height}x{self.image_width} not a "
                f"multiple of patch {self.patch_size}")
        if self.decoder_hidden and self.decoder_hidden % self.decoder_heads:
            raise BadGridError(f"{self.name}: decoder hidden/heads mismatch")

    @property
    def grid_h(self) -> int:
        return self.image_height // self.patch_size

    @property
    def grid_w(self) -> int:
        return self.image_width // self.patch_size

    @property
    def n_tokens(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.in_channels

    def with_image(self, height: int, width: int) -> "ViTConfig":
        """Same architecture on a different canvas (token grid changes)."""
        return replace(self, image_height=height, image_width=width)


_REGISTRY: dict[str, ViTConfig] = {}


def register_config(cfg: ViTConfig) -> ViTConfig:
    _REGISTRY[cfg.name] = cfg
    return cfg


def get_config(name: str) -> ViTConfig:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise UnknownModelError(
            f"unknown model {name!r}; have {sorted(_REGISTRY)}") from None


def registry_names() -> list[str]:
    return sorted(_REGISTRY)


# Desk-scale configs run on a CPU in seconds; the sapiens-* rows exist for
# capacity accounting and registry completeness, not for desk training.
register_config(ViTConfig("desk-tiny", 64, 4, 4, 8, 64, 64,
                          decoder_hidden=32, decoder_layers=2, decoder_heads=4))
register_config(ViTConfig("desk-small", 128, 6, 8, 8, 64, 64,
                          decoder_hidden=64, decoder_layers=2, decoder_heads=8))
register_config(ViTConfig("sapiens-0.3b", 1024, 24, 16, 16, 1024, 1024,
                          decoder_hidden=512, decoder_layers=8, decoder_heads=16,
                          reference_params=336_000_000, reference_flops=1.242e12))
register_config(ViTConfig("sapiens-0.6b", 1280, 32, 16, 16, 1024, 1024,
                          decoder_hidden=512, decoder_layers=8, decoder_heads=16,
                          reference_params=664_000_000, reference_flops=2.583e12))
register_config(ViTConfig("sapiens-1b", 1536, 40, 24, 16, 1024, 1024,
                          decoder_hidden=512, decoder_layers=8, decoder_heads=16,
                          reference_params=1_169_000_000, reference_flops=4.647e12))
register_config(ViTConfig("sapiens-2b", 1920, 48, 32, 16, 1024, 1024,
                          decoder_hidden=512, decoder_layers=8, decoder_heads=16,
                          reference_params=2_163_000_000, reference_flops=8.709e12))


# -- patch layout --------------------------------------------------------------


@dataclass
class TokenGrid:
    tokens: Tensor  # [n_tokens, patch_dim], rows in row-major grid order
    grid_h: int
    grid_w: int
    patch_size: int


def patchify(image: Tensor | np.ndarray, patch_size: int) -> TokenGrid:
    """Cut an HxWxC image into non-overlapping patch tokens.

    Token i holds patch (i // grid_w, i % grid_w) flattened in (row, col,
    channel) order, so unpatchify can restore the image bit for bit.
    """
    if not isinstance(image, Tensor):
        image = Tensor(image)
    if image.ndim != 3:
        raise IndivisibleImageError(f"patchify wants HxWxC, got {image.shape}")
    h, w, c = image.shape
    p = patch_size
    if h % p or w % p:
        raise IndivisibleImageError(f"image {h}x{w} not a multiple of patch {p}")
    gh, gw = h // p, w // p
    t = ad.reshape(image, (gh, p, gw, p, c))
    t = ad.transpose(t, (0, 2, 1, 3, 4))
    tokens = ad.reshape(t, (gh * gw, p * p * c))
    return TokenGrid(tokens, gh, gw, p)


def unpatchify(grid: TokenGrid, channels: int = 3) -> Tensor:
    """Exact inverse of patchify."""
    gh, gw, p = grid.grid_h, grid.grid_w, grid.patch_size
    n, d = grid.tokens.shape
    if n != gh * gw or d != p * p * channels:
        raise BadGridError(f"tokens {grid.tokens.shape} vs grid {gh}x{gw} patch {p}")
    t = ad.reshape(grid.tokens, (gh, gw, p, p, channels))
    t = ad.transpose(t, (0, 2, 1, 3, 4))
    return ad.reshape(t, (gh * p, gw * p, channels))


def _patchify_batch(images: np.ndarray, p: int) -> np.ndarray:
    """numpy-side batched patchify for [B,H,W,C] inputs (targets, encode)."""
    b, h, w, c = images.shape
    gh, gw = h // p, w // p
    t = images.reshape(b, gh, p, gw, p, c).transpose(0, 1, 3, 2, 4, 5)
    return t.reshape(b, gh * gw, p * p * c)


def interpolate_pos_embed(pos: np.ndarray, old_grid: tuple[int, int],
                          new_grid: tuple[int, int]) -> np.ndarray:
    """Resample a positional table [N, D] from one token grid to another,
    bilinearly per channel."""
    gh, gw = old_grid
    nh, nw = new_grid
    n, d = pos.shape
    if n != gh * gw:
        raise BadGridError(f"positional table has {n} rows, grid says {gh * gw}")
    if (gh, gw) == (nh, nw):
        return pos.copy()
    as_map = pos.reshape(gh, gw, d).transpose(2, 0, 1)[None]  # [1, D, gh, gw]
    with ad.no_grad():
        out = ad.bilinear_resize(Tensor(as_map, dtype=pos.dtype), nh, nw).data
    return out[0].transpose(1, 2, 0).reshape(nh * nw, d)


# -- parameters ----------------------------------------------------------------


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) with samples beyond 2 std redrawn."""
    x = rng.normal(0.0, std, size=shape)
    for _ in range(8):
        bad = np.abs(x) > 2 * std
        if not bad.any():
            break
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
    return np.clip(x, -2 * std, 2 * std)


def _block_shapes(prefix: str, d: int, r: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.ln1.g": (d,), f"{prefix}.ln1.b": (d,),
        f"{prefix}.attn.qkv.w": (d, 3 * d), f"{prefix}.attn.qkv.b": (3 * d,),
        f"{prefix}.attn.proj.w": (d, d), f"{prefix}.attn.proj.b": (d,),
        f"{prefix}.ln2.g": (d,), f"{prefix}.ln2.b": (d,),
        f"{prefix}.mlp.fc1.w": (d, r * d), f"{prefix}.mlp.fc1.b": (r * d,),
        f"{prefix}.mlp.fc2.w": (r * d, d), f"{prefix}.mlp.fc2.b": (d,),
    }


def param_shapes(cfg: ViTConfig, include_decoder: bool = False) -> dict[str, tuple[int, ...]]:
    """Named parameter shapes, in allocation order."""
    d, r = cfg.hidden_size, cfg.mlp_ratio
    shapes: dict[str, tuple[int, ...]] = {
        "enc.patch_embed.w": (cfg.patch_dim, d),
        "enc.patch_embed.b": (d,),
        "enc.pos_embed": (cfg.n_tokens, d),
    }
    for i in range(cfg.layers):
        shapes.update(_block_shapes(f"enc.blocks.{i}", d, r))
    if include_decoder:
        dd = cfg.decoder_hidden
        shapes.update({
            "dec.norm_in.g": (d,), "dec.norm_in.b": (d,),
            "dec.embed.w": (d, dd), "dec.embed.b": (dd,),
            "dec.mask_token": (dd,),
            "dec.pos_embed": (cfg.n_tokens, dd),
        })
        for i in range(cfg.decoder_layers):
            shapes.update(_block_shapes(f"dec.blocks.{i}", dd, r))
        shapes.update({
            "dec.norm_out.g": (dd,), "dec.norm_out.b": (dd,),
            "dec.pred.w": (dd, cfg.patch_dim), "dec.pred.b": (cfg.patch_dim,),
        })
    return shapes


def init_params(cfg: ViTConfig, rng: np.random.Generator,
                include_decoder: bool = False, dtype=np.float32) -> dict[str, Tensor]:
    """Allocate trained-parameter tensors: truncated normal (std 0.02) for
    weight matrices and positional tables, ones/zeros for norm gains/biases."""
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg, include_decoder).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            data = np.ones(shape)
        elif leaf == "b" and not name.endswith("pos_embed"):
            data = np.zeros(shape)
        else:
            data = trunc_normal(rng, shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True)
    return params


def _p(params: dict[str, Tensor], name: str) -> Tensor:
    try:
        return params[name]
    except KeyError:
        raise MissingWeightError(f"weight {name!r} not found") from None


# -- forward -------------------------------------------------------------------


def _affine_norm(x: Tensor, params, prefix: str) -> Tensor:
    return ad.layer_norm(x) * _p(params, f"{prefix}.g") + _p(params, f"{prefix}.b")


def _attention(x: Tensor, params, prefix: str, heads: int) -> Tensor:
    b, n, d = x.shape
    dh = d // heads
    qkv = x @ _p(params, f"{prefix}.qkv.w") + _p(params, f"{prefix}.qkv.b")
    qkv = ad.reshape(qkv, (b, n, 3, heads, dh))
    parts = []
    for k in range(3):
        part = ad.slice_(qkv, [(None, None), (None, None), (k, k + 1)])
        part = ad.reshape(part, (b, n, heads, dh))
        parts.append(ad.transpose(part, (0, 2, 1, 3)))  # [B, H, N, dh]
    q, k_, v = parts
    scores = (q @ ad.transpose(k_, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    attn = ad.softmax(scores)
    mixed = ad.transpose(attn @ v, (0, 2, 1, 3))
    mixed = ad.reshape(mixed, (b, n, d))
    return mixed @ _p(params, f"{prefix}.proj.w") + _p(params, f"{prefix}.proj.b")


def transformer_blocks(x: Tensor, params: dict[str, Tensor], prefix: str,
                       layers: int, heads: int) -> Tensor:
    """Pre-norm residual stack shared by the encoder and decoder."""
    for i in range(layers):
        blk = f"{prefix}.blocks.{i}"
        x = x + _attention(_affine_norm(x, params, f"{blk}.ln1"), params,
                           f"{blk}.attn", heads)
        h = _affine_norm(x, params, f"{blk}.ln2")
        h = ad.gelu(h @ _p(params, f"{blk}.mlp.fc1.w") + _p(params, f"{blk}.mlp.fc1.b"))
        x = x + (h @ _p(params, f"{blk}.mlp.fc2.w") + _p(params, f"{blk}.mlp.fc2.b"))
    return x


def encode(images: np.ndarray | Tensor, params: dict[str, Tensor],
           cfg: ViTConfig, visible: np.ndarray | None = None) -> Tensor:
    """Run the encoder on a batch of [B, H, W, C] images.

    `visible`, when given, is an integer index array [B, V] choosing which
    tokens each batch item keeps (the others are never computed); output
    rows follow the order of those indices. Returns features [B, N or V, D].
    """
    data = images.data if isinstance(images, Tensor) else np.asarray(images)
    b, h, w, c = data.shape
    if (h, w) != (cfg.image_height, cfg.image_width) or c != cfg.in_channels:
        raise IndivisibleImageError(
            f"encode: image batch {data.shape[1:]} vs config "
            f"{cfg.image_height}x{cfg.image_width}x{cfg.in_channels}")
    tokens = Tensor(_patchify_batch(data, cfg.patch_size))
    x = tokens @ _p(params, "enc.patch_embed.w") + _p(params, "enc.patch_embed.b")
    x = x + _p(params, "enc.pos_embed")
    if visible is not None:
        idx = np.asarray(visible)
        if idx.ndim != 2 or idx.shape[0] != b:
            raise BadGridError(f"visible index array {idx.shape} for batch {b}")
        idx3 = np.broadcast_to(idx[:, :, None], (b, idx.shape[1], cfg.hidden_size))
        x = ad.index_select(x, idx3, axis=1)
    return transformer_blocks(x, params, "enc", cfg.layers, cfg.heads)


# -- capacity accounting ---------------------------------------------------------


def count_params(cfg: ViTConfig) -> int:
    """Closed-form parameter count of the pretraining model (encoder plus
    reconstruction decoder). Independent of param_shapes by construction;
    the test suite reconciles the two routes."""
    d, r, n, p = cfg.hidden_size, cfg.mlp_ratio, cfg.n_tokens, cfg.patch_dim

    def stack(depth: int, width: int) -> int:
        attn = width * 3 * width + 3 * width + width * width + width
        mlp = width * r * width + r * width + r * width * width + width
        norms = 4 * width
        return depth * (attn + mlp + norms)

    total = p * d + d + n * d + stack(cfg.layers, d)
    if cfg.decoder_hidden:
        dd = cfg.decoder_hidden
        total += 2 * d                      # feature norm ahead of the decoder
        total += d * dd + dd + dd           # projection + mask token
        total += n * dd                     # decoder positional table
        total += stack(cfg.decoder_layers, dd)
        total += 2 * dd + dd * p + p        # final norm + pixel prediction
    return total


def estimate_flops(cfg: ViTConfig, n_tokens: int | None = None) -> int:
    """Forward-pass FLOPs of the encoder under this package's convention:
    matrix multiplies only, one multiply-accumulate = 2 FLOPs, all tokens
    kept. Conventions differ across published tables; compare via
    calibration_report rather than asserting equality."""
    n = cfg.n_tokens if n_tokens is None else int(n_tokens)
    d, r = cfg.hidden_size, cfg.mlp_ratio
    embed = 2 * n * cfg.patch_dim * d
    per_block = (
        2 * n * d * 3 * d      # qkv projection
        + 2 * n * n * d        # attention scores
        + 2 * n * n * d        # attention-weighted values
        + 2 * n * d * d        # output projection
        + 2 * 2 * n * d * r * d  # two MLP matmuls
    )
    return embed + cfg.layers * per_block


def calibration_report() -> list[dict]:
    """Capacity summary for registry entries that carry reference figures:
    our counts, the reference values, and the size ratios under both, so a
    reader can judge how the FLOP conventions relate."""
    rows = []
    refs = [get_config(n) for n in registry_names()
            if get_config(n).reference_params is not None]
    base = refs[0] if refs else None
    for cfg in refs:
        params = count_params(cfg)
        flops = estimate_flops(cfg)
        rows.append({
            "name": cfg.name,
            "params": params,
            "reference_params": cfg.reference_params,
            "params_rel_err": abs(params - cfg.reference_params) / cfg.reference_params,
            "flops": flops,
            "reference_flops": cfg.reference_flops,
            "flops_ratio_vs_smallest": flops / estimate_flops(base),
            "reference_ratio_vs_smallest": cfg.reference_flops / base.reference_flops,
        })
    return rows
