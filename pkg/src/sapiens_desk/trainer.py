"""Training loops: masked-patch pretraining and per-task finetuning.

Optimization is AdamW with decoupled weight decay applied to every
parameter before the moment update (a zero-gradient step still shrinks a
weight by exactly 1 - lr * wd), linear warmup into a cosine or linear
schedule, a global gradient-norm clip, and optional layer-wise learning
rate decay for finetuning: the head keeps the base rate, encoder block i
of L runs at decay^(L - i), and the patch/position embeddings at
decay^(L + 1).

Checkpoints carry float32 payloads plus a flat text config that is enough
to rebuild the model; optimizer moments ride along under "adam.m." and
"adam.v." prefixes. Loading validates tensor names and shapes against what
the checkpoint's own config promises.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import crops, fileio, heads, mae, vit
from .autodiff import Tensor
from .errors import (BadDecayError, ConfigError, CorruptCheckpointError,
                     EmptyManifestError, IncompatibleCheckpointError,
                     StepOutOfRangeError)

__all__ = [
    "TrainConfig", "lr_at", "layer_multiplier", "AdamW", "clip_grads",
    "PretrainResult", "FinetuneResult", "run_pretrain", "run_finetune",
    "make_checkpoint", "validate_checkpoint", "params_from_checkpoint",
    "model_from_checkpoint", "load_task_records",
]

_PRECISIONS = {"f32": np.float32, "f64": np.float64}


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-3
    warmup_steps: int = 10
    total_steps: int = 100
    schedule: str = "cosine"      # cosine for pretraining, linear for finetunes
    weight_decay: float = 0.05
    layer_decay: float = 1.0      # 1 leaves every group at the base rate
    batch_size: int = 8
    grad_clip: float = 1.0
    mask_ratio: float = 0.75
    log_every: int = 50
    eval_every: int = 0           # 0: validate only at the final step
    seed: int = 0
    precision: str = "f32"

    def __post_init__(self):
        if self.schedule not in ("cosine", "linear"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.precision not in _PRECISIONS:
            raise ConfigError(f"unknown precision {self.precision!r}")
        if self.total_steps < 1 or self.warmup_steps < 0 \
                or self.warmup_steps > self.total_steps:
            raise ConfigError(
                f"bad step counts warmup={self.warmup_steps} total={self.total_steps}")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Learning rate applied at 1-based step `step`."""
    if not 0 <= step <= cfg.total_steps:
        raise StepOutOfRangeError(f"step {step} outside [0, {cfg.total_steps}]")
    if step <= cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps if cfg.warmup_steps else cfg.base_lr
    t = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    if cfg.schedule == "cosine":
        return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * t))
    return cfg.base_lr * (1.0 - t)


def layer_multiplier(name: str, n_layers: int, decay: float) -> float:
    """Per-parameter learning-rate factor for layer-wise decay."""
    if not 0.0 < decay <= 1.0:
        raise BadDecayError(f"layer decay {decay} outside (0, 1]")
    if name.startswith("enc.blocks."):
        i = int(name.split(".")[2])
        return decay ** (n_layers - i)
    if name.startswith(("enc.patch_embed", "enc.pos_embed")):
        return decay ** (n_layers + 1)
    return 1.0


def clip_grads(grads: dict, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm.
    Returns the pre-clip norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


class AdamW:
    """Decoupled weight decay; decay and the moment step both use the
    per-parameter effective rate lr * multiplier(name)."""

    def __init__(self, params: dict, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, grads: dict, lr: float, weight_decay: float,
             multiplier=None) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            lr_eff = lr * (multiplier(name) if multiplier else 1.0)
            p.data *= 1.0 - lr_eff * weight_decay
            p.data -= lr_eff * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# -- checkpoint plumbing ---------------------------------------------------------

_SHARED_FIELDS = ("hidden_size", "layers", "heads", "mlp_ratio", "patch_size",
                  "in_channels")
_CFG_FIELDS = _SHARED_FIELDS + ("image_height", "image_width",
                                "decoder_hidden", "decoder_layers",
                                "decoder_heads")


def _blob_for(cfg: vit.ViTConfig, kind: str, task: str | None, step: int,
              seed: int, precision: str) -> dict:
    blob = {"kind": kind, "task": task or "none", "model": cfg.name,
            "step": str(step), "seed": str(seed), "precision": precision}
    for f in _CFG_FIELDS:
        blob[f] = str(getattr(cfg, f))
    return blob


def config_from_blob(blob: dict) -> vit.ViTConfig:
    try:
        kw = {f: int(blob[f]) for f in _CFG_FIELDS}
        return vit.ViTConfig(name=blob["model"], **kw)
    except KeyError as e:
        raise CorruptCheckpointError(f"config blob missing {e}") from e


def make_checkpoint(cfg: vit.ViTConfig, kind: str, task: str | None,
                    params: dict, opt: AdamW | None, step: int, seed: int,
                    precision: str) -> fileio.Checkpoint:
    blob = _blob_for(cfg, kind, task, step, seed, precision)
    tensors = {n: params[n].data.astype(np.float32) for n in sorted(params)}
    if opt is not None:
        blob["adam_t"] = str(opt.t)
        for n in sorted(params):
            tensors[f"adam.m.{n}"] = opt.m[n].astype(np.float32)
            tensors[f"adam.v.{n}"] = opt.v[n].astype(np.float32)
    return fileio.Checkpoint(config=blob, tensors=tensors)


def _expected_shapes(blob: dict) -> dict:
    cfg = config_from_blob(blob)
    kind = blob.get("kind")
    if kind == "pretrain":
        return vit.param_shapes(cfg, include_decoder=True)
    if kind == "task":
        task = blob.get("task")
        if task not in heads.TASK_CHANNELS:
            raise CorruptCheckpointError(f"unknown task {task!r} in checkpoint")
        shapes = vit.param_shapes(cfg)
        shapes.update(heads.head_param_shapes(cfg, heads.TASK_CHANNELS[task]))
        return shapes
    raise CorruptCheckpointError(f"unknown checkpoint kind {kind!r}")


def validate_checkpoint(ckpt: fileio.Checkpoint) -> vit.ViTConfig:
    """Check tensor names and shapes against the checkpoint's own config."""
    shapes = _expected_shapes(ckpt.config)
    allowed = set(shapes)
    for prefix in ("adam.m.", "adam.v."):
        allowed |= {prefix + n for n in shapes}
    unknown = sorted(set(ckpt.tensors) - allowed)
    if unknown:
        raise CorruptCheckpointError(f"unknown tensor names: {', '.join(unknown)}")
    missing = sorted(set(shapes) - set(ckpt.tensors))
    if missing:
        raise CorruptCheckpointError(f"missing tensors: {', '.join(missing)}")
    for name, arr in ckpt.tensors.items():
        base = name.removeprefix("adam.m.").removeprefix("adam.v.")
        if tuple(arr.shape) != tuple(shapes[base]):
            raise CorruptCheckpointError(
                f"tensor {name} has shape {arr.shape}, expected {shapes[base]}")
    return config_from_blob(ckpt.config)


def params_from_checkpoint(ckpt: fileio.Checkpoint, precision: str = "f32"
                           ) -> tuple[vit.ViTConfig, dict]:
    cfg = validate_checkpoint(ckpt)
    dtype = _PRECISIONS[precision]
    params = {n: Tensor(a.astype(dtype), requires_grad=True)
              for n, a in ckpt.tensors.items() if not n.startswith("adam.")}
    return cfg, params


def model_from_checkpoint(ckpt: fileio.Checkpoint, precision: str = "f32"
                          ) -> heads.TaskModel:
    if ckpt.config.get("kind") != "task":
        raise IncompatibleCheckpointError(
            "need a task checkpoint, got kind="
            f"{ckpt.config.get('kind')!r}")
    cfg, params = params_from_checkpoint(ckpt, precision)
    return heads.TaskModel(cfg=cfg, task=ckpt.config["task"], params=params)


def _transfer_encoder(init: fileio.Checkpoint, target_cfg: vit.ViTConfig,
                      params: dict) -> None:
    """Copy encoder weights from a checkpoint into freshly built params,
    resampling the position table when the token grid changed."""
    src_cfg = validate_checkpoint(init)
    for f in _SHARED_FIELDS:
        if getattr(src_cfg, f) != getattr(target_cfg, f):
            raise IncompatibleCheckpointError(
                f"checkpoint {f}={getattr(src_cfg, f)} vs model {getattr(target_cfg, f)}")
    for name, arr in init.tensors.items():
        if not name.startswith("enc.") or name not in params:
            continue
        if name == "enc.pos_embed" and (src_cfg.grid_h, src_cfg.grid_w) != \
                (target_cfg.grid_h, target_cfg.grid_w):
            arr = vit.interpolate_pos_embed(
                arr.astype(np.float64),
                (src_cfg.grid_h, src_cfg.grid_w),
                (target_cfg.grid_h, target_cfg.grid_w))
        params[name].data = arr.astype(params[name].dtype)


# -- data loading -----------------------------------------------------------------

def _read_manifest_checked(manifest_path) -> tuple[list, str]:
    records = fileio.read_manifest(manifest_path)
    if not records:
        raise EmptyManifestError(f"{manifest_path} has no records")
    import os
    return records, os.path.dirname(str(manifest_path)) or "."


def load_task_records(manifest_path, task: str, cfg: vit.ViTConfig) -> list:
    """Materialize training arrays for one task. Pose samples are cropped
    to the model's input size around the annotated person's padded box and
    paired with quarter-resolution target heatmaps."""
    records, base = _read_manifest_checked(manifest_path)
    out = []
    in_h, in_w = cfg.image_height, cfg.image_width
    for rec in records:
        image = fileio.read_image(f"{base}/{rec.image}")
        item: dict = {}
        if task == "pose":
            box = np.asarray(rec.persons[0]["box"], dtype=np.float64)
            padded = crops.pad_box_to_aspect(box, in_h / in_w)
            item["image"] = crops.crop_resize(image, padded, in_h, in_w)
            kps, vis = fileio.read_keypoints(f"{base}/{rec.keypoints}")
            kps_crop = crops.image_to_crop_coords(kps, padded, in_h, in_w)
            hm = heads.make_heatmaps(kps_crop, vis,
                                     in_h // heads.POSE_STRIDE,
                                     in_w // heads.POSE_STRIDE)
            item["target"] = hm.maps
            item["valid"] = hm.valid
        else:
            if image.shape[:2] != (in_h, in_w):
                raise IncompatibleCheckpointError(
                    f"image {rec.image} is {image.shape[:2]}, model wants {(in_h, in_w)}")
            item["image"] = image
            if task == "seg":
                item["target"] = fileio.read_mask(f"{base}/{rec.mask}")
            elif task == "depth":
                d = fileio.read_pfm(f"{base}/{rec.depth}")
                item["target"] = d
                item["mask"] = d > 0
            elif task == "normal":
                n = fileio.read_pfm(f"{base}/{rec.normal}")
                item["target"] = np.moveaxis(n, -1, 0)  # [3, H, W]
                item["mask"] = np.linalg.norm(n, axis=-1) > 0.5
            else:
                raise ConfigError(f"unknown task {task!r}")
        out.append(item)
    return out


def _batch_indices(n: int, batch: int, seed: int, step: int) -> np.ndarray:
    rng = np.random.default_rng((seed, step))
    return rng.choice(n, size=min(batch, n), replace=False)


# -- pretraining --------------------------------------------------------------------


@dataclass
class PretrainResult:
    checkpoint: fileio.Checkpoint
    curve: list            # (step, loss) per step
    log_rows: list = field(default_factory=list)


def run_pretrain(manifest_path, cfg: vit.ViTConfig, tcfg: TrainConfig,
                 progress=None) -> PretrainResult:
    records, base = _read_manifest_checked(manifest_path)
    dtype = _PRECISIONS[tcfg.precision]
    images = np.stack([fileio.read_image(f"{base}/{r.image}")
                       for r in records]).astype(dtype)
    if images.shape[1:3] != (cfg.image_height, cfg.image_width):
        raise ConfigError(
            f"dataset images are {images.shape[1:3]}, model wants "
            f"{(cfg.image_height, cfg.image_width)}")

    rng = np.random.default_rng((tcfg.seed, 0))
    params = vit.init_params(cfg, rng, include_decoder=True, dtype=dtype)
    opt = AdamW(params)
    curve = []
    log_rows = []
    for step in range(1, tcfg.total_steps + 1):
        idx = _batch_indices(len(images), tcfg.batch_size, tcfg.seed, step)
        plans = [mae.sample_mask(cfg.n_tokens, tcfg.mask_ratio,
                                 np.random.default_rng((tcfg.seed, step, int(j))))
                 for j in idx]
        out = mae.mae_forward(images[idx], params, cfg, plans)
        for p in params.values():
            p.zero_grad()
        out.loss.backward()
        grads = {n: p.grad for n, p in params.items()}
        clip_grads(grads, tcfg.grad_clip)
        lr = lr_at(step, tcfg)
        opt.step(grads, lr, tcfg.weight_decay)
        loss = float(out.loss.item())
        curve.append((step, loss))
        if step == 1 or step == tcfg.total_steps or step % tcfg.log_every == 0:
            log_rows.append({"step": step, "loss": loss, "lr": lr})
            if progress:
                progress(log_rows[-1])
    ckpt = make_checkpoint(cfg, "pretrain", None, params, opt,
                           tcfg.total_steps, tcfg.seed, tcfg.precision)
    return PretrainResult(checkpoint=ckpt, curve=curve, log_rows=log_rows)


# -- finetuning ----------------------------------------------------------------------


@dataclass
class FinetuneResult:
    checkpoint: fileio.Checkpoint
    trace: list                    # dict rows: step, train_loss, val_loss
    final_val_loss: float


def seg_class_weights(items: list) -> np.ndarray:
    """Inverse-frequency weights from pixel counts over a whole split."""
    counts = np.zeros(heads.TASK_CHANNELS["seg"], dtype=np.int64)
    for it in items:
        counts += np.bincount(np.asarray(it["target"]).ravel(),
                              minlength=len(counts))
    return heads.inverse_frequency_weights(counts)


def _task_loss(task: str, maps: Tensor, batch_items: list,
               seg_weights: np.ndarray | None = None) -> Tensor:
    if task == "pose":
        target = np.stack([it["target"] for it in batch_items])
        valid = np.stack([it["valid"] for it in batch_items])
        return heads.pose_loss(maps, target, valid)
    if task == "seg":
        target = np.stack([it["target"] for it in batch_items])
        if seg_weights is None:
            seg_weights = np.ones(heads.TASK_CHANNELS["seg"])
        return heads.seg_loss(maps, target, seg_weights)
    if task == "depth":
        target = np.stack([it["target"] for it in batch_items])[:, None]
        mask = np.stack([it["mask"] for it in batch_items])[:, None]
        return heads.depth_loss(ad.exp(maps), target, mask)
    # normals run per sample; the loss is their mean
    total = None
    for i, it in enumerate(batch_items):
        one_map = ad.reshape(ad.slice_(maps, ((i, i + 1),)), maps.shape[1:])
        one = heads.normal_loss(one_map, it["target"], it["mask"])
        total = one if total is None else total + one
    return total * (1.0 / len(batch_items))


def _dataset_loss(task: str, model: heads.TaskModel, items: list,
                  batch: int, seg_weights=None) -> float:
    dtype = next(iter(model.params.values())).data.dtype
    total = 0.0
    with ad.no_grad():
        for i in range(0, len(items), batch):
            chunk = items[i:i + batch]
            images = np.stack([it["image"] for it in chunk]).astype(dtype)
            maps = model.forward(images)
            total += float(_task_loss(task, maps, chunk, seg_weights).item()) \
                * len(chunk)
    return total / len(items)


def run_finetune(task: str, manifest_path, val_manifest_path,
                 cfg: vit.ViTConfig, tcfg: TrainConfig,
                 init: fileio.Checkpoint | None = None,
                 progress=None) -> FinetuneResult:
    if task not in heads.TASK_CHANNELS:
        raise ConfigError(f"unknown task {task!r}")
    dtype = _PRECISIONS[tcfg.precision]
    rng = np.random.default_rng((tcfg.seed, 0))
    params = vit.init_params(cfg, rng, include_decoder=False, dtype=dtype)
    params.update(heads.init_head_params(cfg, heads.TASK_CHANNELS[task],
                                         rng, dtype=dtype))
    if init is not None:
        _transfer_encoder(init, cfg, params)

    items = load_task_records(manifest_path, task, cfg)
    val_items = load_task_records(val_manifest_path, task, cfg) \
        if val_manifest_path else []
    # class balance comes from the train split and is reused for val loss
    seg_weights = seg_class_weights(items) if task == "seg" else None
    model = heads.TaskModel(cfg=cfg, task=task, params=params)

    def mult(name: str) -> float:
        return layer_multiplier(name, cfg.layers, tcfg.layer_decay)

    opt = AdamW(params)
    trace = []
    val_loss = math.nan
    for step in range(1, tcfg.total_steps + 1):
        idx = _batch_indices(len(items), tcfg.batch_size, tcfg.seed, step)
        chunk = [items[int(j)] for j in idx]
        images = np.stack([it["image"] for it in chunk]).astype(dtype)
        maps = heads.head_forward(vit.encode(Tensor(images), params, cfg),
                                  params, cfg, *model.out_size())
        loss = _task_loss(task, maps, chunk, seg_weights)
        for p in params.values():
            p.zero_grad()
        loss.backward()
        grads = {n: p.grad for n, p in params.items()}
        clip_grads(grads, tcfg.grad_clip)
        opt.step(grads, lr_at(step, tcfg), tcfg.weight_decay, mult)

        is_last = step == tcfg.total_steps
        want_val = val_items and (is_last or (tcfg.eval_every
                                              and step % tcfg.eval_every == 0))
        if step == 1 or is_last or step % tcfg.log_every == 0 or want_val:
            row = {"step": step, "train_loss": float(loss.item())}
            if want_val:
                val_loss = _dataset_loss(task, model, val_items,
                                         tcfg.batch_size, seg_weights)
                row["val_loss"] = val_loss
            trace.append(row)
            if progress:
                progress(row)
    ckpt = make_checkpoint(cfg, "task", task, params, opt, tcfg.total_steps,
                           tcfg.seed, tcfg.precision)
    return FinetuneResult(checkpoint=ckpt, trace=trace, final_val_loss=val_loss)
