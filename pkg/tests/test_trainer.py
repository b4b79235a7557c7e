import math

import numpy as np
import pytest

from sapiens_desk import datagen, fileio, trainer, vit
from sapiens_desk.autodiff import Tensor
from sapiens_desk.datagen import SceneParams
from sapiens_desk.errors import (BadDecayError, ConfigError,
                                 CorruptCheckpointError, EmptyManifestError,
                                 IncompatibleCheckpointError,
                                 StepOutOfRangeError)
from sapiens_desk.trainer import AdamW, TrainConfig, layer_multiplier, lr_at


# -- schedules ------------------------------------------------------------------

def test_lr_warmup_then_cosine():
    cfg = TrainConfig(base_lr=0.1, warmup_steps=10, total_steps=110,
                      schedule="cosine")
    assert lr_at(0, cfg) == 0.0
    assert lr_at(5, cfg) == pytest.approx(0.05)
    assert lr_at(10, cfg) == pytest.approx(0.1)
    assert lr_at(60, cfg) == pytest.approx(0.05)        # cosine midpoint
    assert lr_at(110, cfg) == pytest.approx(0.0, abs=1e-15)


def test_lr_linear_decay():
    cfg = TrainConfig(base_lr=0.2, warmup_steps=0, total_steps=100,
                      schedule="linear")
    assert lr_at(25, cfg) == pytest.approx(0.15)
    assert lr_at(100, cfg) == pytest.approx(0.0, abs=1e-15)


def test_lr_warmup_spanning_everything():
    cfg = TrainConfig(base_lr=0.3, warmup_steps=50, total_steps=50)
    assert lr_at(50, cfg) == pytest.approx(0.3)
    assert lr_at(25, cfg) == pytest.approx(0.15)


def test_lr_step_out_of_range():
    cfg = TrainConfig(total_steps=10, warmup_steps=0)
    with pytest.raises(StepOutOfRangeError):
        lr_at(11, cfg)
    with pytest.raises(StepOutOfRangeError):
        lr_at(-1, cfg)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(schedule="exponential")
    with pytest.raises(ConfigError):
        TrainConfig(precision="f16")
    with pytest.raises(ConfigError):
        TrainConfig(warmup_steps=20, total_steps=10)


# -- layer-wise decay ---------------------------------------------------------------

def test_layer_multiplier_table():
    decay, layers = 0.85, 3
    assert layer_multiplier("head.out.w", layers, decay) == 1.0
    assert layer_multiplier("enc.blocks.2.mlp.fc1.w", layers, decay) \
        == pytest.approx(0.85)
    assert layer_multiplier("enc.blocks.1.attn.qkv.w", layers, decay) \
        == pytest.approx(0.7225)
    assert layer_multiplier("enc.blocks.0.ln1.g", layers, decay) \
        == pytest.approx(0.614125)
    assert layer_multiplier("enc.pos_embed", layers, decay) \
        == pytest.approx(0.52200625)
    assert layer_multiplier("enc.patch_embed.w", layers, decay) \
        == pytest.approx(0.52200625)


def test_layer_multiplier_rejects_bad_decay():
    for bad in (0.0, -0.2, 1.5):
        with pytest.raises(BadDecayError):
            layer_multiplier("head.out.w", 3, bad)
    # decay 1 turns scaling off
    assert layer_multiplier("enc.blocks.0.ln1.g", 3, 1.0) == 1.0


# -- clipping --------------------------------------------------------------------------

def test_clip_grads_scales_to_max_norm():
    g1 = np.array([3.0, 0.0])
    g2 = np.array([0.0, 4.0])
    grads = {"a": g1, "b": g2}
    total = trainer.clip_grads(grads, 1.0)
    assert total == pytest.approx(5.0)
    clipped = math.sqrt(float((g1 ** 2).sum() + (g2 ** 2).sum()))
    assert clipped == pytest.approx(1.0)
    np.testing.assert_allclose(g1, [0.6, 0.0])


def test_clip_grads_leaves_small_gradients():
    g = np.array([0.3])
    trainer.clip_grads({"g": g}, 1.0)
    np.testing.assert_allclose(g, [0.3])


# -- optimizer ---------------------------------------------------------------------------

def test_adamw_matches_scalar_reference():
    w = Tensor(np.array([1.0]), requires_grad=True)
    opt = AdamW({"w": w})
    lr, wd = 0.01, 0.1
    m = v = 0.0
    ref = 1.0
    for t, g in enumerate([0.5, -0.3, 0.1, 0.7], start=1):
        opt.step({"w": np.array([g])}, lr, wd)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mhat = m / (1 - 0.9 ** t)
        vhat = v / (1 - 0.999 ** t)
        ref *= 1 - lr * wd
        ref -= lr * mhat / (math.sqrt(vhat) + 1e-8)
        assert abs(float(w.data[0]) - ref) < 1e-10


def test_adamw_zero_grad_is_pure_decay():
    w = Tensor(np.array([2.0]), requires_grad=True)
    opt = AdamW({"w": w})
    opt.step({"w": np.zeros(1)}, lr := 0.001, 1.0)
    assert float(w.data[0]) == 2.0 * (1.0 - lr)
    assert float(opt.m["w"][0]) == 0.0


def test_adamw_layer_multiplier_scales_update():
    wa = Tensor(np.array([1.0]), requires_grad=True)
    wb = Tensor(np.array([1.0]), requires_grad=True)
    opt = AdamW({"head.w": wa, "enc.pos_embed": wb})
    mult = lambda n: layer_multiplier(n, 3, 0.85)
    g = {"head.w": np.array([0.2]), "enc.pos_embed": np.array([0.2])}
    opt.step(g, 0.01, 0.0, mult)
    da = 1.0 - float(wa.data[0])
    db = 1.0 - float(wb.data[0])
    assert db / da == pytest.approx(0.52200625, rel=1e-9)


# -- checkpoints ---------------------------------------------------------------------------

def _tiny_pretrain_ckpt(seed=0, steps=2):
    cfg = vit.get_config("desk-tiny")
    rng = np.random.default_rng(seed)
    params = vit.init_params(cfg, rng, include_decoder=True)
    opt = AdamW(params)
    return cfg, trainer.make_checkpoint(cfg, "pretrain", None, params, opt,
                                        steps, seed, "f32")


def test_checkpoint_roundtrip_through_disk(tmp_path):
    cfg, ckpt = _tiny_pretrain_ckpt()
    p = tmp_path / "pre.ckpt"
    fileio.save_checkpoint(p, ckpt)
    back = fileio.load_checkpoint(p)
    cfg2, params = trainer.params_from_checkpoint(back)
    assert cfg2 == cfg
    for n, t in params.items():
        np.testing.assert_array_equal(t.data, ckpt.tensors[n])
    assert back.config["adam_t"] == "0"


def test_checkpoint_rejects_unknown_tensor():
    _, ckpt = _tiny_pretrain_ckpt()
    ckpt.tensors["enc.mystery.w"] = np.zeros(3, dtype=np.float32)
    with pytest.raises(CorruptCheckpointError, match="enc.mystery.w"):
        trainer.validate_checkpoint(ckpt)


def test_checkpoint_rejects_missing_and_misshapen():
    _, ckpt = _tiny_pretrain_ckpt()
    del ckpt.tensors["enc.pos_embed"]
    with pytest.raises(CorruptCheckpointError, match="missing"):
        trainer.validate_checkpoint(ckpt)
    _, ckpt2 = _tiny_pretrain_ckpt()
    ckpt2.tensors["enc.pos_embed"] = np.zeros((3, 3), dtype=np.float32)
    with pytest.raises(CorruptCheckpointError, match="shape"):
        trainer.validate_checkpoint(ckpt2)


def test_model_from_checkpoint_wants_task_kind():
    _, ckpt = _tiny_pretrain_ckpt()
    with pytest.raises(IncompatibleCheckpointError):
        trainer.model_from_checkpoint(ckpt)


def test_transfer_encoder_resamples_positions():
    cfg_pre = vit.get_config("desk-tiny")             # 64x64, grid 8x8
    cfg_ft = cfg_pre.with_image(64, 48)               # grid 8x6
    _, ckpt = _tiny_pretrain_ckpt()
    rng = np.random.default_rng(9)
    params = vit.init_params(cfg_ft, rng)
    trainer._transfer_encoder(ckpt, cfg_ft, params)
    want = vit.interpolate_pos_embed(
        ckpt.tensors["enc.pos_embed"].astype(np.float64), (8, 8), (8, 6))
    np.testing.assert_allclose(params["enc.pos_embed"].data,
                               want.astype(np.float32))
    np.testing.assert_array_equal(params["enc.blocks.0.attn.qkv.w"].data,
                                  ckpt.tensors["enc.blocks.0.attn.qkv.w"])


def test_transfer_encoder_rejects_architecture_mismatch():
    _, ckpt = _tiny_pretrain_ckpt()
    cfg_other = vit.get_config("desk-small")
    params = vit.init_params(cfg_other, np.random.default_rng(0))
    with pytest.raises(IncompatibleCheckpointError):
        trainer._transfer_encoder(ckpt, cfg_other, params)


# -- training loops ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def square_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("sq")
    return datagen.generate_dataset(root, 8, SceneParams(height=64, width=64),
                                    seed=5)


@pytest.fixture(scope="module")
def portrait_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("pt")
    return datagen.generate_dataset(root, 8, SceneParams(height=64, width=48),
                                    seed=6)


def test_run_pretrain_is_deterministic(square_data, tmp_path):
    cfg = vit.get_config("desk-tiny")
    tcfg = TrainConfig(total_steps=6, warmup_steps=2, batch_size=4,
                       log_every=3, seed=11)
    r1 = trainer.run_pretrain(square_data, cfg, tcfg)
    r2 = trainer.run_pretrain(square_data, cfg, tcfg)
    assert r1.curve == r2.curve
    assert len(r1.curve) == 6
    assert all(np.isfinite(l) for _, l in r1.curve)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    fileio.save_checkpoint(p1, r1.checkpoint)
    fileio.save_checkpoint(p2, r2.checkpoint)
    assert p1.read_bytes() == p2.read_bytes()
    assert r1.checkpoint.config["kind"] == "pretrain"
    assert {r["step"] for r in r1.log_rows} == {1, 3, 6}


def test_run_pretrain_rejects_wrong_image_size(portrait_data):
    cfg = vit.get_config("desk-tiny")   # wants 64x64
    with pytest.raises(ConfigError):
        trainer.run_pretrain(portrait_data, cfg,
                             TrainConfig(total_steps=1, warmup_steps=0))


def test_run_finetune_seg_end_to_end(portrait_data):
    cfg = vit.get_config("desk-tiny").with_image(64, 48)
    tcfg = TrainConfig(total_steps=4, warmup_steps=1, batch_size=4,
                       schedule="linear", layer_decay=0.85, log_every=2,
                       seed=3)
    res = trainer.run_finetune("seg", portrait_data, portrait_data, cfg, tcfg)
    assert res.checkpoint.config["task"] == "seg"
    assert math.isfinite(res.final_val_loss)
    steps = [r["step"] for r in res.trace]
    assert steps[0] == 1 and steps[-1] == 4
    assert "val_loss" in res.trace[-1]
    model = trainer.model_from_checkpoint(res.checkpoint)
    assert model.task == "seg"
    assert model.cfg.image_width == 48


def test_run_finetune_pose_uses_crops(portrait_data):
    cfg = vit.get_config("desk-tiny").with_image(64, 48)
    tcfg = TrainConfig(total_steps=2, warmup_steps=0, batch_size=3,
                       schedule="linear", seed=4, log_every=1)
    res = trainer.run_finetune("pose", portrait_data, None, cfg, tcfg)
    assert math.isnan(res.final_val_loss)       # no validation split given
    assert all(math.isfinite(r["train_loss"]) for r in res.trace)


def test_run_finetune_accepts_pretrained_init(portrait_data, square_data):
    cfg = vit.get_config("desk-tiny").with_image(64, 48)
    pre = trainer.run_pretrain(square_data, vit.get_config("desk-tiny"),
                               TrainConfig(total_steps=2, warmup_steps=0,
                                           batch_size=4, seed=1))
    tcfg = TrainConfig(total_steps=2, warmup_steps=0, batch_size=4,
                       schedule="linear", seed=2, log_every=1)
    res = trainer.run_finetune("depth", portrait_data, portrait_data, cfg,
                               tcfg, init=pre.checkpoint)
    assert math.isfinite(res.final_val_loss)


def test_empty_manifest_raises(tmp_path):
    empty = tmp_path / "m.jsonl"
    empty.write_text("")
    cfg = vit.get_config("desk-tiny")
    with pytest.raises(EmptyManifestError):
        trainer.run_pretrain(empty, cfg, TrainConfig(total_steps=1,
                                                     warmup_steps=0))
