"""Command-line front end.

Every command takes its knobs as trailing ``key=value`` pairs validated
against a per-command whitelist, so a typo fails fast instead of silently
training with defaults. ``--config FILE`` loads the same pairs from a file
(one per line, ``#`` comments allowed); command-line pairs override it.
Exit codes: 0 success, 2 bad usage or bad configuration, 1 any other
package error.
"""

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, datagen, fileio, mae, metrics, report, trainer, vit
from .errors import ConfigError, DeskError, IncompatibleCheckpointError

__all__ = ["main"]


# -- key=value option parsing --------------------------------------------------


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(text)


def _parse_floats(text: str) -> tuple:
    return tuple(float(t) for t in text.split(","))


def _parse_kv(pairs: list, schema: dict) -> dict:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}")
        key, text = item.split("=", 1)
        if key not in schema:
            raise ConfigError(
                f"unknown option {key!r}; valid: {', '.join(sorted(schema))}")
        kind = schema[key]
        parse = _parse_bool if kind is bool else kind
        try:
            out[key] = parse(text)
        except ValueError:
            raise ConfigError(
                f"{key}: cannot parse {text!r} as {kind.__name__}") from None
    return out


def _read_config_file(path: str) -> list:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from None
    lines = (ln.strip() for ln in text.splitlines())
    return [ln for ln in lines if ln and not ln.startswith("#")]


def _option_pairs(args, flags: dict | None = None) -> list:
    """Merge option sources: config file, then key=value pairs, then flags.

    A flag duplicating an explicit key=value pair is ambiguous and refused;
    either silently beats the config file.
    """
    pairs = _read_config_file(args.config_file) if args.config_file else []
    explicit = list(args.config)
    for key, value in (flags or {}).items():
        if value is None:
            continue
        if any(p.split("=", 1)[0] == key for p in explicit):
            raise ConfigError(
                f"{key!r} given both as a flag and as a key=value pair")
        explicit.append(f"{key}={value}")
    return pairs + explicit


_SCENE_KEYS = {
    "height": int, "width": int, "n_figures": int, "min_scale": float,
    "max_scale": float, "frame_meters": float, "base_depth": float,
    "noise": float, "background": str,
}
_CURATE_KEYS = {"min_score": float, "min_box": float}
_TRAIN_KEYS = {
    "base_lr": float, "warmup_steps": int, "total_steps": int, "schedule": str,
    "weight_decay": float, "layer_decay": float, "batch_size": int,
    "grad_clip": float, "mask_ratio": float, "log_every": int,
    "eval_every": int, "seed": int, "precision": str,
}
_MODEL_KEYS = {"model": str, "height": int, "width": int}
_EVAL_KEYS = {"flip_test": bool}
_SWEEP_KEYS = {"ratios": _parse_floats, "seed": int, "limit": int}


def _model_cfg(opts: dict) -> vit.ViTConfig:
    """Pop model/canvas keys out of `opts` and build the architecture."""
    cfg = vit.get_config(opts.pop("model", "desk-tiny"))
    h = opts.pop("height", None)
    w = opts.pop("width", None)
    if h is not None or w is not None:
        cfg = cfg.with_image(h if h is not None else cfg.image_height,
                             w if w is not None else cfg.image_width)
    return cfg


def _print_progress(row: dict) -> None:
    parts = []
    for k, v in row.items():
        parts.append(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}")
    print(" ".join(parts))


def _load_records(manifest_path) -> tuple:
    records = fileio.read_manifest(manifest_path)
    base = os.path.dirname(os.fspath(manifest_path)) or "."
    return records, base


def _task_model(ckpt_path, task: str):
    model = trainer.model_from_checkpoint(fileio.load_checkpoint(ckpt_path))
    if model.task != task:
        raise IncompatibleCheckpointError(
            f"{ckpt_path} holds a {model.task!r} model, wanted {task!r}")
    return model


# -- commands --------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    opts = _parse_kv(_option_pairs(args), _SCENE_KEYS)
    params = datagen.SceneParams(**opts)
    out = datagen.generate_dataset(args.out, args.count, params, args.seed,
                                   overwrite=args.overwrite)
    print(f"wrote {args.count} samples under {Path(args.out)} ({out.name})")
    return 0


def cmd_curate(args) -> int:
    opts = _parse_kv(_option_pairs(args), _CURATE_KEYS)
    records, base = _load_records(args.manifest)
    result = datagen.curate(records, **opts)
    out = fileio.ensure_fresh(args.out, args.overwrite)
    out.parent.mkdir(parents=True, exist_ok=True)
    # label paths are relative to the manifest; rebase them onto the new home
    out_dir = os.path.dirname(os.fspath(out)) or "."
    rebased = []
    for rec in result.kept:
        fields = {}
        for name in ("image", "keypoints", "mask", "depth", "normal"):
            value = getattr(rec, name)
            if value is not None:
                fields[name] = Path(
                    os.path.relpath(os.path.join(base, value), out_dir)).as_posix()
        rebased.append(dataclasses.replace(rec, **fields))
    fileio.write_manifest(out, rebased)
    print(f"kept {len(result.kept)} of {len(records)}")
    for bin_name in ("1", "2", "3", "4+"):
        print(f"persons={bin_name} {result.histogram[bin_name]}")
    return 0


def cmd_pretrain(args) -> int:
    pairs = _option_pairs(args, {"seed": args.seed, "precision": args.precision})
    opts = _parse_kv(pairs, {**_TRAIN_KEYS, **_MODEL_KEYS})
    cfg = _model_cfg(opts)
    tcfg = trainer.TrainConfig(**opts)
    out = Path(args.out)
    ckpt_path = fileio.ensure_fresh(out / "checkpoint.ckpt", args.overwrite)
    curve_path = fileio.ensure_fresh(out / "loss_curve.csv", args.overwrite)
    out.mkdir(parents=True, exist_ok=True)
    result = trainer.run_pretrain(args.manifest, cfg, tcfg,
                                  progress=_print_progress)
    fileio.save_checkpoint(ckpt_path, result.checkpoint)
    fileio.write_csv(curve_path, ["step", "loss"], result.curve)
    print(f"saved {ckpt_path}")
    return 0


def cmd_finetune(args) -> int:
    pairs = _option_pairs(args, {"seed": args.seed, "precision": args.precision})
    opts = _parse_kv(pairs, {**_TRAIN_KEYS, **_MODEL_KEYS})
    cfg = _model_cfg(opts)
    opts.setdefault("schedule", "linear")
    tcfg = trainer.TrainConfig(**opts)
    init = fileio.load_checkpoint(args.init) if args.init else None
    out = Path(args.out)
    ckpt_path = fileio.ensure_fresh(out / "checkpoint.ckpt", args.overwrite)
    trace_path = fileio.ensure_fresh(out / "trace.csv", args.overwrite)
    out.mkdir(parents=True, exist_ok=True)
    result = trainer.run_finetune(args.task, args.manifest, args.val_manifest,
                                  cfg, tcfg, init=init,
                                  progress=_print_progress)
    fileio.save_checkpoint(ckpt_path, result.checkpoint)
    fileio.write_csv(trace_path, ["step", "train_loss", "val_loss"],
                     [(r["step"], r["train_loss"], r.get("val_loss", ""))
                      for r in result.trace])
    print(f"saved {ckpt_path}")
    return 0


def cmd_eval(args) -> int:
    opts = _parse_kv(_option_pairs(args), _EVAL_KEYS)
    protocol = dataclasses.replace(metrics.EvalProtocol(), **opts)
    records, base = _load_records(args.manifest)
    if args.checkpoint:
        model = _task_model(args.checkpoint, args.task)
        rep = metrics.evaluate_model(model, records, base, protocol)
    else:
        rep = metrics.evaluate_predictions(args.task, records, base,
                                           args.pred_dir, protocol)
    out = fileio.ensure_fresh(args.out, args.overwrite)
    out.parent.mkdir(parents=True, exist_ok=True)
    rep.write_csv(out)
    for _, name, value, _ in rep.rows():
        print(f"{name}={value:.6f}")
    return 0


def cmd_infer(args) -> int:
    _parse_kv(_option_pairs(args), {})
    model = _task_model(args.checkpoint, args.task)
    records, base = _load_records(args.manifest)
    out = fileio.ensure_fresh(args.out, args.overwrite)
    metrics.write_predictions(model, records, base, out)
    print(f"wrote {len(records)} predictions under {out}")
    return 0


def cmd_mask_sweep(args) -> int:
    opts = _parse_kv(_option_pairs(args, {"seed": args.seed}), _SWEEP_KEYS)
    ratios = list(opts.get("ratios", (0.5, 0.75, 0.95)))
    ckpt = fileio.load_checkpoint(args.checkpoint)
    if ckpt.config.get("kind") != "pretrain":
        raise IncompatibleCheckpointError(
            f"{args.checkpoint} is a {ckpt.config.get('kind')!r} checkpoint; "
            "the sweep needs a pretraining one")
    cfg, params = trainer.params_from_checkpoint(ckpt)
    records, base = _load_records(args.manifest)
    if "limit" in opts:
        records = records[:opts["limit"]]
    images = np.stack([fileio.read_image(f"{base}/{r.image}")
                       for r in records]).astype(np.float32)
    if images.shape[1:3] != (cfg.image_height, cfg.image_width):
        raise ConfigError(
            f"dataset images are {images.shape[1:3]}, checkpoint wants "
            f"{(cfg.image_height, cfg.image_width)}")
    rows = mae.mask_sweep(images, params, cfg, ratios, opts.get("seed", 0))
    out = fileio.ensure_fresh(args.out, args.overwrite)
    out.parent.mkdir(parents=True, exist_ok=True)
    fileio.write_csv(out, ["ratio", "psnr"], rows)
    for ratio, value in rows:
        print(f"ratio={ratio:g} psnr={value:.3f}")
    return 0


def cmd_report(args) -> int:
    _parse_kv(_option_pairs(args), {})
    outputs = report.render_all(args.csv, args.out, overwrite=args.overwrite)
    for path in outputs:
        print(f"wrote {path}")
    return 0


# -- parser --------------------------------------------------------------------


def _add_common(p, config_help: str) -> None:
    p.add_argument("--overwrite", action="store_true",
                   help="replace existing output files")
    p.add_argument("--config", dest="config_file", metavar="FILE",
                   help="file of key=value lines, applied before "
                        "command-line pairs")
    p.add_argument("config", nargs="*", metavar="key=value", help=config_help)


def _add_train_flags(p) -> None:
    p.add_argument("--seed", type=int, default=None,
                   help="shorthand for the seed= key")
    p.add_argument("--precision", choices=("f32", "f64"), default=None,
                   help="shorthand for the precision= key")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sapiens-desk",
        description="desk-scale human-vision pipeline: synthetic data, "
                    "masked-autoencoder pretraining, task finetuning, "
                    "evaluation, and reporting")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    parser.add_argument("--deterministic", action="store_true",
                        help="assert bit-reproducible mode (always on; every "
                             "command is seeded)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic dataset")
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_common(p, "scene keys: " + ", ".join(sorted(_SCENE_KEYS)))
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("curate", help="filter a manifest by person quality")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="curated manifest path")
    _add_common(p, "keys: " + ", ".join(sorted(_CURATE_KEYS)))
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("pretrain", help="masked-autoencoder pretraining")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True,
                   help="run directory (checkpoint.ckpt, loss_curve.csv)")
    _add_train_flags(p)
    _add_common(p, "keys: " + ", ".join(sorted({**_TRAIN_KEYS, **_MODEL_KEYS})))
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="train one task head")
    p.add_argument("--task", required=True,
                   choices=("pose", "seg", "depth", "normal"))
    p.add_argument("--manifest", required=True)
    p.add_argument("--val-manifest", default=None)
    p.add_argument("--init", default=None,
                   help="pretraining checkpoint to start the encoder from")
    p.add_argument("--out", required=True,
                   help="run directory (checkpoint.ckpt, trace.csv)")
    _add_train_flags(p)
    _add_common(p, "keys: " + ", ".join(sorted({**_TRAIN_KEYS, **_MODEL_KEYS})))
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="score a model or stored predictions")
    p.add_argument("--task", required=True,
                   choices=("pose", "seg", "depth", "normal"))
    p.add_argument("--manifest", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--pred-dir", help="directory written by `infer`")
    p.add_argument("--out", required=True, help="metrics CSV path")
    _add_common(p, "keys: " + ", ".join(sorted(_EVAL_KEYS)))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="write per-sample prediction files")
    p.add_argument("--task", required=True,
                   choices=("pose", "seg", "depth", "normal"))
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="prediction directory")
    _add_common(p, "no keys")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("mask-sweep",
                       help="reconstruction quality across masking ratios")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True,
                   help="pretraining checkpoint")
    p.add_argument("--out", required=True, help="sweep CSV path")
    p.add_argument("--seed", type=int, default=None,
                   help="shorthand for the seed= key")
    _add_common(p, "keys: " + ", ".join(sorted(_SWEEP_KEYS)))
    p.set_defaults(func=cmd_mask_sweep)

    p = sub.add_parser("report", help="render metric CSVs to SVG charts")
    p.add_argument("--out", required=True, help="chart directory")
    p.add_argument("--csv", nargs="+", required=True, metavar="CSV")
    _add_common(p, "no keys")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DeskError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
