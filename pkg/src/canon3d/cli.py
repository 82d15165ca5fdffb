"""Command-line entry point: ``canon3d {synth,fit,train,eval}``."""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import mesh as mesh_mod
from . import pipeline, synth
from .errors import CompatibilityError, DataValidationError, NumericalError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4
EXIT_COMPAT = 5

DONE_FILE = "DONE.json"


class ConfigError(Exception):
    pass


def _load_yaml(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {p}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{p} must hold a mapping")
    return data


def _dump_yaml(data) -> str:
    return yaml.safe_dump(_plain(data), sort_keys=True)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


def _prepare_out(out, overwrite: bool, resolved: dict) -> bool:
    """Create the output dir and write the resolved config; False if already complete."""
    out = Path(out)
    if (out / DONE_FILE).is_file() and not overwrite:
        print(f"{out} is already complete; pass --overwrite to recompute")
        return False
    out.mkdir(parents=True, exist_ok=True)
    if overwrite:
        (out / DONE_FILE).unlink(missing_ok=True)
    (out / "config.yaml").write_text(_dump_yaml(resolved))
    return True


def _finish(out, summary: dict):
    (Path(out) / DONE_FILE).write_text(json.dumps(_plain(summary), indent=1, sort_keys=True) + "\n")


def _set_threads(n):
    import torch

    n = n or os.cpu_count() or 1
    torch.set_num_threads(int(n))


# ------------------------------------------------------------ commands


def cmd_synth(args) -> int:
    cfg = _load_yaml(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    try:
        spec = synth.SynthSpec.from_dict(cfg)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    spec.validate()
    if args.print_config:
        print(_dump_yaml(spec.to_dict()), end="")
        return EXIT_OK
    if not _prepare_out(args.out, args.overwrite, spec.to_dict()):
        return EXIT_OK
    records = synth.generate_dataset(spec, args.out)
    n_train = sum(r.split == "train" for r in records)
    print(f"wrote {len(records)} records ({n_train} train, {len(records) - n_train} test) to {args.out}")
    _finish(args.out, {"records": len(records)})
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = _load_yaml(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    try:
        fit_cfg = pipeline.FitConfig.from_dict(cfg)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    if args.print_config:
        print(_dump_yaml(fit_cfg.to_dict()), end="")
        return EXIT_OK
    for p in (args.image, args.mask):
        if p is None or not Path(p).is_file():
            raise ConfigError(f"input image not found: {p}")
    image = synth.load_png(args.image)[..., :3].astype(np.float64) / 255.0
    mask = synth.load_png(args.mask)
    if mask.ndim == 3:
        mask = mask[..., 0]
    mask = mask > 127
    if not mask.any():
        raise DataValidationError("mask has no foreground pixels")
    resolved = {"fit": fit_cfg.to_dict(), "image": str(args.image), "mask": str(args.mask)}
    if not _prepare_out(args.out, args.overwrite, resolved):
        return EXIT_OK
    out = Path(args.out)
    res = pipeline.fit_single(image, mask, fit_cfg)
    mesh_mod.write_obj(out / "mesh.obj", res.vertices, res.faces)
    synth.save_png(out / "render_best.png", res.renders[res.best])
    for k, cam in enumerate(res.camera_ids):
        synth.save_png(out / f"render_cam{cam}.png", res.renders[k])
    (out / "loss_curve.json").write_text(json.dumps(res.loss_curve) + "\n")
    summary = {
        "iou": res.iou,
        "steps": res.steps,
        "best_camera": res.best_camera.tolist(),
        "best_camera_id": res.camera_ids[res.best],
        "posterior": res.posterior.tolist(),
        "camera_ids": res.camera_ids,
        "final_loss": res.loss_curve[-1] if res.loss_curve else None,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    print(f"iou={res.iou:.4f} steps={res.steps} best_camera={res.camera_ids[res.best]}")
    _finish(out, summary)
    return EXIT_OK


ABLATIONS = {
    "none": {},
    "no-pe": {"pe": "none"},
    "pe2": {"pe": "pe2"},
    "no-fs": {"use_shape_encoder": False},
}


def cmd_train(args) -> int:
    cfg = _load_yaml(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.dataset is not None:
        cfg["dataset"] = str(args.dataset)
    for ab in args.ablation or []:
        cfg.update(ABLATIONS[ab])
    if args.max_steps is not None:
        cfg["max_steps_a"] = args.max_steps
    try:
        train_cfg = pipeline.TrainConfig.from_dict(cfg)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    if args.print_config:
        print(_dump_yaml(train_cfg.to_dict()), end="")
        return EXIT_OK
    if not train_cfg.dataset or not Path(train_cfg.dataset, "manifest.json").is_file():
        raise ConfigError(f"dataset not found: {train_cfg.dataset}")
    if args.resume is not None and not Path(args.resume).is_file():
        raise ConfigError(f"checkpoint not found: {args.resume}")
    if not _prepare_out(args.out, args.overwrite, train_cfg.to_dict()):
        return EXIT_OK
    out = Path(args.out)
    ds = synth.load_dataset(train_cfg.dataset, splits=("train",))
    trainer = pipeline.Trainer(train_cfg, ds.records, ds.num_classes)
    if args.resume is not None:
        trainer.load(args.resume)
    log = pipeline.metrics_writer(out / "metrics.jsonl")
    ckpt = out / "checkpoint.npz"
    t0 = time.time()
    start = trainer.dataset_loss()
    log({"event": "dataset_loss", "step": trainer.step, "total": start})

    def on_step(tr):
        if args.checkpoint_every and tr.step % args.checkpoint_every == 0:
            tr.save(out / f"checkpoint_step{tr.step:06d}.npz")

    try:
        if trainer.phase == "A":
            trainer.train_phase_a(log=log, on_epoch_end=lambda tr: tr.save(ckpt), on_step=on_step)
        trainer.save(out / "checkpoint_phase_a.npz")
        end = trainer.dataset_loss()
        log({"event": "dataset_loss", "step": trainer.step, "total": end})
        steps_a = trainer.step
        summary = {"steps": steps_a, "dataset_loss_start": start, "dataset_loss_end": end}
        if not args.no_phase_b and train_cfg.epochs_b > 0:
            summary.update(trainer.train_phase_b(log=log))
        trainer.save(ckpt)
    finally:
        log.close()
    summary["seconds"] = time.time() - t0
    print(f"trained {steps_a} phase-A steps; dataset loss {start:.4f} -> {end:.4f}")
    _finish(out, summary)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_yaml(args.config)
    split = cfg.get("split", args.split)
    alpha = float(cfg.get("alpha", 0.1))
    max_pairs = cfg.get("max_pairs")
    metrics = tuple(cfg.get("metrics", ("accuracy", "iou", "pck")))
    resolved = {"split": split, "alpha": alpha, "max_pairs": max_pairs, "metrics": list(metrics),
                "checkpoint": None if args.oracle else str(args.checkpoint), "dataset": str(args.dataset),
                "oracle": bool(args.oracle)}
    if args.print_config:
        print(_dump_yaml(resolved), end="")
        return EXIT_OK
    if args.dataset is None or not Path(args.dataset, "manifest.json").is_file():
        raise ConfigError(f"dataset not found: {args.dataset}")
    ds = synth.load_dataset(args.dataset, splits=(split,))
    if args.oracle:
        predict = pipeline.oracle_predictor(ds.spec.mesh_level)
        level = ds.spec.mesh_level
    else:
        if args.checkpoint is None or not Path(args.checkpoint).is_file():
            raise ConfigError(f"checkpoint not found: {args.checkpoint}")
        model, _ = pipeline.load_model(args.checkpoint)
        if model.config.num_classes != ds.num_classes or model.config.mesh_level != ds.spec.mesh_level:
            raise CompatibilityError("checkpoint does not match the dataset (classes or mesh level)")
        predict = pipeline.model_predictor(model)
        level = model.config.mesh_level
    if not _prepare_out(args.out, args.overwrite, resolved):
        return EXIT_OK
    out = Path(args.out)
    report = pipeline.evaluate(predict, ds.records, ds.num_classes, level, metrics, alpha, max_pairs)
    rows = report.pop("per_instance")
    (out / "report.json").write_text(json.dumps(_plain(report), indent=1, sort_keys=True) + "\n")
    with open(out / "per_instance.jsonl", "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(_plain(row), sort_keys=True) + "\n")
    for note in report["notices"]:
        print(note, file=sys.stderr)
    print(" ".join(f"{k}={report[k]}" for k in ("accuracy", "iou", "pck") if k in report))
    _finish(out, report)
    return EXIT_OK


# ------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="canon3d", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
        p.add_argument("--overwrite", action="store_true", help="recompute a complete output directory")
        p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="fit one image by analysis-by-synthesis")
    common(p)
    p.add_argument("--image", help="RGB PNG")
    p.add_argument("--mask", help="mask PNG (foreground > 127)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("train", help="train on a synthetic dataset")
    common(p)
    p.add_argument("--dataset", help="dataset directory (overrides the config)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--ablation", action="append", choices=sorted(ABLATIONS), help="model ablation (repeatable)")
    p.add_argument("--max-steps", type=int, help="stop phase A after this many steps")
    p.add_argument("--checkpoint-every", type=int, default=0, help="also checkpoint every N steps")
    p.add_argument("--no-phase-b", action="store_true", help="skip camera-decoder distillation")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (or the ground-truth oracle)")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint file")
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--oracle", action="store_true", help="evaluate ground truth instead of a model")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.out is None and not args.print_config:
        print("error: --out is required", file=sys.stderr)
        return EXIT_CONFIG
    try:
        _set_threads(args.threads)
        return args.func(args)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except CompatibilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPAT


if __name__ == "__main__":
    sys.exit(main())
