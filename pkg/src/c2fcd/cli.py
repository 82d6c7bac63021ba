"""Command-line surface.

Commands: split, synth, train, eval, infer, viz, ablate, gradcheck, timing.
Every artifact lands under the command's --out location; reports are written
as CSV plus a matplotlib figure of the same content.  Exit codes: 0 success,
2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import statistics
import sys
import time
from dataclasses import replace as config_replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import data as data_mod
from . import figures
from .checkpoint import CheckpointError, config_digest, load_checkpoint, save_checkpoint
from .errors import ConfigurationError, DataError, NumericError
from .metrics import (binarize, compute_metrics, confusion, render_confusion_map,
                      write_metrics_csv)
from .model import ModuleToggles, build_model, gradient_audit, set_params
from .trainer import (BestSnapshot, TrainConfig, TrainLogWriter, evaluate_model,
                      predict_batches, train_semi, train_supervised)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

TOGGLE_NAMES = ("gcm_abc_enabled", "gcm_cde_enabled", "refine_enabled",
                "agg_init_enabled", "agg_final_enabled")

RUN_CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "mode": {"enum": ["supervised", "semi"]},
        "root": {"type": "string"},
        "manifest": {"type": "string"},
        "unlabelled_root": {"type": ["string", "null"]},
        "alpha": {"type": "number", "minimum": 0, "maximum": 1},
        "beta": {"type": "number", "minimum": 0},
        "warmup_epochs": {"type": "integer", "minimum": 0},
        "total_epochs": {"type": "integer", "minimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "learning_rate": {"type": "number", "minimum": 0},
        "weight_decay": {"type": "number", "minimum": 0},
        "seed": {"type": "integer"},
        "width_multiplier": {"type": "number", "exclusiveMinimum": 0},
        "decoder_width": {"type": "integer", "minimum": 4, "multipleOf": 4},
        "binarize_threshold": {"type": "number", "exclusiveMinimum": 0,
                               "exclusiveMaximum": 1},
        "supervise_coarse": {"type": "boolean"},
        "perturbation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "flip_prob": {"type": "number", "minimum": 0, "maximum": 1},
                "noise_std": {"type": "number", "minimum": 0},
                "teacher_clean": {"type": "boolean"},
            },
        },
        "toggles": {
            "type": "object",
            "additionalProperties": False,
            "properties": {name: {"type": "boolean"} for name in TOGGLE_NAMES},
        },
    },
}


def default_seed() -> int:
    return int(os.environ.get("C2F_SEED", "0"))


def _load_json(path, what: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigurationError(f"{what} not found: {path}") from exc
    except ValueError as exc:
        raise ConfigurationError(f"{what} is not valid JSON: {path} ({exc})") from exc


def validate_run_config(cfg: dict) -> list[str]:
    """Schema, semantic, and path problems, all collected in one pass."""
    import jsonschema

    problems = []
    validator = jsonschema.Draft202012Validator(RUN_CONFIG_SCHEMA)
    for error in sorted(validator.iter_errors(cfg), key=lambda e: list(e.path)):
        where = ".".join(str(p) for p in error.path) or "config"
        problems.append(f"{where}: {error.message}")
    if problems:
        return problems  # field types are wrong; later checks would crash

    tc_fields = set(TrainConfig.__dataclass_fields__)
    tc_payload = {k: v for k, v in cfg.items() if k in tc_fields}
    try:
        problems.extend(TrainConfig.from_dict(tc_payload).validate())
    except (ConfigurationError, TypeError) as exc:
        problems.append(str(exc))

    for key in ("root", "manifest"):
        if key not in cfg:
            problems.append(f"{key} is required")
        elif not Path(cfg[key]).exists():
            problems.append(f"{key} does not exist: {cfg[key]}")
    if cfg.get("unlabelled_root") and not Path(cfg["unlabelled_root"]).exists():
        problems.append(f"unlabelled_root does not exist: {cfg['unlabelled_root']}")
    return problems


def assemble_run_config(args) -> dict:
    """Merge the config file with flag overrides (flags win)."""
    cfg = _load_json(args.config, "config file") if args.config else {}
    overrides = {
        "mode": args.mode,
        "root": args.root,
        "manifest": args.manifest,
        "unlabelled_root": getattr(args, "unlabelled_root", None),
        "seed": args.seed,
        "beta": getattr(args, "beta", None),
        "warmup_epochs": getattr(args, "warmup_epochs", None),
        "total_epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
        "learning_rate": getattr(args, "learning_rate", None),
        "width_multiplier": getattr(args, "width", None),
        "decoder_width": getattr(args, "decoder_width", None),
    }
    for key, value in overrides.items():
        if value is not None:
            cfg[key] = value
    for name in getattr(args, "disable", None) or []:
        if name not in TOGGLE_NAMES:
            raise ConfigurationError(
                f"unknown toggle {name!r}; choose from {', '.join(TOGGLE_NAMES)}")
        cfg.setdefault("toggles", {})[name] = False
    cfg.setdefault("mode", "semi")
    cfg.setdefault("seed", default_seed())
    return cfg


def _train_config(cfg: dict) -> TrainConfig:
    tc_fields = set(TrainConfig.__dataclass_fields__)
    return TrainConfig.from_dict({k: v for k, v in cfg.items() if k in tc_fields})


def _echo_config(cfg: dict, out_dir: Path) -> None:
    (out_dir / "config.echo.json").write_text(
        json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _resolve_partition(args, root: Path):
    """Train/val/test id lists for split building."""
    if getattr(args, "partition", None):
        partition = _load_json(args.partition, "partition file")
    else:
        partition = data_mod.load_partition(root)
    if partition is None:
        print("warning: no splits.json found; treating every tile as train",
              file=sys.stderr)
        return data_mod.list_tile_ids(root), [], [], root.name
    return (list(partition["train"]), list(partition.get("val", [])),
            list(partition.get("test", [])), partition.get("dataset", root.name))


# --- commands ----------------------------------------------------------------

def cmd_split(args) -> int:
    root = Path(args.root)
    train_ids, val_ids, test_ids, name = _resolve_partition(args, root)
    manifest = data_mod.make_split(train_ids, args.ratio, args.seed,
                                   dataset_name=args.name or name,
                                   val_ids=val_ids, test_ids=test_ids)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest.save(out)
    print(f"{len(manifest.labelled)} labelled / {len(manifest.unlabelled)} unlabelled")
    print(f"manifest written to {out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = data_mod.SynthConfig(
        n_train=args.n_train, n_val=args.n_val, n_test=args.n_test,
        tile_size=args.tile, shapes_per_tile=(args.shapes_min, args.shapes_max),
        change_prob=args.change_prob, seed=args.seed)
    partition = data_mod.synth_generate(cfg, args.out)
    print(f"synthetic dataset at {args.out}: "
          f"{len(partition['train'])} train / {len(partition['val'])} val / "
          f"{len(partition['test'])} test tiles of {cfg.tile_size}x{cfg.tile_size}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = assemble_run_config(args)
    problems = validate_run_config(cfg)
    if problems:
        raise ConfigurationError("invalid run config:\n  " + "\n  ".join(problems))
    train_cfg = _train_config(cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, out_dir)

    manifest = data_mod.SplitManifest.load(cfg["manifest"])
    splits = data_mod.load_dataset(cfg["root"], manifest,
                                   unlabelled_root=cfg.get("unlabelled_root"))
    val_loader = splits.val if len(splits.val) else None
    model = build_model(train_cfg.width_multiplier, train_cfg.decoder_width,
                        train_cfg.toggles, seed=train_cfg.seed)

    with TrainLogWriter(out_dir / "train_log.csv") as writer:
        if cfg["mode"] == "supervised":
            result = train_supervised(model, splits.labelled, train_cfg,
                                      epochs=train_cfg.total_epochs,
                                      val_loader=val_loader, log_writer=writer)
        else:
            result = train_semi(model, splits.labelled, splits.unlabelled,
                                train_cfg, val_loader=val_loader, log_writer=writer)

    ckpt_dir = out_dir / "checkpoints"
    best_student = result.best_student or BestSnapshot(
        epoch=train_cfg.total_epochs - 1, f1=float("nan"), iou=float("nan"),
        params=result.params)
    save_checkpoint(best_student.params, cfg, ckpt_dir / "best_student.ckpt")
    save_checkpoint(result.params, cfg, ckpt_dir / "last_student.ckpt")
    if result.teacher_params is not None:
        best_teacher = result.best_teacher or BestSnapshot(
            epoch=train_cfg.total_epochs - 1, f1=float("nan"), iou=float("nan"),
            params=result.teacher_params)
        save_checkpoint(best_teacher.params, cfg, ckpt_dir / "best_teacher.ckpt")
        save_checkpoint(result.teacher_params, cfg, ckpt_dir / "last_teacher.ckpt")
        print(f"best teacher epoch {best_teacher.epoch} "
              f"(val F1 {best_teacher.f1:.4f}, IoU {best_teacher.iou:.4f})")
    print(f"best student epoch {best_student.epoch} "
          f"(val F1 {best_student.f1:.4f}, IoU {best_student.iou:.4f})")

    figures.save_loss_curves(result.logs, out_dir / "loss_curve.png")
    print(f"artifacts under {out_dir}")
    return EXIT_OK


def _split_dataset(args, manifest) -> data_mod.TileDataset:
    ids = {"labelled": manifest.labelled, "val": manifest.val,
           "test": manifest.test}[args.split]
    if not ids:
        raise ConfigurationError(f"split {args.split!r} is empty in the manifest")
    return data_mod.TileDataset(args.root, ids, with_labels=True)


def _load_model_from_checkpoint(args):
    ckpt = load_checkpoint(args.checkpoint)
    if args.config:
        cfg = _load_json(args.config, "config file")
        width = cfg.get("width_multiplier", 1.0)
        decoder = cfg.get("decoder_width", 64)
        toggles = ModuleToggles(**cfg.get("toggles", {}))
        threshold = cfg.get("binarize_threshold", 0.5)
        if config_digest(cfg) != ckpt.digest:
            print("warning: config digest does not match the checkpoint header",
                  file=sys.stderr)
    else:
        width, decoder, toggles = args.width, args.decoder_width, ModuleToggles()
        threshold = args.threshold
    model = build_model(width, decoder, toggles, seed=0)
    set_params(model, ckpt.entries)
    model.eval()
    return model, threshold


def cmd_eval(args) -> int:
    manifest = data_mod.SplitManifest.load(args.manifest)
    dataset = _split_dataset(args, manifest)
    model, threshold = _load_model_from_checkpoint(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    model_name = Path(args.checkpoint).stem
    result = evaluate_model(model, dataset, threshold, args.batch_size,
                            per_sample=True)
    write_metrics_csv(out_dir / "metrics.csv",
                      [(args.split, manifest.ratio, model_name, result.metrics)])
    write_metrics_csv(out_dir / "per_image_metrics.csv",
                      [(sample_id, manifest.ratio, model_name, m)
                       for sample_id, m in result.per_sample])
    figures.save_metrics_bar(result.metrics, out_dir / "metrics_summary.png",
                             title=f"{model_name} on {args.split}")
    if args.viz:
        _render_split(model, dataset, threshold, out_dir / "viz")
    m = result.metrics
    print(f"{args.split}: F1 {m.f1:.4f}  Pre {m.precision:.4f}  Rec {m.recall:.4f}  "
          f"OA {m.oa:.4f}  KC {m.kc:.4f}  IoU {m.iou:.4f}")
    print(f"report under {out_dir}")
    return EXIT_OK


def _render_split(model, dataset, threshold, viz_dir: Path) -> None:
    viz_dir.mkdir(parents=True, exist_ok=True)
    for ids, logits, labels in predict_batches(model, dataset, with_labels=True):
        for i, sample_id in enumerate(ids):
            rgb = render_confusion_map(binarize(logits[i], threshold),
                                       labels[i].astype(np.uint8))
            Image.fromarray(rgb, mode="RGB").save(viz_dir / f"{sample_id}.png")


def cmd_viz(args) -> int:
    manifest = data_mod.SplitManifest.load(args.manifest)
    dataset = _split_dataset(args, manifest)
    model, threshold = _load_model_from_checkpoint(args)
    out_dir = Path(args.out)
    _render_split(model, dataset, threshold, out_dir / "viz")
    print(f"{len(dataset)} confusion maps under {out_dir / 'viz'}")
    return EXIT_OK


def cmd_infer(args) -> int:
    manifest = data_mod.SplitManifest.load(args.manifest)
    ids = {"labelled": manifest.labelled, "unlabelled": manifest.unlabelled,
           "val": manifest.val, "test": manifest.test}[args.split]
    if not ids:
        raise ConfigurationError(f"split {args.split!r} is empty in the manifest")
    dataset = data_mod.TileDataset(args.root, ids, with_labels=False)
    model, threshold = _load_model_from_checkpoint(args)
    pred_dir = Path(args.out) / "pred"
    pred_dir.mkdir(parents=True, exist_ok=True)
    count = 0
    for batch_ids, logits, _ in predict_batches(model, dataset, args.batch_size):
        for i, sample_id in enumerate(batch_ids):
            mask = binarize(logits[i], threshold) * np.uint8(255)
            Image.fromarray(mask, mode="L").save(pred_dir / f"{sample_id}.png")
            count += 1
    print(f"{count} prediction masks under {pred_dir}")
    return EXIT_OK


ABLATION_HEADER = ("sweep", "variant", "value", "seed", "F1", "Pre", "Rec",
                   "OA", "KC", "IoU", "loss_total", "status")


def _ablation_variants(sweep: str, base: TrainConfig):
    if sweep == "modules":
        yield "full", "", base
        for name in TOGGLE_NAMES:
            label = "no_" + name.removesuffix("_enabled")
            yield label, "", config_replace(
                base, toggles=base.toggles.with_disabled(name))
    elif sweep == "warmup":
        for n in (5, 10, 15, 20):
            yield f"warmup_{n}", str(n), config_replace(base, warmup_epochs=n)
    elif sweep == "beta":
        for i in range(1, 10):
            value = round(0.1 * i, 1)
            yield f"beta_{value}", str(value), config_replace(base, beta=value)
    else:
        raise ConfigurationError(f"unknown sweep {sweep!r}")


def cmd_ablate(args) -> int:
    cfg = assemble_run_config(args)
    problems = validate_run_config(cfg)
    if args.sweep == "warmup" and cfg.get("total_epochs", 20) < 20:
        problems.append("warmup sweep needs total_epochs >= 20")
    if args.sweep in ("warmup", "beta") and cfg.get("mode", "semi") != "semi":
        problems.append(f"{args.sweep} sweep requires semi mode")
    if problems:
        raise ConfigurationError("invalid run config:\n  " + "\n  ".join(problems))
    base = _train_config(cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, out_dir)

    manifest = data_mod.SplitManifest.load(cfg["manifest"])
    splits = data_mod.load_dataset(cfg["root"], manifest,
                                   unlabelled_root=cfg.get("unlabelled_root"))
    val_loader = splits.val if len(splits.val) else None

    rows = []
    for variant, value, tc in _ablation_variants(args.sweep, base):
        row = {"sweep": args.sweep, "variant": variant, "value": value,
               "seed": tc.seed, "status": "ok"}
        try:
            model = build_model(tc.width_multiplier, tc.decoder_width, tc.toggles,
                                seed=tc.seed)
            if cfg["mode"] == "supervised":
                result = train_supervised(model, splits.labelled, tc,
                                          epochs=tc.total_epochs,
                                          val_loader=val_loader)
            else:
                result = train_semi(model, splits.labelled, splits.unlabelled, tc,
                                    val_loader=val_loader)
            last = result.logs[-1]
            row["loss_total"] = f"{last.loss_total:.6f}"
            best = _winner(result)
            if best is not None:
                metrics = compute_metrics_from_snapshot(result, best, tc, val_loader)
                for key, val in metrics.items():
                    row[key] = f"{val:.6f}"
        except Exception as exc:  # keep sweeping; the row records the failure
            row["status"] = f"error: {exc}"
        rows.append(row)
        print(f"[{args.sweep}] {variant}: {row['status']}"
              + (f" (F1 {row['F1']})" if "F1" in row else ""))

    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATION_HEADER, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in ABLATION_HEADER})
    figures.save_ablation_figure(rows, args.sweep, out_dir / "ablation.png")
    print(f"{len(rows)} rows under {out_dir}")
    return EXIT_OK


def _winner(result) -> BestSnapshot | None:
    """The validation winner among student/teacher snapshots."""
    candidates = [s for s in (result.best_student, result.best_teacher) if s]
    if not candidates:
        return None
    return max(candidates, key=lambda s: (s.f1, s.iou))


def compute_metrics_from_snapshot(result, best, tc, val_loader) -> dict:
    m = None
    if val_loader is not None:
        model = build_model(tc.width_multiplier, tc.decoder_width, tc.toggles, seed=0)
        set_params(model, best.params)
        m = evaluate_model(model, val_loader, tc.binarize_threshold,
                           tc.batch_size).metrics
    if m is None:
        return {}
    return {"F1": m.f1, "Pre": m.precision, "Rec": m.recall, "OA": m.oa,
            "KC": m.kc, "IoU": m.iou}


def cmd_gradcheck(args) -> int:
    if args.samples < 1:
        raise ConfigurationError("--samples must be >= 1")
    report = gradient_audit(
        width_multiplier=args.width, tile=args.tile, samples=args.samples,
        step=args.step, rel_tol=args.tolerance, seed=args.seed,
        decoder_width=args.decoder_width, corrupt_param=args.corrupt)
    print(f"gradient audit: {report.passed}/{report.samples} samples within "
          f"relative error {report.rel_tol:g} ({100 * report.pass_fraction:.1f}%)")
    print(f"worst relative error {report.worst_rel_err:.3e} ({report.worst_param})")
    if report.ok():
        print("PASS")
        return EXIT_OK
    for name, index, analytic, numeric, rel in report.failures[:20]:
        print(f"FAIL {name}[{index}]: analytic {analytic:.6e} vs numeric "
              f"{numeric:.6e} (rel {rel:.3e})")
    print("FAIL")
    return EXIT_NUMERIC


def summarize_timings(values) -> float:
    """The reported statistic for repeated timings: the median."""
    return statistics.median(values)


def cmd_timing(args) -> int:
    if args.reps < 3:
        raise ConfigurationError("--reps must be >= 3 (medians need repetitions)")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    gen = torch.Generator().manual_seed(args.seed)
    tc = TrainConfig(width_multiplier=args.width, decoder_width=args.decoder_width,
                     batch_size=args.batch_size, seed=args.seed,
                     total_epochs=args.train_epochs, warmup_epochs=0)

    rows = []
    if args.train_epochs >= 3:
        samples = []
        for i in range(args.pairs):
            x1 = torch.rand((3, args.tile, args.tile), generator=gen).numpy()
            x2 = torch.rand((3, args.tile, args.tile), generator=gen).numpy()
            y = (torch.rand((args.tile, args.tile), generator=gen) > 0.8).numpy()
            samples.append(data_mod.BiTemporalSample(
                id=f"timing{i:03d}", image_t1=x1, image_t2=x2,
                label=y.astype(np.float32)))
        model = build_model(args.width, args.decoder_width, seed=args.seed)
        result = train_supervised(model, samples, tc, epochs=args.train_epochs)
        rows.append({"measurement": "train_epoch_seconds",
                     "median": f"{summarize_timings([e.seconds for e in result.logs]):.4f}",
                     "unit": "s", "samples": args.train_epochs})

    model = build_model(args.width, args.decoder_width, seed=args.seed)
    model.eval()
    tiles = [(torch.rand((1, 3, args.tile, args.tile), generator=gen),
              torch.rand((1, 3, args.tile, args.tile), generator=gen))
             for _ in range(args.pairs)]
    with torch.no_grad():
        model(*tiles[0])  # warm up kernels before the stopwatch
        per_tile_ms = []
        for _ in range(args.reps):
            for t1, t2 in tiles:
                started = time.perf_counter()
                model(t1, t2)
                per_tile_ms.append(1000.0 * (time.perf_counter() - started))
    rows.append({"measurement": "inference_tile_ms",
                 "median": f"{summarize_timings(per_tile_ms):.4f}",
                 "unit": "ms", "samples": len(per_tile_ms)})

    with open(out_dir / "timing.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=("measurement", "median", "unit",
                                                "samples"), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    figures.save_timing_figure(rows, out_dir / "timing.png")
    for row in rows:
        print(f"{row['measurement']}: {row['median']} {row['unit']} "
              f"(median of {row['samples']})")
    return EXIT_OK


# --- parser -------------------------------------------------------------------

def _add_model_flags(p):
    p.add_argument("--config", help="config JSON (e.g. a run's config.echo.json)")
    p.add_argument("--width", type=float, default=1.0,
                   help="width multiplier when no config is given")
    p.add_argument("--decoder-width", type=int, default=64)
    p.add_argument("--threshold", type=float, default=0.5,
                   help="binarization threshold on the sigmoid output")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="c2fcd",
        description="Coarse-to-fine Siamese change detection: dataset tooling, "
                    "supervised and mean-teacher training, evaluation, reports.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="build a labelled/unlabelled split manifest")
    p.add_argument("--root", required=True)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="manifest file to write")
    p.add_argument("--partition", help="JSON with train/val/test id lists "
                                       "(default: <root>/splits.json)")
    p.add_argument("--name", help="dataset name recorded in the manifest")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("synth", help="generate a synthetic bi-temporal dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-val", type=int, default=16)
    p.add_argument("--n-test", type=int, default=48)
    p.add_argument("--tile", type=int, default=64)
    p.add_argument("--shapes-min", type=int, default=2)
    p.add_argument("--shapes-max", type=int, default=5)
    p.add_argument("--change-prob", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train supervised or semi-supervised")
    p.add_argument("--config", help="run config JSON; flags override its fields")
    p.add_argument("--root")
    p.add_argument("--manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("supervised", "semi"))
    p.add_argument("--unlabelled-root",
                   help="second dataset root supplying the unlabelled stream")
    p.add_argument("--seed", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--warmup-epochs", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--width", type=float)
    p.add_argument("--decoder-width", type=int)
    p.add_argument("--disable", action="append", metavar="TOGGLE",
                   help=f"disable a module ({', '.join(TOGGLE_NAMES)})")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--root", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=("labelled", "val", "test"), default="val")
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--viz", action="store_true",
                   help="also render per-sample confusion maps")
    _add_model_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="write prediction masks for a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--root", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=("labelled", "unlabelled", "val", "test"),
                   default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", type=int, default=8)
    _add_model_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("viz", help="render confusion maps for a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--root", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=("labelled", "val", "test"), default="val")
    p.add_argument("--out", required=True)
    _add_model_flags(p)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("ablate", help="run a controlled comparison sweep")
    p.add_argument("--config", help="base run config JSON")
    p.add_argument("--sweep", choices=("modules", "warmup", "beta"), required=True)
    p.add_argument("--root")
    p.add_argument("--manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("supervised", "semi"))
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--warmup-epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--width", type=float)
    p.add_argument("--decoder-width", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck",
                       help="finite-difference audit of the model's gradients")
    p.add_argument("--width", type=float, default=0.125)
    p.add_argument("--tile", type=int, default=32)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--step", type=float, default=1e-3)
    p.add_argument("--tolerance", type=float, default=1e-2)
    p.add_argument("--decoder-width", type=int, default=64)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--corrupt", metavar="PARAM",
                   help="test hook: bias this parameter's analytic gradient")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("timing", help="median train/inference wall-clock timings")
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=float, default=1.0)
    p.add_argument("--decoder-width", type=int, default=64)
    p.add_argument("--tile", type=int, default=256)
    p.add_argument("--pairs", type=int, default=4)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--train-epochs", type=int, default=3,
                   help="epochs to time (0 skips training timing)")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_timing)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "seed", None) is None and hasattr(args, "seed"):
        args.seed = default_seed()
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        out = getattr(args, "out", None)
        if out:
            dump = Path(out) / "nan_batch_ids.json"
            dump.parent.mkdir(parents=True, exist_ok=True)
            dump.write_text(json.dumps(
                {"error": str(exc), "batch_ids": exc.batch_ids},
                indent=2, sort_keys=True) + "\n")
            print(f"offending batch ids dumped to {dump}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
