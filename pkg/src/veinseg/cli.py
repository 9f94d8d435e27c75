"""Command-line entry points tying the toolkit together.

One executable, five subcommands:

  synth    generate a synthetic venation dataset with a manifest
  prepare  tile a manifest's train split into a filtered patch dataset
  train    run semi-supervised training on a prepared patch dataset
  eval     stitched whole-blade evaluation of a checkpoint
  splits   (re)assign train/val/test splits, incl. cross-species protocols

Option precedence: command-line flags > config-file section > built-in
defaults. The config file is YAML with one section per subcommand; unknown
sections or keys are rejected rather than ignored. The default experiment
root honors the VEINSEG_RUNS environment variable.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
import yaml

from . import evalmetrics, ssltrain, synthgen, tiling
from .core import (
    CrossSpeciesMode,
    ManifestError,
    Regime,
    SegMask,
    Split,
    build_cross_species_splits,
    build_splits,
    load_manifest,
    load_mask,
)
from .model import create_model, load_checkpoint, model_from_checkpoint
from .psssloss import PsssConfig
from .ssltrain import LossToggles, PseudoSource, TrainingConfig, fit

log = logging.getLogger(__name__)

RUNS_ENV_VAR = "VEINSEG_RUNS"


class CliError(Exception):
    pass


_COMMANDS = ("synth", "prepare", "train", "eval", "splits")

_DEFAULTS: dict[str, dict] = {
    "synth": {
        "out": None,
        "full": 6,
        "partial": 6,
        "unlabeled": 60,
        "val": 2,
        "test": 2,
        "seed": 0,
        "canvas": [512, 512],
        "species": "synthetic",
        "width_v1": 9,
        "width_v2": 5,
        "width_v3": 2,
        "n_secondary": 8,
        "n_tertiary": 36,
        "noise_level": 0.3,
        "v3_contrast": [0.10, 0.32],
        "v3_length_scale": [1.0, 1.0],
    },
    "prepare": {
        "manifest": None,
        "out": None,
        "patch": 256,
        "min_foreground_fraction": 0.01,
        "tolerance": 24,
    },
    "train": {
        "patches": None,
        "run_dir": None,
        "backbone": "unet",
        "widths": None,
        "epochs": 80,
        "batch_size": 4,
        "base_lr": 1e-3,
        "weight_decay": 1e-4,
        "poly_power": 0.9,
        "momentum": 0.9,
        "tau": 0.95,
        "tau_u": 0.95,
        "lambda_p": 1.0,
        "seed": 0,
        "pseudo_source": "student-weak",
        "ema_decay": 0.999,
        "steps_per_epoch": None,
        "no_psss": False,
        "supervised_only": False,
        "no_partial_supervised": False,
        "no_partial_pseudo": False,
        "no_partial_exclusion": False,
        "augment": {},
    },
    "eval": {
        "checkpoint": None,
        "manifest": None,
        "split": "test",
        "out": None,
        "render": None,
        "patch": None,
        "batch_size": 8,
        "oracle": False,
    },
    "splits": {
        "manifest": None,
        "out": None,
        "ratios": "1,1,10",
        "ratio_unit": 6,
        "seed": 0,
        "val_fraction": 0.15,
        "test_fraction": 0.15,
        "source": None,
        "target": None,
        "mode": None,
    },
}

# Keys whose built-in default is None yet stay optional.
_OPTIONAL_NONE = {
    "train": {"run_dir", "widths", "steps_per_epoch"},
    "eval": {"checkpoint", "out", "render", "patch"},
    "splits": {"source", "target", "mode"},
}


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CliError(f"config file not found: {p}")
    doc = yaml.safe_load(p.read_text()) or {}
    if not isinstance(doc, dict):
        raise CliError("config file must map section names to key/value tables")
    unknown = set(doc) - set(_COMMANDS)
    if unknown:
        raise CliError(f"unknown config sections: {sorted(unknown)}")
    return doc


def _resolve(command: str, args: argparse.Namespace, file_doc: dict) -> dict:
    defaults = _DEFAULTS[command]
    section = file_doc.get(command, {}) or {}
    if not isinstance(section, dict):
        raise CliError(f"config section {command!r} must be a table")
    unknown = set(section) - set(defaults)
    if unknown:
        raise CliError(f"unknown keys in config section {command!r}: {sorted(unknown)}")
    resolved = dict(defaults)
    resolved.update(section)
    for key in defaults:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            resolved[key] = flag_value
    missing = [
        k
        for k, v in resolved.items()
        if v is None and k not in _OPTIONAL_NONE.get(command, set())
    ]
    if missing:
        raise CliError(f"{command}: missing required option(s): {sorted(missing)}")
    return resolved


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="veinseg", description="Label-efficient hierarchical vein segmentation toolkit"
    )
    parser.add_argument("--config", help="YAML config file with per-command sections")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic venation dataset")
    p.add_argument("--out", help="output dataset directory")
    p.add_argument("--full", type=int, help="train samples with full masks")
    p.add_argument("--partial", type=int, help="train samples with partial masks")
    p.add_argument("--unlabeled", type=int, help="train samples without masks")
    p.add_argument("--val", type=int, help="extra fully labeled val samples")
    p.add_argument("--test", type=int, help="extra fully labeled test samples")
    p.add_argument("--seed", type=int)
    p.add_argument("--canvas", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--species")
    p.add_argument("--width-v1", dest="width_v1", type=int)
    p.add_argument("--width-v2", dest="width_v2", type=int)
    p.add_argument("--width-v3", dest="width_v3", type=int)
    p.add_argument("--n-secondary", dest="n_secondary", type=int)
    p.add_argument("--n-tertiary", dest="n_tertiary", type=int)
    p.add_argument("--noise-level", dest="noise_level", type=float)
    p.add_argument(
        "--v3-contrast", dest="v3_contrast", type=float, nargs=2, metavar=("LO", "HI"),
        help="per-leaf tertiary contrast range",
    )
    p.add_argument(
        "--v3-length-scale", dest="v3_length_scale", type=float, nargs=2, metavar=("LO", "HI"),
        help="per-leaf scale range on tertiary segment length",
    )

    p = sub.add_parser("prepare", help="tile a manifest into a filtered patch dataset")
    p.add_argument("--manifest", help="dataset manifest path")
    p.add_argument("--out", help="output patch directory")
    p.add_argument("--patch", type=int, help="patch side length")
    p.add_argument(
        "--min-foreground-fraction", dest="min_foreground_fraction", type=float,
        help="retain a patch iff its foreground fraction reaches this",
    )
    p.add_argument("--tolerance", type=int, help="per-channel background tolerance")

    p = sub.add_parser("train", help="train on a prepared patch dataset")
    p.add_argument("--patches", help="patch manifest (patches.json)")
    p.add_argument("--run-dir", dest="run_dir", help="experiment directory")
    p.add_argument("--backbone")
    p.add_argument("--widths", help="comma-separated encoder widths for the unet backbone")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--base-lr", dest="base_lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--poly-power", dest="poly_power", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--tau", type=float, help="partial-stream confidence threshold")
    p.add_argument("--tau-u", dest="tau_u", type=float, help="unlabeled-stream confidence threshold")
    p.add_argument("--lambda-p", dest="lambda_p", type=float, help="partial loss weight")
    p.add_argument("--seed", type=int)
    p.add_argument("--pseudo-source", dest="pseudo_source", choices=[s.value for s in PseudoSource])
    p.add_argument("--ema-decay", dest="ema_decay", type=float)
    p.add_argument("--steps-per-epoch", dest="steps_per_epoch", type=int)
    p.add_argument("--no-psss", dest="no_psss", action="store_true", default=None,
                   help="zero the partial loss weight and drop the partial stream")
    p.add_argument("--supervised-only", dest="supervised_only", action="store_true", default=None,
                   help="disable both the unlabeled and partial objectives")
    p.add_argument("--no-partial-supervised", dest="no_partial_supervised", action="store_true", default=None)
    p.add_argument("--no-partial-pseudo", dest="no_partial_pseudo", action="store_true", default=None)
    p.add_argument("--no-partial-exclusion", dest="no_partial_exclusion", action="store_true", default=None)

    p = sub.add_parser("eval", help="stitched whole-blade evaluation")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--split", choices=[s.value for s in Split])
    p.add_argument("--out", help="report JSON path")
    p.add_argument("--render", help="directory for color-coded mask renderings")
    p.add_argument("--patch", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--oracle", action="store_true", default=None,
                   help="score ground truth against itself (metrics self-check)")

    p = sub.add_parser("splits", help="assign train/val/test splits to a manifest")
    p.add_argument("--manifest")
    p.add_argument("--out", help="path of the re-split manifest to write")
    p.add_argument("--ratios", help="full:partial:unlabeled as comma-separated ints")
    p.add_argument("--ratio-unit", dest="ratio_unit", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    p.add_argument("--test-fraction", dest="test_fraction", type=float)
    p.add_argument("--source", help="source species (cross-species protocols)")
    p.add_argument("--target", help="target species (cross-species protocols)")
    p.add_argument("--mode", choices=[m.value for m in CrossSpeciesMode])
    return parser


def cmd_synth(cfg: dict) -> int:
    spec = synthgen.VeinSpec(
        seed=cfg["seed"],
        canvas=tuple(cfg["canvas"]),
        width_v1=cfg["width_v1"],
        width_v2=cfg["width_v2"],
        width_v3=cfg["width_v3"],
        n_secondary=cfg["n_secondary"],
        n_tertiary_per_secondary=cfg["n_tertiary"],
        noise_level=cfg["noise_level"],
        v3_contrast_range=tuple(cfg["v3_contrast"]),
        v3_length_scale_range=tuple(cfg["v3_length_scale"]),
    )
    manifest = synthgen.emit_dataset(
        spec,
        (cfg["full"], cfg["partial"], cfg["unlabeled"]),
        cfg["out"],
        cfg["seed"],
        n_val=cfg["val"],
        n_test=cfg["test"],
        species=cfg["species"],
    )
    print(Path(cfg["out"]) / "manifest.json")
    print(f"samples: {len(manifest.samples)} (ratios {manifest.ratios} x unit {manifest.ratio_unit})")
    return 0


def cmd_prepare(cfg: dict) -> int:
    manifest = load_manifest(cfg["manifest"])
    pm = tiling.prepare_patches(
        manifest,
        cfg["manifest"],
        cfg["out"],
        patch=cfg["patch"],
        min_foreground_fraction=cfg["min_foreground_fraction"],
        tolerance=cfg["tolerance"],
    )
    if not pm.records:
        log.warning(
            "no patches retained at threshold %.3f; training on this directory will fail",
            cfg["min_foreground_fraction"],
        )
    print(Path(cfg["out"]) / "patches.json")
    print(f"patches: {len(pm.records)} from {len(pm.sources)} images")
    return 0


def _training_config(cfg: dict) -> TrainingConfig:
    lambda_p = cfg["lambda_p"]
    enable_unsupervised = True
    if cfg["no_psss"] or cfg["supervised_only"]:
        lambda_p = 0.0
    if cfg["supervised_only"]:
        enable_unsupervised = False
    toggles = LossToggles(
        partial_supervised=not cfg["no_partial_supervised"],
        partial_pseudo=not cfg["no_partial_pseudo"],
        partial_exclusion=not cfg["no_partial_exclusion"],
    )
    augment = ssltrain.AugmentConfig(**{
        k: tuple(v) if isinstance(v, list) else v for k, v in cfg["augment"].items()
    })
    return TrainingConfig(
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        base_lr=cfg["base_lr"],
        weight_decay=cfg["weight_decay"],
        poly_power=cfg["poly_power"],
        momentum=cfg["momentum"],
        tau_u=cfg["tau_u"],
        psss=PsssConfig(tau=cfg["tau"], lambda_p=lambda_p),
        toggles=toggles,
        pseudo_source=PseudoSource(cfg["pseudo_source"]),
        ema_decay=cfg["ema_decay"],
        enable_unsupervised=enable_unsupervised,
        steps_per_epoch=cfg["steps_per_epoch"],
        seed=cfg["seed"],
        augment=augment,
    )


def cmd_train(cfg: dict) -> int:
    patches = tiling.load_patch_manifest(Path(cfg["patches"]))
    train_cfg = _training_config(cfg)
    run_dir = cfg["run_dir"]
    if run_dir is None:
        root = Path(os.environ.get(RUNS_ENV_VAR, "runs"))
        run_dir = root / f"{patches.root.name}-seed{train_cfg.seed}"
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    backbone_kwargs = {}
    if cfg["widths"] is not None:
        backbone_kwargs["widths"] = tuple(int(w) for w in str(cfg["widths"]).split(","))
    torch.manual_seed(train_cfg.seed)
    model = create_model(cfg["backbone"], **backbone_kwargs)

    snapshot = {
        "command": "train",
        "patches": str(Path(cfg["patches"]).resolve()),
        "run_dir": str(run_dir.resolve()),
        "backbone": cfg["backbone"],
        "backbone_kwargs": {k: list(v) if isinstance(v, tuple) else v for k, v in backbone_kwargs.items()},
        "training": ssltrain.config_to_dict(train_cfg),
    }
    (run_dir / "config.json").write_text(json.dumps(snapshot, indent=1, sort_keys=True) + "\n")

    best_path, history = fit(model, patches, train_cfg, run_dir)
    best = max((h for h in history if h["kind"] == "epoch"), key=lambda h: h["val_miou"])
    print(best_path)
    print(f"best val mIoU {best['val_miou']:.4f} (epoch {best['epoch']})")
    return 0


def cmd_eval(cfg: dict) -> int:
    manifest = load_manifest(cfg["manifest"])
    samples = manifest.by(split=Split(cfg["split"]))
    if not samples:
        raise CliError(f"split {cfg['split']!r} has no samples")
    render_dir = cfg["render"]

    if cfg["oracle"]:
        # Ground truth scored against itself through the exact same metric
        # primitives the model path uses; anything but mIoU 1.0 is a bug.
        cm = evalmetrics.ConfusionMatrix.empty()
        for s in samples:
            if s.regime is not Regime.FULL or s.mask_path is None:
                raise CliError(f"sample {s.id}: oracle evaluation needs a full mask")
            gt = SegMask(load_mask(manifest.resolve(s.mask_path)))
            cm = evalmetrics.accumulate(cm, gt.labels, gt)
            if render_dir is not None:
                evalmetrics.save_image(
                    Path(render_dir) / f"{s.id}_gt.png", evalmetrics.render_mask(gt.labels)
                )
        rep = evalmetrics.report(cm)
        out = Path(cfg["out"] or f"report-oracle-{cfg['split']}.json")
    else:
        if cfg["checkpoint"] is None:
            raise CliError("eval: --checkpoint is required unless --oracle is set")
        payload = load_checkpoint(cfg["checkpoint"])
        model, norm = model_from_checkpoint(payload)
        patch = cfg["patch"] or payload.get("config", {}).get("patch") or 256
        rep = evalmetrics.evaluate_stitched(
            model,
            samples,
            manifest.root,
            normalization=norm,
            patch=int(patch),
            batch_size=cfg["batch_size"],
            render_dir=render_dir,
        )
        out = Path(cfg["out"] or Path(cfg["checkpoint"]).parent / f"report-{cfg['split']}.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(rep.to_dict(), indent=1, sort_keys=True) + "\n")
    print(evalmetrics.format_report(rep))
    print(out)
    return 0


def cmd_splits(cfg: dict) -> int:
    manifest = load_manifest(cfg["manifest"], check_files=False)
    out = Path(cfg["out"])
    ratios = tuple(int(r) for r in str(cfg["ratios"]).split(","))
    if len(ratios) != 3:
        raise CliError(f"ratios must have three terms, got {cfg['ratios']!r}")
    # Re-root relative sample paths onto the new manifest's directory.
    out.parent.mkdir(parents=True, exist_ok=True)
    rebased = [
        replace(
            s,
            image_path=os.path.relpath(manifest.resolve(s.image_path).resolve(), out.parent.resolve()),
            mask_path=None
            if s.mask_path is None
            else os.path.relpath(manifest.resolve(s.mask_path).resolve(), out.parent.resolve()),
        )
        for s in manifest.samples
    ]
    if cfg["mode"] is not None:
        if cfg["source"] is None or cfg["target"] is None:
            raise CliError("cross-species splits need both --source and --target")
        new_manifest = build_cross_species_splits(
            rebased,
            cfg["source"],
            cfg["target"],
            CrossSpeciesMode(cfg["mode"]),
            ratios=ratios,
            ratio_unit=cfg["ratio_unit"],
            seed=cfg["seed"],
            val_fraction=cfg["val_fraction"],
            root=out.parent,
        )
    else:
        new_manifest = build_splits(
            rebased,
            ratios,
            cfg["ratio_unit"],
            cfg["seed"],
            val_fraction=cfg["val_fraction"],
            test_fraction=cfg["test_fraction"],
            root=out.parent,
        )
    new_manifest.save(out)
    counts = {
        split.value: len(new_manifest.by(split=split)) for split in Split
    }
    print(out)
    print(f"splits: {counts}")
    return 0


_HANDLERS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "eval": cmd_eval,
    "splits": cmd_splits,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        file_doc = _load_config_file(args.config)
        resolved = _resolve(args.command, args, file_doc)
        return _HANDLERS[args.command](resolved)
    except (CliError, ManifestError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
