"""Command-line entry point: ``ctstyleseg <subcommand> ...``.

Each subcommand reads its settings from the matching block of an optional
``--config`` JSON file (the same document ``run`` uses); flags given on the
command line override the file.  Failures exit with a stage-specific code.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from PIL import Image

from .augment import AugmentationPlan, StyleBank, augment_dataset
from .data import dump_json, load_manifest
from .generator import train_style_generator
from .metrics import PALETTE, MetricsReport, compare_reports, evaluate_model, render_montage
from .perceptual import vgg19
from .phantom import DOMAIN_B, generate_phantom_dataset
from .pipeline import (
    ConfigError,
    StageError,
    desk_config,
    load_config,
    override,
    run_experiment,
)
from .unet import UNetModel, predict, train_unet

log = logging.getLogger("ctstyleseg")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CODES = {
    "phantom": 10,
    "style": 11,
    "augment": 12,
    "unet_baseline": 13,
    "unet_augmented": 13,
    "segment": 14,
    "evaluate": 15,
    "report": 16,
}
COMMAND_STAGE = {
    "phantom": "phantom",
    "train-style": "style",
    "augment": "augment",
    "train-unet": "unet_baseline",
    "segment": "segment",
    "evaluate": "evaluate",
    "report": "report",
}

# flag dest -> config keys it sets (a side change must reach every stage that has one)
FLAG_KEYS = {
    "phantom": {
        "side": ("phantom.spec.side", "style.generator.side", "unet.config.side"),
        "n_train": ("phantom.n_train",),
        "n_test": ("phantom.n_test",),
        "n_style": ("phantom.n_style",),
        "seed": ("phantom.seed",),
        "domain_b_noise": (f"phantom.spec.domains.{DOMAIN_B}.noise_std",),
        "domain_b_streaks": (f"phantom.spec.domains.{DOMAIN_B}.streak_amp",),
    },
    "train-style": {
        "epochs": ("style.epochs",),
        "lr": ("style.lr",),
        "seed": ("style.seed",),
        "batch_size": ("style.batch_size",),
        "base_width": ("style.generator.base_width",),
        "width_scale": ("style.backbone.width_scale",),
    },
    "augment": {
        "seed": ("augment.seed",),
        "include_originals": ("augment.include_originals",),
    },
    "train-unet": {
        "epochs": ("unet.epochs",),
        "batch": ("unet.batch_size",),
        "lr": ("unet.lr",),
        "seed": ("unet.seed_baseline",),
        "depth": ("unet.config.depth",),
        "base_width": ("unet.config.base_width",),
    },
    "run": {
        "n_styles": ("style.n_styles",),
    },
}


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(args: argparse.Namespace, side: int | None = None) -> ExperimentConfig:
    """Config file (or the desk defaults), then ``--set`` pairs, then explicit flags."""
    cfg = load_config(args.config) if getattr(args, "config", None) else desk_config()
    values: dict[str, Any] = {}
    if side is not None:
        for key in FLAG_KEYS["phantom"]["side"]:
            values[key] = side
    for pair in getattr(args, "set", None) or []:
        key, sep, text = pair.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {pair!r}")
        values[key] = _parse_value(text)
    for dest, keys in FLAG_KEYS.get(args.command, {}).items():
        value = getattr(args, dest, None)
        if value is not None:
            for key in keys:
                values[key] = value
    if "phantom.n_style" in values and "style.n_styles" not in values:
        values["style.n_styles"] = min(cfg.style.n_styles, values["phantom.n_style"])
    return override(cfg, values) if values else cfg


def _manifest_side(manifest) -> int:
    return manifest.load(manifest.samples[0]).image.shape[0]


def cmd_phantom(args) -> int:
    cfg = resolve_config(args)
    p = cfg.phantom
    man = generate_phantom_dataset(p.spec, p.n_train, p.n_test, p.n_style, p.seed, args.out)
    print(f"wrote {len(man)} samples to {man.root}")
    return EXIT_OK


def cmd_train_style(args) -> int:
    man = load_manifest(args.manifest)
    cfg = resolve_config(args, side=_manifest_side(man))
    s = cfg.style
    backbone = vgg19(weights=s.backbone.get("weights"), width_scale=s.backbone.get("width_scale", 1.0),
                     seed=s.backbone.get("seed", 0))
    model, tlog = train_style_generator(man.load_split("train"), man.load(man.get(args.style_id)),
                                        s.loss, backbone, s.generator, epochs=s.epochs, lr=s.lr,
                                        seed=s.seed, batch_size=s.batch_size)
    model.save(args.out)
    if tlog.records:
        last = tlog.records[-1]
        print(f"style {model.style_id}: final content {last.content:.4g} style {last.style:.4g}")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_augment(args) -> int:
    cfg = resolve_config(args)
    source = load_manifest(args.manifest)
    bank = StyleBank.load(args.bank)
    out = augment_dataset(AugmentationPlan(source, bank, Path(args.out), cfg.augment.seed,
                                           cfg.augment.include_originals))
    print(f"wrote {len(out)} samples ({len(source.split('train'))} sources x "
          f"{len(bank)} styles) to {out.root}")
    return EXIT_OK


def cmd_train_unet(args) -> int:
    man = load_manifest(args.manifest)
    cfg = resolve_config(args, side=_manifest_side(man))
    u = cfg.unet
    model, tlog = train_unet(man, u.train_config(u.seed_baseline), u.config, args.split)
    model.save(args.out)
    if tlog.records:
        print(f"final training accuracy {tlog.records[-1].accuracy:.4f}")
    print(f"wrote {args.out}")
    return EXIT_OK


def _palette_bytes() -> list[int]:
    flat = [c for rgb in PALETTE for c in rgb]
    return flat + [0] * (768 - len(flat))


def cmd_segment(args) -> int:
    model = UNetModel.load(args.model)
    man = load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    refs = man.split(args.split)
    for ref in refs:
        seg, _ = predict(model, man.load(ref).image, man.schema)
        labels = np.ascontiguousarray(seg.labels, dtype=np.uint8)
        img = Image.frombytes("P", labels.shape[::-1], labels.tobytes())
        img.putpalette(_palette_bytes())
        img.save(out / f"{ref.id}.png", optimize=False)
    print(f"wrote {len(refs)} masks to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model = UNetModel.load(args.model)
    man = load_manifest(args.manifest)
    rep = evaluate_model(model, man, args.split, args.model_id or Path(args.model).stem)
    rep.save(args.report)
    mean = "undefined" if rep.mean_dice is None else f"{rep.mean_dice:.4f}"
    print(f"{rep.model_id}: pixel accuracy {rep.pixel_accuracy:.4f}, mean Dice {mean}")
    return EXIT_OK


def cmd_report(args) -> int:
    base, aug = MetricsReport.load(args.baseline), MetricsReport.load(args.augmented)
    cmp = compare_reports(base, aug)
    verdict = "improved" if cmp.improved else "not improved"
    print(f"baseline {base.pixel_accuracy:.4f}  augmented {aug.pixel_accuracy:.4f}  "
          f"delta {cmp.delta:+.4f} ({verdict})")
    for name, d in cmp.dice_delta.items():
        print(f"  dice {name:<14} {'undefined' if d is None else f'{d:+.4f}'}")
    if args.out:
        Path(args.out).write_text(dump_json(cmp.to_json()))
    if args.montage:
        if not (args.manifest and args.baseline_model and args.augmented_model):
            raise ConfigError("--montage needs --manifest, --baseline-model and --augmented-model")
        man = load_manifest(args.manifest)
        models = [UNetModel.load(args.baseline_model), UNetModel.load(args.augmented_model)]
        samples = man.load_split(base.split)[:args.n]
        preds = [[predict(m, s.image)[0].labels for s in samples] for m in models]
        render_montage([s.image.values for s in samples], [s.mask.labels for s in samples],
                       preds[0], preds[1], args.montage, man.schema)
        print(f"wrote {args.montage}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    rep = run_experiment(cfg, args.out)
    print(f"baseline {rep.baseline.pixel_accuracy:.4f}  augmented {rep.augmented.pixel_accuracy:.4f}"
          f"  delta {rep.delta:+.4f}")
    print(f"report: {rep.path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctstyleseg",
        description="Texture-transfer augmentation for CT segmentation: phantoms, style "
                    "generators, augmentation, U-Nets and reports.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", type=Path, help="experiment JSON; flags override its values")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override any config key, e.g. unet.config.depth=3 (repeatable)")
        return p

    p = with_config(sub.add_parser("run", help="run the whole experiment"))
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--n-styles", type=int)
    p.set_defaults(func=cmd_run)

    p = with_config(sub.add_parser("phantom", help="write a phantom dataset"))
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--side", type=int)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--n-style", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--domain-b-noise", type=float)
    p.add_argument("--domain-b-streaks", type=float)
    p.set_defaults(func=cmd_phantom)

    p = with_config(sub.add_parser("train-style", help="train one style generator"))
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--style-id", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--base-width", type=int)
    p.add_argument("--width-scale", type=float)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_train_style)

    p = with_config(sub.add_parser("augment", help="expand a training set with a style bank"))
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--bank", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-originals", dest="include_originals", action="store_const", const=False)
    p.set_defaults(func=cmd_augment)

    p = with_config(sub.add_parser("train-unet", help="train a segmentation U-Net"))
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--split", default="train")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--base-width", type=int)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_train_unet)

    p = sub.add_parser("segment", help="write predicted masks as indexed PNGs")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", help="score a U-Net on a split")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--split", default="test")
    p.add_argument("--report", required=True, type=Path)
    p.add_argument("--model-id")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="compare two evaluation reports")
    p.add_argument("--baseline", required=True, type=Path)
    p.add_argument("--augmented", required=True, type=Path)
    p.add_argument("--out", type=Path, help="write the comparison as JSON")
    p.add_argument("--montage", type=Path)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--baseline-model", type=Path)
    p.add_argument("--augmented-model", type=Path)
    p.add_argument("--n", type=int, default=4, help="montage rows")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CODES.get(e.stage, 1)
    except Exception as e:
        stage = COMMAND_STAGE.get(args.command)
        print(f"error in {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_CODES.get(stage, 1)


if __name__ == "__main__":
    sys.exit(main())
