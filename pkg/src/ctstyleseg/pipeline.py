"""End-to-end experiment: phantoms -> style generators -> augmentation -> two U-Nets -> comparison.

Every stage writes into its own directory under the output root and finishes
by writing ``stage.json``, which records a key (a hash of the stage's config
block and of the keys of the stages it depends on) and the sha256 of every
file it produced.  A stage whose ``stage.json`` key matches and whose files
still hash correctly is skipped on the next run.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable

import torch

from .augment import AugmentationPlan, StyleBank, augment_dataset, expanded_size
from .data import DatasetManifest, dump_json, load_manifest
from .generator import GeneratorConfig, train_style_generator
from .metrics import MetricsReport, compare_reports, evaluate_model, render_montage
from .perceptual import LossSpec, vgg19
from .phantom import PhantomSpec, generate_phantom_dataset
from .unet import TrainConfig, UNetConfig, UNetModel, predict, train_unet

log = logging.getLogger(__name__)

REPORT_VERSION = 1
STAGE_FILE = "stage.json"
FAILURE_FILE = "failed.json"
STAGES = ("phantom", "style", "augment", "unet_baseline", "unet_augmented",
          "evaluate", "report")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it, ``__cause__`` holds the original error."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage


@dataclass(frozen=True)
class PhantomBlock:
    spec: PhantomSpec = field(default_factory=PhantomSpec)
    n_train: int = 40
    n_test: int = 20
    n_style: int = 3
    seed: int = 0


@dataclass(frozen=True)
class StyleBlock:
    n_styles: int = 3
    generator: GeneratorConfig = field(default_factory=lambda: GeneratorConfig(side=128, base_width=16))
    epochs: int = 10
    lr: float = 5e-4
    batch_size: int = 1
    seed: int = 100
    loss: LossSpec = field(default_factory=lambda: LossSpec(style_weight=1.0,
                                                            normalization="masked_count"))
    # the feature network: VGG-19 topology, optionally narrowed; weights=None means seeded random
    backbone: dict = field(default_factory=lambda: {"width_scale": 0.25, "seed": 0, "weights": None})


@dataclass(frozen=True)
class AugmentBlock:
    seed: int = 5
    include_originals: bool = True


@dataclass(frozen=True)
class UNetBlock:
    config: UNetConfig = field(default_factory=lambda: UNetConfig(side=128, depth=3, base_width=16))
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    seed_baseline: int = 11
    seed_augmented: int = 12
    schedule: str = "constant"
    class_weights: str | list | None = None

    def train_config(self, seed: int) -> TrainConfig:
        weights = self.class_weights
        if isinstance(weights, list):
            weights = tuple(weights)
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, seed=seed,
                           schedule=self.schedule, class_weights=weights)


@dataclass(frozen=True)
class ReportBlock:
    montage_samples: int = 4
    split: str = "test"


@dataclass(frozen=True)
class ExperimentConfig:
    phantom: PhantomBlock = field(default_factory=PhantomBlock)
    style: StyleBlock = field(default_factory=StyleBlock)
    augment: AugmentBlock = field(default_factory=AugmentBlock)
    unet: UNetBlock = field(default_factory=UNetBlock)
    report: ReportBlock = field(default_factory=ReportBlock)

    def __post_init__(self):
        p, s, u = self.phantom, self.style, self.unet
        if not 0 <= s.n_styles <= p.n_style:
            raise ConfigError(f"n_styles={s.n_styles} needs 0 <= n_styles <= phantom n_style={p.n_style}")
        for name, side in (("generator", s.generator.side), ("unet", u.config.side)):
            if side != p.spec.side:
                raise ConfigError(f"{name} side {side} differs from phantom side {p.spec.side}")
        n = len(p.spec.schema)
        if s.generator.n_labels != n or u.config.n_classes != n:
            raise ConfigError(f"generator and U-Net must use the {n}-label schema")
        if self.report.montage_samples < 1:
            raise ConfigError("montage needs at least one sample")

    @property
    def seeds(self) -> dict:
        return {"phantom": self.phantom.seed, "style": self.style.seed,
                "augment": self.augment.seed, "unet_baseline": self.unet.seed_baseline,
                "unet_augmented": self.unet.seed_augmented}

    def to_json(self) -> dict:
        p, s, u = self.phantom, self.style, self.unet
        return {
            "phantom": {"spec": p.spec.to_json(), "n_train": p.n_train, "n_test": p.n_test,
                        "n_style": p.n_style, "seed": p.seed},
            "style": {"n_styles": s.n_styles, "generator": asdict(s.generator),
                      "epochs": s.epochs, "lr": s.lr, "batch_size": s.batch_size,
                      "seed": s.seed, "loss": s.loss.to_json(), "backbone": dict(s.backbone)},
            "augment": asdict(self.augment),
            "unet": {"config": asdict(u.config), "epochs": u.epochs, "batch_size": u.batch_size,
                     "lr": u.lr, "seed_baseline": u.seed_baseline,
                     "seed_augmented": u.seed_augmented, "schedule": u.schedule,
                     "class_weights": u.class_weights},
            "report": asdict(self.report),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ExperimentConfig":
        unknown = set(doc) - {"phantom", "style", "augment", "unet", "report"}
        if unknown:
            raise ConfigError(f"unknown config blocks: {sorted(unknown)}")
        try:
            d = dict(doc.get("phantom", {}))
            if "spec" in d:
                d["spec"] = PhantomSpec.from_json(d["spec"])
            phantom = PhantomBlock(**d)
            d = dict(doc.get("style", {}))
            if "generator" in d:
                d["generator"] = GeneratorConfig(**d["generator"])
            if "loss" in d:
                d["loss"] = LossSpec.from_json(d["loss"])
            style = StyleBlock(**d)
            augment = AugmentBlock(**doc.get("augment", {}))
            d = dict(doc.get("unet", {}))
            if "config" in d:
                d["config"] = UNetConfig(**d["config"])
            unet = UNetBlock(**d)
            report = ReportBlock(**doc.get("report", {}))
            return cls(phantom, style, augment, unet, report)
        except ConfigError:
            raise
        except Exception as e:  # invalid nested values surface as the owning module's error
            raise ConfigError(f"{type(e).__name__}: {e}") from e


def desk_config(overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """The 128-pixel desk experiment: 40 train, 20 test, 3 styles, 10 + 30 epochs."""
    cfg = ExperimentConfig()
    return override(cfg, overrides) if overrides else cfg


def override(config: ExperimentConfig, values: dict[str, Any]) -> ExperimentConfig:
    """Apply dotted-key overrides such as ``{"style.n_styles": 0, "unet.epochs": 5}``."""
    doc = config.to_json()
    for key, value in values.items():
        node = doc
        *path, last = key.split(".")
        for part in path:
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"unknown config key '{key}'")
            node = node[part]
        if not isinstance(node, dict) or last not in node:
            raise ConfigError(f"unknown config key '{key}'")
        node[last] = value
    return ExperimentConfig.from_json(doc)


def load_config(path: str | Path) -> ExperimentConfig:
    return ExperimentConfig.from_json(json.loads(Path(path).read_text()))


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _key(obj) -> str:
    return hashlib.sha256(dump_json(obj).encode()).hexdigest()


def _hash_tree(directory: Path) -> dict[str, str]:
    return {p.relative_to(directory).as_posix(): sha256_file(p)
            for p in sorted(directory.rglob("*")) if p.is_file() and p.name != STAGE_FILE}


def _cached(directory: Path, key: str) -> bool:
    marker = directory / STAGE_FILE
    if not marker.is_file():
        return False
    doc = json.loads(marker.read_text())
    return doc.get("key") == key and doc.get("files") == _hash_tree(directory)


@dataclass
class ExperimentReport:
    baseline: MetricsReport
    augmented: MetricsReport
    delta: float
    improved: bool
    dice_delta: dict
    artifacts: dict[str, str]
    path: Path
    audit: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentReport":
        path = Path(path)
        doc = json.loads(path.read_text())
        return cls(MetricsReport.from_json(doc["baseline"]), MetricsReport.from_json(doc["augmented"]),
                   doc["comparison"]["delta"], doc["comparison"]["improved"],
                   doc["comparison"]["dice_delta"], doc["artifacts"], path, doc["audit"])


class Experiment:
    """Runs the stages in order, skipping those whose cached outputs are current."""

    def __init__(self, config: ExperimentConfig, out: str | Path):
        self.config = config
        self.out = Path(out)
        self.keys: dict[str, str] = {}
        self.ran: list[str] = []

    def dir(self, stage: str) -> Path:
        return self.out / stage

    def _stage(self, name: str, block: dict, deps: tuple[str, ...],
               body: Callable[[Path], None]) -> Path:
        key = _key({"stage": name, "block": block, "deps": [self.keys[d] for d in deps]})
        self.keys[name] = key
        directory = self.dir(name)
        if _cached(directory, key):
            log.info("stage %s: cached", name)
            return directory
        log.info("stage %s: running", name)
        if directory.exists():
            shutil.rmtree(directory)
        directory.mkdir(parents=True)
        try:
            body(directory)
        except Exception as e:
            (self.out / FAILURE_FILE).write_text(dump_json({"stage": name, "error": repr(e)}))
            raise StageError(name, repr(e)) from e
        (directory / STAGE_FILE).write_text(dump_json({"stage": name, "key": key,
                                                       "files": _hash_tree(directory)}))
        self.ran.append(name)
        return directory

    def run(self) -> ExperimentReport:
        cfg = self.config
        if cfg.phantom.n_train < 1 or cfg.phantom.n_test < 1:
            raise ConfigError("the experiment needs at least one train and one test sample")
        doc = cfg.to_json()
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / FAILURE_FILE).unlink(missing_ok=True)
        torch.set_num_threads(1)  # bitwise reproducibility of CPU kernels

        def phantom(d: Path):
            p = cfg.phantom
            generate_phantom_dataset(p.spec, p.n_train, p.n_test, p.n_style, p.seed, d / "data")

        self._stage("phantom", doc["phantom"], (), phantom)
        source = load_manifest(self.dir("phantom") / "data" / "manifest.json")

        def style(d: Path):
            s = cfg.style
            backbone = vgg19(weights=s.backbone.get("weights"),
                             width_scale=s.backbone.get("width_scale", 1.0),
                             seed=s.backbone.get("seed", 0))
            content = source.load_split("train")
            gens, logs = [], {}
            for k, ref in enumerate(source.split("style")[:s.n_styles]):
                model, tlog = train_style_generator(
                    content, source.load(ref), s.loss, backbone, s.generator,
                    epochs=s.epochs, lr=s.lr, seed=s.seed + k, batch_size=s.batch_size)
                gens.append(model)
                logs[model.style_id] = [{k2: v for k2, v in r.items() if k2 != "seconds"}
                                        for r in tlog.to_json()]
            StyleBank(gens).save(d / "bank")
            (d / "losses.json").write_text(dump_json(logs))

        self._stage("style", doc["style"], ("phantom",), style)

        def augment(d: Path):
            bank = StyleBank.load(self.dir("style") / "bank")
            augment_dataset(AugmentationPlan(source, bank, d / "data", cfg.augment.seed,
                                             cfg.augment.include_originals))

        self._stage("augment", doc["augment"], ("style",), augment)
        expanded = load_manifest(self.dir("augment") / "data" / "manifest.json")

        m, n = len(source.split("train")), cfg.style.n_styles
        want = expanded_size(m, n, cfg.augment.include_originals)
        if len(expanded.split("train")) != want:
            raise StageError("augment", f"expanded set has {len(expanded)} samples, expected {want}")

        def unet_stage(dataset: DatasetManifest, seed: int):
            def body(d: Path):
                model, tlog = train_unet(dataset, cfg.unet.train_config(seed), cfg.unet.config)
                model.save(d / "model.pt")
                (d / "train_log.json").write_text(dump_json(
                    [{"epoch": r.epoch, "loss": r.loss, "accuracy": r.accuracy,
                      "n_samples": r.n_samples} for r in tlog.records]))
            return body

        ublock = {k: v for k, v in doc["unet"].items() if k != "seed_augmented"}
        self._stage("unet_baseline", ublock, ("phantom",),
                    unet_stage(source, cfg.unet.seed_baseline))
        ublock = {k: v for k, v in doc["unet"].items() if k != "seed_baseline"}
        self._stage("unet_augmented", ublock, ("augment",),
                    unet_stage(expanded, cfg.unet.seed_augmented))

        split = cfg.report.split

        def evaluate(d: Path):
            for name in ("unet_baseline", "unet_augmented"):
                model = UNetModel.load(self.dir(name) / "model.pt")
                evaluate_model(model, source, split, name).save(d / f"{name}.json")

        self._stage("evaluate", {"split": split}, ("unet_baseline", "unet_augmented"), evaluate)
        baseline = MetricsReport.load(self.dir("evaluate") / "unet_baseline.json")
        augmented = MetricsReport.load(self.dir("evaluate") / "unet_augmented.json")
        comparison = compare_reports(baseline, augmented)

        def report(d: Path):
            models = [UNetModel.load(self.dir(s) / "model.pt")
                      for s in ("unet_baseline", "unet_augmented")]
            samples = source.load_split(split)[:cfg.report.montage_samples]
            images = [s.image.values for s in samples]
            preds = [[predict(mdl, s.image)[0].labels for s in samples] for mdl in models]
            render_montage(images, [s.mask.labels for s in samples], preds[0], preds[1],
                           d / "montage.png", source.schema)

        self._stage("report", doc["report"], ("evaluate",), report)

        artifacts = {}
        for stage in STAGES:
            for rel, digest in json.loads((self.dir(stage) / STAGE_FILE).read_text())["files"].items():
                artifacts[f"{stage}/{rel}"] = digest
        audit = {"m": m, "n": n, "expanded": len(expanded.split("train")),
                 "expected": want, "stage_order": list(STAGES)}
        out_doc = {
            "version": REPORT_VERSION,
            "config": doc,
            "seeds": cfg.seeds,
            "baseline": baseline.to_json(),
            "augmented": augmented.to_json(),
            "comparison": comparison.to_json(),
            "audit": audit,
            "artifacts": artifacts,
        }
        path = self.out / "report.json"
        path.write_text(dump_json(out_doc))
        return ExperimentReport(baseline, augmented, comparison.delta, comparison.improved,
                                comparison.dice_delta, artifacts, path, audit)


def run_experiment(config: ExperimentConfig, out: str | Path) -> ExperimentReport:
    """Execute (or resume) the full experiment under ``out`` and write ``report.json``."""
    return Experiment(config, out).run()


def verify_artifacts(report: ExperimentReport, root: str | Path) -> list[str]:
    """Paths listed in the report that are missing or whose hash changed."""
    root = Path(root)
    bad = []
    for rel, digest in report.artifacts.items():
        p = root / rel
        if not p.is_file() or sha256_file(p) != digest:
            bad.append(rel)
    return bad
