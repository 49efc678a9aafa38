"""Dataset expansion: every training map passed through every generator in a style bank."""

from __future__ import annotations

import json
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .data import (
    DatasetManifest,
    IntensityGrid,
    SampleRef,
    SegMap,
    dump_json,
    save_manifest,
    write_image_png,
)
from .generator import GeneratorModel, generate

BANK_FILE = "bank.json"


class AugmentError(Exception):
    pass


class StyleGenerator(Protocol):
    style_id: str

    def generate(self, segmap: SegMap, seed: int) -> IntensityGrid: ...


class _Trained:
    """Adapter exposing a trained GeneratorModel through ``generate(segmap, seed)``."""

    def __init__(self, model: GeneratorModel):
        self.model = model
        self.style_id = model.style_id
        self.n_labels = model.config.n_labels

    def generate(self, segmap: SegMap, seed: int) -> IntensityGrid:
        return generate(self.model, segmap, seed)


@dataclass
class StyleBank:
    generators: list

    def __post_init__(self):
        self.generators = [_Trained(g) if isinstance(g, GeneratorModel) else g
                           for g in self.generators]
        ids = [g.style_id for g in self.generators]
        if any(not i for i in ids):
            raise AugmentError("every generator in a bank needs a style id")
        if len(set(ids)) != len(ids):
            raise AugmentError(f"duplicate style ids in bank: {ids}")

    def __len__(self) -> int:
        return len(self.generators)

    @property
    def style_ids(self) -> list[str]:
        return [g.style_id for g in self.generators]

    def save(self, directory: str | Path) -> Path:
        """Write one checkpoint per generator plus an index file."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        entries = []
        for g in self.generators:
            if not isinstance(g, _Trained):
                raise AugmentError("only trained generators can be saved")
            name = f"{g.style_id}.pt"
            g.model.save(directory / name)
            entries.append({"style_id": g.style_id, "checkpoint": name})
        (directory / BANK_FILE).write_text(dump_json({"version": 1, "generators": entries}))
        return directory

    @classmethod
    def load(cls, directory: str | Path) -> "StyleBank":
        directory = Path(directory)
        index = directory / BANK_FILE
        if not index.is_file():
            raise AugmentError(f"no {BANK_FILE} in {directory}")
        doc = json.loads(index.read_text())
        return cls([GeneratorModel.load(directory / e["checkpoint"]) for e in doc["generators"]])


@dataclass
class AugmentationPlan:
    source: DatasetManifest
    bank: StyleBank
    out_dir: Path
    seed: int = 0
    include_originals: bool = True
    split: str = "train"


def _sample_seed(seed: int, i: int, j: int) -> int:
    return int(np.random.SeedSequence([seed, i, j]).generate_state(1)[0])


def augment_dataset(plan: AugmentationPlan) -> DatasetManifest:
    """Write the expanded training set of ``m * (n + 1)`` samples (``m * n`` without originals).

    Generated samples reuse their source mask byte for byte. Output is built in
    a scratch directory and moved into place only when every sample succeeded.
    """
    src = plan.source
    refs = src.split(plan.split)
    if not refs:
        raise AugmentError(f"source split {plan.split!r} is empty")
    n_labels = len(src.schema)
    for g in plan.bank.generators:
        if getattr(g, "n_labels", n_labels) != n_labels:
            raise AugmentError(
                f"generator {g.style_id} expects {g.n_labels} labels, data has {n_labels}"
            )

    out_dir = Path(plan.out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".augment-", dir=out_dir.parent))
    try:
        new_refs = []
        for i, ref in enumerate(refs):
            mask_rel = f"msk/{ref.id}.png"
            (tmp / "msk").mkdir(exist_ok=True)
            shutil.copyfile(src.root / ref.mask, tmp / mask_rel)
            if plan.include_originals:
                img_rel = f"img/{ref.id}.png"
                (tmp / "img").mkdir(exist_ok=True)
                shutil.copyfile(src.root / ref.image, tmp / img_rel)
                new_refs.append(SampleRef(ref.id, img_rel, mask_rel, ref.domain, "train",
                                          {"source_id": ref.id, "style_id": None}))
            if not len(plan.bank):
                continue
            segmap = src.load(ref).mask
            for j, g in enumerate(plan.bank.generators):
                sid = f"{ref.id}__{g.style_id}"
                image = g.generate(segmap, _sample_seed(plan.seed, i, j))
                if image.shape != segmap.shape:
                    raise AugmentError(f"generator {g.style_id} returned shape {image.shape}")
                img_rel = f"img/{sid}.png"
                write_image_png(tmp / img_rel, image)
                new_refs.append(SampleRef(sid, img_rel, mask_rel, f"styled:{g.style_id}",
                                          "train", {"source_id": ref.id,
                                                    "style_id": g.style_id}))
        manifest = DatasetManifest(src.schema, new_refs, src.window, out_dir)
        save_manifest(manifest, tmp / "manifest.json")
        if out_dir.exists():
            shutil.rmtree(out_dir)
        tmp.rename(out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return manifest


def expanded_size(m: int, n: int, include_originals: bool = True) -> int:
    return m * (n + 1) if include_originals else m * n
