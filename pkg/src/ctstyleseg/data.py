"""Images, segmentation maps, label schema, manifests and mask helpers."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from PIL import Image

DEFAULT_LABELS = (
    "background",
    "torso_tissue",
    "bone",
    "lungs",
    "heart",
    "spinal_cord",
    "esophagus",
)

# soft-tissue window, clinical convention
SOFT_TISSUE_LEVEL = 40.0
SOFT_TISSUE_WIDTH = 400.0

# raw HU images are stored as uint16 with this offset
HU_OFFSET = 1024

MANIFEST_VERSION = 1
SPLITS = ("train", "test", "style")


class DataError(Exception):
    """Base class for data-model errors. ``code`` is a stable identifier."""

    code = "data_error"


class WindowError(DataError):
    code = "invalid_window"


class EncodingError(DataError):
    code = "encoding"


class SchemaError(DataError):
    code = "schema_violation"


class ShapeError(DataError):
    code = "shape"


class ManifestError(DataError):
    code = "manifest"


class MissingFileError(ManifestError):
    code = "missing_file"


class DuplicateIdError(ManifestError):
    code = "duplicate_id"


class DanglingPathError(ManifestError):
    code = "dangling_path"


class UnknownLabelError(ManifestError):
    code = "unknown_label"


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class LabelSchema:
    names: tuple[str, ...] = DEFAULT_LABELS

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if len(names) < 2:
            raise SchemaError("schema needs background plus at least one segment")
        if any(not n for n in names):
            raise SchemaError("label names must be non-empty")
        if len(set(names)) != len(names):
            raise SchemaError("label names must be unique")

    def __len__(self) -> int:
        return len(self.names)

    @property
    def ids(self) -> range:
        return range(len(self.names))

    @property
    def foreground(self) -> range:
        return range(1, len(self.names))

    def id_of(self, name: str) -> int:
        return self.names.index(name)

    def to_json(self) -> list[dict]:
        return [{"id": i, "name": n} for i, n in enumerate(self.names)]

    @classmethod
    def from_json(cls, entries: Sequence[dict]) -> "LabelSchema":
        ids = [int(e["id"]) for e in entries]
        if sorted(ids) != list(range(len(ids))):
            raise SchemaError(f"label ids must be contiguous from 0, got {ids}")
        by_id = {int(e["id"]): str(e["name"]) for e in entries}
        return cls(tuple(by_id[i] for i in range(len(ids))))


@dataclass(frozen=True)
class IntensityGrid:
    """2-D intensity image, either raw HU or normalized to [0, 1]."""

    values: np.ndarray
    encoding: str = "normalized"

    def __post_init__(self):
        if self.encoding not in ("raw", "normalized"):
            raise EncodingError(f"unknown encoding {self.encoding!r}")
        v = np.asarray(self.values)
        if v.ndim != 2 or min(v.shape) < 8:
            raise ShapeError(f"intensity grid must be 2-D with sides >= 8, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise DataError("intensity grid contains non-finite values")
        if self.encoding == "normalized":
            v = v.astype(np.float32)
            if v.min() < 0.0 or v.max() > 1.0:
                raise EncodingError("normalized values must lie in [0, 1]")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class SegMap:
    labels: np.ndarray
    schema: LabelSchema = field(default_factory=LabelSchema)

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise ShapeError(f"segmentation map must be 2-D, got {lab.shape}")
        if lab.size and (lab.min() < 0 or lab.max() >= len(self.schema)):
            raise SchemaError(
                f"labels {sorted(set(np.unique(lab)) - set(self.schema.ids))} not in schema"
            )
        object.__setattr__(self, "labels", _frozen(lab.astype(np.uint8)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


@dataclass(frozen=True)
class AnnotatedSample:
    id: str
    image: IntensityGrid
    mask: SegMap
    domain: str = ""
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise ShapeError(
                f"sample {self.id}: image {self.image.shape} vs mask {self.mask.shape}"
            )
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}")


@dataclass(frozen=True)
class SampleRef:
    """Manifest entry: paths are relative to the manifest's directory."""

    id: str
    image: str
    mask: str
    domain: str = ""
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = {
            "id": self.id,
            "image": self.image,
            "mask": self.mask,
            "domain": self.domain,
            "split": self.split,
        }
        if self.meta:
            d["meta"] = dict(self.meta)
        return d


@dataclass(frozen=True)
class DatasetManifest:
    schema: LabelSchema
    samples: tuple[SampleRef, ...]
    window: tuple[float, float] | None = None
    root: Path = Path(".")
    version: int = MANIFEST_VERSION

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "root", Path(self.root))
        seen = set()
        for s in self.samples:
            if s.id in seen:
                raise DuplicateIdError(f"duplicate sample id {s.id!r}")
            seen.add(s.id)
        if self.window is not None and not self.window[1] > 0:
            raise WindowError(f"window width must be > 0, got {self.window[1]}")

    def __len__(self) -> int:
        return len(self.samples)

    def split(self, name: str) -> list[SampleRef]:
        return [s for s in self.samples if s.split == name]

    def get(self, sample_id: str) -> SampleRef:
        for s in self.samples:
            if s.id == sample_id:
                return s
        raise KeyError(sample_id)

    def load(self, ref: SampleRef) -> AnnotatedSample:
        return load_sample(ref, self.root, self.schema, self.window)

    def load_split(self, name: str) -> list[AnnotatedSample]:
        return [self.load(r) for r in self.split(name)]

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "schema": self.schema.to_json(),
            "window": (
                None
                if self.window is None
                else {"level": self.window[0], "width": self.window[1]}
            ),
            "samples": [s.to_json() for s in self.samples],
        }


# --------------------------------------------------------------------------
# intensity and mask operations


def apply_window(
    grid: IntensityGrid,
    level: float = SOFT_TISSUE_LEVEL,
    width: float = SOFT_TISSUE_WIDTH,
) -> IntensityGrid:
    """Linearly map the HU range ``level +/- width/2`` onto [0, 1], clamping outside."""
    if not width > 0:
        raise WindowError(f"window width must be > 0, got {width}")
    if grid.encoding != "raw":
        raise EncodingError("apply_window expects raw HU input")
    hu = grid.values.astype(np.float64)
    out = np.clip((hu - (level - width / 2.0)) / width, 0.0, 1.0)
    return IntensityGrid(out, "normalized")


def one_hot(mask: SegMap | np.ndarray, n_labels: int | None = None) -> np.ndarray:
    """Return a (C, H, W) uint8 stack with channel ``c`` set where ``mask == c``."""
    if isinstance(mask, SegMap):
        labels = mask.labels
        n = len(mask.schema) if n_labels is None else n_labels
    else:
        labels = np.asarray(mask)
        if n_labels is None:
            raise ValueError("n_labels is required for a bare array")
        n = n_labels
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise SchemaError(f"mask has labels outside 0..{n - 1}")
    return (labels[None, :, :] == np.arange(n)[:, None, None]).astype(np.uint8)


def downsample_mask(channel: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour decimation: ``out[i, j] = channel[i*factor, j*factor]``.

    Works on the last two axes so a whole (C, H, W) stack can be passed.
    """
    if factor < 1:
        raise ShapeError(f"factor must be >= 1, got {factor}")
    h, w = channel.shape[-2:]
    if h % factor or w % factor:
        raise ShapeError(f"factor {factor} does not divide shape {(h, w)}")
    return channel[..., ::factor, ::factor]


# --------------------------------------------------------------------------
# PNG I/O


def write_image_png(path: Path, grid: IntensityGrid) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if grid.encoding == "normalized":
        a = np.round(grid.values.astype(np.float64) * 65535.0).astype(np.uint16)
    else:
        a = np.clip(np.round(grid.values) + HU_OFFSET, 0, 65535).astype(np.uint16)
    Image.fromarray(a).save(path, format="PNG")


def read_image_png(path: Path, raw: bool = False) -> IntensityGrid:
    a = np.asarray(Image.open(path))
    if raw:
        return IntensityGrid(a.astype(np.float64) - HU_OFFSET, "raw")
    if a.dtype == np.uint8:
        return IntensityGrid(a.astype(np.float32) / 255.0)
    return IntensityGrid(a.astype(np.float32) / 65535.0)


def write_mask_png(path: Path, labels: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="L").save(path, format="PNG")


def read_mask_png(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path)).astype(np.uint8)


def load_sample(
    ref: SampleRef,
    root: Path,
    schema: LabelSchema,
    window: tuple[float, float] | None = None,
) -> AnnotatedSample:
    root = Path(root)
    if window is None:
        image = read_image_png(root / ref.image)
    else:
        image = apply_window(read_image_png(root / ref.image, raw=True), *window)
    mask = SegMap(read_mask_png(root / ref.mask), schema)
    return AnnotatedSample(ref.id, image, mask, ref.domain, ref.split, dict(ref.meta))


def save_sample(sample: AnnotatedSample, root: Path, subdir: str = "") -> SampleRef:
    """Write image and mask PNGs under ``root`` and return the manifest entry."""
    img_rel = os.path.join(subdir, "img", f"{sample.id}.png")
    msk_rel = os.path.join(subdir, "msk", f"{sample.id}.png")
    write_image_png(Path(root) / img_rel, sample.image)
    write_mask_png(Path(root) / msk_rel, sample.mask.labels)
    return SampleRef(
        sample.id, img_rel, msk_rel, sample.domain, sample.split, dict(sample.meta)
    )


# --------------------------------------------------------------------------
# manifests


def manifest_from_json(doc: dict, root: Path, check_files: bool = True) -> DatasetManifest:
    if doc.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest version {doc.get('version')!r}")
    schema = LabelSchema.from_json(doc["schema"])
    window = doc.get("window")
    if window is not None:
        window = (float(window["level"]), float(window["width"]))
    refs = [
        SampleRef(
            id=str(s["id"]),
            image=s["image"],
            mask=s["mask"],
            domain=s.get("domain", ""),
            split=s.get("split", "train"),
            meta=dict(s.get("meta", {})),
        )
        for s in doc["samples"]
    ]
    manifest = DatasetManifest(schema, refs, window, root)
    if check_files:
        _check_files(manifest)
    return manifest


def _check_files(manifest: DatasetManifest) -> None:
    n = len(manifest.schema)
    for ref in manifest.samples:
        for rel in (ref.image, ref.mask):
            if not (manifest.root / rel).is_file():
                raise DanglingPathError(f"sample {ref.id}: missing file {rel}")
        labels = read_mask_png(manifest.root / ref.mask)
        if labels.size and labels.max() >= n:
            raise UnknownLabelError(
                f"sample {ref.id}: mask label {int(labels.max())} outside schema of {n}"
            )


def load_manifest(path: str | os.PathLike, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"manifest not found: {path}")
    with open(path) as f:
        doc = json.load(f)
    return manifest_from_json(doc, path.parent, check_files)


def dump_json(obj: Any) -> str:
    """Canonical JSON text: sorted keys, fixed indent, trailing newline."""
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_json(manifest.to_json()))
    return path


def write_dataset(
    samples: Iterable[AnnotatedSample],
    root: str | os.PathLike,
    schema: LabelSchema,
    window: tuple[float, float] | None = None,
    name: str = "manifest.json",
) -> DatasetManifest:
    """Materialize samples as PNGs under ``root`` and write a manifest next to them."""
    root = Path(root)
    refs = [save_sample(s, root) for s in samples]
    manifest = DatasetManifest(schema, refs, window, root)
    save_manifest(manifest, root / name)
    return manifest
