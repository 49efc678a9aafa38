"""Confusion-matrix metrics, evaluation reports, baseline comparison and montages."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .data import AnnotatedSample, DatasetManifest, LabelSchema, SegMap, dump_json

# overlay palette, one RGB triple per label id; changing it changes montage bytes
PALETTE_VERSION = 1
PALETTE = (
    (0, 0, 0),
    (196, 120, 80),
    (240, 240, 240),
    (60, 140, 230),
    (220, 40, 60),
    (250, 220, 40),
    (60, 200, 90),
    (170, 80, 200),
    (80, 220, 220),
    (128, 128, 128),
)


class MetricsError(Exception):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    """``counts[t, p]`` = pixels with truth ``t`` predicted as ``p``."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise MetricsError(f"confusion matrix must be square, got {c.shape}")
        if (c < 0).any():
            raise MetricsError("confusion counts must be non-negative")
        c = c.copy()
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)

    @classmethod
    def zeros(cls, n: int) -> "ConfusionMatrix":
        return cls(np.zeros((n, n), np.int64))

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.counts.shape != self.counts.shape:
            raise MetricsError("cannot add confusion matrices of different sizes")
        return ConfusionMatrix(self.counts + other.counts)


def _labels(x) -> np.ndarray:
    return x.labels if isinstance(x, SegMap) else np.asarray(x)


def confusion(pred, truth, n_classes: int | None = None) -> ConfusionMatrix:
    p, t = _labels(pred), _labels(truth)
    if p.shape != t.shape:
        raise MetricsError(f"prediction {p.shape} and truth {t.shape} differ in shape")
    if isinstance(pred, SegMap) and isinstance(truth, SegMap) and pred.schema != truth.schema:
        if len(pred.schema) != len(truth.schema):
            raise MetricsError("prediction and truth use different schemas")
    if n_classes is None:
        n_classes = len(truth.schema) if isinstance(truth, SegMap) else int(max(p.max(), t.max())) + 1
    flat = t.astype(np.int64).ravel() * n_classes + p.astype(np.int64).ravel()
    counts = np.bincount(flat, minlength=n_classes * n_classes)
    if counts.size > n_classes * n_classes:
        raise MetricsError(f"labels outside 0..{n_classes - 1}")
    return ConfusionMatrix(counts.reshape(n_classes, n_classes))


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise MetricsError("empty confusion matrix")
    return float(np.trace(cm.counts)) / cm.total


def dice(cm: ConfusionMatrix, c: int) -> float | None:
    """``2 TP / (|truth| + |pred|)`` for class ``c``; None if the class is absent from both."""
    if not 0 <= c < cm.n_classes:
        raise MetricsError(f"class {c} outside 0..{cm.n_classes - 1}")
    denom = int(cm.counts[c, :].sum() + cm.counts[:, c].sum())
    if denom == 0:
        return None
    return 2.0 * int(cm.counts[c, c]) / denom


@dataclass(frozen=True)
class MetricsReport:
    model_id: str
    dataset_id: str
    split: str
    cm: ConfusionMatrix
    schema: LabelSchema
    n_samples: int

    @property
    def pixel_accuracy(self) -> float:
        return pixel_accuracy(self.cm)

    @property
    def dice(self) -> dict[str, float | None]:
        return {n: dice(self.cm, i) for i, n in enumerate(self.schema.names)}

    @property
    def mean_dice(self) -> float | None:
        vals = [v for v in self.dice.values() if v is not None]
        return float(np.mean(vals)) if vals else None

    def to_json(self) -> dict:
        return {
            "model_id": self.model_id,
            "dataset_id": self.dataset_id,
            "split": self.split,
            "n_samples": self.n_samples,
            "pixel_accuracy": self.pixel_accuracy,
            "mean_dice": self.mean_dice,
            "dice": self.dice,
            "confusion": self.cm.counts.tolist(),
            "schema": list(self.schema.names),
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(dump_json(self.to_json()))
        return path

    @classmethod
    def from_json(cls, d: dict) -> "MetricsReport":
        schema = LabelSchema(tuple(d["schema"])) if "schema" in d else LabelSchema(tuple(d["dice"]))
        return cls(d["model_id"], d["dataset_id"], d.get("split", "test"),
                   ConfusionMatrix(np.array(d["confusion"])), schema, d["n_samples"])

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        return cls.from_json(json.loads(Path(path).read_text()))


def dataset_id(manifest: DatasetManifest) -> str:
    return hashlib.sha256(dump_json(manifest.to_json()).encode()).hexdigest()[:16]


def evaluate_model(model, manifest: DatasetManifest, split: str = "test",
                   model_id: str | None = None) -> MetricsReport:
    """Aggregate the confusion matrix of ``model`` over every sample of ``split``.

    ``model`` is a ``UNetModel`` or any callable mapping an ``AnnotatedSample``
    to a label array.
    """
    refs = manifest.split(split)
    if not refs:
        raise MetricsError(f"split {split!r} is empty")
    samples = [manifest.load(r) for r in refs]
    n = len(manifest.schema)
    if callable(model):
        preds = [np.asarray(_labels(model(s))) for s in samples]
        mid = model_id or getattr(model, "__name__", "callable")
    else:
        from .unet import predict_batch

        preds = list(predict_batch(model, np.stack([s.image.values for s in samples])))
        mid = model_id or model.checksum()[:16]
    cm = ConfusionMatrix.zeros(n)
    for s, p in zip(samples, preds):
        cm = cm + confusion(p, s.mask.labels, n)
    return MetricsReport(mid, dataset_id(manifest), split, cm, manifest.schema, len(samples))


@dataclass(frozen=True)
class Comparison:
    delta: float
    improved: bool
    dice_delta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"delta": self.delta, "improved": self.improved, "dice_delta": self.dice_delta}


def compare_reports(baseline: MetricsReport | float, augmented: MetricsReport | float
                    ) -> Comparison:
    """Accuracy gain of ``augmented`` over ``baseline``; bare accuracies are accepted too."""
    if isinstance(baseline, MetricsReport) and isinstance(augmented, MetricsReport):
        if baseline.dataset_id != augmented.dataset_id or baseline.split != augmented.split:
            raise MetricsError("reports were computed on different datasets or splits")
        delta = augmented.pixel_accuracy - baseline.pixel_accuracy
        dd = {}
        for name in baseline.schema.names:
            a, b = augmented.dice[name], baseline.dice[name]
            dd[name] = None if a is None or b is None else a - b
        return Comparison(delta, delta > 0, dd)
    b = baseline.pixel_accuracy if isinstance(baseline, MetricsReport) else float(baseline)
    a = augmented.pixel_accuracy if isinstance(augmented, MetricsReport) else float(augmented)
    return Comparison(a - b, a - b > 0)


# --------------------------------------------------------------------------
# montage


def colorize(labels: np.ndarray) -> np.ndarray:
    pal = np.array(PALETTE, np.uint8)
    return pal[np.asarray(labels) % len(pal)]


def overlay(image: np.ndarray, labels: np.ndarray, alpha: float = 0.45) -> np.ndarray:
    gray = np.repeat((np.clip(image, 0, 1) * 255)[..., None], 3, axis=-1)
    col = colorize(labels).astype(np.float64)
    fg = (np.asarray(labels) != 0)[..., None]
    out = np.where(fg, (1 - alpha) * gray + alpha * col, gray)
    return np.round(out).astype(np.uint8)


def render_montage(images: Sequence[np.ndarray], truths: Sequence[np.ndarray],
                   preds_baseline: Sequence[np.ndarray], preds_augmented: Sequence[np.ndarray],
                   path: str | Path, schema: LabelSchema | None = None, pad: int = 4) -> Path:
    """One row per sample: image, truth overlay, baseline overlay, augmented overlay."""
    n = len(images)
    if n < 1 or not (len(truths) == len(preds_baseline) == len(preds_augmented) == n):
        raise MetricsError("montage inputs must be non-empty lists of equal length")
    schema = schema or LabelSchema()
    h, w = np.asarray(images[0]).shape
    legend_h = 14 * ((len(schema) + 3) // 4) + 2 * pad
    header_h = 16
    width = 4 * w + 5 * pad
    height = header_h + n * (h + pad) + pad + legend_h
    canvas = np.full((height, width, 3), 255, np.uint8)
    for r in range(n):
        img = np.asarray(images[r], np.float64)
        tiles = [
            np.repeat((np.clip(img, 0, 1) * 255).round().astype(np.uint8)[..., None], 3, -1),
            overlay(img, truths[r]),
            overlay(img, preds_baseline[r]),
            overlay(img, preds_augmented[r]),
        ]
        y = header_h + r * (h + pad) + pad
        for c, tile in enumerate(tiles):
            x = pad + c * (w + pad)
            canvas[y:y + h, x:x + w] = tile
    pil = Image.fromarray(canvas)
    draw = ImageDraw.Draw(pil)
    for c, title in enumerate(("image", "truth", "baseline", "augmented")):
        draw.text((pad + c * (w + pad), 2), title, fill=(0, 0, 0))
    y0 = height - legend_h + pad
    col_w = width // 4
    for i, name in enumerate(schema.names):
        x = pad + (i % 4) * col_w
        y = y0 + 14 * (i // 4)
        draw.rectangle([x, y + 1, x + 10, y + 11], fill=PALETTE[i % len(PALETTE)],
                       outline=(0, 0, 0))
        draw.text((x + 14, y), name, fill=(0, 0, 0))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pil.save(path, format="PNG")
    return path
