"""U-Net segmentation network: construction, training and prediction."""

from __future__ import annotations

import io
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import (
    DEFAULT_LABELS,
    AnnotatedSample,
    DatasetManifest,
    IntensityGrid,
    LabelSchema,
    SegMap,
)
from .generator import TrainLog, state_checksum

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
SCHEDULES = ("constant", "cosine")


class UNetError(Exception):
    pass


@dataclass(frozen=True)
class UNetConfig:
    side: int = 512
    n_classes: int = 7
    depth: int = 4
    base_width: int = 64
    kernel: int = 3

    def __post_init__(self):
        if self.n_classes < 2:
            raise UNetError("need at least 2 classes")
        if self.side % (2**self.depth):
            raise UNetError(f"side {self.side} not divisible by 2^{self.depth}")
        if self.kernel % 2 == 0:
            raise UNetError("kernel size must be odd")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    # explicit per-class weights, or "balanced": inverse square-root class frequency
    # of the training masks, scaled to mean 1
    class_weights: tuple[float, ...] | str | None = None
    schedule: str = "constant"  # or "cosine": anneal the step size to 0 over all epochs

    def __post_init__(self):
        if isinstance(self.class_weights, str) and self.class_weights != "balanced":
            raise UNetError(f"unknown class weighting {self.class_weights!r}")
        if self.schedule not in SCHEDULES:
            raise UNetError(f"schedule must be one of {SCHEDULES}")
        if self.epochs < 0:
            raise UNetError("epochs must be >= 0")
        if self.batch_size < 1:
            raise UNetError("batch size must be >= 1")


class _Block(nn.Module):
    """conv -> batchnorm -> relu -> conv -> relu"""

    def __init__(self, cin, cout, k):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(cin, cout, k, padding=k // 2),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, k, padding=k // 2),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.body(x)


class UNet(nn.Module):
    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        w, k = cfg.base_width, cfg.kernel
        widths = [w * 2**i for i in range(cfg.depth + 1)]
        self.down = nn.ModuleList()
        cin = 1
        for i in range(cfg.depth):
            self.down.append(_Block(cin, widths[i], k))
            cin = widths[i]
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _Block(widths[-2], widths[-1], k)
        self.upconv = nn.ModuleList()
        self.up = nn.ModuleList()
        for i in reversed(range(cfg.depth)):
            self.upconv.append(nn.ConvTranspose2d(widths[i + 1], widths[i], 2, stride=2))
            self.up.append(_Block(2 * widths[i], widths[i], k))
        self.head = nn.Conv2d(w, cfg.n_classes, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 1, H, W) images -> (B, C, H, W) class scores."""
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for upc, block, skip in zip(self.upconv, self.up, reversed(skips)):
            x = block(torch.cat([upc(x), skip], dim=1))
        return self.head(x)

    def bottleneck_side(self, side: int) -> int:
        return side // 2**self.cfg.depth


@dataclass
class UNetModel:
    config: UNetConfig
    net: UNet
    seed: int

    def checksum(self) -> str:
        return state_checksum(self.net.state_dict())

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        buf = io.BytesIO()
        torch.save({
            "format_version": CHECKPOINT_VERSION,
            "kind": "unet",
            "config": asdict(self.config),
            "seed": self.seed,
            "state_dict": self.net.state_dict(),
        }, buf)
        path.write_bytes(buf.getvalue())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "UNetModel":
        payload = torch.load(path, map_location="cpu", weights_only=True)
        if payload.get("kind") != "unet":
            raise UNetError(f"{path} is not a U-Net checkpoint")
        if payload["format_version"] != CHECKPOINT_VERSION:
            raise UNetError(f"unsupported checkpoint version {payload['format_version']}")
        cfg = UNetConfig(**payload["config"])
        net = UNet(cfg)
        net.load_state_dict(payload["state_dict"])
        net.eval()
        return cls(cfg, net, payload["seed"])


@dataclass
class UNetEpoch:
    epoch: int
    loss: float
    accuracy: float
    n_samples: int
    seconds: float


def build_unet(config: UNetConfig, seed: int) -> UNetModel:
    torch.manual_seed(seed)
    net = UNet(config)
    net.eval()
    return UNetModel(config, net, seed)


def _as_samples(dataset, split: str) -> list[AnnotatedSample]:
    if isinstance(dataset, DatasetManifest):
        return dataset.load_split(split)
    return list(dataset)


def _class_weights(spec, labels: torch.Tensor, n_classes: int) -> torch.Tensor | None:
    if spec is None:
        return None
    if spec == "balanced":
        counts = torch.bincount(labels.reshape(-1), minlength=n_classes).double()
        w = torch.where(counts > 0, counts.clamp(min=1).rsqrt(), torch.zeros_like(counts))
        return (w * (counts > 0).sum() / w.sum()).float()
    if len(spec) != n_classes:
        raise UNetError(f"{len(spec)} class weights for {n_classes} classes")
    return torch.tensor(spec, dtype=torch.float32)


def train_unet(dataset: DatasetManifest | Sequence[AnnotatedSample], tc: TrainConfig,
               config: UNetConfig, split: str = "train") -> tuple[UNetModel, TrainLog]:
    """Minimize per-pixel cross-entropy with Adam over seeded shuffled batches."""
    samples = _as_samples(dataset, split)
    if not samples:
        raise UNetError("training set is empty")
    for s in samples:
        if s.image.shape != (config.side, config.side):
            raise UNetError(f"sample {s.id} has shape {s.image.shape}, expected side {config.side}")
        if len(s.mask.schema) != config.n_classes:
            raise UNetError(f"sample {s.id} schema size differs from {config.n_classes} classes")

    model = build_unet(config, tc.seed)
    log_ = TrainLog()
    if tc.epochs == 0:
        return model, log_

    images = torch.as_tensor(np.stack([s.image.values for s in samples]))[:, None]
    labels = torch.as_tensor(np.stack([s.mask.labels for s in samples])).long()
    weight = _class_weights(tc.class_weights, labels, config.n_classes)
    gen = torch.Generator().manual_seed(tc.seed)
    opt = torch.optim.Adam(model.net.parameters(), lr=tc.lr)
    n_steps = tc.epochs * -(-len(samples) // tc.batch_size)
    sched = (torch.optim.lr_scheduler.CosineAnnealingLR(opt, n_steps)
             if tc.schedule == "cosine" else None)
    n = len(samples)
    model.net.train()
    for epoch in range(tc.epochs):
        t0 = time.perf_counter()
        order = torch.randperm(n, generator=gen)
        loss_sum, correct, seen = 0.0, 0, 0
        for start in range(0, n, tc.batch_size):
            idx = order[start:start + tc.batch_size]
            scores = model.net(images[idx])
            loss = F.cross_entropy(scores, labels[idx], weight=weight)
            if not torch.isfinite(loss):
                raise UNetError(f"non-finite loss at epoch {epoch + 1}, batch {start // tc.batch_size}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            if sched is not None:
                sched.step()
            loss_sum += float(loss.detach()) * len(idx)
            correct += int((scores.detach().argmax(1) == labels[idx]).sum())
            seen += len(idx)
        rec = UNetEpoch(epoch + 1, loss_sum / seen, correct / labels[:1].numel() / seen,
                        seen, time.perf_counter() - t0)
        log_.append(rec)
        log.info("unet epoch %d: loss %.4f acc %.4f", rec.epoch, rec.loss, rec.accuracy)
    model.net.eval()
    return model, log_


def predict(model: UNetModel, image: IntensityGrid | np.ndarray,
            schema: LabelSchema | None = None) -> tuple[SegMap, np.ndarray]:
    """Per-pixel argmax labels and the (C, H, W) softmax probabilities."""
    values = image.values if isinstance(image, IntensityGrid) else np.asarray(image)
    if values.shape != (model.config.side, model.config.side):
        raise UNetError(f"image shape {values.shape} does not match side {model.config.side}")
    model.net.eval()
    with torch.no_grad():
        scores = model.net(torch.tensor(values, dtype=torch.float32)[None, None])[0]
        probs = torch.softmax(scores.double(), dim=0).numpy()
    # np.argmax returns the first maximum, i.e. the lowest label id on ties
    labels = np.argmax(probs, axis=0)
    if schema is None:
        n = model.config.n_classes
        schema = LabelSchema() if n == len(DEFAULT_LABELS) else \
            LabelSchema(tuple(f"class{i}" for i in range(n)))
    return SegMap(labels, schema), probs


def predict_batch(model: UNetModel, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Argmax labels for an (N, H, W) stack."""
    model.net.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            x = torch.as_tensor(np.asarray(images[i:i + batch_size], np.float32))[:, None]
            out.append(model.net(x).argmax(1).numpy().astype(np.uint8))
    return np.concatenate(out)
