"""Per-style encoder-decoder generators trained with the segment-wise losses."""

from __future__ import annotations

import hashlib
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

from .data import AnnotatedSample, IntensityGrid, SegMap, one_hot
from .perceptual import FeatureBackbone, LossSpec, SegmentLoss

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class GeneratorError(Exception):
    pass


class TrainingDiverged(GeneratorError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    n_labels: int = 7
    noise: bool = True
    base_width: int = 32
    stages: int = 3
    res_blocks: int = 4
    side: int = 512

    def __post_init__(self):
        if self.base_width < 8:
            raise GeneratorError("base width must be >= 8")
        if self.n_labels < 2:
            raise GeneratorError("need at least 2 labels")
        if self.side % (2**self.stages):
            raise GeneratorError(
                f"side {self.side} not divisible by 2^{self.stages}"
            )

    @property
    def in_channels(self) -> int:
        return self.n_labels + int(self.noise)


def _conv(cin, cout, k=3, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride, k // 2, padding_mode="reflect"),
        nn.InstanceNorm2d(cout, affine=True),
        nn.ReLU(inplace=True),
    )


class _Residual(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(ch, ch, 3, 1, 1, padding_mode="reflect"),
            nn.InstanceNorm2d(ch, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(ch, ch, 3, 1, 1, padding_mode="reflect"),
            nn.InstanceNorm2d(ch, affine=True),
        )

    def forward(self, x):
        return x + self.body(x)


class _NoiseInjection(nn.Module):
    """Adds per-channel scaled noise, learned scale starting at zero."""

    def __init__(self, ch):
        super().__init__()
        self.scale = nn.Parameter(torch.zeros(1, ch, 1, 1))

    def forward(self, x, noise):
        return x + self.scale * noise


class EncoderDecoder(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.base_width
        self.stem = _conv(cfg.in_channels, w, 7)
        down = []
        for i in range(cfg.stages):
            down.append(_conv(w * 2**i, w * 2 ** (i + 1), 3, 2))
        self.down = nn.ModuleList(down)
        bott = w * 2**cfg.stages
        self.res = nn.Sequential(*[_Residual(bott) for _ in range(cfg.res_blocks)])
        up, inject = [], []
        for i in reversed(range(cfg.stages)):
            up.append(_conv(w * 2 ** (i + 1), w * 2**i, 3))
            inject.append(_NoiseInjection(w * 2**i))
        self.up = nn.ModuleList(up)
        self.inject = nn.ModuleList(inject) if cfg.noise else None
        # decoder output is concatenated with the full-resolution stem features
        self.head = nn.Conv2d(2 * w, 1, 7, 1, 3, padding_mode="reflect")

    def forward(self, onehot: torch.Tensor, generator: torch.Generator | None = None
                ) -> torch.Tensor:
        """(B, C, H, W) one-hot maps -> (B, H, W) images in [0, 1]."""
        b, _, h, w = onehot.shape
        x = onehot.to(self.head.weight.dtype)
        if self.cfg.noise:
            z = torch.randn((b, 1, h, w), generator=generator, dtype=x.dtype)
            x = torch.cat([x, z], dim=1)
        x = skip = self.stem(x)
        for d in self.down:
            x = d(x)
        x = self.res(x)
        for i, u in enumerate(self.up):
            x = u(F.interpolate(x, scale_factor=2, mode="nearest"))
            if self.inject is not None:
                z = torch.randn((b, 1, *x.shape[-2:]), generator=generator, dtype=x.dtype)
                x = self.inject[i](x, z)
        return torch.sigmoid(self.head(torch.cat([x, skip], dim=1)))[:, 0]


@dataclass
class GeneratorModel:
    config: GeneratorConfig
    net: EncoderDecoder
    seed: int
    style_id: str = ""

    def checksum(self) -> str:
        return state_checksum(self.net.state_dict())

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "format_version": CHECKPOINT_VERSION,
            "kind": "style_generator",
            "config": asdict(self.config),
            "seed": self.seed,
            "style_id": self.style_id,
            "state_dict": self.net.state_dict(),
        }
        buf = io.BytesIO()
        torch.save(payload, buf)
        path.write_bytes(buf.getvalue())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "GeneratorModel":
        payload = torch.load(path, map_location="cpu", weights_only=True)
        if payload.get("kind") != "style_generator":
            raise GeneratorError(f"{path} is not a style generator checkpoint")
        if payload["format_version"] != CHECKPOINT_VERSION:
            raise GeneratorError(f"unsupported checkpoint version {payload['format_version']}")
        cfg = GeneratorConfig(**payload["config"])
        net = EncoderDecoder(cfg)
        net.load_state_dict(payload["state_dict"])
        net.eval()
        return cls(cfg, net, payload["seed"], payload["style_id"])


@dataclass
class EpochRecord:
    epoch: int
    content: float
    style: float
    total: float
    seconds: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, rec) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("epochs must increase")
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def to_json(self) -> list[dict]:
        return [asdict(r) for r in self.records]


def state_checksum(state: dict) -> str:
    h = hashlib.sha256()
    for k in sorted(state):
        h.update(k.encode())
        h.update(state[k].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def build_generator(config: GeneratorConfig, seed: int) -> GeneratorModel:
    torch.manual_seed(seed)
    net = EncoderDecoder(config)
    net.eval()
    return GeneratorModel(config, net, seed)


def _onehot_batch(samples: Sequence[AnnotatedSample], n_labels: int) -> torch.Tensor:
    return torch.as_tensor(np.stack([one_hot(s.mask, n_labels) for s in samples]))


def train_style_generator(content_set: Sequence[AnnotatedSample], style: AnnotatedSample,
                          spec: LossSpec, backbone: FeatureBackbone,
                          config: GeneratorConfig | None = None, epochs: int = 100,
                          lr: float = 2e-4, seed: int = 0, batch_size: int = 4
                          ) -> tuple[GeneratorModel, TrainLog]:
    """Fit one generator so that its outputs carry ``style``'s per-segment textures.

    Each step maps one-hot content masks to images and minimizes the weighted
    content loss against the content images plus the segment-wise style loss
    against the style image, using Adam.
    """
    if not content_set:
        raise GeneratorError("content set is empty")
    if style.mask is None:
        raise GeneratorError("style sample needs a segmentation map")
    n_labels = len(style.mask.schema)
    side = style.image.shape[0]
    for s in content_set:
        if s.image.shape != style.image.shape:
            raise GeneratorError(f"sample {s.id} has shape {s.image.shape}, style {style.image.shape}")
    config = config or GeneratorConfig(n_labels=n_labels, side=side)
    if config.n_labels != n_labels or config.side != side:
        raise GeneratorError("generator config does not match the data")

    model = build_generator(config, seed)
    model.style_id = style.id
    log_ = TrainLog()
    if epochs == 0:
        return model, log_

    loss = SegmentLoss(
        backbone, spec,
        torch.tensor(style.image.values),
        torch.as_tensor(one_hot(style.mask)),
    )
    images = torch.as_tensor(np.stack([s.image.values for s in content_set]))
    onehots = _onehot_batch(content_set, n_labels)
    targets = loss.content_targets(images)

    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.net.parameters(), lr=lr)
    model.net.train()
    m = len(content_set)
    for epoch in range(epochs):
        t0 = time.perf_counter()
        order = torch.randperm(m, generator=gen)
        sums = np.zeros(3)
        for start in range(0, m, batch_size):
            idx = order[start:start + batch_size]
            x_r = model.net(onehots[idx], generator=gen)
            lc, ls = loss(x_r, {k: v[idx] for k, v in targets.items()}, onehots[idx])
            total = spec.content_weight * lc + spec.style_weight * ls
            obj = total.mean()
            if not torch.isfinite(obj):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} batch {start // batch_size}: "
                    f"content={lc.detach().tolist()} style={ls.detach().tolist()}"
                )
            opt.zero_grad()
            obj.backward()
            opt.step()
            sums += [float(lc.detach().sum()), float(ls.detach().sum()), float(total.detach().sum())]
        sums /= m
        rec = EpochRecord(epoch + 1, sums[0], sums[1], sums[2], time.perf_counter() - t0)
        log_.append(rec)
        log.info("style %s epoch %d: content %.4g style %.4g total %.4g",
                 style.id, rec.epoch, rec.content, rec.style, rec.total)
    model.net.eval()
    return model, log_


def generate(model: GeneratorModel, segmap: SegMap, seed: int = 0) -> IntensityGrid:
    if len(segmap.schema) != model.config.n_labels:
        raise GeneratorError(
            f"segmentation map has {len(segmap.schema)} labels, generator expects "
            f"{model.config.n_labels}"
        )
    h, w = segmap.shape
    if h % 2**model.config.stages or w % 2**model.config.stages:
        raise GeneratorError(f"shape {segmap.shape} incompatible with {model.config.stages} stages")
    gen = torch.Generator().manual_seed(seed)
    x = torch.as_tensor(one_hot(segmap))[None]
    model.net.eval()
    with torch.no_grad():
        out = model.net(x, generator=gen)[0]
    return IntensityGrid(out.numpy())
