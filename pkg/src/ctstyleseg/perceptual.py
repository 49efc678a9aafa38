"""Fixed convolutional feature backbone and segment-wise Gram style / content losses.

Every loss here works on tensors with arbitrary leading batch dimensions:
features are ``(..., N, h, w)``, masks are ``(..., C, H, W)`` one-hot stacks at
image resolution, and losses come back with shape ``(...)``.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

# VGG-19 block layout: convolutions per block and output channels
VGG19_BLOCKS = ((2, 64), (2, 128), (4, 256), (4, 512), (4, 512))
IMAGENET_MEAN = (0.485, 0.456, 0.406)

DEFAULT_STYLE_LAYERS = ("relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1")
DEFAULT_CONTENT_LAYERS = ("relu4_2",)

NORMALIZATIONS = ("literal", "masked_count")


class LossError(Exception):
    pass


@dataclass(frozen=True)
class LayerInfo:
    name: str
    channels: int
    factor: int  # spatial downsample factor relative to the input image


class FeatureBackbone(nn.Module):
    """A frozen VGG-style stack of conv / relu / pool layers addressable by name."""

    def __init__(self, layers: "OrderedDict[str, nn.Module]", infos: Sequence[LayerInfo],
                 mean: Sequence[float] = IMAGENET_MEAN, name: str = "backbone"):
        super().__init__()
        self.body = nn.Sequential(layers)
        self.infos = {i.name: i for i in infos}
        self.order = [i.name for i in infos]
        self.name = name
        self.register_buffer("mean", torch.tensor(mean).view(3, 1, 1))
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # weights and behaviour are fixed; ignore train() requests
        return super().train(False)

    def info(self, name: str) -> LayerInfo:
        try:
            return self.infos[name]
        except KeyError:
            raise LossError(f"unknown backbone layer {name!r}") from None

    def dims(self, name: str, side: int | tuple[int, int]) -> tuple[int, int]:
        """(N_l, M_l): channel count and spatial position count for an input size."""
        h, w = (side, side) if isinstance(side, int) else side
        info = self.info(name)
        return info.channels, (h // info.factor) * (w // info.factor)

    def forward(self, images: torch.Tensor, layers: Sequence[str]) -> dict[str, torch.Tensor]:
        """Features for ``images`` of shape (..., H, W) with values in [0, 1]."""
        wanted = set(layers)
        for name in wanted:
            self.info(name)
        lead = images.shape[:-2]
        x = images.reshape(-1, 1, *images.shape[-2:]).to(self.mean.dtype)
        x = x.expand(-1, 3, -1, -1) - self.mean
        out = {}
        last = max(self.order.index(n) for n in wanted)
        for idx, (name, module) in enumerate(self.body.named_children()):
            x = module(x)
            if name in wanted:
                out[name] = x.reshape(*lead, *x.shape[1:])
            if idx >= last:
                break
        return out

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k, v in self.state_dict().items():
            h.update(k.encode())
            h.update(v.detach().cpu().numpy().tobytes())
        return h.hexdigest()


def _build(blocks: Sequence[tuple[int, int]], seed: int, name: str,
           dtype: torch.dtype = torch.float32,
           activation: Callable[[], nn.Module] = nn.ReLU) -> FeatureBackbone:
    gen = torch.Generator().manual_seed(seed)
    layers: "OrderedDict[str, nn.Module]" = OrderedDict()
    infos = []
    cin, factor = 3, 1
    for b, (n_conv, width) in enumerate(blocks, start=1):
        for c in range(1, n_conv + 1):
            conv = nn.Conv2d(cin, width, 3, padding=1)
            with torch.no_grad():
                std = (2.0 / (cin * 9)) ** 0.5
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * std)
                conv.bias.zero_()
            layers[f"conv{b}_{c}"] = conv
            layers[f"relu{b}_{c}"] = activation()
            infos += [LayerInfo(f"conv{b}_{c}", width, factor),
                      LayerInfo(f"relu{b}_{c}", width, factor)]
            cin = width
        factor *= 2
        layers[f"pool{b}"] = nn.AvgPool2d(2)
        infos.append(LayerInfo(f"pool{b}", cin, factor))
    return FeatureBackbone(layers, infos, name=name).to(dtype)


def vgg19(weights: str | Path | None = None, width_scale: float = 1.0,
          n_blocks: int = 5, seed: int = 0) -> FeatureBackbone:
    """VGG-19 topology.

    ``weights`` may point at a torchvision ``vgg19`` state-dict file (ImageNet
    weights); without it the convolutions get seeded He-normal weights that stay
    fixed afterwards. ``width_scale`` < 1 thins every layer for desk-scale runs
    and requires ``weights is None``.
    """
    blocks = [(n, max(4, int(round(w * width_scale)))) for n, w in VGG19_BLOCKS[:n_blocks]]
    tag = "vgg19" if width_scale == 1.0 else f"vgg19x{width_scale:g}"
    net = _build(blocks, seed, f"{tag}-seed{seed}" if weights is None else tag)
    if weights is not None:
        if width_scale != 1.0:
            raise LossError("pretrained weights need width_scale=1")
        state = torch.load(weights, map_location="cpu", weights_only=True)
        convs = [n for n in net.order if n.startswith("conv")]
        tv_idx = [k for k in state if k.startswith("features.") and k.endswith(".weight")]
        for name, key in zip(convs, tv_idx):
            conv = dict(net.body.named_children())[name]
            conv.weight.data.copy_(state[key])
            conv.bias.data.copy_(state[key.replace(".weight", ".bias")])
        net.name = f"vgg19-{Path(weights).stem}"
    return net


def small_backbone(seed: int = 0, width: int = 8, dtype: torch.dtype = torch.float32,
                   smooth: bool = True) -> FeatureBackbone:
    """Tiny two-conv random backbone with the same interface, for fast tests.

    With ``smooth`` the ``relu*`` slots hold a softplus so central differences
    at finite step sizes are not spoiled by activation kinks.
    """
    act = (lambda: nn.Softplus(beta=4.0)) if smooth else nn.ReLU
    tag = "smooth" if smooth else "relu"
    return _build([(1, width), (1, 2 * width)], seed, f"small{width}-{tag}-seed{seed}",
                  dtype, act)


# --------------------------------------------------------------------------
# Gram statistics


def gram(features: torch.Tensor) -> torch.Tensor:
    """Unnormalized Gram matrix: ``G[i, j] = sum_p F[i, p] F[j, p]`` over positions."""
    f = features.reshape(*features.shape[:-3], features.shape[-3], -1)
    return f @ f.transpose(-1, -2)


def masked_gram(features: torch.Tensor, segment_mask: torch.Tensor) -> torch.Tensor:
    """Gram of ``features`` with every position outside ``segment_mask`` zeroed."""
    if segment_mask.shape[-2:] != features.shape[-2:]:
        raise LossError(
            f"mask {tuple(segment_mask.shape[-2:])} vs features {tuple(features.shape[-2:])}"
        )
    return gram(features * segment_mask.unsqueeze(-3).to(features.dtype))


# --------------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class LossSpec:
    style_layers: tuple[str, ...] = DEFAULT_STYLE_LAYERS
    content_layers: tuple[str, ...] = DEFAULT_CONTENT_LAYERS
    style_weight: float = 1e3
    content_weight: float = 1.0
    segment_ids: tuple[int, ...] | None = None  # None: every label in the masks
    normalization: str = "literal"

    def __post_init__(self):
        object.__setattr__(self, "style_layers", tuple(self.style_layers))
        object.__setattr__(self, "content_layers", tuple(self.content_layers))
        if self.segment_ids is not None:
            object.__setattr__(self, "segment_ids", tuple(int(s) for s in self.segment_ids))
        if not self.style_layers or not self.content_layers:
            raise LossError("style and content layer lists must be non-empty")
        for w in (self.style_weight, self.content_weight):
            if not (np.isfinite(w) and w >= 0):
                raise LossError(f"loss weights must be finite and >= 0, got {w}")
        if self.normalization not in NORMALIZATIONS:
            raise LossError(f"normalization must be one of {NORMALIZATIONS}")

    def segments(self, n_labels: int) -> tuple[int, ...]:
        return tuple(range(n_labels)) if self.segment_ids is None else self.segment_ids

    def to_json(self) -> dict:
        return {
            "style_layers": list(self.style_layers),
            "content_layers": list(self.content_layers),
            "style_weight": self.style_weight,
            "content_weight": self.content_weight,
            "segment_ids": None if self.segment_ids is None else list(self.segment_ids),
            "normalization": self.normalization,
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "LossSpec":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


def extract_features(backbone: FeatureBackbone, image: torch.Tensor,
                     layers: Sequence[str]) -> dict[str, torch.Tensor]:
    if torch.is_tensor(image):
        lo, hi = float(image.detach().min()), float(image.detach().max())
    else:
        image = torch.as_tensor(np.asarray(image))
        lo, hi = float(image.min()), float(image.max())
    if lo < 0.0 or hi > 1.0:
        raise LossError("backbone expects normalized images in [0, 1]")
    return backbone(image, layers)


def layer_masks(masks: torch.Tensor, backbone: FeatureBackbone,
                layers: Sequence[str]) -> dict[str, torch.Tensor]:
    """Decimate one-hot image-resolution masks (..., C, H, W) to each layer's grid."""
    out = {}
    for name in layers:
        f = backbone.info(name).factor
        h, w = masks.shape[-2:]
        if h % f or w % f:
            raise LossError(f"layer {name} factor {f} does not divide {(h, w)}")
        out[name] = masks[..., ::f, ::f]
    return out


def _check_layers(stacks, layers):
    for st in stacks:
        for name in layers:
            if name not in st:
                raise LossError(f"feature stack lacks layer {name!r}")


def style_loss(R: Mapping[str, torch.Tensor], S: Mapping[str, torch.Tensor],
               masks_R: Mapping[str, torch.Tensor], masks_S: Mapping[str, torch.Tensor],
               spec: LossSpec, backbone: FeatureBackbone | None = None) -> torch.Tensor:
    """Segment-wise Gram style loss.

    Sum over segments and style layers of
    ``||G(R_sg) - G(S_sg)||_F^2 / (4 N^2 M^2)``, with ``N``, ``M`` the full
    layer channel and position counts (``literal``) or the per-segment masked
    position counts (``masked_count``, each Gram divided by its own count).
    A segment absent at a layer from either image contributes nothing.
    """
    _check_layers((R, S, masks_R, masks_S), spec.style_layers)
    total = 0.0
    for name in spec.style_layers:
        r, s = R[name], S[name]
        mr, ms = masks_R[name], masks_S[name]
        if mr.shape[-2:] != r.shape[-2:] or ms.shape[-2:] != s.shape[-2:]:
            raise LossError(f"mask/layer mismatch at {name}")
        n = r.shape[-3]
        m = r.shape[-2] * r.shape[-1]
        for sg in spec.segments(mr.shape[-3]):
            a, b = mr[..., sg, :, :], ms[..., sg, :, :]
            count_a = a.sum(dim=(-2, -1)).to(r.dtype)
            count_b = b.sum(dim=(-2, -1)).to(r.dtype)
            present = (count_a > 0) & (count_b > 0)
            ga, gb = masked_gram(r, a), masked_gram(s, b)
            if spec.normalization == "literal":
                diff = ga - gb
                norm = 4.0 * n**2 * m**2
            else:
                diff = ga / count_a.clamp(min=1)[..., None, None] \
                    - gb / count_b.clamp(min=1)[..., None, None]
                norm = 4.0 * n**2
            term = (diff**2).sum(dim=(-2, -1)) / norm
            total = total + torch.where(present, term, torch.zeros_like(term))
    return total


def content_loss(R: Mapping[str, torch.Tensor], O: Mapping[str, torch.Tensor],
                 masks: Mapping[str, torch.Tensor], spec: LossSpec,
                 backbone: FeatureBackbone | None = None) -> torch.Tensor:
    """Segment-wise feature reconstruction loss.

    Sum over segments and content layers of ``||R_sg - O_sg||^2 / (2 N M)``.
    """
    _check_layers((R, O, masks), spec.content_layers)
    total = 0.0
    for name in spec.content_layers:
        r, o = R[name], O[name]
        if r.shape != o.shape:
            raise LossError(f"feature shapes differ at {name}: {r.shape} vs {o.shape}")
        mk = masks[name]
        if mk.shape[-2:] != r.shape[-2:]:
            raise LossError(f"mask/layer mismatch at {name}")
        n = r.shape[-3]
        sq = (r - o) ** 2
        for sg in spec.segments(mk.shape[-3]):
            seg = mk[..., sg, :, :].unsqueeze(-3).to(r.dtype)
            count = seg.sum(dim=(-3, -2, -1))
            m = r.shape[-2] * r.shape[-1] if spec.normalization == "literal" else count.clamp(min=1)
            term = (sq * seg).sum(dim=(-3, -2, -1)) / (2.0 * n * m)
            total = total + torch.where(count > 0, term, torch.zeros_like(term))
    return total


class SegmentLoss:
    """Precomputes the fixed style (and optionally content) targets of one training job."""

    def __init__(self, backbone: FeatureBackbone, spec: LossSpec,
                 style_image: torch.Tensor, style_masks: torch.Tensor):
        self.backbone = backbone
        self.spec = spec
        self.layers = list(dict.fromkeys(spec.style_layers + spec.content_layers))
        with torch.no_grad():
            self.S = backbone(style_image, spec.style_layers)
        self.masks_S = layer_masks(style_masks, backbone, spec.style_layers)

    def content_targets(self, images: torch.Tensor) -> dict[str, torch.Tensor]:
        with torch.no_grad():
            return self.backbone(images, self.spec.content_layers)

    def __call__(self, x_r: torch.Tensor, O: Mapping[str, torch.Tensor],
                 masks_o: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-item (content, style) losses for generated images ``x_r`` (..., H, W)."""
        R = self.backbone(x_r, self.layers)
        lm = layer_masks(masks_o, self.backbone, self.layers)
        lc = content_loss(R, O, lm, self.spec)
        ls = style_loss(R, self.S, lm, self.masks_S, self.spec)
        return lc, ls


def total_loss(backbone: FeatureBackbone, x_r: torch.Tensor, x_o: torch.Tensor,
               x_s: torch.Tensor, masks_o: torch.Tensor, masks_s: torch.Tensor,
               spec: LossSpec) -> torch.Tensor:
    """``content_weight * L_c + style_weight * L_s`` for a generated image ``x_r``.

    ``x_r`` keeps its autograd graph so gradients with respect to its pixels
    are available. Masks are one-hot (C, H, W) stacks at image resolution:
    ``masks_o`` describes the content image (and thus ``x_r``), ``masks_s``
    the style image.
    """
    if x_r.shape != x_o.shape or x_r.shape != x_s.shape:
        raise LossError("x_r, x_o and x_s must share a shape")
    sl, cl = spec.style_layers, spec.content_layers
    both = list(dict.fromkeys(sl + cl))
    R = backbone(x_r, both)
    with torch.no_grad():
        O = backbone(x_o, cl)
        S = backbone(x_s, sl)
    lm_o = layer_masks(masks_o, backbone, both)
    lm_s = layer_masks(masks_s, backbone, sl)
    lc = content_loss(R, O, lm_o, spec)
    ls = style_loss(R, S, lm_o, lm_s, spec)
    return spec.content_weight * lc + spec.style_weight * ls


# --------------------------------------------------------------------------
# verification


def finite_diff_check(loss_fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor,
                      eps: float = 1e-3, trials: int = 10, seed: int = 0) -> float:
    """Max relative error between autograd and central differences at random pixels.

    The relative error at a pixel is ``|a - n| / max(|a|, |n|)``; pixels where
    both gradients vanish count as exact.
    """
    if not eps > 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    x = x.detach().clone().requires_grad_(True)
    loss_fn(x).backward()
    analytic = x.grad.detach().reshape(-1)
    rng = np.random.default_rng(seed)
    idx = rng.choice(analytic.numel(), size=min(trials, analytic.numel()), replace=False)
    worst = 0.0
    with torch.no_grad():
        base = x.detach().clone().reshape(-1)
        for i in idx:
            plus, minus = base.clone(), base.clone()
            plus[i] += eps
            minus[i] -= eps
            num = (float(loss_fn(plus.reshape(x.shape))) -
                   float(loss_fn(minus.reshape(x.shape)))) / (2 * eps)
            a = float(analytic[i])
            scale = max(abs(a), abs(num))
            if scale == 0.0:
                continue
            worst = max(worst, abs(a - num) / scale)
    return worst
