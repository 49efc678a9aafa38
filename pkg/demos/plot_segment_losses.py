"""
Segment-wise style and content losses
=====================================

Texture is summarized by Gram matrices of feature maps.  Restricting the
features to one labeled region before taking the Gram gives a texture
descriptor per organ, and the style loss compares those region by region.
"""

import numpy as np
import torch

from ctstyleseg.data import one_hot
from ctstyleseg.perceptual import (
    LossSpec,
    finite_diff_check,
    gram,
    layer_masks,
    masked_gram,
    small_backbone,
    style_loss,
    total_loss,
)
from ctstyleseg.phantom import DOMAIN_A, DOMAIN_B, PhantomSpec, generate_phantom

# A Gram matrix is the channel-by-channel inner product over positions.
F = torch.randn(4, 8, 8, dtype=torch.float64)
G = gram(F)
print("symmetric:", torch.equal(G, G.T), " min eigenvalue:", float(torch.linalg.eigvalsh(G).min()))

# Masking zeroes positions outside the region first.
region = torch.zeros(8, 8)
region[2:6, 2:6] = 1
print("masked Gram equals Gram of zeroed features:",
      torch.allclose(masked_gram(F, region), gram(F * region)))

# Compare a clean and a grainy phantom region by region, with a small fixed
# random backbone standing in for VGG-19.
bb = small_backbone(0, dtype=torch.float64)
spec = PhantomSpec(side=64)
a, b = generate_phantom(spec, 3, DOMAIN_A), generate_phantom(spec, 3, DOMAIN_B)
layers = ("relu1_1", "relu2_1")
loss = LossSpec(layers, ("relu2_1",), normalization="masked_count")
masks = layer_masks(torch.as_tensor(one_hot(a.mask, 7)), bb, layers)
xa, xb = (torch.as_tensor(s.image.values.copy()) for s in (a, b))
for k, name in enumerate(spec.schema.names):
    per = LossSpec(layers, ("relu2_1",), segment_ids=(k,), normalization="masked_count")
    print(f"{name:>13}: {float(style_loss(bb(xa, layers), bb(xb, layers), masks, masks, per)):.3e}")
print("all segments:", float(style_loss(bb(xa, layers), bb(xb, layers), masks, masks, loss)))

# The generator is trained through these losses, so their gradients must be
# right.  Central differences agree with autograd.
m = torch.as_tensor(one_hot(a.mask, 7))
err = finite_diff_check(lambda v: total_loss(bb, v, xa, xb, m, m, loss), xb * 0.5 + 0.25, 1e-3, 10)
print(f"max relative gradient error: {err:.2e}")
