"""
Training a style generator
==========================

One encoder-decoder is trained per style image.  It sees only label maps
(plus noise) and learns to paint each region with the texture that region
has in the style image, while staying close to the content image's features.
"""

from pathlib import Path

import numpy as np
from PIL import Image

from ctstyleseg.generator import GeneratorConfig, generate, train_style_generator
from ctstyleseg.perceptual import LossSpec, vgg19
from ctstyleseg.phantom import DOMAIN_A, DOMAIN_B, PhantomSpec, generate_phantom

out = Path("demo_output")
out.mkdir(exist_ok=True)

spec = PhantomSpec(side=64)
content = [generate_phantom(spec, s, DOMAIN_A) for s in range(12)]
style = generate_phantom(spec, 900, DOMAIN_B, "style", "style_demo")

# A thinned VGG-19 with fixed random weights keeps this quick on a CPU.
backbone = vgg19(width_scale=0.25)
loss = LossSpec(style_weight=1.0, normalization="masked_count")
model, log = train_style_generator(content, style, loss, backbone,
                                   GeneratorConfig(side=64, base_width=16),
                                   epochs=6, lr=5e-4, seed=1, batch_size=1)
for r in log.records:
    print(f"epoch {r.epoch}: content {r.content:.4f} style {r.style:.4f}")

# Repaint an unseen label map; different noise seeds give different textures
# over the same anatomy.
target = generate_phantom(spec, 1234, DOMAIN_A)
views = [target.image.values] + [generate(model, target.mask, seed=k).values for k in range(3)]
views.append(style.image.values)
Image.fromarray((np.concatenate(views, axis=1) * 255).astype(np.uint8)).save(out / "generator.png")
model.save(out / "style_demo.pt")
