"""
Expanding a dataset with a style bank
=====================================

With ``m`` annotated images and ``n`` style generators the expanded set has
``m * (n + 1)`` images: every original plus one repainted copy per style,
each reusing its source mask unchanged.
"""

from pathlib import Path

import numpy as np

from ctstyleseg.augment import AugmentationPlan, StyleBank, augment_dataset, expanded_size
from ctstyleseg.data import IntensityGrid
from ctstyleseg.phantom import PhantomSpec, generate_phantom_dataset

out = Path("demo_output")
source = generate_phantom_dataset(PhantomSpec(side=64), 5, 2, 0, seed=3,
                                  out_dir=out / "aug_source")


class Flat:
    """A stand-in generator: each label gets a constant grey level."""

    def __init__(self, style_id, offset):
        self.style_id = style_id
        self.offset = offset

    def generate(self, segmap, seed):
        return IntensityGrid(np.clip(segmap.labels / 8.0 + self.offset, 0, 1))


bank = StyleBank([Flat("flat_a", 0.0), Flat("flat_b", 0.1)])
expanded = augment_dataset(AugmentationPlan(source, bank, out / "aug_expanded", seed=0))
print("m =", len(source.split("train")), " n =", len(bank), " expanded =", len(expanded))
assert len(expanded) == expanded_size(5, 2) == 15

# A trained bank is saved and loaded the same way:
#   bank.save(dir); StyleBank.load(dir)
# The paper-scale instance: 700 images and 6 styles give 4900 images.
print("700 images, 6 styles ->", expanded_size(700, 6))
