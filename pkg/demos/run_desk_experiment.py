"""
The whole experiment at desk scale
==================================

Phantoms, three style generators, the expanded training set, a baseline and
an augmented U-Net, and their comparison on the grainy test split.  Takes
roughly a quarter of an hour on one CPU core; rerunning reuses every stage
whose inputs did not change.

The same run from a shell::

    ctstyleseg run --out demo_output/desk
"""

import logging
import sys

from ctstyleseg.pipeline import desk_config, run_experiment

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

overrides = {"style.n_styles": int(sys.argv[1])} if len(sys.argv) > 1 else None
report = run_experiment(desk_config(overrides), "demo_output/desk")
print(f"baseline  {report.baseline.pixel_accuracy:.4f}")
print(f"augmented {report.augmented.pixel_accuracy:.4f}")
print(f"delta     {100 * report.delta:+.2f} points")
for name, d in report.dice_delta.items():
    print(f"  Dice change {name:>13}: {'n/a' if d is None else f'{d:+.3f}'}")
