#!/usr/bin/env python3
"""Train the toy pipeline briefly, then click a pixel and export masks.

This is a minutes-scale demonstration run; the acceptance experiment in
tests/test_acceptance.py uses the full 2000-step budget.
"""

from pathlib import Path

import numpy as np

from matselect import core, datagen as dg, trainer as tr
from matselect.core import QueryPoint

data = Path("out/demo_dataset")
if not data.exists():
    dg.gen_dataset(dg.DatasetConfig(train_standard=6, train_thin=2, holdout_standard=2,
                                    illuminations=3, size=112, seed=42), data)

config = tr.TrainConfig(max_steps=300, seed=0, learning_rate=2e-3,
                        lr_schedule="cosine", beta2=0.99)
result = tr.train(data, config, out_checkpoint="out/demo_model.msck",
                  loss_csv="out/demo_loss.csv")
print(f"final loss {result.losses[-1]['total']:.3f} "
      f"(subtexture {result.losses[-1]['bce_subtexture']:.3f}, "
      f"texture {result.losses[-1]['bce_texture']:.3f})")

# click the center of the first training scene
_, records = dg.load_dataset(data)
image = records[0].images()[0]
h, w = image.shape[:2]
q = QueryPoint(w // 2, h // 2, w, h)
scores, mask = result.model.select(image, q, level="texture")
print(f"clicked ({q.x}, {q.y}): texture mask covers {mask.mean():.1%} of pixels, "
      f"score range [{scores.min():.2f}, {scores.max():.2f}]")

out = Path("out")
core.write_mask_png(out / "demo_mask.png", mask)
overlay = image.copy()
overlay[mask.astype(bool)] = 0.5 * overlay[mask.astype(bool)] + 0.5 * np.array([0, 1.0, 0])
core.write_image_png(out / "demo_overlay.png", overlay)
print("wrote out/demo_mask.png and out/demo_overlay.png")
