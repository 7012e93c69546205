"""
Synthetic scenes and their three kinds of annotation
====================================================

Each synthetic image comes with

* task 1: the exact segmentation (strong label), kept on few images,
* task 2: coarse inner regions of every object that miss all boundary pixels,
* task 3: scribbles marking low-contrast interfaces between touching objects.

This script renders one scene, writes the image and labels as PGM files into
``demo_scene/`` and reports how far the coarse labels are from the truth.
"""

from pathlib import Path

import numpy as np

from recapprox.core import seeded_rng, write_mask, write_pnm, image_to_bytes
from recapprox.data import SceneConfig, generate_scene, make_separation_scribbles, weak_mask
from recapprox.metrics import dice

cfg = SceneConfig(touch_prob=0.8, seed=3)
rng = seeded_rng(cfg.seed, 0, 0)
scene = generate_scene(cfg, rng)
coarse = weak_mask(scene, cfg, rng)
scribbles = make_separation_scribbles(scene, rng)

print(f"{len(scene.classes)} objects, classes {scene.classes}")
for a, b, low in scene.touching:
    print(f"objects {a} and {b} touch ({'low-contrast' if low else 'visible'} interface)")

# the coarse labels cover the object interiors only
fg_dice = dice(scene.gt.objects(), coarse.objects())
inside = (coarse.objects() <= scene.gt.objects()).all()
print(f"coarse vs true foreground dice: {fg_dice:.3f}; strictly inside the objects: {inside}")
print(f"scribble pixels: {int((scribbles.labels == 0).sum())}")

out = Path("demo_scene")
out.mkdir(exist_ok=True)
write_pnm(out / "image.pgm", image_to_bytes(scene.image))
# masks store class indices; scale them for viewing
view = lambda m: (m.labels * (255 // (m.classes - 1))).astype(np.uint8)
write_pnm(out / "truth.pgm", view(scene.gt))
write_pnm(out / "coarse.pgm", view(coarse))
write_pnm(out / "scribbles.pgm", view(scribbles))
write_mask(out / "coarse_labels.pgm", coarse)  # raw class indices, readable by `recapprox evolve`
print(f"wrote {sorted(p.name for p in out.iterdir())}")
