"""
Recursive approximation on a small synthetic corpus
===================================================

Strong labels exist for only a few images; every image has coarse labels.
Training alternates between fitting the multi-task network and growing the
coarse labels toward the network's own segmentation. The approximation curve
printed at the end tracks how close the coarse labels get to the truth.

This is a reduced run (a few minutes on one core). The command line

    recapprox gen-data && recapprox train -v && recapprox eval

runs the full-size version.
"""

import logging

import torch

from recapprox.core import seeded_rng
from recapprox.data import SceneConfig, assign_availability, generate_dataset
from recapprox.metrics import aggregate, approximation_curve, evaluate
from recapprox.model import NetworkConfig
from recapprox.train import TrainConfig, final_inference, run_recursive_training

torch.set_num_threads(1)
logging.basicConfig(level=logging.INFO, format="%(message)s")

scene = SceneConfig(size=64, instances=(2, 4), radius=(7, 12), seed=11)
train = generate_dataset(scene, 16, "train")
# strong labels on 25% of the images, coarse labels and scribbles everywhere
train = assign_availability(train, {1: 0.25, 2: 1.0, 3: 1.0}, seeded_rng(11, 99))
test = generate_dataset(scene, 6, "test")

net_cfg = NetworkConfig(levels=3)
cfg = TrainConfig(outer_iterations=5, steps_per_iteration=120, crop_size=32, seed=11)
net, state = run_recursive_training(train, net_cfg, cfg)

print("\nk   coarse-label dice vs truth")
for k, value in approximation_curve(state.snapshots, [item.gt for item in train.items]):
    print(f"{k:<3d} {value:.4f}")

# the final prediction grows the predicted coarse regions into the
# predicted segmentation with a large beta
reports = [
    evaluate(str(i), item.gt, final_inference(net, item.image, cfg.beta_final), item.instances)
    for i, item in enumerate(test.items)
]
summary = aggregate(reports)
print(f"\ntest mean dice {summary.mean_dice:.4f}, object dice {summary.object_dice:.4f}")
