"""Recursive approximation: alternate network training with coarse-label growth.

For k = 1..N the network is trained on the current labels, its task-1
segmentation is predicted on every image with coarse labels, and each coarse
mask is grown towards the predicted object boundaries with
:func:`recapprox.geometry.update_labels`. Only task 2 changes; the strong and
scribble labels stay fixed.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage

from .core import ClassMask, Dataset, LabelField, derive_seed, seeded_rng
from .geometry import update_labels
from .metrics import approximation_curve
from .model import (
    Adam,
    LossWeights,
    MultiTaskNet,
    NetworkConfig,
    NumericalError,
    adam_step,
    build_network,
    forward,
    image_tensor,
    label_tensors,
    loss_from_logits,
    network_input,
    predict_mask,
)

log = logging.getLogger(__name__)

HISTORY_VERSION = 1
HISTORY_COLUMNS = ("k", "mean_loss", "mean_task2_dice_vs_gt")


@dataclass
class TrainConfig:
    outer_iterations: int = 10
    steps_per_iteration: int = 600
    batch_size: int = 8
    crop_size: int = 64
    beta_train: float = 1.0
    beta_final: float = 100.0
    lr: float = 2e-4
    flip: bool = True
    rotate: bool = True
    rescale: bool = True
    alphas: tuple[float, ...] = (1.0, 1.0, 1.0)
    connectivity: int = 8
    seed: int = 0

    def __post_init__(self):
        self.alphas = tuple(float(a) for a in self.alphas)
        if self.outer_iterations < 1:
            raise ValueError("outer_iterations must be at least 1")
        if self.steps_per_iteration < 0 or self.batch_size < 1 or self.crop_size < 1:
            raise ValueError("steps_per_iteration, batch_size and crop_size must be positive")
        if self.beta_train < 0:
            raise ValueError("beta_train must be non-negative")
        if self.beta_final < self.beta_train:
            raise ValueError("beta_final must be at least beta_train")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        kwargs = dict(steps_per_iteration=12000, crop_size=256, batch_size=32)
        kwargs.update(overrides)
        return cls(**kwargs)


@dataclass
class TrainState:
    """Evolving task-2 labels and per-iteration history.

    ``snapshots[k]`` are the task-2 masks after k label updates (``None`` for
    images without task-2 labels); ``snapshots[0]`` are the annotator's masks.
    """

    k: int = 0
    snapshots: list[list[ClassMask | None]] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    dice: list[float] = field(default_factory=list)  # after update k, k = 1..N
    wall_seconds: list[float] = field(default_factory=list)

    @property
    def labels(self) -> list[ClassMask | None]:
        return self.snapshots[-1]

    def history_rows(self):
        return [(k + 1, self.losses[k], self.dice[k]) for k in range(len(self.losses))]


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else repr(float(x))


def history_csv(state: TrainState) -> str:
    """Deterministic history; wall-clock times go to :func:`timing_csv`."""
    lines = [f"# recapprox history v{HISTORY_VERSION}", ",".join(HISTORY_COLUMNS)]
    lines += [f"{k},{_fmt(loss)},{_fmt(d)}" for k, loss, d in state.history_rows()]
    return "\n".join(lines) + "\n"


def timing_csv(state: TrainState) -> str:
    return "k,wall_seconds\n" + "".join(f"{k + 1},{t:.3f}\n" for k, t in enumerate(state.wall_seconds))


# ---------------------------------------------------------------------------
# minibatches


def _transform(arrays, k_rot, flip_h, flip_v):
    out = []
    for a in arrays:
        if flip_h:
            a = a[:, ::-1]
        if flip_v:
            a = a[::-1, :]
        if k_rot:
            a = np.rot90(a, k_rot, axes=(0, 1))
        out.append(np.ascontiguousarray(a))
    return out


def sample_crop(image: np.ndarray, labels: dict[int, np.ndarray], crop: int, rng, flip=True, rotate=True, rescale=True):
    """One augmented crop of ``image`` (H x W x C) and its label rasters.

    Each augmentation fires with probability 0.5: flips (horizontal, vertical),
    rotation by a random multiple of 90 degrees, and rescaling by a factor in
    [0.8, 1.25] (bilinear for the image, nearest neighbour for labels). The
    same geometric map is applied to the image and every label.
    """
    h, w = image.shape[:2]
    if crop > h or crop > w:
        raise ValueError(f"crop {crop} larger than image {h}x{w}")
    scale = 1.0
    if rescale and rng.random() < 0.5:
        scale = math.exp(rng.uniform(math.log(0.8), math.log(1.25)))
    window = min(int(round(crop / scale)), h, w)
    r0 = int(rng.integers(0, h - window + 1))
    c0 = int(rng.integers(0, w - window + 1))
    if window == crop:
        img = image[r0 : r0 + crop, c0 : c0 + crop]
        labs = {t: m[r0 : r0 + crop, c0 : c0 + crop] for t, m in labels.items()}
    else:
        coords = (np.arange(crop) + 0.5) * (window / crop) - 0.5
        rr, cc = np.meshgrid(coords + r0, coords + c0, indexing="ij")
        grid = np.stack([rr, cc])
        img = np.stack(
            [ndimage.map_coordinates(image[:, :, ch], grid, order=1, mode="nearest") for ch in range(image.shape[2])],
            axis=-1,
        )
        near = np.stack([np.clip(np.rint(rr), 0, h - 1), np.clip(np.rint(cc), 0, w - 1)]).astype(np.intp)
        labs = {t: m[near[0], near[1]] for t, m in labels.items()}
    flip_h = flip and rng.random() < 0.5
    flip_v = flip and rng.random() < 0.5
    k_rot = int(rng.integers(1, 4)) if rotate and rng.random() < 0.5 else 0
    keys = list(labs)
    out = _transform([img] + [labs[t] for t in keys], k_rot, flip_h, flip_v)
    return out[0], dict(zip(keys, out[1:]))


def make_crops(dataset: Dataset, labels: list[LabelField], cfg: TrainConfig, rng, pool: list[int] | None = None,
               inputs: list[np.ndarray] | None = None):
    """Endless stream of ``(images (N, C, h, w) tensor, [LabelField])`` minibatches.

    ``inputs`` optionally replaces the raw image arrays (see
    :func:`recapprox.model.network_input`).
    """
    inputs = [item.image.data for item in dataset.items] if inputs is None else inputs
    pool = list(range(len(dataset))) if pool is None else pool
    if not pool:
        raise ValueError("no images to sample crops from")
    while True:
        images, fields = [], []
        for _ in range(cfg.batch_size):
            i = pool[int(rng.integers(len(pool)))]
            lf = labels[i]
            present = {t: m.labels for t, m in lf.tasks.items() if m is not None}
            img, crops = sample_crop(inputs[i], present, cfg.crop_size, rng,
                                     cfg.flip, cfg.rotate, cfg.rescale)
            images.append(img)
            fields.append(LabelField({t: (ClassMask(crops[t], m.classes) if m is not None else None)
                                      for t, m in lf.tasks.items()}))
        yield image_tensor(images), fields


# ---------------------------------------------------------------------------
# training


def predict_all(net: MultiTaskNet, dataset: Dataset, indices, task: int = 1) -> dict[int, ClassMask]:
    return {i: predict_mask(forward(net, dataset.items[i].image), task) for i in indices}


def _optimize(net, opt, batches, steps, weights, tasks):
    losses = []
    net.train()
    for _ in range(steps):
        x, fields = next(batches)
        net.zero_grad(set_to_none=False)
        loss = loss_from_logits(net(x), label_tensors(fields, tasks), weights)
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite loss {loss.item()}")
        loss.backward()
        adam_step(net, opt)
        losses.append(loss.item() / x.shape[0] / x.shape[2] / x.shape[3])
    return float(np.mean(losses)) if losses else math.nan


def _check_sizes(dataset: Dataset, net_cfg: NetworkConfig, cfg: TrainConfig):
    if cfg.crop_size % net_cfg.divisor:
        raise ValueError(f"crop size {cfg.crop_size} is not divisible by {net_cfg.divisor}")
    for item in dataset.items:
        if min(item.image.height, item.image.width) < cfg.crop_size:
            raise ValueError(f"crop size {cfg.crop_size} exceeds an image of {item.image.height}x{item.image.width}")


def run_recursive_training(dataset: Dataset, net_cfg: NetworkConfig, cfg: TrainConfig, on_iteration=None):
    """Train with recursively grown coarse labels; returns ``(net, state)``.

    ``on_iteration(k, net, state)`` is called after each label update.
    Optimizer moments persist across outer iterations. Ground truth, when the
    items carry it, is read only to fill ``state.dice``.
    """
    if not dataset.labeled(1):
        raise ValueError("no image carries task-1 (strong) labels")
    coarse = dataset.labeled(2)
    if not coarse:
        raise ValueError("no image carries task-2 (coarse) labels")
    _check_sizes(dataset, net_cfg, cfg)
    rng = seeded_rng(cfg.seed)
    net = build_network(net_cfg, seeded_rng(derive_seed(rng)))
    crop_rng = seeded_rng(derive_seed(rng))
    opt = Adam(lr=cfg.lr)
    weights = LossWeights(cfg.alphas)

    state = TrainState(snapshots=[[item.labels.get(2) for item in dataset.items]])
    gts = [item.gt for item in dataset.items]
    have_gt = all(gts[i] is not None for i in coarse)
    labels = [item.labels for item in dataset.items]
    pool = [i for i, lf in enumerate(labels) if any(m is not None for m in lf.tasks.values())]
    inputs = [network_input(item.image, net_cfg) for item in dataset.items]
    for k in range(1, cfg.outer_iterations + 1):
        start = time.perf_counter()
        batches = make_crops(dataset, labels, cfg, crop_rng, pool, inputs)
        loss = _optimize(net, opt, batches, cfg.steps_per_iteration, weights, net_cfg.tasks)
        predictions = predict_all(net, dataset, coarse, task=1)
        current = list(state.labels)
        for i in coarse:
            current[i] = update_labels(current[i], predictions[i], cfg.beta_train, cfg.connectivity)
            labels[i] = labels[i].with_task(2, current[i])
        state.snapshots.append(current)
        state.k = k
        state.losses.append(loss)
        state.dice.append(approximation_curve([current], gts)[0][1] if have_gt else math.nan)
        state.wall_seconds.append(time.perf_counter() - start)
        log.info("iteration %d: loss %.5f, task-2 dice %.4f", k, loss, state.dice[-1])
        if on_iteration is not None:
            on_iteration(k, net, state)
    return net, state


def train_single_task(dataset: Dataset, net_cfg: NetworkConfig, cfg: TrainConfig) -> MultiTaskNet:
    """Strong-label-only baseline with the same network and total step budget."""
    strong = dataset.labeled(1)
    if not strong:
        raise ValueError("no image carries task-1 (strong) labels")
    _check_sizes(dataset, net_cfg, cfg)
    rng = seeded_rng(cfg.seed)
    net = build_network(net_cfg, seeded_rng(derive_seed(rng)))
    crop_rng = seeded_rng(derive_seed(rng))
    labels = [LabelField({1: item.labels.get(1)}) for item in dataset.items]
    weights = LossWeights((1.0,) + (0.0,) * (net_cfg.tasks - 1))
    inputs = [network_input(item.image, net_cfg) for item in dataset.items]
    batches = make_crops(dataset, labels, cfg, crop_rng, strong, inputs)
    _optimize(net, Adam(lr=cfg.lr), batches, cfg.outer_iterations * cfg.steps_per_iteration, weights, net_cfg.tasks)
    return net


def final_inference(net: MultiTaskNet, image, beta_final: float = 100.0, connectivity: int = 8) -> ClassMask:
    """Grow the predicted coarse mask (task 2) into the predicted segmentation (task 1)."""
    outputs = forward(net, image)
    return update_labels(predict_mask(outputs, 2), predict_mask(outputs, 1), beta_final, connectivity)
