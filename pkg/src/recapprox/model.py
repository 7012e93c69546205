"""Multi-task encoder-decoder classifier, its loss, Adam, and checkpoints.

Layout (``levels`` resolutions, ``multitask_blocks`` task-specific blocks)::

    contracting path   conv-norm-lrelu per level, 2x2 max-pool in between
    expansive path     bilinear 2x up + skip concat, then
                         single-task blocks (shared by all tasks), then
                         multi-task blocks: a conv whose weights are shared by
                         the segmentation and approximation paths, followed by
                         a residual unit on the segmentation path and a plain
                         conv block on the approximation path
    heads              task 1 on the segmentation path, task 2 on the
                       approximation path, tasks 3.. on top of the
                       segmentation features (one conv block + 1x1 conv)

All convolutions are 3x3 with zero padding so outputs keep the input size.
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import ClassMask, DataError, Image, LabelField

LOG_EPS = math.log(1e-12)
CHECKPOINT_MAGIC = b"RAMTCKPT"
CHECKPOINT_VERSION = 1


class NumericalError(RuntimeError):
    """Non-finite loss or gradient."""


@dataclass
class NetworkConfig:
    levels: int = 4
    base_channels: int = 8
    task_classes: tuple[int, ...] = (3, 3, 2)
    multitask_blocks: int = 2
    normalization: str = "batch"
    leaky_slope: float = 0.01
    in_channels: int = 1
    standardize: bool = True  # zero mean, unit variance per image and channel before the first layer

    def __post_init__(self):
        self.task_classes = tuple(int(c) for c in self.task_classes)
        if self.levels < 2:
            raise ValueError("levels must be at least 2")
        if not 0 <= self.multitask_blocks <= self.levels - 1:
            raise ValueError("multitask_blocks must lie in [0, levels - 1]")
        if len(self.task_classes) < 2:
            raise ValueError("at least two tasks are required")
        if any(c < 2 for c in self.task_classes):
            raise ValueError("every task needs at least two classes")
        if self.normalization not in ("batch", "none"):
            raise ValueError("normalization must be 'batch' or 'none'")
        if self.base_channels < 1 or self.in_channels < 1:
            raise ValueError("channel counts must be positive")

    @property
    def tasks(self) -> int:
        return len(self.task_classes)

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)

    @classmethod
    def full_scale(cls, **overrides) -> "NetworkConfig":
        """Six resolutions and four multi-task blocks."""
        kwargs = dict(levels=6, base_channels=32, multitask_blocks=4)
        kwargs.update(overrides)
        return cls(**kwargs)


@dataclass
class LossWeights:
    alphas: tuple[float, ...] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.alphas = tuple(float(a) for a in self.alphas)
        if any(a < 0 for a in self.alphas) or not any(a > 0 for a in self.alphas):
            raise ValueError("loss weights must be non-negative and not all zero")


# ---------------------------------------------------------------------------
# network


def _norm(ch, cfg: NetworkConfig) -> nn.Module:
    return nn.BatchNorm2d(ch) if cfg.normalization == "batch" else nn.Identity()


class ConvBlock(nn.Module):
    def __init__(self, cin, cout, cfg: NetworkConfig):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm = _norm(cout, cfg)
        self.slope = cfg.leaky_slope

    def forward(self, x):
        return F.leaky_relu(self.norm(self.conv(x)), self.slope)


class ResidualUnit(nn.Module):
    """x + norm(conv(lrelu(norm(conv(x))))), then leaky ReLU."""

    def __init__(self, ch, cfg: NetworkConfig):
        super().__init__()
        self.inner = ConvBlock(ch, ch, cfg)
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)
        self.norm = _norm(ch, cfg)
        self.slope = cfg.leaky_slope

    def forward(self, x):
        return F.leaky_relu(x + self.norm(self.conv(self.inner(x))), self.slope)


class MultiTaskBlock(nn.Module):
    def __init__(self, cin, cout, cfg: NetworkConfig):
        super().__init__()
        # one convolution applied to both paths; each path keeps its own normalization
        self.shared = nn.Conv2d(cin, cout, 3, padding=1)
        self.seg_norm = _norm(cout, cfg)
        self.app_norm = _norm(cout, cfg)
        self.seg_residual = ResidualUnit(cout, cfg)
        self.app_next = ConvBlock(cout, cout, cfg)
        self.slope = cfg.leaky_slope

    def forward(self, seg, app):
        seg = F.leaky_relu(self.seg_norm(self.shared(seg)), self.slope)
        app = F.leaky_relu(self.app_norm(self.shared(app)), self.slope)
        return self.seg_residual(seg), self.app_next(app)


def _up(x):
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


class MultiTaskNet(nn.Module):
    """Returns one logit tensor per task, each ``(N, C_t, H, W)``."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        ch = [cfg.base_channels * 2**level for level in range(cfg.levels)]
        self.down = nn.ModuleList(
            ConvBlock(cfg.in_channels if level == 0 else ch[level - 1], ch[level], cfg)
            for level in range(cfg.levels)
        )
        n_single = cfg.levels - 1 - cfg.multitask_blocks
        up_levels = list(range(cfg.levels - 2, -1, -1))
        self.up_single = nn.ModuleList(
            ConvBlock(ch[level + 1] + ch[level], ch[level], cfg) for level in up_levels[:n_single]
        )
        self.up_multi = nn.ModuleList(
            MultiTaskBlock(ch[level + 1] + ch[level], ch[level], cfg) for level in up_levels[n_single:]
        )
        top = ch[0]
        self.head_seg = nn.Conv2d(top, cfg.task_classes[0], 1)
        self.head_app = nn.Conv2d(top, cfg.task_classes[1], 1)
        self.aux = nn.ModuleList(ConvBlock(top, top, cfg) for _ in cfg.task_classes[2:])
        self.head_aux = nn.ModuleList(nn.Conv2d(top, c, 1) for c in cfg.task_classes[2:])

    def forward(self, x):
        skips = []
        for level, block in enumerate(self.down):
            if level:
                x = F.max_pool2d(x, 2)
            x = block(x)
            skips.append(x)
        level = len(skips) - 1
        for block in self.up_single:
            level -= 1
            x = block(torch.cat([_up(x), skips[level]], dim=1))
        seg = app = x
        for block in self.up_multi:
            level -= 1
            seg, app = block(
                torch.cat([_up(seg), skips[level]], dim=1),
                torch.cat([_up(app), skips[level]], dim=1),
            )
        outs = [self.head_seg(seg), self.head_app(app)]
        outs += [head(block(seg)) for block, head in zip(self.aux, self.head_aux)]
        return outs


def build_network(cfg: NetworkConfig, rng: np.random.Generator, dtype=torch.float32) -> MultiTaskNet:
    """Fresh network; conv weights ~ N(0, 2 / fan_in) from ``rng``, biases 0, norm scale 1 shift 0."""
    net = MultiTaskNet(cfg)
    with torch.no_grad():
        for name, p in net.named_parameters():
            if p.ndim == 4:
                fan_in = p.shape[1] * p.shape[2] * p.shape[3]
                values = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=tuple(p.shape))
                p.copy_(torch.from_numpy(values))
            elif "norm" in name and name.endswith("weight"):
                p.fill_(1.0)
            else:
                p.zero_()
    return net.to(dtype)


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


# ---------------------------------------------------------------------------
# forward, loss, gradients


def image_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """Stack images (``Image`` or H x W x C arrays) into an ``(N, C, H, W)`` tensor."""
    if isinstance(images, (Image, np.ndarray)):
        images = [images]
    arrays = [im.data if isinstance(im, Image) else np.asarray(im) for im in images]
    batch = np.stack([a if a.ndim == 3 else a[:, :, None] for a in arrays])
    return torch.from_numpy(np.ascontiguousarray(batch.transpose(0, 3, 1, 2))).to(dtype)


def network_input(image, cfg: NetworkConfig) -> np.ndarray:
    """H x W x C array fed to the network.

    With ``cfg.standardize`` each channel is shifted and scaled to zero mean
    and unit variance over the whole image. Statistics always come from the
    full image, so training crops and full-size predictions see the same map.
    """
    data = image.data if isinstance(image, Image) else np.asarray(image)
    if data.ndim == 2:
        data = data[:, :, None]
    if not cfg.standardize:
        return data
    data = data.astype(np.float64)
    mean = data.mean(axis=(0, 1))
    std = np.maximum(data.std(axis=(0, 1)), 1e-3)
    return (data - mean) / std


def _check_divisible(cfg: NetworkConfig, h: int, w: int):
    if h % cfg.divisor or w % cfg.divisor:
        raise ValueError(f"image size {h}x{w} is not divisible by {cfg.divisor}")


def forward(net: MultiTaskNet, image) -> list[np.ndarray]:
    """Per-task softmax probabilities ``(C_t, H, W)`` for a single image, in inference mode."""
    x = image_tensor(network_input(image, net.cfg), dtype=next(net.parameters()).dtype)
    _check_divisible(net.cfg, x.shape[2], x.shape[3])
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            outs = net(x)
    finally:
        net.train(was_training)
    return [torch.softmax(o, dim=1)[0].double().numpy() for o in outs]


def label_tensors(labels: list[LabelField], tasks: int):
    """Per task: (index tensor ``(N, H, W)``, presence tensor ``(N,)``)."""
    out = []
    for t in range(1, tasks + 1):
        masks = [lf.get(t) for lf in labels]
        present = torch.tensor([m is not None for m in masks])
        ref = next((m for m in masks if m is not None), None)
        if ref is None:
            out.append((None, present))
            continue
        stack = np.stack([m.labels if m is not None else np.zeros(ref.shape, np.uint8) for m in masks])
        out.append((torch.from_numpy(stack.astype(np.int64)), present))
    return out


def loss_from_logits(logits, targets, weights: LossWeights) -> torch.Tensor:
    """Clamped cross entropy summed over pixels, images and tasks with labels present."""
    total = logits[0].new_zeros(())
    for t, (out, (index, present)) in enumerate(zip(logits, targets)):
        alpha = weights.alphas[t] if t < len(weights.alphas) else 1.0
        if index is None or alpha == 0 or not present.any():
            continue
        logp = torch.clamp(F.log_softmax(out, dim=1), min=LOG_EPS)
        picked = logp.gather(1, index[:, None]).squeeze(1)
        total = total - alpha * picked[present].sum()
    return total


def multitask_loss(outputs: list[np.ndarray], labels: LabelField, weights: LossWeights) -> float:
    """Loss of probability fields ``outputs[t]`` (shape ``(C_t, H, W)``) against ``labels``."""
    total = 0.0
    for t, probs in enumerate(outputs, start=1):
        mask = labels.get(t)
        alpha = weights.alphas[t - 1] if t - 1 < len(weights.alphas) else 1.0
        if mask is None or alpha == 0:
            continue
        if mask.shape != probs.shape[1:]:
            raise ValueError(f"task {t}: label shape {mask.shape} vs output {probs.shape[1:]}")
        logp = np.maximum(np.log(np.maximum(probs, 0.0)), LOG_EPS)
        picked = np.take_along_axis(logp, mask.labels[None].astype(np.int64), axis=0)
        total -= alpha * picked.sum()
    return float(total)


def backward(net: MultiTaskNet, images, labels: list[LabelField], weights: LossWeights) -> float:
    """Populate ``p.grad`` for every parameter with the exact gradient of the loss; return the loss."""
    x = image_tensor(images, dtype=next(net.parameters()).dtype)
    targets = label_tensors(labels, net.cfg.tasks)
    net.zero_grad(set_to_none=False)
    loss = loss_from_logits(net(x), targets, weights)
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss.item()}")
    if loss.requires_grad:
        loss.backward()
    for p in net.parameters():
        if p.grad is None:
            p.grad = torch.zeros_like(p)
    return float(loss.item())


def predict_mask(outputs: list[np.ndarray], task: int) -> ClassMask:
    """Per-pixel argmax of task ``task`` (1-based); ties go to the lower class index."""
    if not 1 <= task <= len(outputs):
        raise ValueError(f"task must lie in [1, {len(outputs)}], got {task}")
    probs = outputs[task - 1]
    return ClassMask(np.argmax(probs, axis=0), probs.shape[0])


# ---------------------------------------------------------------------------
# Adam


@dataclass
class Adam:
    lr: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step_count: int = 0
    moments: dict = field(default_factory=dict)


def adam_step(net: nn.Module, opt: Adam) -> None:
    """One bias-corrected Adam update using the gradients stored on ``net``.

    Raises :class:`NumericalError` without touching parameters or moments if
    any gradient is non-finite.
    """
    params = [(n, p) for n, p in net.named_parameters() if p.grad is not None]
    for name, p in params:
        if not torch.isfinite(p.grad).all():
            raise NumericalError(f"non-finite gradient for {name}")
    opt.step_count += 1
    b1, b2 = opt.betas
    c1 = 1 - b1**opt.step_count
    c2 = 1 - b2**opt.step_count
    with torch.no_grad():
        for name, p in params:
            if name not in opt.moments:
                opt.moments[name] = (torch.zeros_like(p), torch.zeros_like(p))
            m, v = opt.moments[name]
            g = p.grad
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(opt.lr * (m / c1) / ((v / c2).sqrt() + opt.eps))


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout, little endian:
#   8 bytes magic "RAMTCKPT", u32 version, u32 config length, config JSON,
#   u32 tensor count, then per tensor: u16 name length, UTF-8 name,
#   u8 ndim, ndim x u32 dims, float32 data.


def save_checkpoint(net: MultiTaskNet, path) -> None:
    buf = io.BytesIO()
    cfg = json.dumps(asdict(net.cfg), sort_keys=True).encode()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(cfg)))
    buf.write(cfg)
    state = net.state_dict()
    tensors = [(k, v) for k, v in state.items() if v.is_floating_point()]
    buf.write(struct.pack("<I", len(tensors)))
    for name, tensor in tensors:
        raw = name.encode()
        arr = tensor.detach().cpu().numpy().astype("<f4")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> MultiTaskNet:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise DataError(f"missing checkpoint: {path}") from None
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise DataError(f"{path}: truncated checkpoint")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(8)) != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    version, cfg_len = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    cfg = NetworkConfig(**json.loads(bytes(take(cfg_len))))
    net = MultiTaskNet(cfg)
    state = net.state_dict()
    (count,) = struct.unpack("<I", take(4))
    seen = set()
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = bytes(take(n)).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape)
        if name not in state or tuple(state[name].shape) != tuple(shape):
            raise DataError(f"{path}: unexpected tensor {name} {shape}")
        state[name] = torch.from_numpy(arr.astype(np.float32))
        seen.add(name)
    missing = {k for k, v in state.items() if v.is_floating_point()} - seen
    if missing:
        raise DataError(f"{path}: missing tensors {sorted(missing)[:3]}")
    net.load_state_dict(state)
    net.eval()
    return net
