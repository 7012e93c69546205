"""Shared raster types, the RNG contract, and netpbm I/O.

Conventions used across the package:

* grids are row-major, origin at the top-left, indexed ``[row, col]``;
* in a binary task class 0 is the object and the last class is background;
  multi-class tasks list their object classes first and background last;
* every random draw comes from a :func:`seeded_rng` stream, there is no
  global RNG state.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataError(Exception):
    """Raised for malformed, missing or corrupted data files."""


# ---------------------------------------------------------------------------
# random streams


def seeded_rng(seed: int, *stream: int) -> np.random.Generator:
    """Return a PCG64 generator for ``seed``.

    Extra integers select an independent sub-stream (for instance an item
    index), mixed through numpy's ``SeedSequence``. PCG64 and SeedSequence are
    both specified bit-for-bit by numpy, so streams agree across platforms.
    """
    if seed < 0:
        raise ValueError("seed must be non-negative")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *stream])))


def derive_seed(rng: np.random.Generator) -> int:
    """Draw a fresh 63-bit seed from ``rng`` for handing to a sub-component."""
    return int(rng.integers(0, 2**63 - 1))


# ---------------------------------------------------------------------------
# raster types


@dataclass(frozen=True, eq=False)
class Image:
    """H x W x C intensities in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise ValueError(f"image must be HxW, HxWx1 or HxWx3, got {data.shape}")
        if not np.all(np.isfinite(data)) or data.min(initial=0.0) < 0 or data.max(initial=0.0) > 1:
            raise ValueError("image values must be finite and lie in [0, 1]")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def __eq__(self, other):
        return isinstance(other, Image) and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class ClassMask:
    """Per-pixel class index in ``[0, classes - 1]``."""

    labels: np.ndarray
    classes: int

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ValueError(f"class mask must be 2-D, got shape {labels.shape}")
        if self.classes < 1 or self.classes > 256:
            raise ValueError("class count must be in [1, 256]")
        if labels.size and (labels.min() < 0 or labels.max() >= self.classes):
            raise ValueError(f"class index out of range for {self.classes} classes")
        object.__setattr__(self, "labels", labels.astype(np.uint8))

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    @property
    def background(self) -> int:
        return self.classes - 1

    def objects(self) -> np.ndarray:
        """Boolean mask of every non-background pixel."""
        return self.labels != self.background

    def __eq__(self, other):
        return (
            isinstance(other, ClassMask)
            and self.classes == other.classes
            and np.array_equal(self.labels, other.labels)
        )


def one_hot(mask: ClassMask) -> np.ndarray:
    """Boolean planes of shape ``(classes, H, W)``; plane c is ``labels == c``."""
    return mask.labels[None, :, :] == np.arange(mask.classes, dtype=np.uint8)[:, None, None]


def from_one_hot(planes: np.ndarray) -> ClassMask:
    return ClassMask(np.argmax(planes, axis=0), planes.shape[0])


def as_instance(mask) -> np.ndarray:
    """Coerce to a 2-D boolean array (the InstanceMask representation)."""
    bits = np.asarray(mask)
    if bits.ndim != 2:
        raise ValueError(f"instance mask must be 2-D, got shape {bits.shape}")
    return bits.astype(bool, copy=False)


@dataclass
class LabelField:
    """Task id (1-based) -> class mask, or ``None`` when the image is unlabeled for that task."""

    tasks: dict[int, ClassMask | None] = field(default_factory=dict)

    def get(self, task: int) -> ClassMask | None:
        return self.tasks.get(task)

    def present(self, task: int) -> bool:
        return self.tasks.get(task) is not None

    def with_task(self, task: int, mask: ClassMask | None) -> "LabelField":
        tasks = dict(self.tasks)
        tasks[task] = mask
        return LabelField(tasks)

    def __eq__(self, other):
        if not isinstance(other, LabelField) or set(self.tasks) != set(other.tasks):
            return False
        return all(self.tasks[t] == other.tasks[t] for t in self.tasks)


@dataclass
class Item:
    """One training/evaluation image with its labels.

    ``gt`` and ``instances`` are the evaluation-only ground truth; training code
    never reads them. ``instances`` holds an instance id per pixel, 0 = none.
    """

    image: Image
    labels: LabelField
    gt: ClassMask | None = None
    instances: np.ndarray | None = None
    touching: list[tuple[int, int, bool]] = field(default_factory=list)

    def __eq__(self, other):
        if not isinstance(other, Item):
            return False
        same_inst = (self.instances is None and other.instances is None) or (
            self.instances is not None
            and other.instances is not None
            and np.array_equal(self.instances, other.instances)
        )
        return (
            self.image == other.image
            and self.labels == other.labels
            and self.gt == other.gt
            and same_inst
            and list(self.touching) == list(other.touching)
        )


@dataclass
class Dataset:
    items: list[Item]
    name: str = "synthetic"
    split: str = "train"
    seed: int = 0
    task_classes: dict[int, int] = field(default_factory=dict)
    palette: dict[int, str] = field(default_factory=dict)
    config: dict[str, str] = field(default_factory=dict)

    def __len__(self):
        return len(self.items)

    def labeled(self, task: int) -> list[int]:
        return [i for i, item in enumerate(self.items) if item.labels.present(task)]

    def __eq__(self, other):
        return (
            isinstance(other, Dataset)
            and self.name == other.name
            and self.split == other.split
            and self.seed == other.seed
            and self.task_classes == other.task_classes
            and self.palette == other.palette
            and self.config == other.config
            and self.items == other.items
        )


# ---------------------------------------------------------------------------
# netpbm I/O and checksums


def checksum(data: bytes) -> str:
    """64-bit BLAKE2b digest as 16 hex digits."""
    return hashlib.blake2b(data, digest_size=8).hexdigest()


def encode_pnm(array: np.ndarray) -> bytes:
    """Encode an 8-bit H x W (P5) or H x W x 3 (P6) array."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError("netpbm rasters must be uint8")
    if array.ndim == 3 and array.shape[2] == 1:
        array = array[:, :, 0]
    if array.ndim == 2:
        magic = b"P5"
    elif array.ndim == 3 and array.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode array of shape {array.shape}")
    h, w = array.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(array).tobytes()


def decode_pnm(data: bytes, name: str = "<bytes>") -> np.ndarray:
    """Decode binary P5/P6 with maxval 255. Comments (``#``) are allowed in the header."""
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise DataError(f"{name}: truncated netpbm header")
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte before the raster
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise DataError(f"{name}: unsupported netpbm magic {magic!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DataError(f"{name}: malformed netpbm header") from None
    if maxval != 255:
        raise DataError(f"{name}: only maxval 255 is supported, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    n = w * h * channels
    raster = data[pos : pos + n]
    if len(raster) != n:
        raise DataError(f"{name}: raster has {len(raster)} bytes, expected {n}")
    out = np.frombuffer(raster, dtype=np.uint8)
    return out.reshape((h, w, 3) if channels == 3 else (h, w)).copy()


def write_pnm(path: Path, array: np.ndarray) -> str:
    """Write ``array`` and return its checksum."""
    payload = encode_pnm(array)
    Path(path).write_bytes(payload)
    return checksum(payload)


def read_pnm(path: Path, expected_checksum: str | None = None) -> np.ndarray:
    path = Path(path)
    try:
        payload = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"missing file: {path}") from None
    if expected_checksum is not None and checksum(payload) != expected_checksum:
        raise DataError(f"checksum mismatch for {path}")
    return decode_pnm(payload, str(path))


def image_to_bytes(image: Image) -> np.ndarray:
    return np.round(image.data * 255.0).astype(np.uint8)


def image_from_bytes(raster: np.ndarray) -> Image:
    return Image(raster.astype(np.float32) / 255.0)


def quantize(data: np.ndarray) -> np.ndarray:
    """Snap intensities to the 8-bit grid so that serialization is lossless."""
    return (np.round(np.clip(data, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def read_mask(path: Path, classes: int) -> ClassMask:
    raster = read_pnm(path)
    if raster.ndim != 2:
        raise DataError(f"{path}: masks must be single-channel (P5)")
    try:
        return ClassMask(raster, classes)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def write_mask(path: Path, mask: ClassMask) -> str:
    return write_pnm(path, mask.labels)
