"""Synthetic scenes with strong, coarse and scribble annotations, and dataset I/O.

Each scene holds a few objects of one or two classes on a shaded, textured,
noisy background. Annotations mimic what a human would produce cheaply:

* task 1 (strong): the exact class mask;
* task 2 (coarse): an eroded, randomly wobbling inner region per object that
  never reaches the object boundary;
* task 3 (scribbles): thick strokes over interfaces between touching objects
  that are not visible in the image.

On disk a dataset split is a directory::

    manifest.txt
    images/NNNN.pgm          (P6 .ppm for RGB)
    labels/taskT/NNNN.pgm
    gt/NNNN.pgm              class mask, evaluation only
    instances/NNNN.pgm       instance ids, evaluation only
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import (
    ClassMask,
    DataError,
    Dataset,
    Image,
    Item,
    LabelField,
    checksum,
    encode_pnm,
    image_from_bytes,
    image_to_bytes,
    quantize,
    read_pnm,
    seeded_rng,
)
from .geometry import connected_components, distance_transform

MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")
PALETTES = {
    1: {0: "object", 1: "background"},
    2: {0: "bubble", 1: "crystal", 2: "background"},
}
SCRIBBLE_PALETTE = {0: "separation", 1: "background"}


class PlacementError(RuntimeError):
    pass


@dataclass
class SceneConfig:
    size: int = 128
    instances: tuple[int, int] = (4, 7)
    classes: int = 2
    shape: str = "mixed"  # ellipse | blob | mixed (class 0 ellipses, class 1 blobs)
    radius: tuple[float, float] = (9.0, 17.0)
    contrast: tuple[float, float] = (0.25, 0.55)
    noise: float = 0.04
    texture: float = 0.06
    shading: float = 0.12
    edge_softness: float = 0.8
    touch_prob: float = 0.35
    shrink: tuple[float, float] = (0.2, 0.32)
    perturbation: float = 0.3
    seed: int = 0

    def __post_init__(self):
        self.instances = tuple(int(v) for v in self.instances)
        self.radius = tuple(float(v) for v in self.radius)
        self.contrast = tuple(float(v) for v in self.contrast)
        self.shrink = tuple(float(v) for v in self.shrink)
        self.validate()

    def validate(self):
        lo, hi = self.instances
        if lo < 1 or hi < lo:
            raise ValueError(f"instances range must satisfy 1 <= lo <= hi, got {self.instances}")
        if self.classes not in (1, 2):
            raise ValueError("classes must be 1 or 2")
        if self.shape not in ("ellipse", "blob", "mixed"):
            raise ValueError(f"unknown shape family {self.shape!r}")
        if not 0 < self.shrink[0] <= self.shrink[1] < 1:
            raise ValueError(f"shrink range must lie in (0, 1), got {self.shrink}")
        if not 0 < self.radius[0] <= self.radius[1]:
            raise ValueError(f"invalid radius range {self.radius}")
        if not 0 <= self.contrast[0] <= self.contrast[1] <= 1:
            raise ValueError(f"contrast range must lie in [0, 1], got {self.contrast}")
        if not 0 <= self.touch_prob <= 1:
            raise ValueError("touch_prob must lie in [0, 1]")
        if self.size < 16:
            raise ValueError("size must be at least 16")
        for name in ("noise", "texture", "shading", "edge_softness", "perturbation"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def as_strings(self) -> dict[str, str]:
        out = {}
        for key, value in asdict(self).items():
            if isinstance(value, (tuple, list)):
                value = ",".join(repr(v) for v in value)
            out[key] = str(value)
        return out

    @classmethod
    def from_strings(cls, values: dict[str, str]) -> "SceneConfig":
        kwargs = {}
        types = {f.name: f.type for f in fields(cls)}
        for key, raw in values.items():
            if key not in types:
                raise ValueError(f"unknown scene key {key!r}")
            kwargs[key] = _parse_field(types[key], raw)
        return cls(**kwargs)


def _parse_field(kind, raw: str):
    kind = str(kind)
    if kind.startswith("tuple"):
        cast = int if "int" in kind else float
        parts = [p for p in raw.replace(" ", "").split(",") if p]
        return tuple(cast(p) for p in parts)
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


@dataclass
class Scene:
    image: Image
    gt: ClassMask
    instances: np.ndarray  # instance id per pixel, 0 = background
    classes: list[int]  # class of instance i + 1
    touching: list[tuple[int, int, bool]]  # (id a, id b, low contrast)

    def instance_masks(self) -> list[np.ndarray]:
        return [self.instances == i + 1 for i in range(len(self.classes))]


# ---------------------------------------------------------------------------
# scene generation


def _radial_profile(rng, kind: str, radius: tuple[float, float]):
    """Radius as a function of angle for an ellipse or a smooth random blob."""
    lo, hi = radius
    if kind == "ellipse":
        a = rng.uniform(lo, hi)
        b = rng.uniform(max(lo, 0.6 * a), a)
        rot = rng.uniform(0, math.pi)

        def profile(theta):
            t = theta - rot
            return a * b / np.sqrt((b * np.cos(t)) ** 2 + (a * np.sin(t)) ** 2)

        return profile, a
    base = rng.uniform(lo, hi)
    harmonics = np.arange(2, 6)
    amps = rng.normal(0, 0.1, size=len(harmonics)) / harmonics * 2
    phases = rng.uniform(0, 2 * math.pi, size=len(harmonics))

    def profile(theta):
        theta = np.asarray(theta)[..., None]
        wobble = (amps * np.cos(harmonics * theta + phases)).sum(axis=-1)
        return base * np.clip(1 + wobble, 0.7, 1.3)

    return profile, base * 1.3


def _rasterize(profile, center, size, reach):
    out = np.zeros((size, size), dtype=bool)
    r0, c0 = (max(int(math.floor(v - reach)) - 1, 0) for v in center)
    r1, c1 = (min(int(math.ceil(v + reach)) + 2, size) for v in center)
    if r0 >= r1 or c0 >= c1:
        return out
    rr, cc = np.mgrid[r0:r1, c0:c1].astype(np.float64)
    dr, dc = rr - center[0], cc - center[1]
    out[r0:r1, c0:c1] = np.hypot(dr, dc) <= profile(np.arctan2(dr, dc))
    return out


def _touches(a: np.ndarray, b: np.ndarray) -> bool:
    grown = ndimage.binary_dilation(a, structure=ndimage.generate_binary_structure(2, 1))
    return bool((grown & b).any())


def _interface(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    cross = ndimage.generate_binary_structure(2, 1)
    return (ndimage.binary_dilation(b, cross) & a) | (ndimage.binary_dilation(a, cross) & b)


def _band_noise(rng, shape, sigma):
    field = ndimage.gaussian_filter(rng.normal(size=shape), sigma)
    std = field.std()
    return field / std if std > 0 else field


def _shape_kind(cfg: SceneConfig, cls: int) -> str:
    if cfg.shape != "mixed":
        return cfg.shape
    return "ellipse" if cls == 0 else "blob"


def generate_scene(cfg: SceneConfig, rng: np.random.Generator, max_tries: int = 200) -> Scene:
    """Render one scene; the ground truth is exact by construction.

    Touching pairs are placed by sliding a new object towards an existing one
    until they share an edge. Each pair is flagged low-contrast (no visible
    interface) or clear (a dark seam is drawn between the two objects).
    """
    size = cfg.size
    n_target = int(rng.integers(cfg.instances[0], cfg.instances[1] + 1))
    ids = np.zeros((size, size), dtype=np.int32)
    classes: list[int] = []
    touching: list[tuple[int, int, bool]] = []
    free_zone = np.ones((size, size), dtype=bool)
    free_zone[[0, -1], :] = False
    free_zone[:, [0, -1]] = False
    gap = ndimage.generate_binary_structure(2, 2)

    tries = 0
    while len(classes) < n_target:
        tries += 1
        if tries > max_tries:
            raise PlacementError(
                f"could only place {len(classes)} of {n_target} instances after {max_tries} tries"
            )
        cls = int(rng.integers(cfg.classes))
        profile, reach = _radial_profile(rng, _shape_kind(cfg, cls), cfg.radius)
        partner = None
        if classes and rng.random() < cfg.touch_prob:
            partner = int(rng.integers(len(classes))) + 1
        if partner is None:
            center = rng.uniform(reach + 1, size - reach - 1, size=2)
            bits = _rasterize(profile, center, size, reach)
            occupied = ndimage.binary_dilation(ids > 0, gap, iterations=2)
            if (bits & (occupied | ~free_zone)).any() or not bits.any():
                continue
        else:
            other = ids == partner
            oc = np.argwhere(other).mean(axis=0)
            angle = rng.uniform(0, 2 * math.pi)
            direction = np.array([math.sin(angle), math.cos(angle)])
            bits = None
            dist = 1.0
            while dist < 3 * size:
                cand = _rasterize(profile, oc + dist * direction, size, reach)
                if not (cand & other).any():
                    bits = cand
                    break
                dist += 0.5
            if bits is None or not bits.any() or (bits & ~free_zone).any():
                continue
            if bits.sum() < 0.9 * math.pi * cfg.radius[0] ** 2 * 0.6:
                continue  # clipped by the image border
            others = (ids > 0) & ~other
            if (ndimage.binary_dilation(others, gap, iterations=2) & bits).any():
                continue
            if not _touches(bits, other):
                continue
        ids[bits] = len(classes) + 1
        classes.append(cls)
        if partner is not None:
            touching.append((partner, len(classes), bool(rng.random() < 0.5)))

    background = cfg.classes
    labels = np.full((size, size), background, dtype=np.uint8)
    for i, cls in enumerate(classes):
        labels[ids == i + 1] = cls

    image = _render(cfg, rng, ids, classes, touching)
    return Scene(image, ClassMask(labels, cfg.classes + 1), ids, classes, touching)


def _render(cfg, rng, ids, classes, touching) -> Image:
    size = cfg.size
    contrast = rng.uniform(*cfg.contrast)
    base = rng.uniform(0.3, 0.6)
    bg = (1 - contrast) * base
    targets = (0.9, 0.65)
    img = np.full((size, size), bg, dtype=np.float64)
    if cfg.texture > 0:
        img += 0.5 * cfg.texture * _band_noise(rng, (size, size), 3.0)
    textured = _band_noise(rng, (size, size), 1.2) if cfg.texture > 0 else None
    for i, cls in enumerate(classes):
        bits = ids == i + 1
        img[bits] = bg + contrast * (targets[cls] - bg)
        if cls == 1 and textured is not None:
            img[bits] += cfg.texture * textured[bits]
    for a, b, low in touching:
        if not low:
            seam = _interface(ids == a, ids == b)
            img[seam] = bg * 0.5
    if cfg.shading > 0:
        angle = rng.uniform(0, 2 * math.pi)
        rr, cc = np.mgrid[:size, :size] / (size - 1) - 0.5
        img += cfg.shading * (rr * math.sin(angle) + cc * math.cos(angle))
    if cfg.edge_softness > 0:
        img = ndimage.gaussian_filter(img, cfg.edge_softness)
    if cfg.noise > 0:
        img += rng.normal(0, cfg.noise, size=img.shape)
    return Image(quantize(img))


# ---------------------------------------------------------------------------
# weak annotations


def boundary(mask: np.ndarray) -> np.ndarray:
    """Object pixels with at least one 4-neighbour outside the object (or the grid)."""
    mask = np.asarray(mask, dtype=bool)
    inner = ndimage.binary_erosion(mask, ndimage.generate_binary_structure(2, 1), border_value=0)
    return mask & ~inner


class WeakLabelError(ValueError):
    pass


def make_weak_label(gt_instance, shrink, rng: np.random.Generator, perturbation: float = 0.3):
    """Coarse inner region of one object, as an annotator might scribble it.

    The object is eroded by ``shrink`` times its inner radius, with the margin
    modulated by a smooth random function of the angle around the centroid.
    The result is the largest connected piece whose pixels all lie at least 2
    pixels inside the object, so it never touches the object boundary and its
    8-neighbourhood stays inside the object. ``shrink`` is a fraction or a
    ``(lo, hi)`` range to draw from.
    """
    mask = np.asarray(gt_instance, dtype=bool)
    if isinstance(shrink, (tuple, list)):
        lo, hi = shrink
        if not 0 < lo <= hi < 1:
            raise ValueError(f"shrink range must lie in (0, 1), got {shrink}")
        frac = rng.uniform(lo, hi)
    else:
        frac = float(shrink)
        if not 0 < frac < 1:
            raise ValueError(f"shrink must lie in (0, 1), got {shrink}")
    depth = distance_transform(~mask)
    depth[~mask] = 0
    inner_radius = depth.max(initial=0.0)
    if inner_radius < 2:
        raise WeakLabelError("instance too small to shrink")
    rows, cols = np.nonzero(mask)
    center = rows.mean(), cols.mean()
    rr, cc = np.mgrid[: mask.shape[0], : mask.shape[1]]
    theta = np.arctan2(rr - center[0], cc - center[1])
    wobble = np.zeros_like(theta)
    if perturbation > 0:
        for k in (1, 2, 3):
            wobble += rng.normal(0, perturbation / k) * np.cos(k * theta + rng.uniform(0, 2 * math.pi))
    margin = frac * inner_radius * np.clip(1 + wobble, 0.3, 1.8)
    weak = mask & (depth >= 2) & (depth > margin)
    if not weak.any():
        weak = mask & (depth >= 2)
    labels = connected_components(weak, 8)
    if labels.count == 0:
        raise WeakLabelError("instance too small to shrink")
    sizes = np.bincount(labels.ids.ravel())[1:]
    return labels.ids == int(np.argmax(sizes)) + 1


def make_separation_scribbles(scene: Scene, rng: np.random.Generator | None = None) -> ClassMask:
    """Stroke (class 0) along every low-contrast interface, background (class 1) elsewhere.

    Clear interfaces are left unlabeled on purpose. A stroke is the interface
    dilated by one pixel, so all stroke pixels are within 2 px of the interface.
    """
    size = scene.instances.shape
    out = np.ones(size, dtype=np.uint8)
    for a, b, low in scene.touching:
        if not low:
            continue
        seam = _interface(scene.instances == a, scene.instances == b)
        stroke = ndimage.binary_dilation(seam, ndimage.generate_binary_structure(2, 2))
        out[stroke] = 0
    return ClassMask(out, 2)


def weak_mask(scene: Scene, cfg: SceneConfig, rng: np.random.Generator, skipped=None) -> ClassMask:
    """Task-2 label for a whole scene; undersized objects are skipped and reported."""
    labels = np.full(scene.gt.shape, scene.gt.background, dtype=np.uint8)
    for i, bits in enumerate(scene.instance_masks()):
        try:
            weak = make_weak_label(bits, cfg.shrink, rng, cfg.perturbation)
        except WeakLabelError:
            if skipped is not None:
                skipped.append(i + 1)
            continue
        labels[weak] = scene.classes[i]
    return ClassMask(labels, scene.gt.classes)


# ---------------------------------------------------------------------------
# datasets


def make_item(cfg: SceneConfig, seed: int, split_index: int, index: int) -> Item:
    rng = seeded_rng(seed, split_index, index)
    scene = generate_scene(cfg, rng)
    labels = LabelField(
        {
            1: scene.gt,
            2: weak_mask(scene, cfg, rng),
            3: make_separation_scribbles(scene, rng),
        }
    )
    return Item(scene.image, labels, scene.gt, scene.instances, list(scene.touching))


def generate_dataset(cfg: SceneConfig, count: int, split: str = "train", name: str = "synthetic") -> Dataset:
    """Fully labeled split; item i depends only on (config, seed, split, i)."""
    split_index = SPLITS.index(split) if split in SPLITS else len(SPLITS)
    items = [make_item(cfg, cfg.seed, split_index, i) for i in range(count)]
    return Dataset(
        items,
        name=name,
        split=split,
        seed=cfg.seed,
        task_classes={1: cfg.classes + 1, 2: cfg.classes + 1, 3: 2},
        palette=dict(PALETTES[cfg.classes]),
        config=cfg.as_strings(),
    )


def subset_size(ratio: float, n: int) -> int:
    return min(n, math.ceil(round(ratio * n, 9)))


def assign_availability(dataset: Dataset, ratios: dict[int, float], rng: np.random.Generator) -> Dataset:
    """Keep task-t labels on a uniform random subset of ``ceil(ratio_t * n)`` items.

    Subsets are drawn independently per task (in task order) so the labeled
    sets of different tasks need not be nested.
    """
    n = len(dataset)
    for task, ratio in ratios.items():
        if not 0 <= ratio <= 1:
            raise ValueError(f"availability ratio for task {task} must lie in [0, 1], got {ratio}")
    if subset_size(ratios.get(1, 1.0), n) == 0:
        raise ValueError("availability leaves no strongly labeled (task 1) images")
    keep = {}
    for task in sorted(ratios):
        chosen = rng.choice(n, size=subset_size(ratios[task], n), replace=False)
        keep[task] = set(int(i) for i in chosen)
    items = []
    for i, item in enumerate(dataset.items):
        labels = item.labels
        for task, chosen in keep.items():
            if i not in chosen:
                labels = labels.with_task(task, None)
        items.append(Item(item.image, labels, item.gt, item.instances, list(item.touching)))
    return Dataset(
        items,
        dataset.name,
        dataset.split,
        dataset.seed,
        dict(dataset.task_classes),
        dict(dataset.palette),
        dict(dataset.config),
    )


def _fmt_touch(touching) -> str:
    return ";".join(f"{a}-{b}:{'low' if low else 'clear'}" for a, b, low in touching)


def _parse_touch(raw: str) -> list[tuple[int, int, bool]]:
    out = []
    for part in filter(None, raw.split(";")):
        pair, kind = part.split(":")
        a, b = pair.split("-")
        if kind not in ("low", "clear"):
            raise ValueError(kind)
        out.append((int(a), int(b), kind == "low"))
    return out


def save_dataset(dataset: Dataset, path) -> Path:
    """Write rasters and ``manifest.txt``; the manifest records a checksum for each file."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    lines = [
        f"# recapprox dataset manifest v{MANIFEST_VERSION}",
        f"format = {MANIFEST_VERSION}",
        f"name = {dataset.name}",
        f"split = {dataset.split}",
        f"seed = {dataset.seed}",
        f"count = {len(dataset)}",
        "tasks = " + ",".join(f"{t}:{c}" for t, c in sorted(dataset.task_classes.items())),
    ]
    lines += [f"palette.{c} = {label}" for c, label in sorted(dataset.palette.items())]
    lines += [f"config.{k} = {v}" for k, v in sorted(dataset.config.items())]

    def put(rel: str, raster: np.ndarray) -> str:
        target = root / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        payload = encode_pnm(raster)
        target.write_bytes(payload)
        return f"{rel} {checksum(payload)}"

    for i, item in enumerate(dataset.items):
        key = f"item.{i:04d}"
        ext = "ppm" if item.image.channels == 3 else "pgm"
        lines.append(f"{key}.image = " + put(f"images/{i:04d}.{ext}", image_to_bytes(item.image)))
        for task in sorted(dataset.task_classes):
            mask = item.labels.get(task)
            if mask is not None:
                lines.append(f"{key}.task{task} = " + put(f"labels/task{task}/{i:04d}.pgm", mask.labels))
        if item.gt is not None:
            lines.append(f"{key}.gt = " + put(f"gt/{i:04d}.pgm", item.gt.labels))
        if item.instances is not None:
            if item.instances.max(initial=0) > 255:
                raise ValueError("more than 255 instances cannot be stored in an 8-bit raster")
            lines.append(f"{key}.instances = " + put(f"instances/{i:04d}.pgm", item.instances.astype(np.uint8)))
        if item.touching:
            lines.append(f"{key}.touching = {_fmt_touch(item.touching)}")
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")
    return root


def read_manifest(path) -> dict[str, str]:
    manifest = Path(path)
    if manifest.is_dir():
        manifest = manifest / "manifest.txt"
    try:
        text = manifest.read_text()
    except FileNotFoundError:
        raise DataError(f"missing manifest: {manifest}") from None
    entries = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DataError(f"{manifest}:{lineno}: expected 'key = value'")
        key = key.strip()
        if key in entries:
            raise DataError(f"{manifest}:{lineno}: duplicate key {key!r}")
        entries[key] = value.strip()
    return entries


def load_dataset(path) -> Dataset:
    root = Path(path)
    m = read_manifest(root)
    try:
        fmt = int(m.pop("format"))
        name = m.pop("name")
        split = m.pop("split")
        seed = int(m.pop("seed"))
        count = int(m.pop("count"))
        task_classes = {}
        for part in m.pop("tasks").split(","):
            t, c = part.split(":")
            task_classes[int(t)] = int(c)
    except (KeyError, ValueError) as exc:
        raise DataError(f"{root}: malformed manifest header ({exc})") from None
    if fmt != MANIFEST_VERSION:
        raise DataError(f"{root}: unsupported manifest format {fmt}")
    palette, config = {}, {}
    files: dict[int, dict[str, str]] = {}
    for key, value in m.items():
        if key.startswith("palette."):
            palette[int(key[len("palette.") :])] = value
        elif key.startswith("config."):
            config[key[len("config.") :]] = value
        elif key.startswith("item."):
            _, idx, field_name = key.split(".", 2)
            files.setdefault(int(idx), {})[field_name] = value
        else:
            raise DataError(f"{root}: unknown manifest key {key!r}")
    if sorted(files) != list(range(count)):
        raise DataError(f"{root}: manifest lists {len(files)} items, header says {count}")

    def get(entry: str) -> np.ndarray:
        try:
            rel, digest = entry.rsplit(" ", 1)
        except ValueError:
            raise DataError(f"{root}: malformed file entry {entry!r}") from None
        return read_pnm(root / rel, expected_checksum=digest)

    def mask(entry: str, classes: int) -> ClassMask:
        raster = get(entry)
        try:
            return ClassMask(raster, classes)
        except ValueError as exc:
            raise DataError(f"{root}: {entry.rsplit(' ', 1)[0]}: {exc}") from None

    items = []
    for i in range(count):
        entry = dict(files[i])
        if "image" not in entry:
            raise DataError(f"{root}: item {i} has no image")
        image = image_from_bytes(get(entry.pop("image")))
        tasks: dict[int, ClassMask | None] = {t: None for t in task_classes}
        gt = instances = None
        touching: list = []
        for field_name, value in entry.items():
            if field_name.startswith("task"):
                try:
                    task = int(field_name[4:])
                except ValueError:
                    raise DataError(f"{root}: item {i}: bad field {field_name!r}") from None
                if task not in task_classes:
                    raise DataError(f"{root}: item {i} references unknown task id {task}")
                tasks[task] = mask(value, task_classes[task])
            elif field_name == "gt":
                gt = mask(value, task_classes.get(1, 2))
            elif field_name == "instances":
                instances = get(value).astype(np.int32)
            elif field_name == "touching":
                try:
                    touching = _parse_touch(value)
                except ValueError:
                    raise DataError(f"{root}: item {i}: malformed touching list {value!r}") from None
            else:
                raise DataError(f"{root}: item {i}: unknown field {field_name!r}")
        items.append(Item(image, LabelField(tasks), gt, instances, touching))
    return Dataset(items, name, split, seed, task_classes, palette, config)
