"""Distance transforms and the level-set label update.

The label update grows every seed region (a connected piece of the current
coarse mask) towards the boundary of the predicted object it sits in::

    phi(i) = dist(i, seed) - beta * dist(i, outside of prediction)
    grown  = { i : phi(i) <= 0 }

``beta = 0`` leaves the seed untouched, and for ``beta`` larger than the grid
diameter a seed contained in the prediction snaps to the prediction.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from scipy import ndimage

from .core import ClassMask, as_instance

_STRUCTURES = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


def _structure(connectivity: int) -> np.ndarray:
    try:
        return _STRUCTURES[connectivity]
    except KeyError:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}") from None


# ---------------------------------------------------------------------------
# exact Euclidean distance transform


@numba.njit(cache=True)
def _envelope_1d(f, out, v, z):
    # Lower envelope of the parabolas (q - p)^2 + f[p] over finite sites p.
    n = f.shape[0]
    k = -1
    for q in range(n):
        if f[q] == np.inf:
            continue
        if k < 0:
            k = 0
            v[0] = q
            z[0] = -np.inf
            z[1] = np.inf
            continue
        s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
        while s <= z[k]:
            k -= 1
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    if k < 0:
        for q in range(n):
            out[q] = np.inf
        return
    j = 0
    for q in range(n):
        while z[j + 1] < q:
            j += 1
        d = q - v[j]
        out[q] = d * d + f[v[j]]


@numba.njit(cache=True)
def _squared_edt(source):
    h, w = source.shape
    n = max(h, w)
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1, dtype=np.float64)
    buf = np.empty(n, dtype=np.float64)
    col = np.empty(h, dtype=np.float64)
    tmp = np.empty((h, w), dtype=np.float64)
    for c in range(w):
        for r in range(h):
            col[r] = 0.0 if source[r, c] else np.inf
        _envelope_1d(col, buf[:h], v, z)
        for r in range(h):
            tmp[r, c] = buf[r]
    out = np.empty((h, w), dtype=np.float64)
    row = np.empty(w, dtype=np.float64)
    for r in range(h):
        for c in range(w):
            row[c] = tmp[r, c]
        _envelope_1d(row, buf[:w], v, z)
        for c in range(w):
            out[r, c] = buf[c]
    return out


def squared_distance_transform(source) -> np.ndarray:
    """Squared Euclidean distance to the nearest true pixel (integers stored as float64)."""
    source = as_instance(source)
    if source.size == 0:
        return np.zeros(source.shape)
    return _squared_edt(np.ascontiguousarray(source))


def distance_transform(source) -> np.ndarray:
    """Exact Euclidean distance from every pixel to the nearest true pixel of ``source``.

    Two separable passes of the parabola lower-envelope algorithm give the
    squared distances as exact integers, so the result is bit-identical to
    ``sqrt(dr**2 + dc**2)`` minimised over all source pixels. An empty source
    gives ``+inf`` everywhere.
    """
    return np.sqrt(squared_distance_transform(source))


# ---------------------------------------------------------------------------
# level set and single-seed growth


def _check_pair(seed, prediction):
    seed = as_instance(seed)
    prediction = as_instance(prediction)
    if seed.shape != prediction.shape:
        raise ValueError(f"shape mismatch: seed {seed.shape} vs prediction {prediction.shape}")
    if not seed.any():
        raise ValueError("seed region is empty")
    return seed, prediction


def _level_set(seed, prediction, beta):
    to_seed = distance_transform(seed)
    if beta == 0:
        return to_seed
    return to_seed - beta * distance_transform(~prediction)


def level_set(seed, prediction, beta: float) -> np.ndarray:
    """``dist(i, seed) - beta * dist(i, complement of prediction)`` for every pixel.

    ``beta * inf`` (prediction covering the whole grid) is ``inf`` for
    ``beta > 0``; with ``beta == 0`` the second term is dropped entirely.
    """
    if not beta >= 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    seed, prediction = _check_pair(seed, prediction)
    return _level_set(seed, prediction, float(beta))


def grow_region(seed, prediction, beta: float) -> np.ndarray:
    """Non-positive sublevel set of :func:`level_set`; always contains ``seed``."""
    return level_set(seed, prediction, beta) <= 0


# ---------------------------------------------------------------------------
# components


@dataclass(frozen=True, eq=False)
class ComponentLabeling:
    """Component id per pixel (0 = background), ids 1..count in raster order."""

    ids: np.ndarray
    count: int
    connectivity: int = 8

    def mask(self, cid: int) -> np.ndarray:
        return self.ids == cid

    def __eq__(self, other):
        return (
            isinstance(other, ComponentLabeling)
            and self.count == other.count
            and self.connectivity == other.connectivity
            and np.array_equal(self.ids, other.ids)
        )


def _raster_relabel(ids: np.ndarray) -> tuple[np.ndarray, int]:
    """Renumber positive ids 1..n by the raster position of their first pixel."""
    flat = ids.ravel()
    values, first = np.unique(flat, return_index=True)
    keep = values > 0
    values, first = values[keep], first[keep]
    order = values[np.argsort(first, kind="stable")]
    lut = np.zeros(int(flat.max(initial=0)) + 1, dtype=np.int32)
    lut[order] = np.arange(1, len(order) + 1, dtype=np.int32)
    return lut[ids], len(order)


def connected_components(mask, connectivity: int = 8) -> ComponentLabeling:
    mask = as_instance(mask)
    ids, _ = ndimage.label(mask, structure=_structure(connectivity))
    ids, count = _raster_relabel(ids.astype(np.int32))
    return ComponentLabeling(ids, count, connectivity)


def class_instances(mask: ClassMask, connectivity: int = 8) -> list[tuple[np.ndarray, int]]:
    """Connected same-class pieces of the object pixels, as ``(bits, class)`` in raster order.

    Touching pieces of different classes stay separate instances.
    """
    ids = np.zeros(mask.shape, dtype=np.int32)
    classes: dict[int, int] = {}
    offset = 0
    for c in range(mask.background):
        lab, n = ndimage.label(mask.labels == c, structure=_structure(connectivity))
        sel = lab > 0
        ids[sel] = lab[sel] + offset
        for j in range(1, n + 1):
            classes[offset + j] = c
        offset += n
    if offset == 0:
        return []
    flat = ids.ravel()
    values, first = np.unique(flat, return_index=True)
    keep = values > 0
    order = values[keep][np.argsort(first[keep], kind="stable")]
    return [(ids == v, classes[int(v)]) for v in order]


def split_components(components: ComponentLabeling, seeds) -> ComponentLabeling:
    """Split components overlapping several seeds so each touches at most one.

    Inside such a component every pixel goes to its nearest overlapping seed;
    pixels equidistant from their two nearest seeds are dropped to background.
    Each seed's share is then relabelled into connected pieces.
    """
    seeds = [as_instance(s) for s in seeds]
    if seeds:
        stack = np.stack(seeds)
        if (stack.sum(axis=0) > 1).any():
            raise ValueError("seed regions overlap")
    ids = components.ids.copy()
    struct = _structure(components.connectivity)
    next_id = components.count + 1
    for cid in range(1, components.count + 1):
        comp = components.ids == cid
        hits = [j for j, s in enumerate(seeds) if (s & comp).any()]
        if len(hits) < 2:
            continue
        dist = np.stack([distance_transform(seeds[j])[comp] for j in hits])
        order = np.argsort(dist, axis=0, kind="stable")
        nearest = order[0]
        d_first = np.take_along_axis(dist, order[:1], axis=0)[0]
        d_second = np.take_along_axis(dist, order[1:2], axis=0)[0]
        owner = np.where(d_first == d_second, -1, nearest)
        territory = np.full(comp.shape, -1, dtype=np.int64)
        territory[comp] = owner
        ids[comp] = 0
        for k in range(len(hits)):
            lab, n = ndimage.label(territory == k, structure=struct)
            sel = lab > 0
            ids[sel] = lab[sel] + next_id - 1
            next_id += n
    ids, count = _raster_relabel(ids)
    return ComponentLabeling(ids, count, components.connectivity)


def pair_seeds(seeds, components: ComponentLabeling) -> list[tuple[int, int]]:
    """Pair each seed with the component covering at least half of its pixels.

    Returns ``(seed index, component id)`` pairs sorted by seed index. When two
    components each cover exactly half, the lower id wins.
    """
    pairs = []
    for j, seed in enumerate(seeds):
        seed = as_instance(seed)
        size = int(seed.sum())
        if size == 0:
            continue
        counts = np.bincount(components.ids[seed], minlength=components.count + 1)
        counts[0] = 0
        best = int(np.argmax(counts))
        if best > 0 and 2 * counts[best] >= size:
            pairs.append((j, best))
    return pairs


# ---------------------------------------------------------------------------
# multi-object label update


def _window(bits: np.ndarray, shape) -> tuple[slice, slice]:
    # Bounding box grown by one pixel. Clamping any pixel outside this box onto
    # its border never increases its distance to a pixel inside, so distances
    # restricted to the window stay exact.
    rows = np.flatnonzero(bits.any(axis=1))
    cols = np.flatnonzero(bits.any(axis=0))
    r0, r1 = max(rows[0] - 1, 0), min(rows[-1] + 2, shape[0])
    c0, c1 = max(cols[0] - 1, 0), min(cols[-1] + 2, shape[1])
    return slice(r0, r1), slice(c0, c1)


@dataclass
class UpdateReport:
    seeds: int
    paired: int
    unpaired: list[int]


def update_labels(
    seed_label: ClassMask,
    prediction: ClassMask,
    beta: float,
    connectivity: int = 8,
    report: UpdateReport | None = None,
) -> ClassMask:
    """Grow every seed of ``seed_label`` into its paired predicted object.

    Steps: extract seeds (same-class connected pieces), binarise the prediction
    to "any object class", compute and split its components, pair seeds with
    components by the 50% coverage rule, and grow each paired seed with
    :func:`grow_region`. Grown pixels take the class of their seed.

    Conflicts are settled per pixel: seed pixels always keep their seed,
    otherwise the smaller phi wins with ties to the lower seed index. A grown
    (non-seed) pixel that would touch another instance of the same class is
    dropped, and each grown region is reduced to its piece connected to the
    seed, so the output has exactly one instance per input seed. Unpaired seeds
    are copied unchanged.
    """
    if seed_label.shape != prediction.shape:
        raise ValueError(f"shape mismatch: {seed_label.shape} vs {prediction.shape}")
    if not beta >= 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    beta = float(beta)
    shape = seed_label.shape
    struct = _structure(connectivity)
    instances = class_instances(seed_label, connectivity)
    seeds = [bits for bits, _ in instances]
    seed_class = [c for _, c in instances]

    components = connected_components(prediction.objects(), connectivity)
    components = split_components(components, seeds)
    pairs = pair_seeds(seeds, components)
    if report is not None:
        paired = {j for j, _ in pairs}
        report.seeds = len(seeds)
        report.paired = len(pairs)
        report.unpaired = [j for j in range(len(seeds)) if j not in paired]

    n = len(seeds)
    best_phi = np.full(shape, np.inf)
    owner = np.full(shape, -1, dtype=np.int64)
    windows = {}
    for j, cid in pairs:
        seed = seeds[j]
        comp = components.ids == cid
        win = windows[j] = _window(seed | comp, shape)
        phi = _level_set(seed[win], comp[win], beta)
        grown = phi <= 0
        cur_phi = best_phi[win]
        cur_owner = owner[win]
        take = grown & (phi < cur_phi)  # strict: earlier (lower) seed wins ties
        cur_phi[take] = phi[take]
        cur_owner[take] = j
    for j, seed in enumerate(seeds):
        owner[seed] = j

    is_seed = np.zeros(shape, dtype=bool)
    for seed in seeds:
        is_seed |= seed
    if n:
        cls = np.full(shape, -1, dtype=np.int64)
        owned = owner >= 0
        cls[owned] = np.asarray(seed_class)[owner[owned]]
        clash = np.zeros(shape, dtype=bool)
        padded_owner = np.pad(owner, 1, constant_values=-1)
        padded_cls = np.pad(cls, 1, constant_values=-1)
        h, w = shape
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                if (dr, dc) == (0, 0) or not struct[dr + 1, dc + 1]:
                    continue
                nb_owner = padded_owner[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w]
                nb_cls = padded_cls[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w]
                clash |= owned & (nb_owner >= 0) & (nb_owner != owner) & (nb_cls == cls)
        owner[clash & ~is_seed] = -1

    out = np.full(shape, seed_label.background, dtype=np.uint8)
    for j, seed in enumerate(seeds):
        win = windows.get(j) or _window(seed, shape)
        lab, _ = ndimage.label(owner[win] == j, structure=struct)
        keep = lab == lab[seed[win]][0]
        out[win][keep] = seed_class[j]
    return ClassMask(out, seed_label.classes)
