"""Slow, obviously-correct reference implementations used as test oracles."""
import math
from collections import deque

import numpy as np

N4 = [(-1, 0), (1, 0), (0, -1), (0, 1)]
N8 = N4 + [(-1, -1), (-1, 1), (1, -1), (1, 1)]


def brute_distance(source):
    source = np.asarray(source, bool)
    h, w = source.shape
    pts = [(r, c) for r in range(h) for c in range(w) if source[r, c]]
    out = np.full((h, w), np.inf)
    for r in range(h):
        for c in range(w):
            best = math.inf
            for pr, pc in pts:
                d = (r - pr) ** 2 + (c - pc) ** 2
                if d < best:
                    best = d
            if pts:
                out[r, c] = math.sqrt(best)
    return out


def brute_distance_fast(source):
    """All-pairs distances via broadcasting (same arithmetic as brute_distance)."""
    source = np.asarray(source, bool)
    h, w = source.shape
    pts = np.argwhere(source)
    if len(pts) == 0:
        return np.full((h, w), np.inf)
    rr, cc = np.mgrid[:h, :w]
    d2 = (rr[..., None] - pts[:, 0]) ** 2 + (cc[..., None] - pts[:, 1]) ** 2
    return np.sqrt(d2.min(axis=-1).astype(np.float64))


def brute_phi(seed, prediction, beta):
    seed = np.asarray(seed, bool)
    prediction = np.asarray(prediction, bool)
    h, w = seed.shape
    d_seed = brute_distance_fast(seed)
    d_out = brute_distance_fast(~prediction)
    phi = np.empty((h, w))
    for r in range(h):
        for c in range(w):
            if beta == 0:
                phi[r, c] = d_seed[r, c]
            else:
                phi[r, c] = d_seed[r, c] - beta * d_out[r, c]
    return phi


def flood_fill(mask, connectivity=8):
    """Component ids in raster order of first pixel via BFS."""
    mask = np.asarray(mask, bool)
    h, w = mask.shape
    nbrs = N8 if connectivity == 8 else N4
    ids = np.zeros((h, w), dtype=np.int64)
    n = 0
    for r in range(h):
        for c in range(w):
            if mask[r, c] and ids[r, c] == 0:
                n += 1
                ids[r, c] = n
                queue = deque([(r, c)])
                while queue:
                    y, x = queue.popleft()
                    for dy, dx in nbrs:
                        yy, xx = y + dy, x + dx
                        if 0 <= yy < h and 0 <= xx < w and mask[yy, xx] and ids[yy, xx] == 0:
                            ids[yy, xx] = n
                            queue.append((yy, xx))
    return ids, n


def boundary_pixels(mask):
    mask = np.asarray(mask, bool)
    h, w = mask.shape
    out = []
    for r in range(h):
        for c in range(w):
            if not mask[r, c]:
                continue
            for dr, dc in N4:
                rr, cc = r + dr, c + dc
                if not (0 <= rr < h and 0 <= cc < w) or not mask[rr, cc]:
                    out.append((r, c))
                    break
    return out


def brute_hausdorff(g, p):
    a, b = boundary_pixels(g), boundary_pixels(p)

    def directed(x, y):
        return max(min(math.sqrt((r - s) ** 2 + (c - t) ** 2) for s, t in y) for r, c in x)

    return max(directed(a, b), directed(b, a))


def replay_update(seed_labels, pred_labels, classes, beta, connectivity=8):
    """Step-by-step replay of the multi-object label update with brute-force pieces."""
    seed_labels = np.asarray(seed_labels)
    bg = classes - 1
    h, w = seed_labels.shape
    nbrs = N8 if connectivity == 8 else N4

    # step 1: seeds = same-class connected pieces, ordered by first raster pixel
    seeds, seed_cls, firsts = [], [], []
    for c in range(bg):
        ids, n = flood_fill(seed_labels == c, connectivity)
        for j in range(1, n + 1):
            bits = ids == j
            seeds.append(bits)
            seed_cls.append(c)
            firsts.append(int(np.flatnonzero(bits.ravel())[0]))
    order = np.argsort(firsts, kind="stable")
    seeds = [seeds[i] for i in order]
    seed_cls = [seed_cls[i] for i in order]

    # step 2: components of the binarised prediction
    comp_ids, n_comp = flood_fill(np.asarray(pred_labels) != bg, connectivity)

    # step 3: split components touching several seeds
    pieces = []
    for cid in range(1, n_comp + 1):
        comp = comp_ids == cid
        hits = [j for j, s in enumerate(seeds) if (s & comp).any()]
        if len(hits) < 2:
            pieces.append(comp)
            continue
        dists = {j: brute_distance_fast(seeds[j]) for j in hits}
        terr = {j: np.zeros((h, w), bool) for j in hits}
        for r in range(h):
            for c in range(w):
                if not comp[r, c]:
                    continue
                ds = sorted((dists[j][r, c], j) for j in hits)
                if ds[0][0] == ds[1][0]:
                    continue
                terr[ds[0][1]][r, c] = True
        for j in hits:
            ids, n = flood_fill(terr[j], connectivity)
            pieces.extend(ids == k for k in range(1, n + 1))
    pieces.sort(key=lambda m: int(np.flatnonzero(m.ravel())[0]))

    # step 4: pairing by 50% coverage, growth, conflict resolution
    best_phi = np.full((h, w), np.inf)
    owner = np.full((h, w), -1)
    for j, seed in enumerate(seeds):
        counts = [int((seed & p).sum()) for p in pieces]
        if not counts:
            continue
        k = int(np.argmax(counts))
        if counts[k] == 0 or 2 * counts[k] < seed.sum():
            continue
        phi = brute_phi(seed, pieces[k], beta)
        for r in range(h):
            for c in range(w):
                if phi[r, c] <= 0 and phi[r, c] < best_phi[r, c]:
                    best_phi[r, c] = phi[r, c]
                    owner[r, c] = j
    is_seed = np.zeros((h, w), bool)
    for j, seed in enumerate(seeds):
        owner[seed] = j
        is_seed |= seed
    drop = np.zeros((h, w), bool)
    for r in range(h):
        for c in range(w):
            o = owner[r, c]
            if o < 0 or is_seed[r, c]:
                continue
            for dr, dc in nbrs:
                rr, cc = r + dr, c + dc
                if 0 <= rr < h and 0 <= cc < w:
                    o2 = owner[rr, cc]
                    if o2 >= 0 and o2 != o and seed_cls[o2] == seed_cls[o]:
                        drop[r, c] = True
    owner[drop] = -1
    out = np.full((h, w), bg, dtype=np.uint8)
    for j, seed in enumerate(seeds):
        ids, _ = flood_fill(owner == j, connectivity)
        r, c = np.argwhere(seed)[0]
        out[ids == ids[r, c]] = seed_cls[j]
    return out
