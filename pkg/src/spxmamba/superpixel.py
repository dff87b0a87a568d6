"""SLIC superpixels over principal-component planes.

Produces the token partition for the global branch: a per-pixel id map
whose ids are compact (0..n_sp-1), 4-connected, and ordered by first
occurrence in row-major scan — the same order used to lay superpixels out
as a 1-d token sequence downstream.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DataError, NumericError, UsageError
from .raster import PCImage

# Standardized PC channels are rescaled by this factor before entering the
# SLIC distance. Unit-variance channels make a strong edge worth ~2 units,
# which the spatial term (compactness 10) would steamroll; scaling to a
# Lab-like numeric range lets color dominate at real edges while the
# spatial term still regularizes flat regions.
COLOR_SCALE = 25.0


@dataclass
class SuperpixelMap:
    """Compact per-pixel partition; ids fixed in row-major first-occurrence order."""

    ids: np.ndarray        # [H, W] int32, values 0..n_sp-1
    n_sp: int
    sizes: np.ndarray      # [n_sp] pixel counts

    @property
    def shape(self) -> tuple[int, int]:
        return self.ids.shape


def _standardize(components: np.ndarray) -> np.ndarray:
    """Zero-mean unit-variance per channel, then COLOR_SCALE; dead channels -> 0."""
    out = np.empty_like(components, dtype=np.float64)
    for c in range(components.shape[0]):
        ch = components[c]
        std = ch.std()
        if std < 1e-12:
            out[c] = 0.0
        else:
            out[c] = (ch - ch.mean()) / std * COLOR_SCALE
    return out


def _lowest_gradient_shift(feats: np.ndarray, cy: int, cx: int) -> tuple[int, int]:
    """Move a seed to the lowest-gradient pixel in its 3x3 neighborhood.

    Gradient = squared central difference summed over channels; the seed
    stays put on ties so a flat image keeps the symmetric grid.
    """
    _, H, W = feats.shape
    padded = np.pad(feats, ((0, 0), (1, 1), (1, 1)), mode="edge")

    def grad(y, x):
        gx = padded[:, y + 1, x + 2] - padded[:, y + 1, x]
        gy = padded[:, y + 2, x + 1] - padded[:, y, x + 1]
        return float(np.sum(gx * gx) + np.sum(gy * gy))

    best_y, best_x = cy, cx
    best_g = grad(cy, cx)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            y, x = cy + dy, cx + dx
            if (dy, dx) == (0, 0) or not (0 <= y < H and 0 <= x < W):
                continue
            g = grad(y, x)
            if g < best_g:  # strict: the original center wins every tie
                best_g, best_y, best_x = g, y, x
    return best_y, best_x


def slic(pc: PCImage, n_sp_target: int = 500, compactness: float = 10.0,
         iters: int = 10, seed: int = 0) -> SuperpixelMap:
    """Grid-seeded local k-means with joint color/spatial distance.

    Distance d^2 = d_color^2 + (d_xy / s)^2 * m^2 with m = compactness and
    s the grid step; each center only competes within a 2s x 2s window.
    ``seed`` is reserved for interface stability — the algorithm is
    deterministic. Ends with connectivity enforcement and id compaction.
    """
    comps = np.asarray(pc.components, dtype=np.float64)
    if comps.ndim != 3:
        raise DataError(f"expected [C,H,W] components, got {comps.shape}")
    _, H, W = comps.shape
    if not np.all(np.isfinite(comps)):
        raise NumericError("non-finite values in PC components")
    if not (1 <= n_sp_target <= H * W):
        raise UsageError(f"n_sp_target {n_sp_target} outside 1..{H * W}")

    feats = _standardize(comps)
    s = float(np.sqrt(H * W / n_sp_target))
    m = float(compactness)

    ys = [int(s / 2 + i * s) for i in range(int(H / s)) if int(s / 2 + i * s) < H]
    xs = [int(s / 2 + j * s) for j in range(int(W / s)) if int(s / 2 + j * s) < W]
    ys = ys or [H // 2]
    xs = xs or [W // 2]
    centers = []
    for cy in ys:
        for cx in xs:
            py, px = _lowest_gradient_shift(feats, cy, cx)
            centers.append((feats[:, py, px].copy(), float(py), float(px)))

    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    reach = max(int(np.ceil(s)), 1)
    label = np.full((H, W), -1, dtype=np.int32)

    for _ in range(iters):
        dist = np.full((H, W), np.inf)
        label.fill(-1)
        for k, (col, cy, cx) in enumerate(centers):
            y0, y1 = max(0, int(cy) - reach), min(H, int(cy) + reach + 1)
            x0, x1 = max(0, int(cx) - reach), min(W, int(cx) + reach + 1)
            win = (slice(y0, y1), slice(x0, x1))
            dc2 = np.zeros((y1 - y0, x1 - x0))
            for c in range(feats.shape[0]):
                diff = feats[c][win] - col[c]
                dc2 += diff * diff
            dxy2 = (yy[win] - cy) ** 2 + (xx[win] - cx) ** 2
            d2 = dc2 + dxy2 * (m * m) / (s * s)
            # ties go to the later center so symmetric grids split evenly
            better = d2 <= dist[win]
            dist[win][better] = d2[better]
            lab_win = label[win]
            lab_win[better] = k
        if (label < 0).any():
            # corner pixels outside every window: brute-force nearest center
            miss = np.argwhere(label < 0)
            for y, x in miss:
                best, bk = np.inf, 0
                for k, (col, cy, cx) in enumerate(centers):
                    dc2 = float(np.sum((feats[:, y, x] - col) ** 2))
                    d2 = dc2 + ((y - cy) ** 2 + (x - cx) ** 2) * (m * m) / (s * s)
                    if d2 < best:
                        best, bk = d2, k
                label[y, x] = bk
        # recenter on the assigned pixels
        flat = label.ravel()
        counts = np.bincount(flat, minlength=len(centers)).astype(np.float64)
        sum_y = np.bincount(flat, weights=yy.ravel(), minlength=len(centers))
        sum_x = np.bincount(flat, weights=xx.ravel(), minlength=len(centers))
        sum_c = [np.bincount(flat, weights=feats[c].ravel(), minlength=len(centers))
                 for c in range(feats.shape[0])]
        new_centers = []
        for k, (col, cy, cx) in enumerate(centers):
            if counts[k] == 0:
                new_centers.append((col, cy, cx))
                continue
            ncol = np.array([sc[k] for sc in sum_c]) / counts[k]
            new_centers.append((ncol, sum_y[k] / counts[k], sum_x[k] / counts[k]))
        centers = new_centers

    return enforce_connectivity(label)


def _label_components(ids: np.ndarray):
    """Global 4-connected component map over a multi-label image."""
    comp = np.full(ids.shape, -1, dtype=np.int64)
    comp_id = []
    n = 0
    for u in np.unique(ids):
        mask = ids == u
        lab, k = ndimage.label(mask)
        comp[mask] = lab[mask] - 1 + n
        comp_id.extend([int(u)] * k)
        n += k
    sizes = np.bincount(comp.ravel(), minlength=n)
    return comp, np.asarray(comp_id), sizes, n


def _component_adjacency(comp: np.ndarray, n: int):
    pairs = []
    a, b = comp[:, :-1], comp[:, 1:]
    sel = a != b
    pairs.append(np.stack([a[sel], b[sel]], axis=1))
    a, b = comp[:-1, :], comp[1:, :]
    sel = a != b
    pairs.append(np.stack([a[sel], b[sel]], axis=1))
    edges = np.concatenate(pairs, axis=0)
    edges = np.unique(np.sort(edges, axis=1), axis=0)
    adj = [[] for _ in range(n)]
    for u, v in edges:
        adj[u].append(int(v))
        adj[v].append(int(u))
    return adj


def enforce_connectivity(ids: np.ndarray) -> SuperpixelMap:
    """Absorb too-small fragments and compact ids.

    Connected components smaller than a quarter of the mean superpixel
    area (H*W / n_sp_in / 4) merge into their largest adjacent component,
    smallest first, until none remain. Any id still split across several
    components afterwards keeps its largest one and the rest become fresh
    ids, so every final id is a single 4-connected region. Ids are
    renumbered by first occurrence in row-major order.
    """
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise DataError(f"ids must be [H,W], got {ids.shape}")
    if ids.min() < 0:
        raise DataError("ids must be non-negative")
    H, W = ids.shape
    work = ids.astype(np.int64).copy()
    threshold = (H * W / len(np.unique(work))) / 4.0

    for _ in range(16):
        comp, comp_id, sizes, n = _label_components(work)
        cands = [c for c in range(n) if sizes[c] < threshold]
        if not cands:
            break
        adj = _component_adjacency(comp, n)
        parent = np.arange(n)
        cur_size = sizes.astype(np.int64).copy()

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        cands.sort(key=lambda c: (sizes[c], c))
        merged_any = False
        for c in cands:
            rc = find(c)
            roots = sorted({find(v) for v in adj[c]} - {rc})
            if not roots:
                continue
            target = max(roots, key=lambda r: (cur_size[r], -r))
            parent[rc] = target
            cur_size[target] += cur_size[rc]
            merged_any = True
        if not merged_any:
            break
        root_of = np.array([find(c) for c in range(n)])
        new_id_of_comp = comp_id[root_of]
        work = new_id_of_comp[comp]

    # any leftover duplicate component of an id becomes a fresh id
    comp, comp_id, sizes, n = _label_components(work)
    largest = {}
    for c in range(n):
        u = comp_id[c]
        if u not in largest or sizes[c] > sizes[largest[u]]:
            largest[u] = c
    next_id = int(work.max()) + 1
    final_id_of_comp = comp_id.copy()
    for c in range(n):
        if c != largest[comp_id[c]]:
            final_id_of_comp[c] = next_id
            next_id += 1
    work = final_id_of_comp[comp]

    # compact by first occurrence in row-major order
    flat = work.ravel()
    _, first = np.unique(flat, return_index=True)
    order = flat[np.sort(first)]
    remap = np.full(order.max() + 1, -1, dtype=np.int64)
    remap[order] = np.arange(len(order))
    out = remap[flat].reshape(H, W).astype(np.int32)
    sizes = np.bincount(out.ravel(), minlength=len(order))
    return SuperpixelMap(ids=out, n_sp=int(len(order)), sizes=sizes)


def boundary_mask(ids: np.ndarray) -> np.ndarray:
    """Pixels with a 4-neighbor carrying a different id."""
    ids = np.asarray(ids)
    b = np.zeros(ids.shape, dtype=bool)
    b[:, :-1] |= ids[:, :-1] != ids[:, 1:]
    b[:, 1:] |= ids[:, :-1] != ids[:, 1:]
    b[:-1, :] |= ids[:-1, :] != ids[1:, :]
    b[1:, :] |= ids[:-1, :] != ids[1:, :]
    return b


def write_superpixels(path: str, sp: SuperpixelMap) -> None:
    """JSON header line {H, W, n_sp} then raw little-endian u32 ids."""
    H, W = sp.ids.shape
    header = {"H": H, "W": W, "n_sp": int(sp.n_sp)}
    with open(path, "wb") as f:
        f.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        f.write(sp.ids.astype("<u4").tobytes())


def read_superpixels(path: str) -> SuperpixelMap:
    with open(path, "rb") as f:
        line = f.readline()
        try:
            header = json.loads(line.decode("utf-8"))
            H, W, n_sp = int(header["H"]), int(header["W"]), int(header["n_sp"])
        except (ValueError, KeyError) as e:
            raise DataError(f"bad superpixel header in {path}: {e}") from None
        raw = f.read()
    if len(raw) != 4 * H * W:
        raise DataError(f"truncated superpixel file {path}")
    ids = np.frombuffer(raw, dtype="<u4").reshape(H, W).astype(np.int32)
    if ids.max() >= n_sp:
        raise DataError(f"superpixel ids exceed declared n_sp={n_sp} in {path}")
    sizes = np.bincount(ids.ravel(), minlength=n_sp)
    return SuperpixelMap(ids=ids, n_sp=n_sp, sizes=sizes)
