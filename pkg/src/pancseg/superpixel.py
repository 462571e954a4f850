"""2D SLIC superpixels per axial slice, geometry queries, and the
ground-truth majority labeling used as the pipeline's upper bound.

SLIC here is localized k-means over (intensity, position) on a scalar
image with distance D^2 = d_int^2 + (d_xy * m / S)^2, followed by a
connectivity pass that merges fragments below a size threshold into
their largest adjacent superpixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels


@dataclass(frozen=True)
class SlicConfig:
    region_size: int = 10
    compactness: float = 10.0
    iterations: int = 10
    min_region_fraction: float = 0.25

    def __post_init__(self):
        if self.region_size < 2:
            raise ValueError("region_size must be >= 2")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.compactness <= 0:
            raise ValueError("compactness must be > 0")
        if not 0.0 < self.min_region_fraction <= 1.0:
            raise ValueError("min_region_fraction must be in (0, 1]")


@dataclass
class SuperpixelMap:
    """Per-pixel superpixel ids for one slice plus per-superpixel stats.

    labels: (H, W) int32 with contiguous ids 0..count-1
    sizes: (count,) pixel counts
    centroids: (count, 2) mean (y, x)
    bboxes: (count, 4) tight boxes (y0, x0, y1, x1), half-open
    """

    labels: np.ndarray
    count: int
    sizes: np.ndarray
    centroids: np.ndarray
    bboxes: np.ndarray

    @property
    def slice_dims(self) -> tuple[int, int]:
        """(nx, ny)"""
        h, w = self.labels.shape
        return (w, h)

    def validate(self) -> None:
        """Check partition, contiguity, and 4-connectivity invariants."""
        labels = self.labels
        h, w = labels.shape
        counts = np.bincount(labels.ravel(), minlength=self.count)
        if labels.min() < 0 or labels.max() >= self.count:
            raise AssertionError("label ids outside [0, count)")
        if (counts == 0).any():
            raise AssertionError("label ids not contiguous")
        if counts.sum() != h * w:
            raise AssertionError("superpixel sizes do not partition the slice")
        if not np.array_equal(counts, self.sizes):
            raise AssertionError("cached sizes stale")
        comp, ncomp = _connected_components(labels)
        if ncomp != self.count:
            raise AssertionError("some superpixel is not 4-connected")


def _connected_components(labels: np.ndarray) -> tuple[np.ndarray, int]:
    """4-connected components of a label image (Jacobi min-propagation)."""
    h, w = labels.shape
    comp = np.arange(h * w, dtype=np.int64).reshape(h, w)
    while True:
        new = comp.copy()
        same = labels[1:] == labels[:-1]
        np.minimum(new[1:], np.where(same, comp[:-1], new[1:]), out=new[1:])
        np.minimum(new[:-1], np.where(same, comp[1:], new[:-1]), out=new[:-1])
        same = labels[:, 1:] == labels[:, :-1]
        np.minimum(new[:, 1:], np.where(same, comp[:, :-1], new[:, 1:]),
                   out=new[:, 1:])
        np.minimum(new[:, :-1], np.where(same, comp[:, 1:], new[:, :-1]),
                   out=new[:, :-1])
        if np.array_equal(new, comp):
            break
        comp = new
    _, inv = np.unique(comp, return_inverse=True)
    inv = inv.reshape(h, w).astype(np.int64)
    return inv, int(inv.max()) + 1


def _merge_small_components(comp: np.ndarray, ncomp: int, min_size: int
                            ) -> np.ndarray:
    """Union small components into their largest adjacent one."""
    sizes = np.bincount(comp.ravel(), minlength=ncomp).astype(np.int64)

    edges = set()
    for a, b in ((comp[:, :-1], comp[:, 1:]), (comp[:-1, :], comp[1:, :])):
        diff = a != b
        pairs = np.stack([a[diff], b[diff]], axis=1)
        if pairs.size:
            lo = pairs.min(axis=1)
            hi = pairs.max(axis=1)
            for u, v in np.unique(np.stack([lo, hi], axis=1), axis=0):
                edges.add((int(u), int(v)))
    neighbors: dict[int, set[int]] = {i: set() for i in range(ncomp)}
    for u, v in edges:
        neighbors[u].add(v)
        neighbors[v].add(u)

    parent = list(range(ncomp))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    while True:
        roots = sorted({find(i) for i in range(ncomp)})
        small = [(sizes[r], r) for r in roots
                 if sizes[r] < min_size and neighbors[r]]
        if not small:
            break
        _, r = min(small)
        # largest current neighbor; ties to the lowest id
        target = min(neighbors[r], key=lambda t: (-sizes[t], t))
        parent[r] = target
        sizes[target] += sizes[r]
        merged = neighbors.pop(r)
        merged.discard(target)
        neighbors[target].discard(r)
        for n in merged:
            neighbors[n].discard(r)
            neighbors[n].add(target)
            neighbors[target].add(n)

    rootmap = np.array([find(i) for i in range(ncomp)], dtype=np.int64)
    return rootmap[comp]


def _renumber_scan_order(labels: np.ndarray) -> tuple[np.ndarray, int]:
    """Relabel to contiguous ids ordered by first appearance in scan order."""
    flat = labels.ravel()
    uniq, first = np.unique(flat, return_index=True)
    order = uniq[np.argsort(first)]
    remap = np.empty(int(flat.max()) + 1, dtype=np.int32)
    remap[order] = np.arange(len(order), dtype=np.int32)
    return remap[labels], len(order)


def _superpixel_stats(labels: np.ndarray, count: int):
    h, w = labels.shape
    flat = labels.ravel()
    sizes = np.bincount(flat, minlength=count).astype(np.int64)
    yy, xx = np.mgrid[0:h, 0:w]
    cy = np.bincount(flat, weights=yy.ravel(), minlength=count) / sizes
    cx = np.bincount(flat, weights=xx.ravel(), minlength=count) / sizes
    y0 = np.full(count, h, dtype=np.int64)
    x0 = np.full(count, w, dtype=np.int64)
    y1 = np.zeros(count, dtype=np.int64)
    x1 = np.zeros(count, dtype=np.int64)
    np.minimum.at(y0, flat, yy.ravel())
    np.minimum.at(x0, flat, xx.ravel())
    np.maximum.at(y1, flat, yy.ravel())
    np.maximum.at(x1, flat, xx.ravel())
    bboxes = np.stack([y0, x0, y1 + 1, x1 + 1], axis=1).astype(np.int32)
    centroids = np.stack([cy, cx], axis=1)
    return sizes, centroids, bboxes


def _seed_grid(image: np.ndarray, region: int) -> np.ndarray:
    """Integer seed positions, perturbed to the lowest-gradient spot in a
    3x3 neighborhood (strictly lower than the seed's own gradient)."""
    h, w = image.shape
    nsy = max(1, int(round(h / region)))
    nsx = max(1, int(round(w / region)))
    ys = np.floor((np.arange(nsy) + 0.5) * h / nsy).astype(np.int64)
    xs = np.floor((np.arange(nsx) + 0.5) * w / nsx).astype(np.int64)

    gy, gx = np.gradient(image)
    grad = np.hypot(gy, gx)
    seeds = []
    for sy in ys:
        for sx in xs:
            best = (grad[sy, sx], 0, 0)
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    ny, nx = sy + dy, sx + dx
                    if 0 <= ny < h and 0 <= nx < w and grad[ny, nx] < best[0]:
                        best = (grad[ny, nx], dy, dx)
            seeds.append((sy + best[1], sx + best[2]))
    return np.asarray(seeds, dtype=np.int64)


def slic_2d(image: np.ndarray, cfg: SlicConfig | None = None) -> SuperpixelMap:
    """Cluster a normalized [0,1] slice into compact superpixels."""
    cfg = cfg or SlicConfig()
    img = np.ascontiguousarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("slic_2d expects a 2D slice")
    h, w = img.shape
    if h < cfg.region_size or w < cfg.region_size:
        raise ValueError(
            f"image {w}x{h} smaller than one region ({cfg.region_size})")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("slice intensities must be in [0,1]")

    seeds = _seed_grid(img, cfg.region_size)
    centers = np.stack([seeds[:, 0].astype(np.float64),
                        seeds[:, 1].astype(np.float64),
                        img[seeds[:, 0], seeds[:, 1]]], axis=1)
    centers = np.ascontiguousarray(centers)
    scale = cfg.compactness / cfg.region_size
    half = 2 * cfg.region_size

    labels = None
    for _ in range(cfg.iterations):
        labels, _ = _kernels.slic_assign(img, centers, half, scale)
        if (labels < 0).any():
            _assign_orphans(img, labels, centers, scale)
        flat = labels.ravel().astype(np.int64)
        counts = np.bincount(flat, minlength=len(centers))
        nz = counts > 0
        yy, xx = np.mgrid[0:h, 0:w]
        sy = np.bincount(flat, weights=yy.ravel(), minlength=len(centers))
        sx = np.bincount(flat, weights=xx.ravel(), minlength=len(centers))
        si = np.bincount(flat, weights=img.ravel(), minlength=len(centers))
        centers[nz, 0] = sy[nz] / counts[nz]
        centers[nz, 1] = sx[nz] / counts[nz]
        centers[nz, 2] = si[nz] / counts[nz]

    comp, ncomp = _connected_components(labels.astype(np.int64))
    min_size = max(1, int(cfg.min_region_fraction * cfg.region_size ** 2))
    merged = _merge_small_components(comp, ncomp, min_size)
    final, count = _renumber_scan_order(merged)
    sizes, centroids, bboxes = _superpixel_stats(final, count)
    return SuperpixelMap(labels=final.astype(np.int32), count=count,
                         sizes=sizes, centroids=centroids, bboxes=bboxes)


def _assign_orphans(img, labels, centers, scale):
    """Pixels outside every search window get the globally nearest center."""
    oy, ox = np.nonzero(labels < 0)
    dint = img[oy, ox][:, None] - centers[None, :, 2]
    dy = oy[:, None] - centers[None, :, 0]
    dx = ox[:, None] - centers[None, :, 1]
    d2 = dint * dint + (dy * dy + dx * dx) * scale * scale
    labels[oy, ox] = np.argmin(d2, axis=1).astype(labels.dtype)


def optimal_labeling(spmap: SuperpixelMap, gt_slice: np.ndarray) -> np.ndarray:
    """Per-superpixel labels: 1 iff strictly more than half the pixels are
    foreground (the majority fill used for training labels and the upper
    bound)."""
    if gt_slice.shape != spmap.labels.shape:
        raise ValueError(
            f"mask shape {gt_slice.shape} != labels {spmap.labels.shape}")
    fg = np.bincount(spmap.labels.ravel()[gt_slice.ravel() > 0],
                     minlength=spmap.count)
    return (2 * fg > spmap.sizes).astype(np.uint8)


def reconstruct_mask(spmap: SuperpixelMap, sp_labels: np.ndarray) -> np.ndarray:
    """Paint per-superpixel labels back onto the pixel grid."""
    if len(sp_labels) != spmap.count:
        raise ValueError("label vector length != superpixel count")
    return np.asarray(sp_labels, dtype=np.uint8)[spmap.labels]


def scaled_bbox(spmap: SuperpixelMap, sp_id: int, s: float
                ) -> tuple[float, float, float, float]:
    """Tight bbox grown by factor s about its center, clamped to the slice.

    Returns (y0, x0, y1, x1) in continuous half-open coordinates.
    """
    if not 0 <= sp_id < spmap.count:
        raise ValueError(f"invalid superpixel id {sp_id}")
    if s < 1.0:
        raise ValueError("scale factor must be >= 1")
    h, w = spmap.labels.shape
    y0, x0, y1, x1 = (float(v) for v in spmap.bboxes[sp_id])
    cy, cx = (y0 + y1) / 2.0, (x0 + x1) / 2.0
    hy, hx = (y1 - y0) / 2.0 * s, (x1 - x0) / 2.0 * s
    return (max(cy - hy, 0.0), max(cx - hx, 0.0),
            min(cy + hy, float(h)), min(cx + hx, float(w)))
