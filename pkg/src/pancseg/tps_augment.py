"""Thin-plate-spline warps, multi-scale superpixel patch sampling, and
training-set augmentation.

Warps live in patch coordinates: a regular (gx, gy) control grid spans the
output patch, control points get uniform random displacements bounded by a
fraction of the grid spacing, and the fitted spline maps output-patch
coordinates to source coordinates (backward warping).  Points are (y, x).
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .superpixel import SuperpixelMap, scaled_bbox


def _phi(r: np.ndarray) -> np.ndarray:
    """Thin-plate kernel r^2 log r with phi(0) = 0."""
    out = np.zeros_like(r)
    pos = r > 0
    rp = r[pos]
    out[pos] = rp * rp * np.log(rp)
    return out


@dataclass
class TpsWarp:
    """t(p) = affine(p) + sum_i c_i phi(|p - w_i|), p = (y, x)."""

    control_points: np.ndarray  # (K, 2)
    coefficients: np.ndarray    # (K, 2)
    affine: np.ndarray          # (3, 2); rows: constant, y, x

    def __call__(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        d = pts[:, None, :] - self.control_points[None, :, :]
        r = np.sqrt((d * d).sum(axis=2))
        u = _phi(r)
        ones = np.ones((len(pts), 1))
        return np.hstack([ones, pts]) @ self.affine + u @ self.coefficients

    def side_condition_residual(self) -> float:
        """Max violation of sum(c) = 0 and sum(c * w) = 0 (componentwise)."""
        s0 = np.abs(self.coefficients.sum(axis=0)).max()
        s1 = np.abs((self.coefficients[:, :, None]
                     * self.control_points[:, None, :]).sum(axis=0)).max()
        return float(max(s0, s1))

    def jacobian_determinants(self, points: np.ndarray,
                              h: float = 1e-4) -> np.ndarray:
        """Central-difference Jacobian determinant at each point."""
        pts = np.asarray(points, dtype=np.float64)
        ey = np.array([h, 0.0])
        ex = np.array([0.0, h])
        dy = (self(pts + ey) - self(pts - ey)) / (2 * h)
        dx = (self(pts + ex) - self(pts - ex)) / (2 * h)
        return dy[:, 0] * dx[:, 1] - dy[:, 1] * dx[:, 0]


def fit_tps(source: np.ndarray, target: np.ndarray) -> TpsWarp:
    """Exact-interpolation TPS: the warp maps each source point to its
    target.  Solves the standard augmented system (radial + affine part)."""
    src = np.asarray(source, dtype=np.float64)
    dst = np.asarray(target, dtype=np.float64)
    if src.ndim != 2 or src.shape[1] != 2 or src.shape != dst.shape:
        raise ValueError("source/target must both be (K, 2)")
    k = len(src)
    if k < 3:
        raise ValueError("need at least 3 control points")

    d = src[:, None, :] - src[None, :, :]
    kmat = _phi(np.sqrt((d * d).sum(axis=2)))
    p = np.hstack([np.ones((k, 1)), src])
    lmat = np.zeros((k + 3, k + 3))
    lmat[:k, :k] = kmat
    lmat[:k, k:] = p
    lmat[k:, :k] = p.T
    rhs = np.zeros((k + 3, 2))
    rhs[:k] = dst
    try:
        sol = np.linalg.solve(lmat, rhs)
    except np.linalg.LinAlgError:
        raise ValueError("singular TPS system "
                         "(collinear or duplicate control points)") from None
    warp = TpsWarp(control_points=src, coefficients=sol[:k], affine=sol[k:])
    resid = np.abs(warp(src) - dst).max()
    if not np.isfinite(resid) or resid > 1e-6:
        raise ValueError("singular TPS system "
                         f"(interpolation residual {resid:.3g})")
    return warp


def warp_image(image: np.ndarray, warp: TpsWarp) -> np.ndarray:
    """Backward warping with bilinear interpolation and edge clamping."""
    img = np.ascontiguousarray(image)
    if img.ndim != 2 or img.size == 0:
        raise ValueError("warp_image expects a non-empty 2D image")
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w]
    pts = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float64)
    src = warp(pts)
    vals = _kernels.bilinear_sample(img, np.ascontiguousarray(src[:, 1]),
                                    np.ascontiguousarray(src[:, 0]))
    return vals.reshape(h, w)


@dataclass(frozen=True)
class AugmentConfig:
    scales: tuple[float, ...] = (1.0, 2.0)
    deformations: int = 8               # per scale; 0 = undeformed only
    grid: tuple[int, int] = (4, 4)      # (gx, gy) control points
    max_displacement: float = 0.25      # fraction of control-grid spacing
    patch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if not self.scales or any(s < 1.0 for s in self.scales):
            raise ValueError("scales must be non-empty, each >= 1")
        if not 0.0 <= self.max_displacement <= 0.5:
            raise ValueError("max_displacement must be in [0, 0.5]")
        if self.deformations < 0:
            raise ValueError("deformations must be >= 0")
        if self.grid[0] < 2 or self.grid[1] < 2:
            raise ValueError("control grid must be at least 2x2")
        if self.patch_size < 2:
            raise ValueError("patch_size must be >= 2")


def scales_for_count(n_s: int) -> tuple[float, ...]:
    """Default scale schedules: 1 -> {1}, 2 -> {1,2}, 4 -> {1,1.5,2,2.5}."""
    if n_s < 1:
        raise ValueError("scale count must be >= 1")
    if n_s == 2:
        return (1.0, 2.0)
    return tuple(1.0 + 0.5 * i for i in range(n_s))


def random_tps(cfg: AugmentConfig, rng) -> TpsWarp:
    """Random small deformation on the patch's control grid; fold-free at
    the default magnitude (positive Jacobian determinant everywhere)."""
    gx, gy = cfg.grid
    p = cfg.patch_size
    ys = np.linspace(0.0, p - 1.0, gy)
    xs = np.linspace(0.0, p - 1.0, gx)
    spacing_y = ys[1] - ys[0]
    spacing_x = xs[1] - xs[0]
    src = np.stack(np.meshgrid(ys, xs, indexing="ij"), axis=-1).reshape(-1, 2)
    disp = np.stack([
        rng.uniform(-cfg.max_displacement * spacing_y,
                    cfg.max_displacement * spacing_y, size=len(src)),
        rng.uniform(-cfg.max_displacement * spacing_x,
                    cfg.max_displacement * spacing_x, size=len(src)),
    ], axis=1)
    if cfg.max_displacement == 0.0:
        disp[:] = 0.0
    return fit_tps(src, src + disp)


def sample_patch(slice_img: np.ndarray, spmap: SuperpixelMap, sp_id: int,
                 scale: float, warp: TpsWarp | None = None,
                 patch_size: int = 64) -> np.ndarray:
    """Resample the scaled bounding box of one superpixel to a square patch,
    optionally deformed: out(p) = slice(bbox_map(warp(p)))."""
    y0, x0, y1, x1 = scaled_bbox(spmap, sp_id, scale)
    p = patch_size
    py, px = np.mgrid[0:p, 0:p].astype(np.float64)
    pts = np.stack([py.ravel(), px.ravel()], axis=1)
    if warp is not None:
        pts = warp(pts)
    sy = y0 + (pts[:, 0] + 0.5) * (y1 - y0) / p - 0.5
    sx = x0 + (pts[:, 1] + 0.5) * (x1 - x0) / p - 0.5
    img = np.ascontiguousarray(slice_img)
    vals = _kernels.bilinear_sample(img, np.ascontiguousarray(sx),
                                    np.ascontiguousarray(sy))
    return vals.reshape(p, p)


@dataclass
class PatchDataset:
    """Augmented labeled patches with provenance.

    provenance columns: volume index, slice, superpixel id, scale index,
    deformation index (-1 when undeformed).
    """

    patches: np.ndarray    # (M, P, P) float32
    labels: np.ndarray     # (M,) uint8
    provenance: np.ndarray  # (M, 5) int32
    volume_ids: list[str]

    def __len__(self):
        return len(self.patches)


def deformation_seed(global_seed: int, volume: int, slice_idx: int,
                     sp_id: int, scale_idx: int, deform_idx: int):
    """Schedule-independent per-patch random stream."""
    return np.random.default_rng(np.random.SeedSequence(
        (global_seed, volume, slice_idx, sp_id, scale_idx, deform_idx)))


def augment_training_set(slices: list[np.ndarray],
                         spmaps: list[SuperpixelMap],
                         retained: list[np.ndarray],
                         labels: list[np.ndarray],
                         cfg: AugmentConfig,
                         slice_indices: list[int] | None = None,
                         volume_index: int = 0,
                         volume_id: str = "volume0") -> PatchDataset:
    """Emit |retained| * N_s * max(N_t, 1) labeled patches.

    ``labels[i]`` holds the per-superpixel majority labels for slice i;
    every patch carries its superpixel's label.  Deterministic for a fixed
    config seed regardless of iteration schedule.
    """
    if slice_indices is None:
        slice_indices = list(range(len(slices)))
    total_retained = sum(len(r) for r in retained)
    if total_retained == 0:
        raise ValueError("retained superpixel set is empty")
    n_deform = max(cfg.deformations, 1)
    deformed = cfg.deformations > 0

    m = total_retained * len(cfg.scales) * n_deform
    patches = np.empty((m, cfg.patch_size, cfg.patch_size), dtype=np.float32)
    out_labels = np.empty(m, dtype=np.uint8)
    provenance = np.empty((m, 5), dtype=np.int32)

    row = 0
    for img, spmap, ids, sp_labels, sidx in zip(slices, spmaps, retained,
                                                labels, slice_indices):
        img = np.ascontiguousarray(img, dtype=np.float64)
        for sp_id in np.sort(np.asarray(ids)):
            for scale_idx, scale in enumerate(cfg.scales):
                for d in range(n_deform):
                    if deformed:
                        rng = deformation_seed(cfg.seed, volume_index, sidx,
                                               int(sp_id), scale_idx, d)
                        warp = random_tps(cfg, rng)
                        deform_idx = d
                    else:
                        warp = None
                        deform_idx = -1
                    patch = sample_patch(img, spmap, int(sp_id), scale,
                                         warp, cfg.patch_size)
                    patches[row] = patch.astype(np.float32)
                    out_labels[row] = sp_labels[int(sp_id)]
                    provenance[row] = (volume_index, sidx, int(sp_id),
                                       scale_idx, deform_idx)
                    row += 1
    assert row == m
    return PatchDataset(patches=patches, labels=out_labels,
                        provenance=provenance, volume_ids=[volume_id])


def concat_datasets(datasets: list[PatchDataset]) -> PatchDataset:
    if not datasets:
        raise ValueError("no datasets to concatenate")
    return PatchDataset(
        patches=np.concatenate([d.patches for d in datasets]),
        labels=np.concatenate([d.labels for d in datasets]),
        provenance=np.concatenate([d.provenance for d in datasets]),
        volume_ids=[v for d in datasets for v in d.volume_ids])


_DATASET_MAGIC = b"PSPD"


def save_patch_dataset(ds: PatchDataset, path: str) -> None:
    m, p, _ = ds.patches.shape
    label_width = ds.labels.dtype.itemsize
    with open(path, "wb") as fh:
        fh.write(_DATASET_MAGIC)
        fh.write(struct.pack("<IIIII", 1, m, p, label_width,
                             len(ds.volume_ids)))
        for vid in ds.volume_ids:
            raw = vid.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
        fh.write(ds.patches.astype("<f4").tobytes())
        fh.write(ds.labels.astype("u1").tobytes())
        fh.write(ds.provenance.astype("<i4").tobytes())


def load_patch_dataset(path: str) -> PatchDataset:
    with open(path, "rb") as fh:
        if fh.read(4) != _DATASET_MAGIC:
            raise ValueError(f"{path}: not a patch dataset file")
        version, m, p, label_width, nvol = struct.unpack("<IIIII",
                                                         fh.read(20))
        if version != 1:
            raise ValueError(f"{path}: unsupported dataset version {version}")
        if label_width != 1:
            raise ValueError(f"{path}: unsupported label width {label_width}")
        volume_ids = []
        for _ in range(nvol):
            (n,) = struct.unpack("<H", fh.read(2))
            volume_ids.append(fh.read(n).decode("utf-8"))
        patches = np.frombuffer(fh.read(4 * m * p * p),
                                dtype="<f4").reshape(m, p, p).copy()
        labels = np.frombuffer(fh.read(m), dtype="u1").copy()
        provenance = np.frombuffer(fh.read(4 * m * 5),
                                   dtype="<i4").reshape(m, 5).copy()
    return PatchDataset(patches=patches, labels=labels,
                        provenance=provenance, volume_ids=volume_ids)
