"""Dense probability assembly, separable 3D Gaussian smoothing, and
thresholding at the operation point."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .superpixel import SuperpixelMap


@dataclass(frozen=True)
class SmoothConfig:
    sigma: float = 3.0          # voxels
    radius_sigmas: float = 4.0  # kernel truncation radius, multiples of sigma

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if self.radius_sigmas < 2:
            raise ValueError("truncation radius must be >= 2 sigma")


def project_to_pixels(spmaps: list[SuperpixelMap],
                      retained: list[np.ndarray],
                      probs: list[dict[int, float]],
                      ) -> np.ndarray:
    """Per-slice painting of superpixel probabilities onto the voxel grid.

    Every pixel of a retained superpixel gets that superpixel's value;
    everything else is 0.  probs[z] maps retained ids to values in [0,1].
    """
    if not (len(spmaps) == len(retained) == len(probs)):
        raise ValueError("spmaps, retained, and probs must align per slice")
    h, w = spmaps[0].labels.shape
    out = np.zeros((len(spmaps), h, w), dtype=np.float32)
    for z, (spmap, ids, pz) in enumerate(zip(spmaps, retained, probs)):
        idset = set(int(i) for i in np.asarray(ids).ravel())
        lut = np.zeros(spmap.count, dtype=np.float32)
        for sp_id, value in pz.items():
            if int(sp_id) not in idset:
                raise ValueError(
                    f"slice {z}: probability given for superpixel {sp_id} "
                    "outside the retained set")
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"probability {value} outside [0,1]")
            lut[int(sp_id)] = value
        out[z] = lut[spmap.labels]
    return out


def gaussian_kernel1d(sigma: float, radius: int) -> np.ndarray:
    """Discretized, truncated, renormalized Gaussian; weights sum to 1."""
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


def _reflect_indices(n: int, radius: int) -> np.ndarray:
    """Source index for positions -radius..n-1+radius under reflection
    (edge sample not repeated), valid for any radius."""
    idx = np.arange(-radius, n + radius)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n - 2
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def _smooth_axis(vol: np.ndarray, weights: np.ndarray, axis: int) -> np.ndarray:
    n = vol.shape[axis]
    radius = len(weights) // 2
    if n == 1:
        return vol.copy()
    padded = np.take(vol, _reflect_indices(n, radius), axis=axis)
    out = np.zeros(vol.shape, dtype=np.float64)
    sl = [slice(None)] * vol.ndim
    for k, w in enumerate(weights):
        sl[axis] = slice(k, k + n)
        out += w * padded[tuple(sl)]
    return out


def gaussian_smooth_3d(pmap: np.ndarray, cfg: SmoothConfig | None = None
                       ) -> np.ndarray:
    """Separable 3-axis convolution with reflective boundaries.

    Internals run in float64; the result keeps the input dtype.  Constant
    maps are preserved and the output stays inside the input's range.
    """
    cfg = cfg or SmoothConfig()
    vol = np.asarray(pmap)
    if vol.ndim != 3:
        raise ValueError("probability map must be 3D")
    radius = int(np.ceil(cfg.radius_sigmas * cfg.sigma))
    weights = gaussian_kernel1d(cfg.sigma, radius)
    out = vol.astype(np.float64)
    for axis in range(3):
        out = _smooth_axis(out, weights, axis)
    return out.astype(vol.dtype, copy=False)


def threshold_map(pmap: np.ndarray, p: float) -> np.ndarray:
    """Binary mask: 1 where the map strictly exceeds p."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"threshold must be in [0,1], got {p}")
    return (np.asarray(pmap) > p).astype(np.uint8)
