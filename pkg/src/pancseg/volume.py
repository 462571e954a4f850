"""Volume/mask data model, MetaImage-style file I/O, HU windowing, and
synthetic phantom generation.

Voxel arrays are stored (nz, ny, nx) in C order so the raw byte stream is
x-fastest, matching the on-disk layout.  The file format is a minimal
MetaImage-style text header plus a separate little-endian raw payload:

    NDims = 3
    DimSize = <nx> <ny> <nz>
    ElementSpacing = <sx> <sy> <sz>
    ElementType = MET_FLOAT | MET_UCHAR | MET_INT
    ElementDataFile = <relative raw file>

An optional ``IntensityKind = HU | normalized`` line tags float volumes.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np


class FormatError(ValueError):
    """Malformed volume file (header or payload)."""


_ELEMENT_TYPES = {
    "MET_FLOAT": np.dtype("<f4"),
    "MET_UCHAR": np.dtype("u1"),
    "MET_INT": np.dtype("<i4"),
}

HU = "HU"
NORMALIZED = "normalized"


@dataclass(frozen=True)
class Volume:
    """A 3D scalar image; voxels shaped (nz, ny, nx)."""

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    intensity_kind: str = HU

    def __post_init__(self):
        v = self.voxels
        if v.ndim != 3:
            raise ValueError(f"expected 3D voxel array, got ndim={v.ndim}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"non-positive spacing {self.spacing}")
        if self.intensity_kind not in (HU, NORMALIZED):
            raise ValueError(f"unknown intensity kind {self.intensity_kind!r}")
        if self.intensity_kind == NORMALIZED:
            lo, hi = float(v.min()), float(v.max())
            if lo < 0.0 or hi > 1.0:
                raise ValueError(
                    f"normalized volume outside [0,1]: min={lo}, max={hi}"
                )

    @property
    def dims(self) -> tuple[int, int, int]:
        """(nx, ny, nz)"""
        nz, ny, nx = self.voxels.shape
        return (nx, ny, nz)

    def slice_xy(self, z: int) -> np.ndarray:
        """Axial slice z as a (ny, nx) array."""
        return self.voxels[z]


@dataclass(frozen=True)
class LabelMask:
    """Binary ground-truth mask aligned with a Volume."""

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        v = self.voxels
        if v.ndim != 3:
            raise ValueError(f"expected 3D mask array, got ndim={v.ndim}")
        if v.dtype != np.uint8:
            raise ValueError(f"mask must be uint8, got {v.dtype}")
        bad = (v > 1).any()
        if bad:
            raise ValueError("mask values must be in {0, 1}")

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.voxels.shape
        return (nx, ny, nz)


@dataclass(frozen=True)
class PhantomConfig:
    """Synthetic phantom parameters; fully determines the output."""

    dims: tuple[int, int, int] = (96, 96, 32)
    seed: int = 0
    blob_count: int = 6          # 1 target + (blob_count - 1) distractors
    blob_elongation: float = 3.0
    texture_amplitude: float = 0.6
    contrast_gap: float = 35.0   # HU between foreground and background means
    fat_margin_fraction: float = 0.35

    def __post_init__(self):
        nx, ny, nz = self.dims
        if nx < 32 or ny < 32 or nz < 8:
            raise ValueError(f"phantom dims below minimum (32,32,8): {self.dims}")
        if self.contrast_gap < 0:
            raise ValueError("contrast_gap must be >= 0")
        if not 0.0 <= self.fat_margin_fraction <= 1.0:
            raise ValueError("fat_margin_fraction must be in [0,1]")
        if self.blob_count < 1:
            raise ValueError("blob_count must be >= 1")


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

_REQUIRED_FIELDS = ("NDims", "DimSize", "ElementSpacing", "ElementType",
                    "ElementDataFile")


def _parse_header(path: str) -> dict[str, str]:
    with open(path, "r", encoding="ascii") as fh:
        text = fh.read()
    fields: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected 'Key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        if key in fields:
            raise FormatError(f"{path}: duplicate header field {key!r}")
        fields[key] = value.strip()
    for req in _REQUIRED_FIELDS:
        if req not in fields:
            raise FormatError(f"{path}: missing header field {req!r}")
    return fields


def _read_raw(path: str):
    """Parse header + payload; returns (array (nz,ny,nx), spacing, fields)."""
    fields = _parse_header(path)
    if fields["NDims"] != "3":
        raise FormatError(f"{path}: only NDims = 3 supported")
    try:
        dims = tuple(int(t) for t in fields["DimSize"].split())
        spacing = tuple(float(t) for t in fields["ElementSpacing"].split())
    except ValueError as exc:
        raise FormatError(f"{path}: bad DimSize/ElementSpacing: {exc}") from None
    if len(dims) != 3 or len(spacing) != 3:
        raise FormatError(f"{path}: DimSize and ElementSpacing need 3 entries")
    if any(d <= 0 for d in dims):
        raise FormatError(f"{path}: non-positive dims {dims}")
    if any(s <= 0 for s in spacing):
        raise FormatError(f"{path}: non-positive spacing {spacing}")
    etype = fields["ElementType"]
    if etype not in _ELEMENT_TYPES:
        raise FormatError(f"{path}: unsupported ElementType {etype!r}")
    dtype = _ELEMENT_TYPES[etype]
    raw_path = os.path.join(os.path.dirname(path) or ".", fields["ElementDataFile"])
    if not os.path.exists(raw_path):
        raise FormatError(f"{path}: raw payload {raw_path!r} not found")
    nx, ny, nz = dims
    expected = nx * ny * nz * dtype.itemsize
    actual = os.path.getsize(raw_path)
    if actual != expected:
        raise FormatError(
            f"{path}: payload size mismatch (expected {expected} bytes for "
            f"dims {dims}, raw file has {actual})"
        )
    data = np.fromfile(raw_path, dtype=dtype).reshape(nz, ny, nx)
    return data, spacing, fields


def _write_raw(path: str, array: np.ndarray, spacing, etype: str,
               extra: dict[str, str] | None = None):
    nz, ny, nx = array.shape
    stem = os.path.splitext(os.path.basename(path))[0]
    raw_name = stem + ".raw"
    lines = [
        "NDims = 3",
        f"DimSize = {nx} {ny} {nz}",
        "ElementSpacing = {} {} {}".format(*(repr(float(s)) for s in spacing)),
        f"ElementType = {etype}",
    ]
    for key, value in (extra or {}).items():
        lines.append(f"{key} = {value}")
    lines.append(f"ElementDataFile = {raw_name}")
    raw_path = os.path.join(os.path.dirname(path) or ".", raw_name)
    array.astype(_ELEMENT_TYPES[etype], copy=False).tofile(raw_path)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def save_volume(volume: Volume, path: str) -> None:
    """Write header + raw pair; float32 payload, x-fastest order."""
    _write_raw(path, volume.voxels.astype("<f4", copy=False), volume.spacing,
               "MET_FLOAT", {"IntensityKind": volume.intensity_kind})


def load_volume(path: str) -> Volume:
    data, spacing, fields = _read_raw(path)
    if data.dtype != np.dtype("<f4"):
        raise FormatError(f"{path}: expected MET_FLOAT volume, got {fields['ElementType']}")
    kind = fields.get("IntensityKind", HU)
    return Volume(voxels=data, spacing=tuple(spacing), intensity_kind=kind)


def save_mask(mask: LabelMask, path: str) -> None:
    _write_raw(path, mask.voxels, mask.spacing, "MET_UCHAR")


def load_mask(path: str) -> LabelMask:
    data, spacing, fields = _read_raw(path)
    if data.dtype != np.uint8:
        raise FormatError(f"{path}: expected MET_UCHAR mask, got {fields['ElementType']}")
    return LabelMask(voxels=data, spacing=tuple(spacing))


def save_label_stack(labels: np.ndarray, path: str,
                     spacing=(1.0, 1.0, 1.0)) -> None:
    """Persist a 3D int32 stack of per-slice superpixel labelings."""
    if labels.ndim != 3:
        raise ValueError("label stack must be 3D")
    _write_raw(path, labels.astype("<i4", copy=False), spacing, "MET_INT")


def load_label_stack(path: str) -> np.ndarray:
    data, _, fields = _read_raw(path)
    if data.dtype != np.dtype("<i4"):
        raise FormatError(f"{path}: expected MET_INT stack, got {fields['ElementType']}")
    return data


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def window_hu(volume: Volume, lo: float, hi: float) -> Volume:
    """Clamp-and-rescale HU intensities into [0, 1]."""
    if lo >= hi:
        raise ValueError(f"window requires lo < hi, got ({lo}, {hi})")
    scaled = (volume.voxels.astype(np.float32) - lo) / (hi - lo)
    np.clip(scaled, 0.0, 1.0, out=scaled)
    return Volume(voxels=scaled, spacing=volume.spacing, intensity_kind=NORMALIZED)


# ---------------------------------------------------------------------------
# phantom generation
# ---------------------------------------------------------------------------

def _value_noise(shape, cell, rng) -> np.ndarray:
    """Smooth lattice noise in [-1, 1]: uniforms on a coarse grid,
    trilinearly upsampled.  cell may be per-axis (cz, cy, cx)."""
    cells = (cell, cell, cell) if np.isscalar(cell) else tuple(cell)
    grid = [int(np.ceil((s - 1) / c)) + 2 for s, c in zip(shape, cells)]
    lattice = rng.uniform(-1.0, 1.0, size=grid)
    out = lattice
    for axis, (s, c) in enumerate(zip(shape, cells)):
        coords = np.arange(s, dtype=np.float64) / c
        i0 = np.floor(coords).astype(np.int64)
        frac = coords - i0
        a = np.take(out, i0, axis=axis)
        b = np.take(out, i0 + 1, axis=axis)
        sh = [1, 1, 1]
        sh[axis] = s
        frac = frac.reshape(sh)
        out = a * (1.0 - frac) + b * frac
    return out


def _dilate(mask: np.ndarray, steps: int = 1) -> np.ndarray:
    """6-connectivity binary dilation by repeated unit shifts."""
    out = mask.copy()
    for _ in range(steps):
        d = out.copy()
        d[1:] |= out[:-1]
        d[:-1] |= out[1:]
        d[:, 1:] |= out[:, :-1]
        d[:, :-1] |= out[:, 1:]
        d[:, :, 1:] |= out[:, :, :-1]
        d[:, :, :-1] |= out[:, :, 1:]
        out = d
    return out


def _largest_component(mask: np.ndarray) -> np.ndarray:
    """Largest 6-connected component of a boolean volume."""
    remaining = mask.copy()
    best = None
    while remaining.any():
        seed_flat = int(np.argmax(remaining))
        comp = np.zeros_like(mask)
        comp.flat[seed_flat] = True
        while True:
            grown = _dilate(comp) & mask
            grown |= comp
            if grown.sum() == comp.sum():
                break
            comp = grown
        remaining &= ~comp
        if best is None or comp.sum() > best.sum():
            best = comp
    return best if best is not None else mask


def _tube_mask(shape, rng, ry, rz, elongation, jitter=(0.06, 0.08, 0.16)):
    """Superellipsoid tube bent along a parabolic spine (axis = x)."""
    nz, ny, nx = shape
    jx, jy, jz = jitter
    halflen = 0.5 * min(2.0 * elongation * np.sqrt(ry * rz), 0.78 * nx)
    mid_x = nx / 2.0 + rng.uniform(-jx, jx) * nx
    cy = ny / 2.0 + rng.uniform(-jy, jy) * ny
    cz = nz / 2.0 + rng.uniform(-jz, jz) * nz
    bend = rng.uniform(0.08, 0.20) * ny * rng.choice([-1.0, 1.0])
    tilt = rng.uniform(-0.12, 0.12) * nz
    power = rng.uniform(2.0, 3.0)

    zz, yy, xx = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx),
                             indexing="ij")
    u = (xx - mid_x) / halflen
    inside_x = np.abs(u) < 1.0
    taper = np.power(np.clip(1.0 - u * u, 0.0, None), 0.35)
    yc = cy + bend * (u * u - 0.5)
    zc = cz + tilt * u
    eps = 1e-9
    yn = np.abs(yy - yc) / (ry * taper + eps)
    zn = np.abs(zz - zc) / (rz * taper + eps)
    mask = inside_x & (np.power(yn, power) + np.power(zn, power) <= 1.0)
    return mask


def _place_distractors(shape, rng, count, radius, target, keepout):
    """Ellipsoid blobs placed clear of the target (plus keepout margin),
    center-biased like the anatomy they stand in for.  Returns a bool
    volume."""
    nz, ny, nx = shape
    out = np.zeros(shape, dtype=bool)
    tz, tyy, txx = np.nonzero(target)
    tpos = np.stack([tz, tyy, txx], axis=1).astype(np.float64)
    zz, yy, xx = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx),
                             indexing="ij")
    placed = 0
    attempts = 0
    while placed < count and attempts < 60 * max(count, 1):
        attempts += 1
        r = radius * rng.uniform(0.6, 1.1)
        # center-biased placement keeps position from giving blobs away
        cz = np.clip(rng.normal(nz / 2.0, 0.25 * nz), r * 0.4, nz - r * 0.4)
        cy = np.clip(rng.normal(ny / 2.0, 0.25 * ny), r, ny - r)
        cx = np.clip(rng.normal(nx / 2.0, 0.25 * nx), r, nx - r)
        center = np.array([cz, cy, cx])
        az = r * rng.uniform(0.35, 0.8)
        ay = r * rng.uniform(0.6, 1.6)
        ax = r * rng.uniform(0.6, 1.6)
        if tpos.size:
            gap = np.sqrt(((tpos - center) ** 2).sum(axis=1)).min()
            if gap < max(ax, ay, az) + keepout:
                continue
        blob = (((zz - cz) / az) ** 2 + ((yy - cy) / ay) ** 2
                + ((xx - cx) / ax) ** 2) <= 1.0
        if (blob & out).any():
            continue
        out |= blob
        placed += 1
    return out


def _ring_with_gaps(ring, mask, rng, width_range=(0.35 * np.pi, 0.9 * np.pi)):
    """Erase a random angular arc of the margin ring on every slice.

    Mimics slice-to-slice contrast variation: the affected sector looks
    locally like an unringed structure, so per-slice decisions there are
    ambiguous and only cross-slice pooling resolves them.  Gap angles and
    widths are drawn independently per slice.
    """
    out = ring.copy()
    nz = ring.shape[0]
    for z in range(nz):
        sel = ring[z]
        if not sel.any():
            continue
        base = mask[z] if mask[z].any() else sel
        ys, xs = np.nonzero(base)
        cy, cx = ys.mean(), xs.mean()
        ry, rx = np.nonzero(sel)
        ang = np.arctan2(ry - cy, rx - cx)
        theta = rng.uniform(-np.pi, np.pi)
        width = rng.uniform(*width_range)
        delta = np.angle(np.exp(1j * (ang - theta)))
        erase = np.abs(delta) < width / 2.0
        out[z][ry[erase], rx[erase]] = False
    return out


def _shift_bool(mask, offset, axis):
    out = np.zeros_like(mask)
    n = mask.shape[axis]
    offset = int(offset)
    if abs(offset) >= n:
        return out
    src = [slice(None)] * mask.ndim
    dst = [slice(None)] * mask.ndim
    if offset >= 0:
        dst[axis] = slice(offset, n)
        src[axis] = slice(0, n - offset)
    else:
        dst[axis] = slice(0, n + offset)
        src[axis] = slice(-offset, n)
    out[tuple(dst)] = mask[tuple(src)]
    return out


def _partial_shell(tube, ring_steps, rng):
    """Dark margin around a distractor tube with wider per-slice gaps than
    the target's ring: single slices of the two structures overlap in
    appearance, but their ring coverage separates in the z-average."""
    shell = _dilate(tube, ring_steps) & ~tube
    return _ring_with_gaps(shell, tube, rng,
                           width_range=(0.7 * np.pi, 1.4 * np.pi))


def _place_tube_distractors(shape, rng, count, ry, rz, elongation, forbidden,
                            ring_steps):
    """Tubes with the target's geometry and a partial dark shell, central
    in-plane but shifted into clear z-slabs (or diagonally) so they survive
    collision rejection.  Locally they match the target's appearance; only
    the unclosed margin ring tells them apart."""
    nz, ny, nx = shape
    placed = np.zeros(shape, dtype=bool)
    shells = np.zeros(shape, dtype=bool)
    for _ in range(count):
        for _attempt in range(25):
            sub = np.random.default_rng(rng.integers(2 ** 63))
            fy = ry * sub.uniform(0.8, 1.15)
            fz = min(rz * sub.uniform(0.6, 0.9), 0.11 * nz)
            el = elongation * sub.uniform(0.7, 1.2)
            jitter = (0.08, 0.08, 0.04)
            if sub.random() < 0.5:
                cand = _tube_mask(shape, sub, fy, fz, el, jitter)
            else:
                cand = _tube_mask((nz, nx, ny), sub, fy, fz, el, jitter)
                cand = cand.swapaxes(1, 2)
            if sub.random() < 0.7:
                dz = sub.choice([-1.0, 1.0]) * sub.uniform(0.24, 0.36) * nz
                cand = _shift_bool(cand, round(dz), axis=0)
            else:
                dy = sub.choice([-1.0, 1.0]) * sub.uniform(0.15, 0.22) * ny
                dz = sub.choice([-1.0, 1.0]) * sub.uniform(0.08, 0.14) * nz
                cand = _shift_bool(_shift_bool(cand, round(dy), axis=1),
                                   round(dz), axis=0)
            if cand.sum() < 50:
                continue
            shell = _partial_shell(cand, ring_steps, sub)
            footprint = cand | shell
            if not (footprint & forbidden).any() \
                    and not (footprint & (placed | shells)).any():
                placed |= cand
                shells |= shell
                break
    return placed, shells


def make_phantom(cfg: PhantomConfig) -> tuple[Volume, LabelMask]:
    """Deterministic synthetic volume + ground truth for desk-scale runs.

    The target is a connected elongated blob (1-5% of voxels) wrapped in a
    dark margin ring.  The background carries the same multiplicative
    texture plus bright tube distractors without rings (so local patch
    statistics cannot separate them) and small dark blobs that make
    dark-pixel proximity an unreliable shortcut.
    """
    rng = np.random.default_rng(cfg.seed)
    nx, ny, nz = cfg.dims
    shape = (nz, ny, nx)
    total = nx * ny * nz

    aspect = rng.uniform(1.2, 1.8)
    rbar = 0.105 * np.sqrt(ny * nz) * rng.uniform(0.9, 1.1)
    target_frac = rng.uniform(0.018, 0.032)
    mask = None
    for _ in range(3):
        ry = rbar * np.sqrt(aspect)
        rz = rbar / np.sqrt(aspect)
        geom_rng = np.random.default_rng(rng.integers(2 ** 63))
        mask = _largest_component(_tube_mask(shape, geom_rng, ry, rz,
                                             cfg.blob_elongation))
        frac = mask.sum() / total
        if 0.012 <= frac <= 0.045:
            break
        rbar *= np.sqrt(target_frac / max(frac, 1e-6)) ** 0.9
        rbar = float(np.clip(rbar, 2.0, 0.3 * min(ny, nz)))

    ring_steps = max(1, int(round(cfg.fat_margin_fraction * rbar * 0.6)))
    ring = _dilate(mask, ring_steps) & ~mask
    ring = _ring_with_gaps(ring, mask, rng)

    distractors = np.zeros(shape, dtype=bool)
    shells = np.zeros(shape, dtype=bool)
    dark_blobs = np.zeros(shape, dtype=bool)
    if cfg.blob_count > 1:
        forbidden = _dilate(mask, ring_steps + 2)
        distractors, shells = _place_tube_distractors(
            shape, rng, cfg.blob_count - 1, ry, rz, cfg.blob_elongation,
            forbidden, ring_steps)
        dark_blobs = _place_distractors(
            shape, rng, max(1, cfg.blob_count - 2),
            radius=max(2.0, 0.7 * rbar),
            target=mask | distractors | shells, keepout=ring_steps + 2.0)
    distractors &= ~(mask | ring)
    shells &= ~(mask | ring | distractors)
    dark_blobs &= ~(mask | ring | distractors | shells)

    bg_mean = 45.0
    fg_mean = bg_mean + cfg.contrast_gap
    fat_mean = -80.0
    mean_field = np.full(shape, bg_mean)
    mean_field[distractors] = fg_mean
    mean_field[shells] = fat_mean
    mean_field[dark_blobs] = fat_mean
    mean_field[ring] = fat_mean
    mean_field[mask] = fg_mean

    # fine z-cells decorrelate the texture between adjacent slices, so
    # per-slice classification noise is independent across z
    noise = (0.6 * _value_noise(shape, (1.8, 5.0, 5.0), rng)
             + 0.4 * _value_noise(shape, (1.2, 2.5, 2.5), rng))
    grain = rng.normal(0.0, 6.0, size=shape)
    hu = mean_field * (1.0 + cfg.texture_amplitude * noise) + grain

    volume = Volume(voxels=hu.astype(np.float32), intensity_kind=HU)
    label = LabelMask(voxels=mask.astype(np.uint8))
    return volume, label
