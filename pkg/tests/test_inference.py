import numpy as np
import pytest

from pancseg.inference import (
    SmoothConfig,
    gaussian_kernel1d,
    gaussian_smooth_3d,
    project_to_pixels,
    threshold_map,
)
from pancseg.superpixel import SlicConfig, slic_2d


def _reflect(i, n):
    # independent coordinate folding for the dense oracle
    if n == 1:
        return 0
    period = 2 * n - 2
    i = i % period
    return period - i if i >= n else i


def dense_gaussian_oracle(vol, sigma, radius):
    """Brute-force full 3D convolution with the separable product kernel."""
    w1 = gaussian_kernel1d(sigma, radius)
    k = np.einsum("i,j,k->ijk", w1, w1, w1)
    nz, ny, nx = vol.shape
    out = np.zeros_like(vol, dtype=np.float64)
    offs = range(-radius, radius + 1)
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                acc = 0.0
                for dz in offs:
                    for dy in offs:
                        for dx in offs:
                            acc += (k[dz + radius, dy + radius, dx + radius]
                                    * vol[_reflect(z + dz, nz),
                                          _reflect(y + dy, ny),
                                          _reflect(x + dx, nx)])
                out[z, y, x] = acc
    return out


class TestSmoothing:
    def test_matches_dense_oracle_on_11cube(self):
        rng = np.random.default_rng(0)
        vol = rng.random((11, 11, 11))
        cfg = SmoothConfig(sigma=1.0, radius_sigmas=4.0)
        got = gaussian_smooth_3d(vol, cfg)
        want = dense_gaussian_oracle(vol, 1.0, 4)
        assert np.abs(got - want).max() < 1e-6

    def test_constant_preserved(self):
        vol = np.full((12, 10, 8), 0.37, dtype=np.float32)
        out = gaussian_smooth_3d(vol, SmoothConfig(sigma=2.0))
        assert np.abs(out - 0.37).max() < 1e-6

    def test_impulse_separable_product(self):
        vol = np.zeros((11, 11, 11))
        vol[5, 5, 5] = 1.0
        cfg = SmoothConfig(sigma=1.0, radius_sigmas=4.0)
        out = gaussian_smooth_3d(vol, cfg)
        w = gaussian_kernel1d(1.0, 4)
        for dz in (-2, 0, 3):
            for dy in (-1, 0, 2):
                for dx in (0, 1, -4):
                    want = (w[4 + dz] * w[4 + dy] * w[4 + dx])
                    assert out[5 + dz, 5 + dy, 5 + dx] == pytest.approx(
                        want, abs=1e-12)

    def test_range_bounds(self):
        rng = np.random.default_rng(3)
        vol = rng.random((9, 9, 9))
        out = gaussian_smooth_3d(vol, SmoothConfig(sigma=1.5))
        assert out.max() <= vol.max() + 1e-12
        assert out.min() >= vol.min() - 1e-12

    def test_kernel_radius_exceeding_axis(self):
        # sigma 3 -> radius 12 on an 8-deep stack: reflection must fold
        vol = np.random.default_rng(1).random((8, 32, 32)).astype(np.float32)
        out = gaussian_smooth_3d(vol, SmoothConfig(sigma=3.0))
        assert np.isfinite(out).all()
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_bad_sigma(self):
        with pytest.raises(ValueError):
            SmoothConfig(sigma=0.0)

    def test_kernel_normalized(self):
        for sigma in (0.5, 1.0, 3.0):
            w = gaussian_kernel1d(sigma, int(np.ceil(4 * sigma)))
            assert w.sum() == pytest.approx(1.0, abs=1e-12)
            assert np.array_equal(w, w[::-1])


class TestProject:
    def _stack(self, nz=3):
        spmaps = [slic_2d(np.full((24, 24), 0.5), SlicConfig(region_size=8))
                  for _ in range(nz)]
        return spmaps

    def test_single_superpixel(self):
        spmaps = self._stack(1)
        sp = spmaps[0]
        out = project_to_pixels(spmaps, [np.array([2])], [{2: 0.7}])
        inside = sp.labels == 2
        assert np.allclose(out[0][inside], 0.7)
        assert np.allclose(out[0][~inside], 0.0)

    def test_empty_retained_gives_zero(self):
        spmaps = self._stack(2)
        out = project_to_pixels(spmaps, [np.array([]), np.array([])],
                                [{}, {}])
        assert not out.any()

    def test_piecewise_constant(self):
        spmaps = self._stack(1)
        sp = spmaps[0]
        ids = np.arange(sp.count)
        probs = {int(i): float((i + 1) / (sp.count + 1)) for i in ids}
        out = project_to_pixels(spmaps, [ids], [probs])[0]
        for i in ids:
            vals = out[sp.labels == i]
            assert np.all(vals == vals.flat[0])

    def test_rejects_probability_outside_retained(self):
        spmaps = self._stack(1)
        with pytest.raises(ValueError, match="outside the retained set"):
            project_to_pixels(spmaps, [np.array([1])], [{0: 0.5}])

    def test_changing_one_superpixel_touches_only_it(self):
        spmaps = self._stack(1)
        sp = spmaps[0]
        ids = np.array([0, 1, 2])
        a = project_to_pixels(spmaps, [ids], [{0: 0.3, 1: 0.5, 2: 0.9}])
        b = project_to_pixels(spmaps, [ids], [{0: 0.3, 1: 0.8, 2: 0.9}])
        changed = a != b
        assert changed.any()
        assert np.all(sp.labels[changed[0]] == 1)


class TestThreshold:
    def test_zero_threshold_all_ones_on_positive(self):
        pm = np.full((2, 3, 4), 0.2)
        assert threshold_map(pm, 0.0).all()

    def test_one_threshold_all_zero(self):
        pm = np.random.default_rng(0).random((3, 3, 3))
        assert not threshold_map(pm, 1.0).any()

    def test_nested(self):
        pm = np.random.default_rng(1).random((4, 4, 4))
        hi = threshold_map(pm, 0.6)
        lo = threshold_map(pm, 0.4)
        assert not (hi & ~lo).any()

    def test_rejects_bad_threshold(self):
        with pytest.raises(ValueError):
            threshold_map(np.zeros((1, 1, 1)), 1.5)
