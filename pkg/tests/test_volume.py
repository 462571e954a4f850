import numpy as np
import pytest

from pancseg.volume import (
    HU,
    NORMALIZED,
    FormatError,
    LabelMask,
    PhantomConfig,
    Volume,
    load_mask,
    load_volume,
    make_phantom,
    save_mask,
    save_volume,
    window_hu,
)


def _volume(arr, kind=HU, spacing=(1.0, 1.0, 1.0)):
    return Volume(voxels=np.asarray(arr, dtype=np.float32), spacing=spacing,
                  intensity_kind=kind)


class TestVolumeType:
    def test_dims_order(self):
        v = _volume(np.zeros((4, 3, 2)))
        assert v.dims == (2, 3, 4)

    def test_rejects_nonpositive_spacing(self):
        with pytest.raises(ValueError, match="spacing"):
            _volume(np.zeros((2, 2, 2)), spacing=(1.0, 1.0, 0.0))

    def test_rejects_normalized_out_of_range(self):
        with pytest.raises(ValueError, match="normalized"):
            _volume(np.full((2, 2, 2), 1.5), kind=NORMALIZED)

    def test_mask_values_restricted(self):
        with pytest.raises(ValueError):
            LabelMask(voxels=np.full((2, 2, 2), 3, dtype=np.uint8))


class TestRoundTrip:
    def test_tiny_volume_identity(self, tmp_path):
        v = _volume(np.arange(8, dtype=np.float32).reshape(2, 2, 2))
        path = str(tmp_path / "v.mhd")
        save_volume(v, path)
        back = load_volume(path)
        assert np.array_equal(back.voxels, v.voxels)
        assert back.dims == v.dims
        assert back.spacing == v.spacing
        assert back.intensity_kind == HU

    def test_single_voxel(self, tmp_path):
        v = _volume(np.full((1, 1, 1), -37.5), spacing=(0.5, 2.0, 3.0))
        path = str(tmp_path / "one.mhd")
        save_volume(v, path)
        assert np.array_equal(load_volume(path).voxels, v.voxels)

    @pytest.mark.parametrize("seed", range(20))
    def test_random_volumes_bit_exact(self, tmp_path, seed):
        rng = np.random.default_rng(seed)
        shape = tuple(rng.integers(1, 9, size=3))
        v = _volume(rng.normal(0, 200, size=shape).astype(np.float32),
                    spacing=tuple(rng.uniform(0.2, 3.0, size=3)))
        path = str(tmp_path / f"r{seed}.mhd")
        save_volume(v, path)
        back = load_volume(path)
        assert back.voxels.tobytes() == v.voxels.astype("<f4").tobytes()

    def test_mask_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        m = LabelMask(voxels=(rng.random((4, 5, 6)) > 0.5).astype(np.uint8))
        path = str(tmp_path / "m.mhd")
        save_mask(m, path)
        assert np.array_equal(load_mask(path).voxels, m.voxels)

    def test_phantom_round_trip(self, tmp_path):
        v, m = make_phantom(PhantomConfig(dims=(32, 32, 8), seed=7))
        save_volume(v, str(tmp_path / "p.mhd"))
        save_mask(m, str(tmp_path / "pm.mhd"))
        assert np.array_equal(load_volume(str(tmp_path / "p.mhd")).voxels, v.voxels)
        assert np.array_equal(load_mask(str(tmp_path / "pm.mhd")).voxels, m.voxels)

    def test_unwritable_path(self):
        v = _volume(np.zeros((1, 1, 1)))
        with pytest.raises(OSError):
            save_volume(v, "/nonexistent-dir-xyz/v.mhd")


class TestHeaderErrors:
    def _write(self, tmp_path, header, payload_bytes):
        raw = tmp_path / "v.raw"
        raw.write_bytes(payload_bytes)
        hdr = tmp_path / "v.mhd"
        hdr.write_text(header)
        return str(hdr)

    def test_payload_size_mismatch(self, tmp_path):
        header = ("NDims = 3\nDimSize = 2 2 2\nElementSpacing = 1 1 1\n"
                  "ElementType = MET_FLOAT\nElementDataFile = v.raw\n")
        path = self._write(tmp_path, header, b"\x00" * (7 * 4))
        with pytest.raises(FormatError, match="payload size mismatch"):
            load_volume(path)

    def test_nonpositive_spacing(self, tmp_path):
        header = ("NDims = 3\nDimSize = 2 2 2\nElementSpacing = 1 1 0\n"
                  "ElementType = MET_FLOAT\nElementDataFile = v.raw\n")
        path = self._write(tmp_path, header, b"\x00" * (8 * 4))
        with pytest.raises(FormatError, match="non-positive spacing"):
            load_volume(path)

    def test_nonpositive_dims(self, tmp_path):
        header = ("NDims = 3\nDimSize = 2 0 2\nElementSpacing = 1 1 1\n"
                  "ElementType = MET_FLOAT\nElementDataFile = v.raw\n")
        path = self._write(tmp_path, header, b"")
        with pytest.raises(FormatError, match="non-positive dims"):
            load_volume(path)

    def test_missing_field(self, tmp_path):
        header = ("NDims = 3\nDimSize = 2 2 2\nElementSpacing = 1 1 1\n"
                  "ElementDataFile = v.raw\n")
        path = self._write(tmp_path, header, b"\x00" * (8 * 4))
        with pytest.raises(FormatError, match="missing header field"):
            load_volume(path)

    def test_duplicate_field(self, tmp_path):
        header = ("NDims = 3\nNDims = 3\nDimSize = 2 2 2\nElementSpacing = 1 1 1\n"
                  "ElementType = MET_FLOAT\nElementDataFile = v.raw\n")
        path = self._write(tmp_path, header, b"\x00" * (8 * 4))
        with pytest.raises(FormatError, match="duplicate header field"):
            load_volume(path)


class TestWindow:
    def test_endpoints_and_midpoint(self):
        v = _volume(np.array([[[-160.0, 240.0, 40.0]]]))
        w = window_hu(v, -160.0, 240.0)
        assert w.intensity_kind == NORMALIZED
        assert w.voxels[0, 0, 0] == 0.0
        assert w.voxels[0, 0, 1] == 1.0
        assert w.voxels[0, 0, 2] == pytest.approx(0.5)

    def test_rejects_bad_window(self):
        v = _volume(np.zeros((1, 1, 1)))
        with pytest.raises(ValueError):
            window_hu(v, 10.0, 10.0)

    def test_monotone(self):
        rng = np.random.default_rng(0)
        xs = np.sort(rng.uniform(-500, 500, size=64))
        v = _volume(xs.reshape(1, 1, -1))
        w = window_hu(v, -100, 200).voxels.ravel()
        assert (np.diff(w) >= 0).all()

    def test_idempotent_on_unit_window(self):
        rng = np.random.default_rng(1)
        data = rng.random((3, 4, 5)).astype(np.float32)
        v = Volume(voxels=data, intensity_kind=NORMALIZED)
        w = window_hu(v, 0.0, 1.0)
        assert np.allclose(w.voxels, data, atol=1e-7)


class TestPhantom:
    def test_deterministic(self):
        cfg = PhantomConfig(seed=11)
        v1, m1 = make_phantom(cfg)
        v2, m2 = make_phantom(cfg)
        assert np.array_equal(v1.voxels, v2.voxels)
        assert np.array_equal(m1.voxels, m2.voxels)

    def test_seed_changes_mask(self):
        _, m1 = make_phantom(PhantomConfig(seed=1))
        _, m2 = make_phantom(PhantomConfig(seed=2))
        assert not np.array_equal(m1.voxels, m2.voxels)

    def test_dims_match_and_minimum(self):
        v, m = make_phantom(PhantomConfig(dims=(48, 40, 16), seed=0))
        assert v.dims == (48, 40, 16)
        assert m.dims == v.dims
        with pytest.raises(ValueError):
            PhantomConfig(dims=(16, 16, 4))

    def test_connected(self):
        from pancseg.volume import _largest_component

        _, m = make_phantom(PhantomConfig(seed=5))
        fg = m.voxels.astype(bool)
        assert fg.sum() == _largest_component(fg).sum()

    @pytest.mark.slow
    def test_foreground_fraction_over_100_seeds(self):
        for seed in range(100):
            _, m = make_phantom(PhantomConfig(seed=seed))
            frac = m.voxels.mean()
            assert 0.01 <= frac <= 0.05, f"seed {seed}: fraction {frac:.4f}"
