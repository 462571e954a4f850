import numpy as np
import pytest

from pancseg.superpixel import SlicConfig, slic_2d
from pancseg.tps_augment import (
    AugmentConfig,
    augment_training_set,
    concat_datasets,
    deformation_seed,
    fit_tps,
    load_patch_dataset,
    random_tps,
    sample_patch,
    save_patch_dataset,
    scales_for_count,
    warp_image,
)


def _grid(n=4, span=30.0):
    ys = np.linspace(0, span, n)
    xs = np.linspace(0, span, n)
    return np.stack(np.meshgrid(ys, xs, indexing="ij"), axis=-1).reshape(-1, 2)


class TestFitTps:
    def test_identity_fit(self):
        src = _grid()
        warp = fit_tps(src, src)
        assert np.abs(warp.coefficients).max() <= 1e-10
        expected_affine = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        assert np.allclose(warp.affine, expected_affine, atol=1e-10)

    def test_pure_translation(self):
        src = _grid()
        warp = fit_tps(src, src + np.array([5.0, -3.0]))
        rng = np.random.default_rng(0)
        pts = rng.uniform(-10, 40, size=(50, 2))
        delta = warp(pts) - pts
        assert np.allclose(delta, [5.0, -3.0], atol=1e-9)

    @pytest.mark.parametrize("seed", range(8))
    def test_interpolation_residual(self, seed):
        rng = np.random.default_rng(seed)
        src = _grid()
        spacing = 10.0
        dst = src + rng.uniform(-0.3, 0.3, src.shape) * spacing
        warp = fit_tps(src, dst)
        assert np.abs(warp(src) - dst).max() < 1e-8

    @pytest.mark.parametrize("seed", range(8))
    def test_side_conditions(self, seed):
        rng = np.random.default_rng(seed + 100)
        src = _grid(n=int(rng.integers(3, 6)))
        dst = src + rng.uniform(-2, 2, src.shape)
        warp = fit_tps(src, dst)
        assert warp.side_condition_residual() < 1e-8

    def test_collinear_rejected(self):
        src = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
        with pytest.raises(ValueError, match="singular"):
            fit_tps(src, src + 1.0)

    def test_duplicate_rejected(self):
        src = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 2.0], [3.0, 1.0]])
        dst = src.copy()
        dst[0] += 0.5
        with pytest.raises(ValueError, match="singular"):
            fit_tps(src, dst)

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            fit_tps(np.zeros((2, 2)), np.zeros((2, 2)))


class TestWarpImage:
    def test_identity_warp_reproduces_input(self):
        rng = np.random.default_rng(1)
        img = rng.random((24, 20))
        src = _grid(span=19.0)
        warp = fit_tps(src, src)
        out = warp_image(img, warp)
        assert np.abs(out - img).max() <= 1e-6

    def test_constant_image_any_warp(self):
        img = np.full((32, 32), 0.42)
        warp = random_tps(AugmentConfig(patch_size=32, seed=5),
                          np.random.default_rng(5))
        out = warp_image(img, warp)
        assert np.allclose(out, 0.42, atol=1e-12)

    def test_integer_translation_matches_direct_shift(self):
        rng = np.random.default_rng(2)
        img = rng.random((40, 40))
        src = _grid(span=39.0)
        dy, dx = 3, -4
        warp = fit_tps(src, src + np.array([float(dy), float(dx)]))
        out = warp_image(img, warp)
        # interior pixels: out(y, x) = img(y + dy, x + dx)
        ys = np.arange(5, 35)
        xs = np.arange(5, 35)
        expected = img[np.ix_(ys + dy, xs + dx)]
        assert np.allclose(out[np.ix_(ys, xs)], expected, atol=1e-9)


class TestRandomTps:
    def test_zero_displacement_is_identity(self):
        cfg = AugmentConfig(max_displacement=0.0, patch_size=32)
        warp = random_tps(cfg, np.random.default_rng(0))
        pts = np.random.default_rng(1).uniform(0, 31, size=(64, 2))
        assert np.abs(warp(pts) - pts).max() < 1e-8

    def test_fixed_seed_reproducible(self):
        cfg = AugmentConfig(patch_size=48, seed=3)
        w1 = random_tps(cfg, np.random.default_rng(77))
        w2 = random_tps(cfg, np.random.default_rng(77))
        assert np.array_equal(w1.coefficients, w2.coefficients)
        assert np.array_equal(w1.affine, w2.affine)

    @pytest.mark.parametrize("seed", range(40))
    def test_fold_free_at_default_magnitude(self, seed):
        cfg = AugmentConfig(patch_size=32)
        warp = random_tps(cfg, np.random.default_rng(seed))
        yy, xx = np.mgrid[0:32:2, 0:32:2].astype(np.float64)
        pts = np.stack([yy.ravel(), xx.ravel()], axis=1)
        dets = warp.jacobian_determinants(pts)
        assert (dets > 0).all()


def _structured_slice(h=72, w=80, seed=0):
    rng = np.random.default_rng(seed)
    base = np.clip(rng.random((h, w)) * 0.6 + 0.2, 0, 1)
    yy, xx = np.mgrid[0:h, 0:w]
    base[((yy - h / 2) ** 2 + (xx - w / 2) ** 2) < 200] = 0.9
    return base


class TestSamplePatch:
    def test_identity_crop_when_bbox_matches(self):
        img = np.random.default_rng(0).random((64, 64))
        sp = slic_2d(np.full((64, 64), 0.5), SlicConfig(region_size=64))
        assert sp.count == 1
        patch = sample_patch(img, sp, 0, 1.0, warp=None, patch_size=64)
        assert np.array_equal(patch, img)

    def test_constant_slice_gives_constant_patch(self):
        img = np.full((48, 48), 0.33)
        sp = slic_2d(img, SlicConfig(region_size=12))
        warp = random_tps(AugmentConfig(patch_size=16),
                          np.random.default_rng(4))
        for scale in (1.0, 2.0, 3.0):
            patch = sample_patch(img, sp, 3, scale, warp=warp, patch_size=16)
            assert np.allclose(patch, 0.33, atol=1e-12)

    def test_scales_differ_on_structured_slice(self):
        img = _structured_slice()
        sp = slic_2d(img, SlicConfig(region_size=10, compactness=1.0))
        sp_id = int(sp.labels[36, 40])
        p1 = sample_patch(img, sp, sp_id, 1.0, patch_size=32)
        p2 = sample_patch(img, sp, sp_id, 2.0, patch_size=32)
        assert not np.allclose(p1, p2)

    def test_values_stay_in_range(self):
        img = _structured_slice(seed=9)
        sp = slic_2d(img, SlicConfig(region_size=10))
        warp = random_tps(AugmentConfig(patch_size=24),
                          np.random.default_rng(8))
        patch = sample_patch(img, sp, 0, 2.5, warp=warp, patch_size=24)
        assert patch.min() >= 0.0 and patch.max() <= 1.0

    def test_invalid_id(self):
        img = np.full((32, 32), 0.5)
        sp = slic_2d(img, SlicConfig(region_size=8))
        with pytest.raises(ValueError):
            sample_patch(img, sp, sp.count + 1, 1.0)


class TestAugmentSet:
    def _inputs(self, n_slices=2):
        slices, spmaps, retained, labels = [], [], [], []
        for s in range(n_slices):
            img = _structured_slice(seed=s)
            sp = slic_2d(img, SlicConfig(region_size=16))
            slices.append(img)
            spmaps.append(sp)
            ids = np.arange(min(5, sp.count), dtype=np.int32)
            retained.append(ids)
            lab = np.zeros(sp.count, np.uint8)
            lab[::2] = 1
            labels.append(lab)
        return slices, spmaps, retained, labels

    def test_count_paper_factors(self):
        slices, spmaps, retained, labels = self._inputs()
        # 10 retained superpixels total, N_s=2, N_t=8 -> 160 patches
        cfg = AugmentConfig(scales=scales_for_count(2), deformations=8,
                            patch_size=16, seed=0)
        ds = augment_training_set(slices, spmaps, retained, labels, cfg)
        assert len(ds) == 10 * 2 * 8

    def test_count_no_deformations(self):
        slices, spmaps, retained, labels = self._inputs()
        cfg = AugmentConfig(scales=scales_for_count(4), deformations=0,
                            patch_size=16, seed=0)
        ds = augment_training_set(slices, spmaps, retained, labels, cfg)
        assert len(ds) == 10 * 4
        assert (ds.provenance[:, 4] == -1).all()

    def test_labels_preserved(self):
        slices, spmaps, retained, labels = self._inputs()
        cfg = AugmentConfig(scales=(1.0, 2.0), deformations=2,
                            patch_size=16, seed=1)
        ds = augment_training_set(slices, spmaps, retained, labels, cfg,
                                  slice_indices=[0, 1])
        for row in range(len(ds)):
            _, sidx, sp_id, _, _ = ds.provenance[row]
            assert ds.labels[row] == labels[sidx][sp_id]

    def test_deterministic(self):
        slices, spmaps, retained, labels = self._inputs()
        cfg = AugmentConfig(scales=(1.0, 1.5), deformations=3,
                            patch_size=16, seed=11)
        d1 = augment_training_set(slices, spmaps, retained, labels, cfg)
        d2 = augment_training_set(slices, spmaps, retained, labels, cfg)
        assert np.array_equal(d1.patches, d2.patches)
        assert np.array_equal(d1.provenance, d2.provenance)

    def test_empty_retained_rejected(self):
        slices, spmaps, _, labels = self._inputs()
        empty = [np.empty(0, np.int32) for _ in slices]
        with pytest.raises(ValueError, match="empty"):
            augment_training_set(slices, spmaps, empty, labels,
                                 AugmentConfig(patch_size=16))

    def test_round_trip(self, tmp_path):
        slices, spmaps, retained, labels = self._inputs()
        cfg = AugmentConfig(scales=(1.0,), deformations=2, patch_size=16,
                            seed=2)
        ds = augment_training_set(slices, spmaps, retained, labels, cfg,
                                  volume_id="case_007")
        path = str(tmp_path / "patches.pspd")
        save_patch_dataset(ds, path)
        back = load_patch_dataset(path)
        assert np.array_equal(back.patches, ds.patches.astype("<f4"))
        assert np.array_equal(back.labels, ds.labels)
        assert np.array_equal(back.provenance, ds.provenance)
        assert back.volume_ids == ds.volume_ids

    def test_concat(self):
        slices, spmaps, retained, labels = self._inputs()
        cfg = AugmentConfig(scales=(1.0,), deformations=1, patch_size=16)
        a = augment_training_set(slices, spmaps, retained, labels, cfg,
                                 volume_index=0, volume_id="a")
        b = augment_training_set(slices, spmaps, retained, labels, cfg,
                                 volume_index=1, volume_id="b")
        both = concat_datasets([a, b])
        assert len(both) == len(a) + len(b)
        assert both.volume_ids == ["a", "b"]


def test_scales_for_count():
    assert scales_for_count(1) == (1.0,)
    assert scales_for_count(2) == (1.0, 2.0)
    assert scales_for_count(4) == (1.0, 1.5, 2.0, 2.5)


def test_deformation_seed_stable():
    a = deformation_seed(1, 2, 3, 4, 0, 1).random(4)
    b = deformation_seed(1, 2, 3, 4, 0, 1).random(4)
    c = deformation_seed(1, 2, 3, 4, 0, 2).random(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
