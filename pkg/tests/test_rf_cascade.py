import numpy as np
import pytest

from pancseg.rf_cascade import (
    APPEARANCE_SLICE,
    BASE_FEATURE_COUNT,
    CascadeConfig,
    ForestConfig,
    cascade_apply,
    extract_patch_features,
    forest_from_bytes,
    forest_to_bytes,
    load_cascade,
    predict_forest,
    predict_forest_batch,
    retain_superpixels,
    save_cascade,
    train_cascade,
    train_forest,
    Tree,
    RandomForestModel,
    _tree_predict,
)
from pancseg.superpixel import SlicConfig, slic_2d


class TestFeatures:
    def test_constant_patch(self):
        img = np.full((32, 32), 0.7)
        fv = extract_patch_features(img, (16, 16), 9)
        assert len(fv) == BASE_FEATURE_COUNT
        assert fv[0] == pytest.approx(0.7)   # mean
        assert fv[1] == pytest.approx(0.0)   # std
        assert fv[13] == pytest.approx(0.0)  # gradient mean
        assert fv[14] == pytest.approx(0.0)  # gradient std

    def test_translation_invariance_of_appearance_block(self):
        img = np.full((40, 40), 0.3)
        a = extract_patch_features(img, (12, 14), 7)[APPEARANCE_SLICE]
        b = extract_patch_features(img, (25, 20), 7)[APPEARANCE_SLICE]
        assert np.array_equal(a, b)

    def test_step_edge_gradient(self):
        img = np.zeros((31, 31))
        img[:, 15:] = 1.0
        fv = extract_patch_features(img, (15, 15), 9)
        assert fv[13] > 0.0

    def test_even_patch_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            extract_patch_features(np.zeros((16, 16)), (8, 8), 8)

    def test_all_finite_on_random(self):
        rng = np.random.default_rng(0)
        img = rng.random((21, 33))
        for center in [(0, 0), (20, 32), (10, 16)]:
            fv = extract_patch_features(img, center, 11)
            assert np.isfinite(fv).all()


def _two_cluster_data(seed=0, n=200):
    rng = np.random.default_rng(seed)
    a = rng.normal(-2.0, 0.4, size=(n // 2, 6))
    b = rng.normal(2.0, 0.4, size=(n // 2, 6))
    x = np.concatenate([a, b])
    y = np.concatenate([np.zeros(n // 2, np.int64), np.ones(n // 2, np.int64)])
    perm = rng.permutation(n)
    return x[perm], y[perm]


class TestForest:
    def test_separable_clusters_high_accuracy(self):
        x, y = _two_cluster_data()
        model = train_forest(x, y, ForestConfig(n_trees=16, seed=1))
        pred = predict_forest_batch(model, x) > 0.5
        assert (pred == y).mean() >= 0.95
        assert model.oob_error <= 0.1

    def test_single_class_rejected(self):
        x = np.random.default_rng(0).random((10, 3))
        with pytest.raises(ValueError, match="single-class"):
            train_forest(x, np.ones(10, np.int64))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            train_forest(np.empty((0, 3)), np.empty(0, np.int64))

    def test_deterministic_serialization(self):
        x, y = _two_cluster_data(3)
        cfg = ForestConfig(n_trees=8, seed=42)
        m1 = train_forest(x, y, cfg)
        m2 = train_forest(x, y, cfg)
        assert forest_to_bytes(m1) == forest_to_bytes(m2)

    def test_round_trip_bit_exact(self):
        x, y = _two_cluster_data(5)
        model = train_forest(x, y, ForestConfig(n_trees=4, seed=9))
        back = forest_from_bytes(forest_to_bytes(model))
        assert forest_to_bytes(back) == forest_to_bytes(model)
        assert np.array_equal(predict_forest_batch(back, x),
                              predict_forest_batch(model, x))

    def test_single_tree_leaf_prob(self):
        leaf = Tree(feature=np.array([-1], np.int32),
                    threshold=np.zeros(1), left=np.array([-1], np.int32),
                    right=np.array([-1], np.int32), prob=np.array([1.0]))
        model = RandomForestModel(trees=[leaf], feature_count=3,
                                  feature_version=1, seed=0, max_depth=1,
                                  oob_error=0.0)
        assert predict_forest(model, np.zeros(3)) == 1.0

    def test_vote_mean(self):
        def leaf(p):
            return Tree(feature=np.array([-1], np.int32),
                        threshold=np.zeros(1), left=np.array([-1], np.int32),
                        right=np.array([-1], np.int32), prob=np.array([p]))
        model = RandomForestModel(trees=[leaf(1.0), leaf(1.0), leaf(0.0),
                                         leaf(0.0)],
                                  feature_count=2, feature_version=1, seed=0,
                                  max_depth=1, oob_error=0.0)
        assert predict_forest(model, np.zeros(2)) == 0.5

    def test_mean_of_trees_oracle(self):
        x, y = _two_cluster_data(7)
        model = train_forest(x, y, ForestConfig(n_trees=8, seed=2))
        probe = np.random.default_rng(1).normal(0, 2, size=(40, 6))
        expected = np.mean([_tree_predict(t, probe) for t in model.trees],
                           axis=0)
        assert np.allclose(predict_forest_batch(model, probe), expected,
                           atol=1e-12)
        assert (predict_forest_batch(model, probe) >= 0).all()
        assert (predict_forest_batch(model, probe) <= 1).all()

    def test_length_mismatch(self):
        x, y = _two_cluster_data(1)
        model = train_forest(x, y, ForestConfig(n_trees=2, seed=0))
        with pytest.raises(ValueError, match="feature length"):
            predict_forest(model, np.zeros(4))


def _toy_slice(seed=0, h=48, w=48, blob=True):
    rng = np.random.default_rng(seed)
    img = 0.45 + rng.normal(0, 0.04, (h, w))
    gt = np.zeros((h, w), np.uint8)
    if blob:
        yy, xx = np.mgrid[0:h, 0:w]
        cy = h / 2 + rng.uniform(-4, 4)
        cx = w / 2 + rng.uniform(-6, 6)
        inside = ((yy - cy) ** 2 / 64 + (xx - cx) ** 2 / 100) <= 1
        ring = (((yy - cy) ** 2 / 110 + (xx - cx) ** 2 / 150) <= 1) & ~inside
        img[inside] += 0.18
        img[ring] -= 0.25
        gt[inside] = 1
    return np.clip(img, 0, 1), gt


@pytest.fixture(scope="module")
def toy_cascade():
    slices, gts = zip(*(_toy_slice(s) for s in range(6)))
    cfg = CascadeConfig(patch_size=9, stride=4,
                        forest=ForestConfig(n_trees=12, max_depth=10, seed=3),
                        samples_per_slice=240)
    return train_cascade(list(slices), list(gts), cfg), cfg


class TestCascade:
    def test_response_in_range_and_separates(self, toy_cascade):
        model, cfg = toy_cascade
        img, gt = _toy_slice(99)
        rmap = model.apply(img)
        assert rmap.shape == img.shape
        assert rmap.min() >= 0.0 and rmap.max() <= 1.0
        assert rmap[gt > 0].mean() > rmap[gt == 0].mean()

    def test_zero_level1_never_evaluates_level2(self, toy_cascade):
        model, cfg = toy_cascade

        def leaf(p):
            return Tree(feature=np.array([-1], np.int32),
                        threshold=np.zeros(1), left=np.array([-1], np.int32),
                        right=np.array([-1], np.int32), prob=np.array([p]))

        zero_l1 = RandomForestModel(
            trees=[leaf(0.0)], feature_count=model.level1.feature_count,
            feature_version=1, seed=0, max_depth=1, oob_error=0.0)
        poison_l2 = RandomForestModel(
            trees=[Tree(feature=np.array([0], np.int32),
                        threshold=np.array([np.nan]),
                        left=np.array([-1], np.int32),
                        right=np.array([-1], np.int32),
                        prob=np.array([np.nan]))],
            feature_count=model.level2.feature_count,
            feature_version=1, seed=0, max_depth=1, oob_error=0.0)
        img, _ = _toy_slice(5)
        rmap = cascade_apply(zero_l1, poison_l2, img, cfg)
        assert (rmap < cfg.gate).all()
        assert np.isfinite(rmap).all()

    def test_gate_zero_evaluates_everywhere(self, toy_cascade):
        model, cfg = toy_cascade
        open_cfg = CascadeConfig(patch_size=cfg.patch_size, stride=cfg.stride,
                                 gate=0.0, forest=cfg.forest,
                                 samples_per_slice=cfg.samples_per_slice)
        img, gt = _toy_slice(11)
        rmap = cascade_apply(model.level1, model.level2, img, open_cfg)
        assert rmap.min() >= 0.0 and rmap.max() <= 1.0
        # a poisoned level-2 proves it really ran at every grid point
        poison = RandomForestModel(
            trees=[Tree(feature=np.array([-1], np.int32),
                        threshold=np.zeros(1), left=np.array([-1], np.int32),
                        right=np.array([-1], np.int32),
                        prob=np.array([np.nan]))],
            feature_count=model.level2.feature_count,
            feature_version=1, seed=0, max_depth=1, oob_error=0.0)
        rmap = cascade_apply(model.level1, poison, img, open_cfg)
        assert np.isnan(rmap).all()

    def test_feature_version_mismatch(self, toy_cascade):
        model, cfg = toy_cascade
        bad = RandomForestModel(trees=model.level2.trees,
                                feature_count=model.level2.feature_count,
                                feature_version=99, seed=0, max_depth=1,
                                oob_error=0.0)
        with pytest.raises(ValueError, match="feature-version"):
            cascade_apply(model.level1, bad, _toy_slice(0)[0], cfg)

    def test_cascade_round_trip(self, toy_cascade, tmp_path):
        model, cfg = toy_cascade
        path = str(tmp_path / "cascade.psc")
        save_cascade(model, path)
        back = load_cascade(path)
        img, _ = _toy_slice(4)
        assert np.array_equal(back.apply(img), model.apply(img))


class TestRetention:
    def _spmap(self):
        return slic_2d(np.full((32, 32), 0.5), SlicConfig(region_size=8))

    def test_all_above(self):
        sp = self._spmap()
        rmap = np.full(sp.labels.shape, 0.6)
        assert len(retain_superpixels(sp, rmap)) == sp.count

    def test_all_below(self):
        sp = self._spmap()
        rmap = np.full(sp.labels.shape, 0.4)
        assert len(retain_superpixels(sp, rmap)) == 0

    def test_exact_half_not_retained(self):
        sp = self._spmap()
        rmap = np.full(sp.labels.shape, 0.1)
        px = np.argwhere(sp.labels == 0)
        half = len(px) // 2
        rmap[px[:half, 0], px[:half, 1]] = 0.9
        assert 0 not in retain_superpixels(sp, rmap)

    @pytest.mark.parametrize("seed", range(3))
    def test_monotone_in_response(self, seed):
        rng = np.random.default_rng(seed)
        sp = self._spmap()
        rmap = rng.random(sp.labels.shape)
        before = set(retain_superpixels(sp, rmap).tolist())
        bumped = np.clip(rmap + rng.random(rmap.shape) * 0.3, 0, 1)
        after = set(retain_superpixels(sp, bumped).tolist())
        assert before <= after

    def test_dim_mismatch(self):
        sp = self._spmap()
        with pytest.raises(ValueError):
            retain_superpixels(sp, np.zeros((8, 8)))
