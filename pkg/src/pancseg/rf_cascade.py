"""Patch-level features and the two-level random-forest cascade that
produces the dense response map, plus retention of high-probability
superpixels.

The feature vector (version 1) has an appearance block and a geometry
block:

    [0]  mean            [5:13] 8-bin intensity histogram
    [1]  std             [13] gradient-magnitude mean
    [2]  min             [14] gradient-magnitude std
    [3]  max             [15] patch-center intensity
    [4]  median          [16] x / (W-1)
                         [17] y / (H-1)
                         [18] distance to slice center (normalized)

Level-2 models consume three extra features: the level-1 response at the
patch center and its mean/std over the patch window.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

FEATURE_VERSION = 1
BASE_FEATURE_COUNT = 19
APPEARANCE_SLICE = slice(0, 16)
LEVEL2_EXTRA = 3


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------

def _gather_patches(img: np.ndarray, centers: np.ndarray, patch_size: int):
    """(M, P, P) windows around integer centers, edge-replicated."""
    h, w = img.shape
    half = patch_size // 2
    offs = np.arange(-half, half + 1)
    ys = np.clip(centers[:, 0][:, None] + offs, 0, h - 1)
    xs = np.clip(centers[:, 1][:, None] + offs, 0, w - 1)
    return img[ys[:, :, None], xs[:, None, :]]


def patch_feature_grid(img: np.ndarray, centers: np.ndarray,
                       patch_size: int) -> np.ndarray:
    """Feature vectors for many patch centers at once; rows match centers."""
    if patch_size % 2 == 0:
        raise ValueError("patch_size must be odd")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    centers = np.asarray(centers, dtype=np.int64)
    patches = _gather_patches(img, centers, patch_size)
    m = len(centers)
    flat = patches.reshape(m, -1)

    feats = np.empty((m, BASE_FEATURE_COUNT), dtype=np.float64)
    feats[:, 0] = flat.mean(axis=1)
    feats[:, 1] = flat.std(axis=1)
    feats[:, 2] = flat.min(axis=1)
    feats[:, 3] = flat.max(axis=1)
    feats[:, 4] = np.median(flat, axis=1)

    bins = np.minimum((np.clip(flat, 0.0, 1.0) * 8).astype(np.int64), 7)
    hist = np.zeros((m, 8), dtype=np.float64)
    np.add.at(hist, (np.arange(m)[:, None], bins), 1.0)
    feats[:, 5:13] = hist / flat.shape[1]

    gy, gx = np.gradient(patches, axis=(1, 2))
    gmag = np.hypot(gy, gx).reshape(m, -1)
    feats[:, 13] = gmag.mean(axis=1)
    feats[:, 14] = gmag.std(axis=1)

    feats[:, 15] = img[centers[:, 0], centers[:, 1]]
    feats[:, 16] = centers[:, 1] / max(w - 1, 1)
    feats[:, 17] = centers[:, 0] / max(h - 1, 1)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    halfdiag = max(np.hypot(cy, cx), 1e-9)
    feats[:, 18] = np.hypot(centers[:, 0] - cy, centers[:, 1] - cx) / halfdiag
    return feats


def extract_patch_features(img: np.ndarray, center: tuple[int, int],
                           patch_size: int) -> np.ndarray:
    """Single-center feature vector; see module docstring for the layout."""
    return patch_feature_grid(img, np.asarray([center]), patch_size)[0]


def _window_stats(dense: np.ndarray, centers: np.ndarray, patch_size: int):
    win = _gather_patches(np.asarray(dense, np.float64), centers, patch_size)
    flat = win.reshape(len(centers), -1)
    return flat.mean(axis=1), flat.std(axis=1)


def level2_features(base: np.ndarray, dense_l1: np.ndarray,
                    centers: np.ndarray, patch_size: int) -> np.ndarray:
    """Base features + level-1 response at center and window mean/std."""
    centers = np.asarray(centers, dtype=np.int64)
    mean, std = _window_stats(dense_l1, centers, patch_size)
    extra = np.stack([dense_l1[centers[:, 0], centers[:, 1]], mean, std],
                     axis=1)
    return np.concatenate([base, extra], axis=1)


# ---------------------------------------------------------------------------
# random forest
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 32
    max_depth: int = 12
    min_leaf: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 1 or self.min_leaf < 1:
            raise ValueError("forest config values must be >= 1")


@dataclass
class Tree:
    feature: np.ndarray    # int32, -1 marks a leaf
    threshold: np.ndarray  # float64
    left: np.ndarray       # int32
    right: np.ndarray      # int32
    prob: np.ndarray       # float64 class-1 probability at leaves


@dataclass
class RandomForestModel:
    trees: list[Tree]
    feature_count: int
    feature_version: int
    seed: int
    max_depth: int
    oob_error: float


def _best_split(x_sub, y_sub, candidates, min_leaf):
    """Lowest weighted Gini split over candidate features.

    Ties break to the lowest feature index (candidates scanned ascending)
    then the lowest threshold (first argmin in ascending threshold order).
    """
    n = len(y_sub)
    best = None
    total = y_sub.sum()
    for f in candidates:
        v = x_sub[:, f]
        order = np.argsort(v, kind="stable")
        vs = v[order]
        ys = y_sub[order]
        change = vs[1:] != vs[:-1]
        if not change.any():
            continue
        nl = np.nonzero(change)[0] + 1
        if min_leaf > 1:
            nl = nl[(nl >= min_leaf) & (n - nl >= min_leaf)]
            if nl.size == 0:
                continue
        cum = np.cumsum(ys)
        sl = cum[nl - 1]
        nr = n - nl
        sr = total - sl
        pl = sl / nl
        pr = sr / nr
        gini = nl * pl * (1.0 - pl) + nr * pr * (1.0 - pr)
        j = int(np.argmin(gini))
        if best is None or gini[j] < best[0]:
            thr = 0.5 * (vs[nl[j] - 1] + vs[nl[j]])
            best = (gini[j], int(f), float(thr))
    return best


def _build_tree(x, y, cfg: ForestConfig, rng) -> Tree:
    n_features = x.shape[1]
    mtry = max(1, int(np.sqrt(n_features)))
    feature, threshold, left, right, prob = [], [], [], [], []

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        prob.append(0.0)
        return len(feature) - 1

    root = new_node()
    stack = [(root, np.arange(len(y)), 0)]
    while stack:
        idx, samp, depth = stack.pop()
        ys = y[samp]
        p = float(ys.mean())
        if depth >= cfg.max_depth or len(samp) < 2 * cfg.min_leaf or p in (0.0, 1.0):
            prob[idx] = p
            continue
        cand = np.sort(rng.choice(n_features, size=mtry, replace=False))
        split = _best_split(x[samp], ys, cand, cfg.min_leaf)
        if split is None:
            prob[idx] = p
            continue
        _, f, thr = split
        goleft = x[samp, f] <= thr
        feature[idx] = f
        threshold[idx] = thr
        li, ri = new_node(), new_node()
        left[idx], right[idx] = li, ri
        stack.append((ri, samp[~goleft], depth + 1))
        stack.append((li, samp[goleft], depth + 1))
    return Tree(np.asarray(feature, np.int32), np.asarray(threshold, np.float64),
                np.asarray(left, np.int32), np.asarray(right, np.int32),
                np.asarray(prob, np.float64))


def _tree_predict(tree: Tree, x: np.ndarray) -> np.ndarray:
    node = np.zeros(len(x), dtype=np.int32)
    active = tree.feature[node] >= 0
    while active.any():
        cur = node[active]
        f = tree.feature[cur]
        go_left = x[active, f] <= tree.threshold[cur]
        node[active] = np.where(go_left, tree.left[cur], tree.right[cur])
        active = tree.feature[node] >= 0
    return tree.prob[node]


def train_forest(features: np.ndarray, labels: np.ndarray,
                 cfg: ForestConfig | None = None) -> RandomForestModel:
    """Bagged Gini trees with sqrt-feature subsampling; deterministic for a
    fixed seed; reports out-of-bag misclassification."""
    cfg = cfg or ForestConfig()
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or len(x) != len(y):
        raise ValueError("features must be (M, F) matching labels")
    if len(y) < 2:
        raise ValueError("need at least 2 samples")
    if y.min() == y.max():
        raise ValueError("training labels are single-class")
    if not np.isfinite(x).all():
        raise ValueError("features must be finite")

    m = len(y)
    trees = []
    oob_sum = np.zeros(m)
    oob_cnt = np.zeros(m, dtype=np.int64)
    for t in range(cfg.n_trees):
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, t)))
        bag = rng.integers(0, m, size=m)
        tree = _build_tree(x[bag], y[bag], cfg, rng)
        trees.append(tree)
        oob = np.setdiff1d(np.arange(m), bag, assume_unique=False)
        if oob.size:
            oob_sum[oob] += _tree_predict(tree, x[oob])
            oob_cnt[oob] += 1
    seen = oob_cnt > 0
    if seen.any():
        votes = oob_sum[seen] / oob_cnt[seen]
        oob_error = float(((votes > 0.5).astype(np.int64) != y[seen]).mean())
    else:
        oob_error = float("nan")
    return RandomForestModel(trees=trees, feature_count=x.shape[1],
                             feature_version=FEATURE_VERSION, seed=cfg.seed,
                             max_depth=cfg.max_depth, oob_error=oob_error)


def predict_forest_batch(model: RandomForestModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.feature_count:
        raise ValueError(
            f"feature length {x.shape[-1]} != model's {model.feature_count}")
    acc = np.zeros(len(x), dtype=np.float64)
    for tree in model.trees:
        acc += _tree_predict(tree, x)
    return acc / len(model.trees)


def predict_forest(model: RandomForestModel, fv: np.ndarray) -> float:
    """Mean of per-tree leaf probabilities for one feature vector."""
    fv = np.asarray(fv, dtype=np.float64)
    if fv.ndim != 1:
        raise ValueError("predict_forest takes a single feature vector")
    return float(predict_forest_batch(model, fv[None, :])[0])


_FOREST_MAGIC = b"PSRF"


def forest_to_bytes(model: RandomForestModel) -> bytes:
    buf = io.BytesIO()
    buf.write(_FOREST_MAGIC)
    buf.write(struct.pack("<IIIIQd", 1, model.feature_version,
                          model.feature_count, len(model.trees),
                          model.seed, model.oob_error))
    buf.write(struct.pack("<I", model.max_depth))
    for tree in model.trees:
        buf.write(struct.pack("<I", len(tree.feature)))
        buf.write(tree.feature.astype("<i4").tobytes())
        buf.write(tree.threshold.astype("<f8").tobytes())
        buf.write(tree.left.astype("<i4").tobytes())
        buf.write(tree.right.astype("<i4").tobytes())
        buf.write(tree.prob.astype("<f8").tobytes())
    return buf.getvalue()


def forest_from_bytes(data: bytes) -> RandomForestModel:
    buf = io.BytesIO(data)
    if buf.read(4) != _FOREST_MAGIC:
        raise ValueError("not a forest model file")
    version, fver, fcount, ntrees, seed, oob = struct.unpack(
        "<IIIIQd", buf.read(32))
    if version != 1:
        raise ValueError(f"unsupported forest file version {version}")
    (max_depth,) = struct.unpack("<I", buf.read(4))
    trees = []
    for _ in range(ntrees):
        (n,) = struct.unpack("<I", buf.read(4))
        feature = np.frombuffer(buf.read(4 * n), dtype="<i4").copy()
        threshold = np.frombuffer(buf.read(8 * n), dtype="<f8").copy()
        leftc = np.frombuffer(buf.read(4 * n), dtype="<i4").copy()
        rightc = np.frombuffer(buf.read(4 * n), dtype="<i4").copy()
        prob = np.frombuffer(buf.read(8 * n), dtype="<f8").copy()
        trees.append(Tree(feature, threshold, leftc, rightc, prob))
    return RandomForestModel(trees=trees, feature_count=fcount,
                             feature_version=fver, seed=seed,
                             max_depth=max_depth, oob_error=oob)


def save_forest(model: RandomForestModel, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(forest_to_bytes(model))


def load_forest(path: str) -> RandomForestModel:
    with open(path, "rb") as fh:
        return forest_from_bytes(fh.read())


# ---------------------------------------------------------------------------
# cascade
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CascadeConfig:
    patch_size: int = 25
    stride: int = 4
    gate: float = 0.2
    passthrough: float = 1.0
    samples_per_slice: int = 160
    positive_ratio: float = 2.0   # pos:neg sampling; >1 biases toward recall
    forest: ForestConfig = ForestConfig()

    def __post_init__(self):
        if self.patch_size % 2 == 0:
            raise ValueError("patch_size must be odd")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if not 0.0 <= self.gate <= 1.0:
            raise ValueError("gate must be in [0,1]")
        if self.positive_ratio <= 0:
            raise ValueError("positive_ratio must be > 0")


def _grid_coords(n: int, stride: int) -> np.ndarray:
    pts = np.arange(0, n, stride)
    if pts[-1] != n - 1:
        pts = np.append(pts, n - 1)
    return pts


def _upsample_grid(grid: np.ndarray, ys: np.ndarray, xs: np.ndarray,
                   h: int, w: int) -> np.ndarray:
    """Bilinear upsample of grid samples at (ys, xs) to a dense (h, w) map."""
    tmp = np.empty((len(ys), w))
    dense_x = np.arange(w, dtype=np.float64)
    for i in range(len(ys)):
        tmp[i] = np.interp(dense_x, xs, grid[i])
    out = np.empty((h, w))
    dense_y = np.arange(h, dtype=np.float64)
    for j in range(w):
        out[:, j] = np.interp(dense_y, ys, tmp[:, j])
    return out


def _level1_grid(model, img, stride, patch_size):
    h, w = img.shape
    ys = _grid_coords(h, stride)
    xs = _grid_coords(w, stride)
    centers = np.stack(np.meshgrid(ys, xs, indexing="ij"),
                       axis=-1).reshape(-1, 2)
    base = patch_feature_grid(img, centers, patch_size)
    l1 = predict_forest_batch(model, base).reshape(len(ys), len(xs))
    return ys, xs, centers, base, l1


def cascade_apply(level1: RandomForestModel, level2: RandomForestModel,
                  img: np.ndarray, cfg: CascadeConfig | None = None
                  ) -> np.ndarray:
    """Dense response map from the two-level cascade.

    Level 1 runs on a stride grid and is bilinearly upsampled; level 2 runs
    only at grid points whose level-1 response passes the gate.  Below the
    gate the level-1 value (times the pass-through factor) is used.
    """
    cfg = cfg or CascadeConfig()
    if level1.feature_version != level2.feature_version:
        raise ValueError("feature-version mismatch between cascade levels")
    if level2.feature_count != level1.feature_count + LEVEL2_EXTRA:
        raise ValueError(
            f"level-2 model expects {level2.feature_count} features, "
            f"level-1 provides {level1.feature_count}+{LEVEL2_EXTRA}")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    ys, xs, centers, base, l1 = _level1_grid(level1, img, cfg.stride,
                                             cfg.patch_size)
    dense_l1 = _upsample_grid(l1, ys, xs, h, w)

    l1_flat = l1.ravel()
    combined = l1_flat * cfg.passthrough
    passing = l1_flat >= cfg.gate
    if passing.any():
        feats = level2_features(base[passing], dense_l1, centers[passing],
                                cfg.patch_size)
        combined[passing] = predict_forest_batch(level2, feats)
    dense_comb = _upsample_grid(combined.reshape(l1.shape), ys, xs, h, w)
    out = np.where(dense_l1 >= cfg.gate, dense_comb,
                   dense_l1 * cfg.passthrough)
    return np.clip(out, 0.0, 1.0)


@dataclass
class CascadeModel:
    level1: RandomForestModel
    level2: RandomForestModel
    config: CascadeConfig

    def apply(self, img: np.ndarray) -> np.ndarray:
        return cascade_apply(self.level1, self.level2, img, self.config)


_CASCADE_MAGIC = b"PSC1"


def save_cascade(model: CascadeModel, path: str) -> None:
    """Both forests plus the apply-time parameters in one file."""
    b1 = forest_to_bytes(model.level1)
    b2 = forest_to_bytes(model.level2)
    cfg = model.config
    with open(path, "wb") as fh:
        fh.write(_CASCADE_MAGIC)
        fh.write(struct.pack("<IIddId", cfg.patch_size, cfg.stride, cfg.gate,
                             cfg.passthrough, cfg.samples_per_slice,
                             cfg.positive_ratio))
        fh.write(struct.pack("<Q", len(b1)))
        fh.write(b1)
        fh.write(struct.pack("<Q", len(b2)))
        fh.write(b2)


def load_cascade(path: str) -> CascadeModel:
    with open(path, "rb") as fh:
        if fh.read(4) != _CASCADE_MAGIC:
            raise ValueError(f"{path}: not a cascade model file")
        patch_size, stride, gate, passthrough, sps, ratio = struct.unpack(
            "<IIddId", fh.read(36))
        (n1,) = struct.unpack("<Q", fh.read(8))
        level1 = forest_from_bytes(fh.read(n1))
        (n2,) = struct.unpack("<Q", fh.read(8))
        level2 = forest_from_bytes(fh.read(n2))
    cfg = CascadeConfig(patch_size=patch_size, stride=stride, gate=gate,
                        passthrough=passthrough, samples_per_slice=sps,
                        positive_ratio=ratio)
    return CascadeModel(level1=level1, level2=level2, config=cfg)


def _sample_centers(gt: np.ndarray, rng, per_class: int,
                    positive_ratio: float = 1.0):
    pos = np.argwhere(gt > 0)
    neg = np.argwhere(gt == 0)
    take_pos = min(int(round(per_class * positive_ratio)), len(pos))
    take_neg = min(per_class, len(neg))
    out = []
    if take_pos:
        out.append(pos[rng.choice(len(pos), size=take_pos, replace=False)])
    if take_neg:
        out.append(neg[rng.choice(len(neg), size=take_neg, replace=False)])
    if not out:
        return np.empty((0, 2), np.int64), np.empty(0, np.int64)
    centers = np.concatenate(out)
    labels = np.concatenate([np.ones(take_pos, np.int64),
                             np.zeros(take_neg, np.int64)])
    return centers, labels


def train_cascade(slices: list[np.ndarray], gts: list[np.ndarray],
                  cfg: CascadeConfig | None = None,
                  max_samples: int = 0) -> CascadeModel:
    """Fit both cascade levels from normalized slices and binary masks.

    Level 1 trains on class-balanced patch samples (optionally capped at
    max_samples by deterministic subsampling); level 2 trains on the same
    samples that pass the level-1 gate, with response-context features.
    """
    cfg = cfg or CascadeConfig()
    rng = np.random.default_rng(np.random.SeedSequence(
        (cfg.forest.seed, 0xCA5C)))
    per_class = cfg.samples_per_slice // 2

    all_feats, all_labels, all_centers, kept_slices = [], [], [], []
    for i, (img, gt) in enumerate(zip(slices, gts)):
        centers, labels = _sample_centers(gt, rng, per_class,
                                          cfg.positive_ratio)
        if len(labels) == 0:
            continue
        all_feats.append(patch_feature_grid(np.asarray(img, np.float64),
                                            centers, cfg.patch_size))
        all_labels.append(labels)
        all_centers.append(centers)
        kept_slices.append(i)
    if not all_feats:
        raise ValueError("no training samples")
    if max_samples:
        total = sum(len(l) for l in all_labels)
        if total > max_samples:
            keep_frac = max_samples / total
            for idx in range(len(all_labels)):
                n = len(all_labels[idx])
                take = max(2, int(round(n * keep_frac)))
                sel = np.sort(rng.choice(n, size=min(take, n), replace=False))
                all_feats[idx] = all_feats[idx][sel]
                all_labels[idx] = all_labels[idx][sel]
                all_centers[idx] = all_centers[idx][sel]
    level1 = train_forest(np.concatenate(all_feats),
                          np.concatenate(all_labels), cfg.forest)

    # level 2 trains on the same samples, gated by the dense level-1
    # response and augmented with its local statistics
    l2_feats, l2_labels = [], []
    for idx, centers in enumerate(all_centers):
        img = np.asarray(slices[kept_slices[idx]], np.float64)
        ys, xs, _, _, l1 = _level1_grid(level1, img, cfg.stride,
                                        cfg.patch_size)
        dense = _upsample_grid(l1, ys, xs, *img.shape)
        l1_at = dense[centers[:, 0], centers[:, 1]]
        passing = l1_at >= cfg.gate
        base = all_feats[idx]
        lab = all_labels[idx]
        if passing.sum() < 2 or len(np.unique(lab[passing])) < 2:
            passing = np.ones(len(lab), dtype=bool)
        l2_feats.append(level2_features(base[passing], dense,
                                        centers[passing], cfg.patch_size))
        l2_labels.append(lab[passing])
    l2x = np.concatenate(l2_feats)
    l2y = np.concatenate(l2_labels)
    if len(np.unique(l2y)) < 2:
        raise ValueError("level-2 training samples are single-class")
    level2_cfg = ForestConfig(n_trees=cfg.forest.n_trees,
                              max_depth=cfg.forest.max_depth,
                              min_leaf=cfg.forest.min_leaf,
                              seed=cfg.forest.seed + 1)
    level2 = train_forest(l2x, l2y, level2_cfg)
    return CascadeModel(level1=level1, level2=level2, config=cfg)


def retain_superpixels(spmap, rmap: np.ndarray) -> np.ndarray:
    """Ids of superpixels whose strict majority of pixels has response > 0.5."""
    if rmap.shape != spmap.labels.shape:
        raise ValueError(
            f"response map {rmap.shape} != labels {spmap.labels.shape}")
    hot = np.bincount(spmap.labels.ravel()[rmap.ravel() > 0.5],
                      minlength=spmap.count)
    return np.nonzero(2 * hot > spmap.sizes)[0].astype(np.int32)
