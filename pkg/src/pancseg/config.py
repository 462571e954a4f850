"""Pipeline configuration: flat key=value text with section prefixes.

Example::

    seed = 7
    data.dir = out/data
    slic.region_size = 6
    augment.train_ns = 2

CLI flags override file values; unknown keys are rejected.  The module
dataclass defaults (SlicConfig, CascadeConfig, ...) follow the library-wide
defaults; the pipeline defaults below are tuned for the desk-scale phantom
experiment (normalized [0,1] slices, 96x96x32 volumes).
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field

from .rf_cascade import CascadeConfig, ForestConfig
from .superpixel import SlicConfig
from .tps_augment import AugmentConfig, scales_for_count
from .convnet import TrainConfig
from .inference import SmoothConfig

ENV_CONFIG = "PANCSEG_CONFIG"

DEFAULTS: dict[str, str] = {
    "seed": "0",
    "data.dir": "out/data",
    "out.dir": "out",
    "phantom.count": "10",
    "phantom.nx": "96",
    "phantom.ny": "96",
    "phantom.nz": "32",
    "phantom.blob_count": "6",
    "phantom.blob_elongation": "3.0",
    "phantom.texture_amplitude": "0.6",
    "phantom.contrast_gap": "35.0",
    "phantom.fat_margin_fraction": "0.35",
    "window.lo": "-160.0",
    "window.hi": "240.0",
    "split.train": "",     # empty = all but the last split.test_count cases
    "split.val": "",
    "split.test": "",
    "split.test_count": "2",
    "slic.region_size": "6",
    "slic.compactness": "0.2",
    "slic.iterations": "10",
    "slic.min_region_fraction": "0.25",
    "cascade.patch_size": "9",
    "cascade.stride": "4",
    "cascade.gate": "0.2",
    "cascade.passthrough": "1.0",
    "cascade.samples_per_slice": "120",
    "cascade.positive_ratio": "2.0",
    "cascade.max_samples": "16000",
    "cascade.trees": "32",
    "cascade.max_depth": "10",
    "augment.train_ns": "2",
    "augment.train_nt": "8",
    "augment.test_ns": "4",
    "augment.test_nt": "0",
    "augment.grid": "4",
    "augment.max_displacement": "0.25",
    "augment.patch_size": "32",
    "net.spec": "compact32",
    "train.learning_rate": "0.01",
    "train.momentum": "0.9",
    "train.weight_decay": "5e-4",
    "train.batch_size": "64",
    "train.epochs": "10",
    "train.max_patches": "0",     # 0 = no cap
    "smooth.sigma": "2.0",
    "smooth.radius_sigmas": "4.0",
    "infer.threshold": "0.4",
    "infer.smoothed": "true",
    "eval.thresholds": "",        # empty = default 0.05..0.95 grid
    "threads": "1",
}


class ConfigError(ValueError):
    pass


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, _, value = line.partition("=")
        key = key.strip()
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def _merge(base: dict[str, str], extra: dict[str, str], source: str):
    for key, value in extra.items():
        if key not in DEFAULTS:
            raise ConfigError(f"{source}: unknown config key {key!r}")
        base[key] = value
    return base


@dataclass
class PipelineConfig:
    values: dict[str, str] = field(default_factory=lambda: dict(DEFAULTS))

    # typed accessors -------------------------------------------------
    def _int(self, key):
        return int(self.values[key])

    def _float(self, key):
        return float(self.values[key])

    def _bool(self, key):
        v = self.values[key].lower()
        if v in ("true", "1", "yes"):
            return True
        if v in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key} must be a boolean, got {v!r}")

    @property
    def seed(self):
        return self._int("seed")

    @property
    def data_dir(self):
        return self.values["data.dir"]

    @property
    def out_dir(self):
        return self.values["out.dir"]

    @property
    def threads(self):
        return max(1, self._int("threads"))

    @property
    def phantom_dims(self):
        return (self._int("phantom.nx"), self._int("phantom.ny"),
                self._int("phantom.nz"))

    @property
    def phantom_count(self):
        return self._int("phantom.count")

    @property
    def window(self):
        return (self._float("window.lo"), self._float("window.hi"))

    def case_names(self):
        return [f"case_{i:03d}" for i in range(self.phantom_count)]

    def splits(self):
        """(train, val, test) case-name lists; disjointness enforced."""
        def listed(key):
            raw = self.values[key].strip()
            return [t.strip() for t in raw.split(",") if t.strip()]

        train, val, test = (listed("split.train"), listed("split.val"),
                            listed("split.test"))
        if not train and not test:
            cases = self.case_names()
            ntest = self._int("split.test_count")
            if ntest >= len(cases):
                raise ConfigError("split.test_count must leave training cases")
            test = cases[len(cases) - ntest:]
            train = cases[:len(cases) - ntest]
        overlap = (set(train) & set(val)) | (set(train) & set(test)) \
            | (set(val) & set(test))
        if overlap:
            raise ConfigError(f"case splits overlap: {sorted(overlap)}")
        if not train or not test:
            raise ConfigError("both train and test splits must be non-empty")
        return train, val, test

    @property
    def slic(self) -> SlicConfig:
        return SlicConfig(
            region_size=self._int("slic.region_size"),
            compactness=self._float("slic.compactness"),
            iterations=self._int("slic.iterations"),
            min_region_fraction=self._float("slic.min_region_fraction"))

    @property
    def cascade(self) -> CascadeConfig:
        return CascadeConfig(
            patch_size=self._int("cascade.patch_size"),
            stride=self._int("cascade.stride"),
            gate=self._float("cascade.gate"),
            passthrough=self._float("cascade.passthrough"),
            samples_per_slice=self._int("cascade.samples_per_slice"),
            positive_ratio=self._float("cascade.positive_ratio"),
            forest=ForestConfig(n_trees=self._int("cascade.trees"),
                                max_depth=self._int("cascade.max_depth"),
                                seed=self.seed))

    @property
    def cascade_max_samples(self):
        return self._int("cascade.max_samples")

    def augment_train(self) -> AugmentConfig:
        return AugmentConfig(
            scales=scales_for_count(self._int("augment.train_ns")),
            deformations=self._int("augment.train_nt"),
            grid=(self._int("augment.grid"), self._int("augment.grid")),
            max_displacement=self._float("augment.max_displacement"),
            patch_size=self._int("augment.patch_size"),
            seed=self.seed)

    def augment_test(self, n_s: int | None = None) -> AugmentConfig:
        if self._int("augment.test_nt") != 0:
            raise ConfigError("test-time augmentation must have N_t = 0")
        return AugmentConfig(
            scales=scales_for_count(n_s if n_s is not None
                                    else self._int("augment.test_ns")),
            deformations=0,
            grid=(self._int("augment.grid"), self._int("augment.grid")),
            max_displacement=self._float("augment.max_displacement"),
            patch_size=self._int("augment.patch_size"),
            seed=self.seed)

    @property
    def net_spec_name(self):
        return self.values["net.spec"]

    @property
    def train(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self._float("train.learning_rate"),
            momentum=self._float("train.momentum"),
            weight_decay=self._float("train.weight_decay"),
            batch_size=self._int("train.batch_size"),
            epochs=self._int("train.epochs"),
            seed=self.seed)

    @property
    def train_max_patches(self):
        return self._int("train.max_patches")

    @property
    def smooth(self) -> SmoothConfig:
        return SmoothConfig(sigma=self._float("smooth.sigma"),
                            radius_sigmas=self._float("smooth.radius_sigmas"))

    @property
    def threshold(self):
        t = self._float("infer.threshold")
        if not 0.0 <= t <= 1.0:
            raise ConfigError("infer.threshold must be in [0,1]")
        return t

    @property
    def smoothed(self):
        return self._bool("infer.smoothed")

    def eval_thresholds(self):
        raw = self.values["eval.thresholds"].strip()
        if not raw:
            from .evaluation import default_thresholds
            return default_thresholds()
        return [float(t) for t in raw.split(",")]

    def validate(self):
        self.splits()
        for build in (lambda: self.slic, lambda: self.cascade,
                      lambda: self.train, lambda: self.smooth,
                      lambda: self.threshold, self.augment_train,
                      self.augment_test, self.eval_thresholds):
            build()
        if self.phantom_count < 1:
            raise ConfigError("phantom.count must be >= 1")

    def section_hash(self, prefixes: tuple[str, ...]) -> str:
        """Content hash of the selected config sections (plus the seed)."""
        keys = sorted(k for k in self.values
                      if k == "seed" or any(k.startswith(p + ".")
                                            for p in prefixes))
        blob = "\n".join(f"{k}={self.values[k]}" for k in keys)
        return hashlib.sha256(blob.encode()).hexdigest()


def load_config(path: str | None = None,
                overrides: list[str] | None = None) -> PipelineConfig:
    """Defaults <- optional file (or $PANCSEG_CONFIG) <- key=value overrides."""
    values = dict(DEFAULTS)
    if path is None:
        path = os.environ.get(ENV_CONFIG)
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file {path!r} not found")
        with open(path) as fh:
            _merge(values, parse_config_text(fh.read(), path), path)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, _, value = item.partition("=")
        _merge(values, {key.strip(): value.strip()}, "--set")
    cfg = PipelineConfig(values=values)
    cfg.validate()
    return cfg
