"""End-to-end orchestration shared by the CLI subcommands.

Stage artifacts land under out.dir with provenance sidecars carrying the
hash of the config sections that produced them; downstream stages refuse
stale inputs.  All stages are deterministic for a fixed config.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import rf_cascade as rf
from . import tps_augment as aug
from . import volume as vol
from .config import PipelineConfig
from .convnet import (
    load_params,
    named_spec,
    predict_patches,
    save_params,
    train_sgd,
    validate_pipeline_spec,
    write_trace_csv,
)
from .evaluation import (
    STAGE_GP,
    STAGE_INPUT_SRF,
    STAGE_OPTIMAL,
    STAGE_P,
    SweepCurve,
    dice,
    emit_report,
    mean_curves,
    summarize,
    sweep_thresholds,
)
from .inference import gaussian_smooth_3d, project_to_pixels, threshold_map
from .superpixel import SuperpixelMap, optimal_labeling, slic_2d
from .tps_augment import sample_patch


class DataError(ValueError):
    """Missing/stale inputs or inconsistent artifacts (CLI exit code 2)."""


# ---------------------------------------------------------------------------
# paths + provenance
# ---------------------------------------------------------------------------

def volume_path(cfg, case):
    return os.path.join(cfg.data_dir, f"{case}.mhd")


def mask_path(cfg, case):
    return os.path.join(cfg.data_dir, f"{case}_mask.mhd")


def superpixel_path(cfg, case):
    return os.path.join(cfg.out_dir, "superpixels", f"{case}_sp.mhd")


def response_path(cfg, case):
    return os.path.join(cfg.out_dir, "response", f"{case}_prf.mhd")


def retained_path(cfg, case):
    return os.path.join(cfg.out_dir, "response", f"{case}_retained.csv")


def cascade_path(cfg):
    return os.path.join(cfg.out_dir, "models", "cascade.psc")


def patches_path(cfg):
    return os.path.join(cfg.out_dir, "patches", "train_patches.pspd")


def params_path(cfg):
    return os.path.join(cfg.out_dir, "models", "convnet.psnp")


def trace_path(cfg):
    return os.path.join(cfg.out_dir, "models", "trace.csv")


def prob_path(cfg, case, n_s, smoothed):
    tag = "G" if smoothed else "P"
    return os.path.join(cfg.out_dir, "infer", f"{case}_{tag}_ns{n_s}.mhd")


def final_mask_path(cfg, case):
    return os.path.join(cfg.out_dir, "infer", f"{case}_mask.mhd")


def eval_dir(cfg):
    return os.path.join(cfg.out_dir, "eval")


def _write_provenance(artifact_path, stage, config_hash):
    with open(artifact_path + ".prov", "w") as fh:
        json.dump({"stage": stage, "config_hash": config_hash}, fh,
                  sort_keys=True)
        fh.write("\n")


def _check_provenance(artifact_path, stage, config_hash):
    prov = artifact_path + ".prov"
    if not os.path.exists(artifact_path):
        raise DataError(f"missing artifact {artifact_path!r}; "
                        f"run the {stage} stage first")
    if not os.path.exists(prov):
        raise DataError(f"artifact {artifact_path!r} has no provenance record")
    with open(prov) as fh:
        doc = json.load(fh)
    if doc.get("config_hash") != config_hash:
        raise DataError(
            f"artifact {artifact_path!r} was produced by a different "
            "configuration; rerun the earlier stage or fix the config")


def _ensure_dir(path):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)


def _map_cases(cfg, fn, cases):
    if cfg.threads == 1 or len(cases) <= 1:
        return [fn(c) for c in cases]
    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        return list(pool.map(fn, cases))


# stage hashes -------------------------------------------------------------

def phantom_hash(cfg):
    return cfg.section_hash(("phantom",))


def superpixel_hash(cfg):
    return cfg.section_hash(("phantom", "window", "slic"))


def cascade_hash(cfg):
    return cfg.section_hash(("phantom", "window", "slic", "cascade", "split"))


def patches_hash(cfg):
    return cfg.section_hash(("phantom", "window", "slic", "cascade", "split",
                             "augment"))


def net_hash(cfg):
    return cfg.section_hash(("phantom", "window", "slic", "cascade", "split",
                             "augment", "net", "train"))


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def gen_phantoms(cfg: PipelineConfig):
    """Write phantom volume/mask pairs; returns case names."""
    if cfg.phantom_count < 1:
        raise DataError("phantom count must be >= 1")
    cases = cfg.case_names()
    os.makedirs(cfg.data_dir, exist_ok=True)
    for i, case in enumerate(cases):
        pcfg = vol.PhantomConfig(
            dims=cfg.phantom_dims,
            seed=cfg.seed * 100003 + i,
            blob_count=int(cfg.values["phantom.blob_count"]),
            blob_elongation=float(cfg.values["phantom.blob_elongation"]),
            texture_amplitude=float(cfg.values["phantom.texture_amplitude"]),
            contrast_gap=float(cfg.values["phantom.contrast_gap"]),
            fat_margin_fraction=float(
                cfg.values["phantom.fat_margin_fraction"]))
        volume, mask = vol.make_phantom(pcfg)
        vol.save_volume(volume, volume_path(cfg, case))
        vol.save_mask(mask, mask_path(cfg, case))
        _write_provenance(volume_path(cfg, case), "phantom", phantom_hash(cfg))
    return cases


def _load_case(cfg, case):
    path = volume_path(cfg, case)
    if not os.path.exists(path):
        raise DataError(f"volume {path!r} not found; run `phantom` or point "
                        "data.dir at existing volumes")
    volume = vol.load_volume(path)
    if volume.intensity_kind == vol.HU:
        lo, hi = cfg.window
        volume = vol.window_hu(volume, lo, hi)
    mask = None
    if os.path.exists(mask_path(cfg, case)):
        mask = vol.load_mask(mask_path(cfg, case))
        if mask.dims != volume.dims:
            raise DataError(f"{case}: mask dims {mask.dims} != volume "
                            f"{volume.dims}")
    return volume, mask


def compute_superpixels(cfg: PipelineConfig, case: str,
                        persist: bool = True) -> list[SuperpixelMap]:
    volume, _ = _load_case(cfg, case)
    spmaps = [slic_2d(volume.voxels[z], cfg.slic)
              for z in range(volume.voxels.shape[0])]
    if persist:
        stack = np.stack([m.labels for m in spmaps])
        path = superpixel_path(cfg, case)
        _ensure_dir(path)
        vol.save_label_stack(stack, path, spacing=volume.spacing)
        _write_provenance(path, "superpixels", superpixel_hash(cfg))
    return spmaps


def rf_train(cfg: PipelineConfig):
    """Fit the two-level cascade on the training split."""
    train_cases, _, _ = cfg.splits()
    slices, gts = [], []
    for case in train_cases:
        volume, mask = _load_case(cfg, case)
        if mask is None:
            raise DataError(f"{case}: ground-truth mask required for rf-train")
        for z in range(volume.voxels.shape[0]):
            slices.append(volume.voxels[z])
            gts.append(mask.voxels[z])
    model = rf.train_cascade(slices, gts, cfg.cascade,
                             max_samples=cfg.cascade_max_samples)
    path = cascade_path(cfg)
    _ensure_dir(path)
    rf.save_cascade(model, path)
    _write_provenance(path, "rf-train", cascade_hash(cfg))
    return model


def _load_cascade_checked(cfg):
    path = cascade_path(cfg)
    _check_provenance(path, "rf-train", cascade_hash(cfg))
    return rf.load_cascade(path)


def rf_apply(cfg: PipelineConfig, cases: list[str], persist: bool = True):
    """Response maps + per-slice retained superpixels for each case.

    Returns {case: (spmaps, response_stack, retained_per_slice)}.
    """
    model = _load_cascade_checked(cfg)
    out = {}

    def run(case):
        volume, _ = _load_case(cfg, case)
        spmaps = compute_superpixels(cfg, case, persist=persist)
        rstack = np.stack([model.apply(volume.voxels[z])
                           for z in range(volume.voxels.shape[0])])
        retained = [rf.retain_superpixels(spmaps[z], rstack[z])
                    for z in range(len(spmaps))]
        return case, spmaps, rstack.astype(np.float32), retained

    for case, spmaps, rstack, retained in _map_cases(cfg, run, cases):
        if persist:
            rpath = response_path(cfg, case)
            _ensure_dir(rpath)
            vol.save_volume(vol.Volume(voxels=rstack,
                                       intensity_kind=vol.NORMALIZED), rpath)
            _write_provenance(rpath, "rf-apply", cascade_hash(cfg))
            with open(retained_path(cfg, case), "w") as fh:
                fh.write("slice,superpixel\n")
                for z, ids in enumerate(retained):
                    for sp_id in ids:
                        fh.write(f"{z},{int(sp_id)}\n")
        out[case] = (spmaps, rstack, retained)
    return out


def _augmented_for_cases(cfg: PipelineConfig, cases: list[str], acfg):
    """Labeled patch dataset over the given cases; provenance volume
    indexes point into the emitted volume_ids list."""
    applied = rf_apply(cfg, cases, persist=False)
    datasets = []
    for case in cases:
        volume, mask = _load_case(cfg, case)
        if mask is None:
            raise DataError(f"{case}: ground-truth mask required for augment")
        spmaps, _, retained = applied[case]
        labels = [optimal_labeling(spmaps[z], mask.voxels[z])
                  for z in range(len(spmaps))]
        nonempty = [z for z in range(len(spmaps)) if len(retained[z])]
        if not nonempty:
            continue
        datasets.append(aug.augment_training_set(
            [volume.voxels[z] for z in nonempty],
            [spmaps[z] for z in nonempty],
            [retained[z] for z in nonempty],
            [labels[z] for z in nonempty],
            acfg, slice_indices=nonempty, volume_index=len(datasets),
            volume_id=case))
    if not datasets:
        raise DataError("no retained superpixels on the requested cases")
    return aug.concat_datasets(datasets)


def build_augmented(cfg: PipelineConfig):
    """Multi-scale, TPS-deformed labeled patches from the training split."""
    train_cases, _, _ = cfg.splits()
    ds = _augmented_for_cases(cfg, train_cases, cfg.augment_train())
    path = patches_path(cfg)
    _ensure_dir(path)
    aug.save_patch_dataset(ds, path)
    _write_provenance(path, "augment", patches_hash(cfg))
    return ds


def train_net(cfg: PipelineConfig, dataset=None):
    if dataset is None:
        path = patches_path(cfg)
        _check_provenance(path, "augment", patches_hash(cfg))
        dataset = aug.load_patch_dataset(path)
    spec = named_spec(cfg.net_spec_name)
    validate_pipeline_spec(spec)
    if spec.input_shape[1] != dataset.patches.shape[1]:
        raise DataError(
            f"network expects {spec.input_shape[1]}px patches, dataset has "
            f"{dataset.patches.shape[1]}px; align net.spec with "
            "augment.patch_size")
    x = dataset.patches
    y = dataset.labels.astype(np.int64)
    cap = cfg.train_max_patches
    if cap and len(x) > cap:
        sel = np.random.default_rng(
            np.random.SeedSequence((cfg.seed, 0xCAFE))
        ).choice(len(x), size=cap, replace=False)
        sel.sort()
        x, y = x[sel], y[sel]
    val_x = val_y = None
    _, val_cases, _ = cfg.splits()
    if val_cases:
        # undeformed multi-scale patches from the validation cases
        val_acfg = aug.AugmentConfig(
            scales=cfg.augment_train().scales, deformations=0,
            grid=cfg.augment_train().grid,
            max_displacement=cfg.augment_train().max_displacement,
            patch_size=cfg.augment_train().patch_size, seed=cfg.seed)
        val_ds = _augmented_for_cases(cfg, val_cases, val_acfg)
        val_x = val_ds.patches
        val_y = val_ds.labels.astype(np.int64)
    params, trace = train_sgd(spec, x, y, cfg.train, val_x=val_x,
                              val_y=val_y)
    path = params_path(cfg)
    _ensure_dir(path)
    save_params(spec, params, path, seed=cfg.seed)
    _write_provenance(path, "train", net_hash(cfg))
    write_trace_csv(trace, trace_path(cfg))
    return spec, params, trace


def _load_net_checked(cfg):
    path = params_path(cfg)
    _check_provenance(path, "train", net_hash(cfg))
    spec, params, _ = load_params(path)
    return spec, params


def infer_case(cfg: PipelineConfig, case: str, n_s: int | None = None,
               smoothed: bool | None = None, persist: bool = True,
               model=None, net=None, spmaps_retained=None):
    """Superpixels -> cascade retention -> multi-scale ConvNet -> P(x) ->
    optional 3D smoothing -> thresholded mask.

    Returns (P, G_or_None, mask); G is None when smoothing is disabled.
    """
    if smoothed is None:
        smoothed = cfg.smoothed
    acfg = cfg.augment_test(n_s)
    n_s_actual = len(acfg.scales)
    spec, params = net if net is not None else _load_net_checked(cfg)
    if spmaps_retained is None:
        model = model or _load_cascade_checked(cfg)
        applied = rf_apply(cfg, [case], persist=False)
        spmaps, _, retained = applied[case]
    else:
        spmaps, retained = spmaps_retained
    volume, _ = _load_case(cfg, case)

    probs_per_slice = []
    for z, (spmap, ids) in enumerate(zip(spmaps, retained)):
        if len(ids) == 0:
            probs_per_slice.append({})
            continue
        patches = []
        for sp_id in ids:
            for scale in acfg.scales:
                patches.append(sample_patch(volume.voxels[z], spmap,
                                            int(sp_id), scale,
                                            patch_size=acfg.patch_size))
        flat = predict_patches(spec, params, np.asarray(patches,
                                                        dtype=np.float32))
        per_sp = flat.reshape(len(ids), n_s_actual)
        acc = np.zeros(len(ids))
        for s in range(n_s_actual):
            acc += per_sp[:, s]
        acc /= n_s_actual
        probs_per_slice.append({int(i): float(p)
                                for i, p in zip(ids, acc)})

    pmap = project_to_pixels(spmaps, retained, probs_per_slice)
    gmap = gaussian_smooth_3d(pmap, cfg.smooth) if smoothed else None
    mask = threshold_map(gmap if smoothed else pmap, cfg.threshold)

    if persist:
        ppath = prob_path(cfg, case, n_s_actual, smoothed=False)
        _ensure_dir(ppath)
        vol.save_volume(vol.Volume(voxels=pmap,
                                   intensity_kind=vol.NORMALIZED), ppath)
        _write_provenance(ppath, "infer", net_hash(cfg))
        if smoothed:
            gpath = prob_path(cfg, case, n_s_actual, smoothed=True)
            vol.save_volume(vol.Volume(voxels=gmap.astype(np.float32),
                                       intensity_kind=vol.NORMALIZED), gpath)
            _write_provenance(gpath, "infer", net_hash(cfg))
        vol.save_mask(vol.LabelMask(voxels=mask), final_mask_path(cfg, case))
        _write_provenance(final_mask_path(cfg, case), "infer", net_hash(cfg))
    return pmap, gmap, mask


def evaluate_pipeline(cfg: PipelineConfig, scale_settings=(1, 4),
                      persist: bool = True):
    """Dice reports and sweep curves for every stage on the test split.

    Stages: optimal labeling, retained-input mask, P(x) and G(P(x)) per
    scale setting, each swept over the threshold grid.
    """
    _, _, test_cases = cfg.splits()
    if not test_cases:
        raise DataError("empty test split")
    model = _load_cascade_checked(cfg)
    net = _load_net_checked(cfg)
    thresholds = cfg.eval_thresholds()

    per_stage: dict[str, list[float]] = {STAGE_OPTIMAL: [],
                                         STAGE_INPUT_SRF: []}
    curve_bank: dict[tuple, list[SweepCurve]] = {}

    applied = rf_apply(cfg, test_cases, persist=persist)
    for case in test_cases:
        _, mask = _load_case(cfg, case)
        if mask is None:
            raise DataError(f"{case}: ground-truth mask required for eval")
        gt = mask.voxels
        spmaps, _, retained = applied[case]

        opt = np.stack([
            optimal_labeling(spmaps[z], gt[z])[spmaps[z].labels]
            for z in range(len(spmaps))])
        per_stage[STAGE_OPTIMAL].append(dice(opt, gt))

        srf = np.stack([
            np.isin(spmaps[z].labels, retained[z]).astype(np.uint8)
            for z in range(len(spmaps))])
        per_stage[STAGE_INPUT_SRF].append(dice(srf, gt))

        for n_s in scale_settings:
            pmap, gmap, _ = infer_case(cfg, case, n_s=n_s, smoothed=True,
                                       persist=persist, model=model, net=net,
                                       spmaps_retained=(spmaps, retained))
            for variant, m in (("unsmoothed", pmap), ("smoothed", gmap)):
                curve = sweep_thresholds(m, gt, thresholds, variant=variant,
                                         n_s=n_s)
                curve_bank.setdefault((variant, n_s), []).append(curve)

    reports = [summarize(STAGE_OPTIMAL, per_stage[STAGE_OPTIMAL]),
               summarize(STAGE_INPUT_SRF, per_stage[STAGE_INPUT_SRF])]
    curves = []
    # P(x)/G(P(x)) are reported at the swept-optimal threshold of the mean
    # test curve for each variant
    for variant, stage in (("unsmoothed", STAGE_P), ("smoothed", STAGE_GP)):
        for n_s in scale_settings:
            case_curves = curve_bank[(variant, n_s)]
            mc = mean_curves(case_curves)
            curves.append(mc)
            best = int(np.argmax(mc.mean_dice))
            reports.append(summarize(
                stage, [c.mean_dice[best] for c in case_curves], n_s=n_s))
    if persist:
        emit_report(reports, curves, eval_dir(cfg), case_names=test_cases)
    return reports, curves
