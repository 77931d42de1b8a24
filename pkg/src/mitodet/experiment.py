"""End-to-end experiment drivers: leave-one-domain-out and the
synthetic adaptation benchmark.

The benchmark holds one synthetic domain out, trains the full scheme
and a no-domain-adaptation ablation on the remaining two, and measures
(1) how well a linear probe can still read the domain off the
detector's tap features and (2) detection F1 on the held-out domain.
"""

from __future__ import annotations

import dataclasses
import warnings

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.preprocessing import StandardScaler

from . import tensor as T
from .data import DomainLabel, Patch, extract_patches, stratified_split
from .detector import Detector, DetectorConfig
from .domain_head import DomainHead, DomainHeadConfig, PrototypeBank
from .evaluate import collect_pairs, evaluate_regions, threshold_sweep
from .stain import fit_all_profiles
from .synth import SynthConfig, generate_region
from .tensor import Tensor
from .trainer import TrainConfig, train_loop


def build_model(det_cfg: DetectorConfig, head_cfg: DomainHeadConfig,
                seed: int) -> tuple:
    """Detector, domain head and one prototype bank per head dimension."""
    detector = Detector(det_cfg, seed=seed)
    dhead = DomainHead(detector.tap_channels, head_cfg, seed=seed + 1)
    banks = [PrototypeBank(dim) for dim in head_cfg.head_dims]
    return detector, dhead, banks


def tap_features(detector: Detector, images: list, chunk: int = 8) -> np.ndarray:
    """Average-pooled, concatenated tap features for H x W x 3 images."""
    rows = []
    with T.no_grad():
        for start in range(0, len(images), chunk):
            batch = np.stack([np.ascontiguousarray(img.transpose(2, 0, 1))
                              for img in images[start:start + chunk]])
            _, taps = detector.forward(Tensor(batch))
            pooled = [T.global_avg_pool(t).data for t in taps]
            rows.append(np.concatenate(pooled, axis=1))
    return np.concatenate(rows, axis=0)


def domain_probe_accuracy(detector: Detector, images: list,
                          domains: list, train_mask: list) -> float:
    """Fit a logistic probe on tap features and score the held-out rows."""
    feats = tap_features(detector, images)
    domains = np.asarray(domains)
    train_mask = np.asarray(train_mask, dtype=bool)
    scaler = StandardScaler().fit(feats[train_mask])
    probe = LogisticRegression(max_iter=5000)
    probe.fit(scaler.transform(feats[train_mask]), domains[train_mask])
    pred = probe.predict(scaler.transform(feats[~train_mask]))
    return float(np.mean(pred == domains[~train_mask]))


def regions_to_patches(regions: list, patch_size: int, count: int = 30,
                       keep: int = 10) -> list:
    """Training patches; regions already at patch size pass through whole."""
    patches = []
    for region in regions:
        h, w = region.image.shape[:2]
        if (h, w) == (patch_size, patch_size):
            patches.append(Patch(image=region.image, points=list(region.points),
                                 label=region.label, labeled=region.labeled,
                                 region_id=region.region_id))
        else:
            patches.extend(extract_patches(region, patch_size, count, keep))
    return patches


def _remap_label(label: DomainLabel, maps: tuple) -> DomainLabel:
    scanner_map, tissue_map, case_map = maps
    return DomainLabel(scanner=scanner_map[label.scanner],
                       tissue=tissue_map[label.tissue],
                       case=case_map[label.case])


def _dense_maps(regions: list) -> tuple:
    """Old-to-dense index maps for every domain attribute, from a split."""
    return tuple({orig: i for i, orig in enumerate(sorted(values))}
                 for values in ({r.label.scanner for r in regions},
                                {r.label.tissue for r in regions},
                                {r.label.case for r in regions}))


def leave_one_domain_out(regions: list, held_out_scanner: int,
                         det_cfg: DetectorConfig, train_cfg: TrainConfig,
                         reduced_channels: int = 32, enable_dac: bool = True,
                         out_dir=None, eval_params: dict = None) -> dict:
    """Train without one scanner domain and report F1 everywhere.

    Scanner, tissue and case ids of the training split are remapped
    onto dense 0..k-1 ranges, one prototype bank each; reports keep the
    original ids.  The decision threshold is swept on the retained
    validation split and applied unchanged to the held-out domain.
    """
    scanners = sorted({r.label.scanner for r in regions})
    if held_out_scanner not in scanners:
        raise ValueError(f"held-out scanner {held_out_scanner} not in dataset "
                         f"(present: {scanners})")
    if len(scanners) < 2:
        raise ValueError("leave-one-domain-out needs >= 2 domains")
    held = [r for r in regions if r.label.scanner == held_out_scanner]
    retained = [r for r in regions if r.label.scanner != held_out_scanner]
    seen = sorted({r.label.scanner for r in retained})

    assignment = stratified_split(retained, seed=train_cfg.seed)
    splits = {name: [r for r in retained if assignment[r.region_id] == name]
              for name in ("train", "val", "test")}
    if not splits["train"]:
        raise ValueError("empty training split")
    # the classifier banks only cover domain values the trainer will see
    maps = _dense_maps(splits["train"])

    ep = {"threshold": 0.403, "match_radius": 30.0, "merge_radius": 25.0,
          "base_threshold": 0.05, "patch_size": det_cfg.input_size,
          "patch_count": 30, "patch_keep": 10}
    if eval_params:
        ep.update(eval_params)

    patches = regions_to_patches(splits["train"], ep["patch_size"],
                                 ep["patch_count"], ep["patch_keep"])
    patches = [dataclasses.replace(p, label=_remap_label(p.label, maps))
               for p in patches]
    by_domain: dict = {}
    for p in patches:
        by_domain.setdefault((p.label.scanner, p.label.tissue), []).append(p.image)
    profiles = fit_all_profiles(by_domain) if train_cfg.augment else None

    # one bank per attribute; the per-case bank presses hardest for
    # domain-agnostic features because every case must become alike
    head_cfg = DomainHeadConfig(reduced_channels=reduced_channels,
                                head_dims=tuple(len(m) for m in maps))
    detector, dhead, banks = build_model(det_cfg, head_cfg, train_cfg.seed)
    run = train_loop(patches, detector, dhead, banks, train_cfg,
                     out_dir=out_dir, profiles=profiles, enable_dac=enable_dac)

    sweep_regions = splits["val"] or splits["train"]
    pairs = collect_pairs(detector, sweep_regions, ep["base_threshold"],
                          ep["merge_radius"])
    if any(len(truths) for _, truths in pairs):
        threshold, _ = threshold_sweep(pairs, match_radius=ep["match_radius"])
    else:
        warnings.warn("validation split has no annotations; "
                      "using the default threshold")
        threshold = ep["threshold"]

    report = {"held_out_scanner": held_out_scanner, "threshold": threshold,
              "enable_dac": enable_dac,
              "train_region_ids": sorted(r.region_id for r in splits["train"]),
              "held_out_region_ids": sorted(r.region_id for r in held)}
    for name in ("train", "val", "test"):
        if splits[name]:
            report[name] = evaluate_regions(
                detector, splits[name], threshold, ep["match_radius"],
                ep["base_threshold"], ep["merge_radius"])
    report["held_out"] = evaluate_regions(
        detector, held, threshold, ep["match_radius"],
        ep["base_threshold"], ep["merge_radius"])
    report["run"] = {k: v for k, v in run.items() if k != "final"}
    return report, detector


# ---------------------------------------------------------------------------
# the synthetic adaptation benchmark
# ---------------------------------------------------------------------------

def benchmark_configs(seed: int, iterations: int = 2000) -> tuple:
    # stain augmentation stays on in both arms (it is part of the
    # training recipe); the ablation arm only drops the adaptive press,
    # so the probe gap measures what the press removes from the features
    synth_cfg = SynthConfig(seed=seed)
    det_cfg = DetectorConfig(input_size=256, base_channels=8, box_size=50.0)
    train_cfg = TrainConfig(iterations=iterations, accumulated_batch=2,
                            mini_batch=2, accum_steps=1, max_shift=40.0,
                            augment=True, seed=seed)
    return synth_cfg, det_cfg, train_cfg


def probe_regions(synth_cfg: SynthConfig, seen_scanners: list,
                  per_domain: int = 30) -> tuple:
    """Fresh clean regions of the seen domains for the domain probe."""
    images, domains, train_mask = [], [], []
    for remapped, orig in enumerate(sorted(seen_scanners)):
        for idx in range(per_domain):
            rng = np.random.default_rng(
                np.random.SeedSequence([synth_cfg.seed, 7000 + orig, idx]))
            region = generate_region(orig, synth_cfg, rng, idx)
            images.append(region.image)
            domains.append(remapped)
            train_mask.append(idx < per_domain // 2)
    return images, domains, train_mask


def run_adaptation_trial(seed: int, held_out: int = 2,
                         iterations: int = 2000, out_dir=None,
                         probe_per_domain: int = 30) -> dict:
    """One seed of the benchmark: both arms, probe accuracies, held-out F1."""
    from .synth import generate_dataset

    synth_cfg, det_cfg, train_cfg = benchmark_configs(seed, iterations)
    regions = generate_dataset(synth_cfg)
    seen = sorted(set(range(len(synth_cfg.domain_tints))) - {held_out})
    images, domains, train_mask = probe_regions(synth_cfg, seen,
                                                probe_per_domain)

    result = {"seed": seed, "held_out": held_out, "iterations": iterations}
    for arm, enable in (("dac", True), ("ablation", False)):
        arm_dir = None if out_dir is None else f"{out_dir}/{arm}"
        report, detector = leave_one_domain_out(
            regions, held_out, det_cfg, train_cfg, reduced_channels=32,
            enable_dac=enable, out_dir=arm_dir)
        result[f"probe_{arm}"] = domain_probe_accuracy(
            detector, images, domains, train_mask)
        result[f"f1_{arm}"] = report["held_out"]["f1"]
        result[f"report_{arm}"] = report
    result["pass_probe"] = (result["probe_dac"] <= 0.60
                            and result["probe_ablation"] >= 0.85)
    result["pass_f1"] = result["f1_dac"] >= result["f1_ablation"] - 0.02
    return result
