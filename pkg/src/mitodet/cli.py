"""Command-line entry point binding the modules into runnable steps.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract here is exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _common(sub):
    sub.add_argument("--config", type=Path, help="JSON run configuration")
    sub.add_argument("--seed", type=int, default=None,
                     help="override the configured seed")
    sub.add_argument("--out", type=Path, default=Path("out"),
                     help="output directory")


def build_parser() -> _Parser:
    parser = _Parser(prog="mitodet",
                     description="domain-adaptive mitosis detection toolkit")
    parser.add_argument("--print-defaults", action="store_true",
                        help="print the default configuration and exit")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth-gen", help="write a synthetic dataset")
    _common(p)

    p = sub.add_parser("train", help="train on a dataset directory")
    _common(p)
    p.add_argument("--data", type=Path, help="dataset directory "
                   "(defaults to dataset_dir from the config)")
    p.add_argument("--no-dac", action="store_true",
                   help="ablation: skip the domain-adaptation steps")

    p = sub.add_parser("evaluate", help="TTA + merge + F1 report")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--threshold", type=float, default=None)

    p = sub.add_parser("sweep-threshold", help="find the best F1 threshold")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("loo", help="leave-one-domain-out experiment")
    _common(p)
    p.add_argument("--data", type=Path, help="dataset directory "
                   "(omit to generate the configured synthetic dataset)")
    p.add_argument("--held-out", type=int, required=True,
                   help="scanner id to hold out")
    p.add_argument("--no-dac", action="store_true")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _common(p)
    p.add_argument("--seeds", type=int, default=20)

    p = sub.add_parser("augment-preview", help="write before/after PNG pairs")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--count", type=int, default=4)

    p = sub.add_parser("fit-profiles", help="fit per-domain stain profiles")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    return parser


def _load_config(args):
    from .config import default_config, load_config

    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
        cfg.synth = dataclasses.replace(cfg.synth, seed=args.seed)
    return cfg


def _build_from_config(cfg, n_scanners: int = None):
    from .domain_head import DomainHeadConfig
    from .experiment import build_model

    head_cfg = cfg.dac_head
    if n_scanners is not None and head_cfg.head_dims[0] != n_scanners:
        head_cfg = DomainHeadConfig(reduced_channels=head_cfg.reduced_channels,
                                    head_dims=(n_scanners,) + head_cfg.head_dims[1:])
    return build_model(cfg.detector, head_cfg, cfg.train.seed)


def _dataset(args, cfg):
    from .data import load_dataset

    path = getattr(args, "data", None) or cfg.dataset_dir
    if path is None:
        raise FileNotFoundError("no dataset: pass --data or set dataset_dir")
    return load_dataset(path)


def _write_json(payload: dict, out_dir: Path, name: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    text = json.dumps(payload, indent=2, sort_keys=True)
    (out_dir / name).write_text(text + "\n")
    print(text)


def _cmd_synth_gen(args) -> int:
    from .data import save_dataset
    from .synth import generate_dataset

    cfg = _load_config(args)
    regions = generate_dataset(cfg.synth)
    save_dataset(regions, args.out)
    print(f"wrote {len(regions)} regions to {args.out}")
    return 0


def _cmd_train(args) -> int:
    from .config import parse_stain_profiles
    from .experiment import regions_to_patches
    from .stain import fit_all_profiles
    from .trainer import train_loop

    cfg = _load_config(args)
    regions = _dataset(args, cfg)
    scanners = sorted({r.label.scanner for r in regions})
    detector, dhead, banks = _build_from_config(cfg, n_scanners=len(scanners))
    patches = regions_to_patches(regions, cfg.eval.patch_size,
                                 cfg.eval.patch_count, cfg.eval.patch_keep)
    if cfg.stain_profiles:
        profiles = parse_stain_profiles(cfg.stain_profiles)
    else:
        by_domain = {}
        for p in patches:
            key = (p.label.scanner, p.label.tissue)
            by_domain.setdefault(key, []).append(p.image)
        profiles = fit_all_profiles(by_domain)
    result = train_loop(patches, detector, dhead, banks, cfg.train,
                        out_dir=args.out, profiles=profiles,
                        enable_dac=not args.no_dac, trace_prototypes=True)
    print(json.dumps({k: v for k, v in result.items() if k != "final"},
                     indent=2, sort_keys=True))
    return 0


def _restore(args, cfg, n_scanners):
    from .persist import load_tensors
    from .trainer import load_model_state

    detector, dhead, banks = _build_from_config(cfg, n_scanners=n_scanners)
    load_model_state(detector, dhead, banks, load_tensors(args.checkpoint))
    return detector


def _cmd_evaluate(args) -> int:
    from .evaluate import evaluate_regions

    cfg = _load_config(args)
    regions = _dataset(args, cfg)
    detector = _restore(args, cfg, len({r.label.scanner for r in regions}))
    threshold = args.threshold if args.threshold is not None else cfg.eval.threshold
    report = evaluate_regions(detector, regions, threshold,
                              cfg.eval.match_radius, cfg.eval.base_threshold,
                              cfg.eval.merge_radius)
    _write_json(report, args.out, "evaluation.json")
    return 0


def _cmd_sweep(args) -> int:
    from .evaluate import collect_pairs, threshold_sweep

    cfg = _load_config(args)
    regions = _dataset(args, cfg)
    detector = _restore(args, cfg, len({r.label.scanner for r in regions}))
    pairs = collect_pairs(detector, regions, cfg.eval.base_threshold,
                          cfg.eval.merge_radius)
    threshold, f1 = threshold_sweep(pairs, match_radius=cfg.eval.match_radius)
    _write_json({"best_threshold": threshold, "best_f1": f1}, args.out,
                "sweep.json")
    return 0


def _cmd_loo(args) -> int:
    from .experiment import leave_one_domain_out
    from .synth import generate_dataset

    cfg = _load_config(args)
    if getattr(args, "data", None) or cfg.dataset_dir:
        regions = _dataset(args, cfg)
    else:
        regions = generate_dataset(cfg.synth)
    report, _ = leave_one_domain_out(
        regions, args.held_out, cfg.detector, cfg.train,
        reduced_channels=cfg.dac_head.reduced_channels,
        enable_dac=not args.no_dac, out_dir=args.out,
        eval_params={"threshold": cfg.eval.threshold,
                     "match_radius": cfg.eval.match_radius,
                     "merge_radius": cfg.eval.merge_radius,
                     "base_threshold": cfg.eval.base_threshold,
                     "patch_size": cfg.detector.input_size})
    _write_json(report, args.out, "loo.json")
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    seed = args.seed if args.seed is not None else 0
    results = run_suite(seed=seed, seeds=args.seeds)
    width = max(len(name) for name, _ in results)
    ok = True
    for name, err in results:
        print(f"{name:<{width}}  {err:.3e}")
        ok = ok and err <= 1e-4
    if not ok:
        print("FAILED: at least one operation exceeds 1e-4", file=sys.stderr)
        return 2
    return 0


def _cmd_augment_preview(args) -> int:
    from PIL import Image

    from .augment import blur_or_sharpen, geometric_augment
    from .stain import IDENTITY_PROFILE, augment_stain, sample_alphas

    cfg = _load_config(args)
    regions = _dataset(args, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.train.seed)
    for i, region in enumerate(regions[:args.count]):
        img, _ = geometric_augment(region.image, region.points, rng,
                                   max_shift=cfg.train.max_shift)
        img = augment_stain(img, sample_alphas(IDENTITY_PROFILE, rng))
        img = blur_or_sharpen(img, rng)
        for tag, data in (("before", region.image), ("after", img)):
            u8 = np.clip(np.round(data * 255), 0, 255).astype(np.uint8)
            Image.fromarray(u8).save(args.out / f"{region.region_id}_{tag}.png")
    print(f"wrote previews for {min(args.count, len(regions))} regions")
    return 0


def _cmd_fit_profiles(args) -> int:
    from .stain import fit_all_profiles

    cfg = _load_config(args)
    regions = _dataset(args, cfg)
    by_domain = {}
    for r in regions:
        key = (r.label.scanner, r.label.tissue)
        by_domain.setdefault(key, []).append(r.image)
    profiles = fit_all_profiles(by_domain)
    payload = {}
    for key, profile in sorted(profiles.items()):
        payload[f"{key[0]},{key[1]}"] = {
            ch: [spec.a, spec.b, spec.scale, spec.shift]
            for ch, spec in zip("hed", profile.specs())}
    _write_json({"stain_profiles": payload}, args.out, "profiles.json")
    return 0


_COMMANDS = {
    "synth-gen": _cmd_synth_gen,
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "sweep-threshold": _cmd_sweep,
    "loo": _cmd_loo,
    "gradcheck": _cmd_gradcheck,
    "augment-preview": _cmd_augment_preview,
    "fit-profiles": _cmd_fit_profiles,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_defaults:
        from .config import config_to_dict, default_config

        print(json.dumps(config_to_dict(default_config()), indent=2,
                         sort_keys=True))
        return 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        sys.stderr.write("mitodet: error: a subcommand is required\n")
        return 1
    try:
        return _COMMANDS[args.command](args)
    except (BrokenPipeError, KeyboardInterrupt):
        return 2
    except Exception as exc:  # runtime failures map to exit code 2
        print(f"mitodet {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
