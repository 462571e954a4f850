"""Command-line interface: one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage error, 2 data/validation error.  Heavy
imports happen inside main() so thread limits from --threads apply before
numpy binds its thread pools.
"""

from __future__ import annotations

import argparse
import os
import sys


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> _Parser:
    parser = _Parser(prog="pancseg",
                     description="Coarse-to-fine superpixel segmentation "
                                 "pipeline on volumetric data.")
    parser.add_argument("--config", default=None,
                        help="config file (default: $PANCSEG_CONFIG)")
    parser.add_argument("--set", action="append", default=[],
                        metavar="KEY=VALUE", dest="overrides",
                        help="override a config value (repeatable)")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads for per-case stages")
    parser.add_argument("--deterministic", action="store_true",
                        help="pin math libraries to one thread")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("phantom", help="generate synthetic volume/mask pairs")
    p = sub.add_parser("superpixels", help="per-slice SLIC label stacks")
    p.add_argument("--cases", default=None,
                   help="comma list (default: all cases)")
    sub.add_parser("rf-train", help="fit the two-level RF cascade")
    p = sub.add_parser("rf-apply", help="response maps + retained superpixels")
    p.add_argument("--cases", default=None)
    sub.add_parser("augment", help="build the multi-scale deformed patch set")
    sub.add_parser("train", help="train the ConvNet on augmented patches")
    p = sub.add_parser("infer", help="full inference on test cases")
    p.add_argument("--cases", default=None)
    p.add_argument("--scales", type=int, default=None,
                   help="number of test scales (default augment.test_ns)")
    p.add_argument("--no-smoothing", action="store_true",
                   help="threshold P(x) directly")
    p = sub.add_parser("eval", help="per-stage Dice reports + sweeps")
    p.add_argument("--scales", default="1,4",
                   help="comma list of scale settings (default 1,4)")
    p = sub.add_parser("sweep", help="threshold sweep curves only")
    p.add_argument("--scales", default="1,4")
    return parser


def _pin_threads():
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, "1")


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    if args.deterministic:
        _pin_threads()

    from .config import ConfigError, load_config
    from .volume import FormatError

    try:
        overrides = list(args.overrides)
        if args.threads is not None:
            overrides.append(f"threads={args.threads}")
        if args.deterministic:
            overrides.append("threads=1")
        cfg = load_config(args.config, overrides)
    except (ConfigError, ValueError) as exc:
        print(f"pancseg: config error: {exc}", file=sys.stderr)
        return 2

    from . import pipeline

    def cases_arg(raw):
        if raw is None:
            _, _, test = cfg.splits()
            return test
        names = [t.strip() for t in raw.split(",") if t.strip()]
        if not names:
            raise pipeline.DataError("empty case list")
        return names

    try:
        if args.command == "phantom":
            cases = pipeline.gen_phantoms(cfg)
            print(f"wrote {len(cases)} phantom pairs to {cfg.data_dir}")
        elif args.command == "superpixels":
            raw = args.cases
            names = cases_arg(raw) if raw else cfg.case_names()
            for case in names:
                spmaps = pipeline.compute_superpixels(cfg, case)
                counts = [m.count for m in spmaps]
                print(f"{case}: {len(spmaps)} slices, "
                      f"{min(counts)}-{max(counts)} superpixels/slice")
        elif args.command == "rf-train":
            model = pipeline.rf_train(cfg)
            print(f"cascade trained: level-1 OOB error "
                  f"{model.level1.oob_error:.3f}, level-2 OOB error "
                  f"{model.level2.oob_error:.3f}")
        elif args.command == "rf-apply":
            names = cases_arg(args.cases)
            out = pipeline.rf_apply(cfg, names)
            for case in names:
                retained = out[case][2]
                total = sum(len(r) for r in retained)
                print(f"{case}: retained {total} superpixels")
        elif args.command == "augment":
            ds = pipeline.build_augmented(cfg)
            print(f"wrote {len(ds)} patches to {pipeline.patches_path(cfg)}")
        elif args.command == "train":
            _, _, trace = pipeline.train_net(cfg)
            last = trace[-1]
            print(f"trained {len(trace)} epochs; final loss {last.loss:.4f}, "
                  f"train accuracy {last.train_accuracy:.4f}")
        elif args.command == "infer":
            names = cases_arg(args.cases)
            smoothed = not args.no_smoothing
            for case in names:
                pmap, gmap, mask = pipeline.infer_case(
                    cfg, case, n_s=args.scales, smoothed=smoothed)
                print(f"{case}: foreground voxels {int(mask.sum())}")
        elif args.command == "eval":
            scales = tuple(int(t) for t in args.scales.split(","))
            reports, _ = pipeline.evaluate_pipeline(cfg, scales)
            width = max(len(r.label) for r in reports)
            for r in reports:
                print(f"{r.label:<{width}}  mean {r.mean:.3f}  std "
                      f"{r.std:.3f}  min {r.min:.3f}  max {r.max:.3f}")
            print(f"reports written to {pipeline.eval_dir(cfg)}")
        elif args.command == "sweep":
            from .evaluation import write_sweep_csv
            scales = tuple(int(t) for t in args.scales.split(","))
            _, curves = pipeline.evaluate_pipeline(cfg, scales, persist=False)
            os.makedirs(pipeline.eval_dir(cfg), exist_ok=True)
            path = os.path.join(pipeline.eval_dir(cfg), "sweep.csv")
            write_sweep_csv(curves, path)
            for curve in curves:
                print(f"{curve.variant} N_s={curve.n_s}: best mean Dice "
                      f"{max(curve.mean_dice):.3f} at "
                      f"p={curve.argmax_threshold:.2f}")
            print(f"curves written to {path}")
    except (pipeline.DataError, FormatError, ConfigError) as exc:
        print(f"pancseg: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"pancseg: i/o error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
