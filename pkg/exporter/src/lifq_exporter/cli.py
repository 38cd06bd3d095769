"""Command line: ``lifq-export run`` and ``lifq-export verify``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .export import ExportJob, export_features, verify_roundtrip


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lifq-export",
        description="Run a hierarchical backbone over labelled images and "
                    "emit stage-3/stage-4 features as LIFQ files.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="export features for a CSV of images")
    run.add_argument("--csv", required=True, help="columns: id, path, mos")
    run.add_argument("--out", required=True)
    run.add_argument("--backbone", default="swin_t",
                     choices=["swin_t", "swin_s", "swin_b"])
    run.add_argument("--weights", default="none",
                     help="'none' (seeded random init), 'auto' (torchvision "
                          "pretrained cache), or a local state-dict path")
    run.add_argument("--crop", type=int, default=224)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--crops-per-image", type=int, default=1)

    verify = sub.add_parser("verify", help="re-read an exported directory")
    verify.add_argument("--dir", required=True)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "run":
        if not Path(args.csv).is_file():
            print(f"CSV not found: {args.csv}", file=sys.stderr)
            return 2
        try:
            job = ExportJob(csv_path=args.csv, out_dir=args.out,
                            backbone=args.backbone, weights=args.weights,
                            crop=args.crop, seed=args.seed,
                            crops_per_image=args.crops_per_image)
        except ValueError as err:
            parser.error(str(err))
        result = export_features(job)
        print(f"exported {len(result.exported)} records "
              f"({len(result.rejected)} rejected); manifest: "
              f"{result.manifest_path}")
        return 0 if result.exported else 1
    problems = verify_roundtrip(args.dir)
    if problems:
        for problem in problems:
            print(f"FAIL {problem}")
        return 1
    print("verify: all files round-trip cleanly")
    return 0


if __name__ == "__main__":
    sys.exit(main())
