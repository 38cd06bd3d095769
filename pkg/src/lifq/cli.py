"""Command-line surface: synth, train, eval, gradcheck, params, export-metrics.

Exit codes: 0 on success, 1 when a check or run fails, 2 on usage errors.
All randomness flows from the --seed flags; every run prints a config echo
and, when an output directory is involved, writes it alongside the outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .data import (
    Manifest,
    SplitSpec,
    atomic_write_text,
    load_checkpoint_into,
    median_of_runs,
    read_feature_file,
    split,
    synth_generate,
    write_checkpoint,
)
from .errors import LifqError
from .losses import LossWeights
from .model import ModelConfig, QualityModel
from .moe import ffn_param_count, gate_param_count, moe_param_count, MoEConfig
from .tensor import set_precision
from .train import (
    TrainConfig,
    evaluate_model,
    log_to_csv,
    run_gradcheck_suite,
    train,
)

GRADCHECK_TOLERANCE = 1e-4


def _parse_dims(text: str) -> tuple[tuple[int, int, int], tuple[int, int, int]]:
    try:
        parts = text.split(",")
        shapes = tuple(tuple(int(v) for v in part.split("x")) for part in parts)
        if len(shapes) != 2 or any(len(s) != 3 for s in shapes) \
                or any(v < 1 for s in shapes for v in s):
            raise ValueError
        return shapes  # type: ignore[return-value]
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"dims must look like 'h3xw3xc3,h4xw4xc4', got {text!r}")


def _echo_config(payload: dict, out_dir: Path | None) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    print(text)
    if out_dir is not None:
        atomic_write_text(out_dir / "config.json", text + "\n")


def _load_run_config(path: str | None) -> tuple[ModelConfig, TrainConfig, dict]:
    raw = {}
    if path is not None:
        raw = json.loads(Path(path).read_text())
    model_config = ModelConfig.from_dict(raw["model"]) if "model" in raw \
        else ModelConfig.full_scale()
    train_raw = dict(raw.get("train", {}))
    weights = LossWeights(
        lambda_aux=train_raw.pop("lambda_aux", 0.01),
        lambda_z=train_raw.pop("lambda_z", 0.001),
    )
    train_config = TrainConfig(weights=weights, **train_raw)
    echo = {"model": model_config.to_dict(),
            "train": {**train_raw, "lambda_aux": weights.lambda_aux,
                      "lambda_z": weights.lambda_z,
                      "seed": train_config.seed,
                      "learning_rate": train_config.learning_rate,
                      "epochs": train_config.epochs,
                      "batch_size": train_config.batch_size,
                      "lr_decay": train_config.lr_decay,
                      "decay_every": train_config.decay_every,
                      "precision": train_config.precision}}
    return model_config, train_config, echo


def _model_for_manifest(manifest: Manifest, base_dir: Path,
                        model_config: ModelConfig, seed: int,
                        run_index: int) -> QualityModel:
    first = read_feature_file(base_dir / manifest.records[0]["path"])
    derived_seed = int(np.random.default_rng([seed, run_index]).integers(2 ** 31))
    return QualityModel(model_config, c3=first.stage3.shape[2],
                        c4=first.stage4.shape[2], seed=derived_seed)


# -- command handlers -----------------------------------------------------------


def cmd_synth(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = synth_generate(args.count, args.seed, args.dims, out_dir)
    _echo_config({"command": "synth", "count": args.count, "seed": args.seed,
                  "dims": {"stage3": list(args.dims[0]),
                           "stage4": list(args.dims[1])},
                  "out": str(out_dir)}, out_dir)
    print(f"wrote {len(manifest.records)} records; manifest: "
          f"{out_dir / 'manifest.json'}")
    return 0


def cmd_train(args) -> int:
    manifest_path = Path(args.manifest)
    if not manifest_path.is_file():
        print(f"manifest not found: {manifest_path}", file=sys.stderr)
        return 2
    base_dir = manifest_path.parent
    manifest = Manifest.load(manifest_path)
    model_config, train_config, echo = _load_run_config(args.config)
    set_precision(train_config.precision)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    spec = SplitSpec(seed=args.split_seed, run_index=args.run)
    train_ids, test_ids = split(manifest, spec)
    model = _model_for_manifest(manifest, base_dir, model_config,
                                train_config.seed, args.run)
    echo.update({"command": "train", "manifest": str(manifest_path),
                 "split_seed": args.split_seed, "run": args.run,
                 "out": str(out_dir)})
    _echo_config(echo, out_dir)

    result = train(manifest, base_dir, train_ids, model, train_config)
    srocc_value, plcc_value = evaluate_model(manifest, base_dir, test_ids, model)

    atomic_write_text(out_dir / "log.csv", log_to_csv(result.log))
    write_checkpoint(model.parameters(), out_dir / "checkpoint.lifc")
    metrics = {
        "srocc": srocc_value,
        "plcc": plcc_value,
        "runs": [{"run": args.run, "srocc": srocc_value, "plcc": plcc_value}],
        "median_srocc": srocc_value,
        "median_plcc": plcc_value,
        "final_loss": result.final_breakdown.total,
        "mos_range": [result.normalizer.lo, result.normalizer.hi],
    }
    atomic_write_text(out_dir / "metrics.json",
                      json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    print(f"srocc={srocc_value:.4f} plcc={plcc_value:.4f} "
          f"final_loss={result.final_breakdown.total:.6f}")
    return 0


def cmd_eval(args) -> int:
    manifest_path = Path(args.manifest)
    if not manifest_path.is_file():
        print(f"manifest not found: {manifest_path}", file=sys.stderr)
        return 2
    base_dir = manifest_path.parent
    manifest = Manifest.load(manifest_path)
    model_config, train_config, echo = _load_run_config(args.config)
    set_precision(train_config.precision)

    spec = SplitSpec(seed=args.split_seed, run_index=args.run)
    _, test_ids = split(manifest, spec)
    model = _model_for_manifest(manifest, base_dir, model_config,
                                train_config.seed, args.run)
    load_checkpoint_into(model.parameters(), args.checkpoint)
    echo.update({"command": "eval", "manifest": str(manifest_path),
                 "checkpoint": args.checkpoint,
                 "split_seed": args.split_seed, "run": args.run})
    out_dir = Path(args.out) if args.out else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(echo, out_dir)

    srocc_value, plcc_value = evaluate_model(manifest, base_dir, test_ids, model)
    payload = {"srocc": srocc_value, "plcc": plcc_value,
               "runs": [{"run": args.run, "srocc": srocc_value,
                         "plcc": plcc_value}],
               "median_srocc": srocc_value, "median_plcc": plcc_value}
    if out_dir is not None:
        atomic_write_text(out_dir / "metrics.json",
                          json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(f"srocc={srocc_value:.4f} plcc={plcc_value:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    set_precision("double")
    _echo_config({"command": "gradcheck", "seed": args.seed,
                  "tolerance": GRADCHECK_TOLERANCE}, None)
    report = run_gradcheck_suite(args.seed, tolerance=GRADCHECK_TOLERANCE)
    failed = False
    print(f"{'group':<16} {'max rel err':>12}  status")
    for group, err in report.items():
        ok = err < GRADCHECK_TOLERANCE
        failed |= not ok
        print(f"{group:<16} {err:>12.3e}  {'pass' if ok else 'FAIL'}")
    return 1 if failed else 0


def cmd_params(args) -> int:
    _echo_config({"command": "params", "experts": args.experts,
                  "hidden": args.hidden, "dim": args.dim,
                  "ffn_hidden": args.ffn_hidden}, None)
    ffn_total = ffn_param_count(args.dim, args.ffn_hidden)
    rows = [("ffn", f"{args.dim}->{args.ffn_hidden}->{args.dim}", ffn_total)]
    for experts in sorted({2, 4, 8} | {args.experts}):
        config = MoEConfig(num_experts=experts, top_k=1,
                           expert_hidden=args.hidden, embed_dim=args.dim)
        rows.append((f"moe[{experts} experts]",
                     f"{args.dim}->{args.hidden}->{args.dim}",
                     moe_param_count(config)))
    rows.append(("gate", f"{args.dim}->{args.experts}",
                 gate_param_count(args.dim, args.experts)))
    print(f"{'block':<16} {'shape':<18} {'parameters':>12} {'millions':>9}")
    for name, shape, count in rows:
        print(f"{name:<16} {shape:<18} {count:>12,} {count / 1e6:>9.2f}")
    return 0


def cmd_export_metrics(args) -> int:
    runs = []
    for path in args.runs:
        payload = json.loads(Path(path).read_text())
        entries = payload.get("runs") or [payload]
        runs.extend(entries)
    runs.sort(key=lambda r: r.get("run", 0))
    combined = {
        "runs": runs,
        "median_srocc": median_of_runs([r["srocc"] for r in runs]),
        "median_plcc": median_of_runs([r["plcc"] for r in runs]),
    }
    text = json.dumps(combined, indent=2, sort_keys=True)
    if args.out:
        atomic_write_text(Path(args.out), text + "\n")
    print(text)
    return 0


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lifq",
        description="Synthetic data, training, evaluation and verification "
                    "for the quality-decoding stack.")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a synthetic feature dataset")
    synth.add_argument("--count", type=int, required=True)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--dims", type=_parse_dims, default=((6, 6, 8), (3, 3, 16)))
    synth.add_argument("--out", required=True)
    synth.set_defaults(handler=cmd_synth)

    train_cmd = sub.add_parser("train", help="train on a manifest split")
    train_cmd.add_argument("--manifest", required=True)
    train_cmd.add_argument("--split-seed", type=int, default=0)
    train_cmd.add_argument("--run", type=int, default=0)
    train_cmd.add_argument("--config", default=None,
                           help="JSON file with model/train sections")
    train_cmd.add_argument("--out", required=True)
    train_cmd.set_defaults(handler=cmd_train)

    eval_cmd = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    eval_cmd.add_argument("--manifest", required=True)
    eval_cmd.add_argument("--checkpoint", required=True)
    eval_cmd.add_argument("--split-seed", type=int, default=0)
    eval_cmd.add_argument("--run", type=int, default=0)
    eval_cmd.add_argument("--config", default=None)
    eval_cmd.add_argument("--out", default=None)
    eval_cmd.set_defaults(handler=cmd_eval)

    gradcheck = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    gradcheck.add_argument("--seed", type=int, default=0)
    gradcheck.set_defaults(handler=cmd_gradcheck)

    params = sub.add_parser("params", help="parameter-count table")
    params.add_argument("--experts", type=int, default=4)
    params.add_argument("--hidden", type=int, default=1536)
    params.add_argument("--dim", type=int, default=384)
    params.add_argument("--ffn-hidden", type=int, default=2048)
    params.set_defaults(handler=cmd_params)

    export = sub.add_parser("export-metrics",
                            help="merge per-run metrics into a median summary")
    export.add_argument("--runs", nargs="+", required=True,
                        help="metrics.json files from individual runs")
    export.add_argument("--out", default=None)
    export.set_defaults(handler=cmd_export_metrics)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "synth" and args.count < 1:
        parser.error(f"--count must be >= 1, got {args.count}")
    try:
        return args.handler(args)
    except LifqError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
