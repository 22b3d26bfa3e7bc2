"""Command-line entry points: gen-data, train, infer, eval, sweep, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric fault.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import torch

from . import config as config_mod
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import DataError, NumericFault, UsageError
from .evalproto import (
    corpus_eval,
    frame_to_seconds,
    read_annotations,
    read_predictions,
    write_predictions,
)
from .features import FrameFeatureSequence, read_feature_file
from .gradcheck import run_gradient_check
from .model import build_model
from .scheduler import run_dynamic_inference
from .synthetic import generate_synthetic
from .training import TrainingVideo, fit


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dynexit",
        description="Dynamic multi-exit temporal boundary detection at desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, description in (
        ("gen-data", "generate a synthetic feature corpus with annotations"),
        ("train", "train the multi-exit model and write a checkpoint"),
        ("infer", "run dynamic inference over a feature directory"),
        ("eval", "score a prediction file against annotations"),
        ("sweep", "trade-off curve: exit radius vs compute vs F1"),
        ("gradcheck", "finite-difference check of the analytic gradients"),
    ):
        cmd = sub.add_parser(name, help=description)
        cmd.add_argument("--config", default=None, help="JSON config file")
        cmd.add_argument("--seed", type=int, default=None)
        cmd.add_argument("--threads", type=int, default=None)
        cmd.add_argument("--out-dir", default=None)
        for path in config_mod.flag_paths():
            if path in ("seed", "threads"):  # covered by the shortcut flags
                continue
            cmd.add_argument(f"--{path}", dest=f"cfg::{path}", default=None, metavar="VALUE")
    return parser


def _resolve_config(args: argparse.Namespace) -> dict:
    overrides = {
        key.split("::", 1)[1]: value
        for key, value in vars(args).items()
        if key.startswith("cfg::") and value is not None
    }
    config = config_mod.load_config(args.config, overrides)
    if args.seed is not None:
        config["seed"] = args.seed
    if args.threads is not None:
        config["threads"] = args.threads
    if args.out_dir is not None:
        config["paths"]["out_dir"] = args.out_dir
    torch.set_num_threads(max(1, int(config["threads"])))
    return config


def _load_corpus(config: dict) -> tuple[list[str], dict[str, np.ndarray], dict[str, dict]]:
    feat_dir = os.path.join(config["paths"]["data_dir"], "features")
    if not os.path.isdir(feat_dir):
        raise DataError(f"feature directory not found: {feat_dir}")
    video_ids = sorted(
        name[: -len(".json")] for name in os.listdir(feat_dir) if name.endswith(".json")
    )
    if not video_ids:
        raise DataError(f"no feature files in {feat_dir}")
    features, metas = {}, {}
    for vid in video_ids:
        features[vid], metas[vid] = read_feature_file(feat_dir, vid)
    return video_ids, features, metas


def _training_videos(config: dict) -> list[TrainingVideo]:
    """First-rater annotations converted back to frame indices."""
    video_ids, features, metas = _load_corpus(config)
    annotations = read_annotations(os.path.join(config["paths"]["data_dir"], "annotations.json"))
    missing = [vid for vid in video_ids if vid not in annotations]
    if missing:
        raise DataError(f"videos without annotations: {missing[:5]}")
    out = []
    for vid in video_ids:
        ann = annotations[vid]
        frames = [int(round(t * ann.fps - 0.5)) for t in ann.raters[0]]
        out.append(TrainingVideo(video_id=vid, features=features[vid], boundaries=frames))
    return out


def cmd_gen_data(config: dict) -> int:
    spec = config_mod.synthetic_spec(config)
    window_len = 2 * config["model"]["k"] + 1
    if spec.min_separation < window_len:
        raise UsageError(
            f"data.min_separation={spec.min_separation} below the detector window {window_len}"
        )
    if spec.end_margin < config["model"]["k"]:
        raise UsageError("data.end_margin must be at least the window half-width k")
    records = generate_synthetic(spec, config["paths"]["data_dir"])
    families = [rec.family for rec in records]
    print(
        f"wrote {len(records)} videos ({families.count('step')} step / "
        f"{families.count('smooth')} smooth) to {config['paths']['data_dir']}"
    )
    return 0


def cmd_train(config: dict) -> int:
    dataset = _training_videos(config)
    model_cfg = config_mod.model_config(config)
    model = build_model(model_cfg, seed=config["seed"])
    curve = fit(dataset, model, config_mod.train_config(config))
    save_checkpoint(config["paths"]["checkpoint"], model)
    out_dir = config["paths"]["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    curve.to_csv(os.path.join(out_dir, "loss_curve.csv"))
    last = curve.rows[-1]["total"] if curve.rows else float("nan")
    print(f"trained {len(dataset)} videos for {len(curve.rows)} epochs; final loss {last:.6f}")
    print(f"checkpoint: {config['paths']['checkpoint']}")
    return 0


def _infer_one(model, detector_cfgs, vid, feats, meta, validate=False):
    seq = FrameFeatureSequence(
        data=torch.as_tensor(feats, dtype=torch.float32),
        stage_index=0,
        origin_timestamps=np.arange(feats.shape[0]),
    )
    boundaries, state, ledger = run_dynamic_inference(seq, model, detector_cfgs, validate=validate)
    fps = meta["fps"]
    record = {
        "video_id": vid,
        "boundaries_frames": [int(b) for b in boundaries],
        "boundaries_seconds": [frame_to_seconds(b, fps) for b in boundaries],
        "exit_stage": [int(s) for s in state.exit_stage],
        "macs_total": int(ledger.total()),
        "macs_per_stage": [int(v) for v in ledger.per_stage_totals()],
        "backbone_macs": [int(v) for v in ledger.backbone_macs],
        "detector_macs": [int(v) for v in ledger.detector_macs],
    }
    return record, ledger


def _run_inference(config: dict, model, detector_cfgs):
    video_ids, features, metas = _load_corpus(config)
    threads = max(1, int(config["threads"]))
    results = {}
    if threads == 1:
        for vid in video_ids:
            results[vid] = _infer_one(model, detector_cfgs, vid, features[vid], metas[vid])
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = {
                vid: pool.submit(_infer_one, model, detector_cfgs, vid, features[vid], metas[vid])
                for vid in video_ids
            }
            results = {vid: fut.result() for vid, fut in futures.items()}
    return video_ids, results


def cmd_infer(config: dict) -> int:
    model = load_checkpoint(config["paths"]["checkpoint"])
    model_cfg = model.config
    detector_cfgs = config_mod.detector_configs(config, model_cfg)
    video_ids, results = _run_inference(config, model, detector_cfgs)
    out_dir = config["paths"]["out_dir"]
    per_video_dir = os.path.join(out_dir, "inference")
    os.makedirs(per_video_dir, exist_ok=True)
    predictions = {}
    for vid in video_ids:
        record, _ = results[vid]
        predictions[vid] = record["boundaries_seconds"]
        path = os.path.join(per_video_dir, f"{vid}.json")
        with open(path + ".tmp", "w") as fh:
            json.dump(record, fh, sort_keys=True, indent=1)
        os.replace(path + ".tmp", path)
    write_predictions(os.path.join(out_dir, "predictions.json"), predictions)
    total_macs = sum(results[vid][0]["macs_total"] for vid in video_ids)
    frames = sum(len(results[vid][0]["exit_stage"]) for vid in video_ids)
    print(f"inferred {len(video_ids)} videos; mean MACs/frame {total_macs / frames:,.0f}")
    print(f"predictions: {os.path.join(out_dir, 'predictions.json')}")
    return 0


def cmd_eval(config: dict) -> int:
    out_dir = config["paths"]["out_dir"]
    predictions = read_predictions(os.path.join(out_dir, "predictions.json"))
    annotations = read_annotations(os.path.join(config["paths"]["data_dir"], "annotations.json"))
    report = corpus_eval(predictions, annotations, config["eval"]["thresholds"])
    report_path = os.path.join(out_dir, "report.csv")
    report.to_csv(report_path)
    print(f"F1@{report.thresholds[0]:.2f} = {report.f1[0]:.4f}, avg F1 = {report.average_f1:.4f}")
    print(f"report: {report_path}")
    return 0


def cmd_sweep(config: dict) -> int:
    radii = config["sweep"]["radii"]
    if not radii:
        raise UsageError("sweep.radii is empty")
    model = load_checkpoint(config["paths"]["checkpoint"])
    annotations = read_annotations(os.path.join(config["paths"]["data_dir"], "annotations.json"))
    thresholds = config["eval"]["thresholds"]
    rows = []
    for radius in radii:
        sweep_cfg = json.loads(json.dumps(config))  # deep copy
        sweep_cfg["scheduler"]["exit_radii"] = [int(radius)] * model.config.stages
        detector_cfgs = config_mod.detector_configs(sweep_cfg, model.config)
        video_ids, results = _run_inference(sweep_cfg, model, detector_cfgs)
        predictions = {
            vid: results[vid][0]["boundaries_seconds"] for vid in video_ids
        }
        report = corpus_eval(predictions, annotations, thresholds)
        total_macs = sum(results[vid][0]["macs_total"] for vid in video_ids)
        frames = sum(len(results[vid][0]["exit_stage"]) for vid in video_ids)
        rows.append([int(radius), total_macs / frames] + list(report.f1))
    out_dir = config["paths"]["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    sweep_path = os.path.join(out_dir, "sweep.csv")
    with open(sweep_path + ".tmp", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t_mu", "mean_macs_per_frame"] + [f"f1_{t:.2f}" for t in thresholds])
        for row in rows:
            writer.writerow([row[0], f"{row[1]:.1f}"] + [f"{v:.6f}" for v in row[2:]])
    os.replace(sweep_path + ".tmp", sweep_path)
    for row in rows:
        print(f"t_mu={row[0]:>3d}  MACs/frame={row[1]:>14,.0f}  F1@0.05={row[2]:.4f}")
    print(f"sweep: {sweep_path}")
    return 0


def cmd_gradcheck(config: dict) -> int:
    report = run_gradient_check(seed=config["seed"])
    for line in report.lines():
        print(line)
    if not report.passed:
        raise NumericFault(f"gradient check failed for blocks: {report.failures()}")
    print("all parameter blocks within tolerance")
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        config = _resolve_config(args)
        return _COMMANDS[args.command](config)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericFault as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
