"""Command-line entry point sequencing the pipelines.

Subcommands: gen-data, train-detector, train-keypoints, train-semisup,
eval, build-index, retrieve, serve, plus a benchmark orchestrator that
reproduces the paired domain-shift comparison. Options resolve as
defaults < --config file < explicit flags, and every artifact written
carries (or is paired with) the hash of its resolved configuration.
All randomness is governed by --seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import dataio
from .dataio import StickWorldConfig
from .losses import LossWeights
from .pipelines import (
    BenchmarkConfig,
    build_index,
    config_hash,
    evaluate_detector,
    evaluate_keypoints,
    predict_boxes,
    predict_keypoints,
    predictions_to_coco_results,
    run_benchmark,
)
from .posemodel import SetPredictor, detector_config, keypointer_config
from .retrieval import VotesStore, load_index, query_topk, save_index
from .trainer import (
    TeacherStudent,
    TelemetryWriter,
    TrainConfig,
    pseudo_label_boxes_for_stage_two,
    run_semisup,
    run_supervised,
)


class CliError(Exception):
    pass


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise CliError(f"config file {path} is not valid JSON: {e}")


def _resolve(args: argparse.Namespace, file_config: dict) -> dict:
    """defaults < config file < flags; flags win when explicitly provided."""
    resolved = dict(file_config)
    for key, value in vars(args).items():
        if key in ("command", "config", "func"):
            continue
        if value is not None:
            resolved[key] = value
    return resolved


def _write_sidecar(artifact_path, resolved: dict) -> None:
    sidecar = Path(str(artifact_path) + ".config.json")
    payload = {"config_hash": config_hash(resolved), "config": resolved}
    sidecar.write_text(json.dumps(payload, indent=2, default=str))


def _loss_weights(cfg: dict) -> LossWeights:
    return LossWeights(
        lambda_iou=cfg.get("lambda_iou", 2.0),
        lambda_l1=cfg.get("lambda_l1", 5.0),
        lambda_u=cfg.get("lambda_u", 0.5),
        tau=cfg.get("tau", 0.9),
    )


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        steps=cfg.get("steps", 2000),
        batch_labeled=cfg.get("batch", 4),
        batch_unlabeled=cfg.get("batch_unlabeled", 4),
        lr_head=cfg.get("lr_head", 1e-3),
        lr_stem=cfg.get("lr_stem", 1e-4),
        ema_decay=cfg.get("ema_decay", 0.996),
        seed=cfg.get("seed", 0),
        augment_labeled=not cfg.get("no_augment", False),
        checkpoint_every=cfg.get("checkpoint_every", 0),
        checkpoint_path=cfg.get("out"),
    )


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _resolve(args, _load_config_file(args.config))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    sw = StickWorldConfig(
        figures_per_scene=(cfg.get("figures_min", 1), cfg.get("figures_max", 2)),
        limb_length_distortion=cfg.get("distortion", 0.0),
        stroke_width=(cfg.get("stroke_min", 1.2), cfg.get("stroke_max", 2.0)),
        occlusion_rate=cfg.get("occlusion_rate", 0.05),
        seed=cfg.get("seed", 0),
        raster_size=cfg.get("raster_size", 64),
        domain=cfg.get("domain", "source"),
    )
    scenes = dataio.generate_stickworld(sw, cfg.get("count", 50))
    if cfg.get("strip_annotations", False):
        scenes = [s.strip_annotations() for s in scenes]
    dataio.save_scenes(scenes, out / "scenes.npz")
    dataio.save_coco(scenes, out / "coco.json")
    sw.to_file(out / "stickworld.cfg")
    _write_sidecar(out / "scenes.npz", cfg)
    violations = [v for s in scenes for v in dataio.validate_annotation_rules(s)]
    print(f"wrote {len(scenes)} scenes to {out} (config {config_hash(cfg)})")
    if violations:
        print(f"annotation advisories: {len(violations)}")
    return 0


def _load_model(path, stage: str) -> SetPredictor:
    cfg = detector_config() if stage == "boxes" else keypointer_config()
    try:
        return SetPredictor.load(cfg, path)
    except FileNotFoundError:
        raise CliError(f"missing model checkpoint: {path}")


def _load_scenes(path):
    try:
        return dataio.load_scenes(path)
    except FileNotFoundError:
        raise CliError(f"missing scenes file: {path}")


def cmd_train_supervised(args, stage: str) -> int:
    cfg = _resolve(args, _load_config_file(args.config))
    scenes = _load_scenes(cfg["scenes"])
    w = _loss_weights(cfg)
    tc = _train_config(cfg)
    model = SetPredictor(detector_config() if stage == "boxes" else keypointer_config(),
                         seed=tc.seed)
    telemetry = None
    if cfg.get("telemetry"):
        telemetry = TelemetryWriter(cfg["telemetry"], config_hash(cfg))
    try:
        run_supervised(model, scenes, w, tc, stage, telemetry=telemetry)
    finally:
        if telemetry:
            telemetry.close()
    model.save(cfg["out"])
    _write_sidecar(cfg["out"], cfg)
    print(f"trained {stage} model for {tc.steps} steps -> {cfg['out']} "
          f"(config {config_hash(cfg)})")
    return 0


def cmd_train_semisup(args) -> int:
    cfg = _resolve(args, _load_config_file(args.config))
    stage = cfg["stage"]
    if stage not in ("boxes", "keypoints"):
        raise CliError(f"--stage must be boxes or keypoints, got {stage!r}")
    labeled = _load_scenes(cfg["labeled"])
    unlabeled = _load_scenes(cfg["unlabeled"])
    w = _loss_weights(cfg)
    tc = _train_config(cfg)

    if stage == "keypoints":
        if not cfg.get("detector"):
            raise CliError("keypoint semi-supervised training needs --detector for pseudo boxes")
        detector = _load_model(cfg["detector"], "boxes")
        unlabeled = pseudo_label_boxes_for_stage_two(
            detector, unlabeled, keypointer_config().input_resolution,
            threshold=cfg.get("box_threshold", 0.5))
        print(f"pseudo-box crops from unlabeled scenes: {len(unlabeled)}")
        if not unlabeled:
            raise CliError("no unlabeled crops cleared the box confidence threshold")

    student = SetPredictor(detector_config() if stage == "boxes" else keypointer_config(),
                           seed=tc.seed)
    ts = TeacherStudent.bootstrap(student, ema_decay=tc.ema_decay)
    telemetry = None
    if cfg.get("telemetry"):
        telemetry = TelemetryWriter(cfg["telemetry"], config_hash(cfg))
    try:
        run_semisup(ts, labeled, unlabeled, w, tc, stage, telemetry=telemetry)
    finally:
        if telemetry:
            telemetry.close()
    ts.teacher.save(cfg["out"])
    _write_sidecar(cfg["out"], cfg)
    if cfg.get("student_out"):
        ts.student.save(cfg["student_out"])
        _write_sidecar(cfg["student_out"], cfg)
    print(f"semi-supervised {stage} run finished -> {cfg['out']} "
          f"(EMA teacher; config {config_hash(cfg)})")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve(args, _load_config_file(args.config))
    scenes = _load_scenes(cfg["scenes"])
    mode = cfg.get("mode", "box")
    use_gt_boxes = bool(cfg.get("use_gt_boxes", False))
    box_threshold = cfg.get("box_threshold", 0.5)

    if mode == "box":
        detector = _load_model(cfg["detector"], "boxes")
        result = evaluate_detector(detector, scenes)
        preds = predict_boxes(detector, scenes)
    elif mode == "keypoint":
        keypointer = _load_model(cfg["keypointer"], "keypoints")
        detector = None
        if not use_gt_boxes:
            if not cfg.get("detector"):
                raise CliError("keypoint eval needs --detector unless --use-gt-boxes is set")
            detector = _load_model(cfg["detector"], "boxes")
        result = evaluate_keypoints(scenes, keypointer, detector, use_gt_boxes, box_threshold)
        preds = predict_keypoints(scenes, keypointer, detector, use_gt_boxes, box_threshold)
    else:
        raise CliError(f"--mode must be box or keypoint, got {mode!r}")

    report = {"config_hash": config_hash(cfg), "mode": mode,
              "use_gt_boxes": use_gt_boxes, "metrics": result.as_dict()}
    print(f"{'metric':8} value")
    for name, value in result.as_dict().items():
        print(f"{name:8} {'absent' if value is None else f'{value:.4f}'}")
    if cfg.get("out"):
        Path(cfg["out"]).write_text(json.dumps(report, indent=2))
        print(f"report -> {cfg['out']}")
    if cfg.get("dump_results"):
        sizes = {s.id: (s.height, s.width) for s in scenes}
        dataio.save_coco_results(predictions_to_coco_results(preds, sizes), cfg["dump_results"])
        print(f"COCO results -> {cfg['dump_results']}")
    return 0


def cmd_build_index(args) -> int:
    cfg = _resolve(args, _load_config_file(args.config))
    scenes = _load_scenes(cfg["scenes"])
    detector = _load_model(cfg["detector"], "boxes") if cfg.get("detector") else None
    keypointer = _load_model(cfg["keypointer"], "keypoints") if cfg.get("keypointer") else None
    index = build_index(scenes, thumbs_dir=cfg.get("thumbs"), detector=detector,
                        keypointer=keypointer, box_threshold=cfg.get("box_threshold", 0.5))
    save_index(index, cfg["out"])
    _write_sidecar(cfg["out"], cfg)
    source = "model predictions" if detector else "ground-truth annotations"
    print(f"indexed {len(index.entries)} poses from {source} -> {cfg['out']} "
          f"(config {config_hash(cfg)})")
    return 0


def cmd_retrieve(args) -> int:
    cfg = _resolve(args, _load_config_file(args.config))
    index = load_index(cfg["index"])
    query_id = cfg["query_id"]
    entry = index.find(query_id)
    if entry is None:
        raise CliError(f"unknown query id {query_id!r}")
    k = cfg.get("k", 20)
    print(f"top-{k} for {query_id}:")
    for rank, (e, dist) in enumerate(query_topk(index, entry.descriptor, k), start=1):
        print(f"{rank:3d}  {e.result_id:24s} distance {dist:.4f}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    cfg = _resolve(args, _load_config_file(args.config))
    index = load_index(cfg["index"])
    votes = VotesStore(cfg.get("votes", "votes.jsonl"))
    if cfg.get("queries"):
        query_ids = [q.strip() for q in str(cfg["queries"]).split(",") if q.strip()]
    else:
        query_ids = [e.result_id for e in index.entries[:cfg.get("num_queries", 10)]]
    app = create_app(index, votes, query_ids, thumbs_dir=cfg.get("thumbs"),
                     frontend_dir=cfg.get("frontend"))
    uvicorn.run(app, host=cfg.get("host", "127.0.0.1"), port=cfg.get("port", 8000))
    return 0


def cmd_benchmark(args) -> int:
    cfg = _resolve(args, _load_config_file(args.config))
    seeds = tuple(int(s) for s in str(cfg.get("seeds", "0,1,2")).split(","))
    bench = BenchmarkConfig(seeds=seeds)
    if cfg.get("detector_steps"):
        bench = dataclasses.replace(bench, detector_steps=int(cfg["detector_steps"]))
    if cfg.get("keypoint_steps"):
        bench = dataclasses.replace(bench, keypoint_steps=int(cfg["keypoint_steps"]))
    result = run_benchmark(bench, telemetry_dir=cfg.get("telemetry_dir"))
    summary = result.summary()
    print(json.dumps(summary, indent=2))
    if cfg.get("out"):
        Path(cfg["out"]).write_text(json.dumps(summary, indent=2))
        print(f"summary -> {cfg['out']}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="artpose",
                                     description="set-prediction pose estimation pipelines")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; explicit flags override it")
        p.add_argument("--seed", type=int, help="seed for all randomness")

    p = sub.add_parser("gen-data", help="generate a StickWorld dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--domain", choices=["source", "target"])
    p.add_argument("--distortion", type=float)
    p.add_argument("--stroke-min", dest="stroke_min", type=float)
    p.add_argument("--stroke-max", dest="stroke_max", type=float)
    p.add_argument("--figures-min", dest="figures_min", type=int)
    p.add_argument("--figures-max", dest="figures_max", type=int)
    p.add_argument("--occlusion-rate", dest="occlusion_rate", type=float)
    p.add_argument("--raster-size", dest="raster_size", type=int)
    p.add_argument("--strip-annotations", dest="strip_annotations", action="store_const",
                   const=True, help="emit an unlabeled pool")
    p.set_defaults(func=cmd_gen_data)

    for name, stage in (("train-detector", "boxes"), ("train-keypoints", "keypoints")):
        p = sub.add_parser(name, help=f"supervised training for the {stage} stage")
        common(p)
        p.add_argument("--scenes", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--steps", type=int)
        p.add_argument("--batch", type=int)
        p.add_argument("--lr-head", dest="lr_head", type=float)
        p.add_argument("--lr-stem", dest="lr_stem", type=float)
        p.add_argument("--telemetry")
        p.add_argument("--no-augment", dest="no_augment", action="store_const", const=True)
        p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int,
                       help="also save the checkpoint every K iterations")
        p.set_defaults(func=lambda a, s=stage: cmd_train_supervised(a, s))

    p = sub.add_parser("train-semisup", help="teacher-student training with unlabeled data")
    common(p)
    p.add_argument("--stage", required=True, choices=["boxes", "keypoints"])
    p.add_argument("--labeled", required=True)
    p.add_argument("--unlabeled", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--student-out", dest="student_out")
    p.add_argument("--detector", help="box model for pseudo-box crops (keypoints stage)")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--batch-unlabeled", dest="batch_unlabeled", type=int)
    p.add_argument("--lr-head", dest="lr_head", type=float)
    p.add_argument("--lr-stem", dest="lr_stem", type=float)
    p.add_argument("--ema-decay", dest="ema_decay", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--lambda-u", dest="lambda_u", type=float)
    p.add_argument("--box-threshold", dest="box_threshold", type=float)
    p.add_argument("--telemetry")
    p.set_defaults(func=cmd_train_semisup)

    p = sub.add_parser("eval", help="COCO-style evaluation")
    common(p)
    p.add_argument("--scenes", required=True)
    p.add_argument("--mode", choices=["box", "keypoint"])
    p.add_argument("--detector")
    p.add_argument("--keypointer")
    p.add_argument("--use-gt-boxes", dest="use_gt_boxes", action="store_const", const=True,
                   help="run stage two on annotated ground-truth boxes")
    p.add_argument("--box-threshold", dest="box_threshold", type=float)
    p.add_argument("--out", help="JSON report path")
    p.add_argument("--dump-results", dest="dump_results", help="COCO results JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("build-index", help="build the pose retrieval index")
    common(p)
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--thumbs")
    p.add_argument("--detector")
    p.add_argument("--keypointer")
    p.add_argument("--box-threshold", dest="box_threshold", type=float)
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("retrieve", help="query the index from the command line")
    common(p)
    p.add_argument("--index", required=True)
    p.add_argument("--query-id", dest="query_id", required=True)
    p.add_argument("--k", type=int)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("serve", help="run the retrieval + voting HTTP service")
    common(p)
    p.add_argument("--index", required=True)
    p.add_argument("--votes")
    p.add_argument("--thumbs")
    p.add_argument("--queries", help="comma-separated query result ids")
    p.add_argument("--num-queries", dest="num_queries", type=int)
    p.add_argument("--frontend", help="directory of built UI assets to serve at /")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("benchmark", help="paired supervised vs semi-supervised comparison")
    common(p)
    p.add_argument("--seeds", help="comma-separated seed list")
    p.add_argument("--detector-steps", dest="detector_steps", type=int)
    p.add_argument("--keypoint-steps", dest="keypoint_steps", type=int)
    p.add_argument("--telemetry-dir", dest="telemetry_dir")
    p.add_argument("--out")
    p.set_defaults(func=cmd_benchmark)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (dataio.DataError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
