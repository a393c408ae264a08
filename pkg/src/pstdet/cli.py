"""Command-line entry point.

Exit codes: 0 on success, 2 on a configuration error, 3 on a runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from pstdet import tensor_nn as tn
from pstdet.classifier import architecture, pretrain_classifier
from pstdet.cost_model import cost_csv, network_cost, rf_csv
from pstdet.evaluation import counts_at, mr_fppi_curve
from pstdet.experiment import ConfigError, ExperimentConfig, infer, run_experiment, train_subnetwork
from pstdet.geometry import BoundingBox
from pstdet.io import atomic_write_text, read_jsonl, read_pgm, write_jsonl, write_pgm
from pstdet.labeling import LabeledProposals, Thresholds, iou_label, pst_label
from pstdet.report import curves_csv, curves_svg, emit_report
from pstdet.synth import Scene, generate_scene, proposal_rng, scene_rng, simulate_proposals

log = logging.getLogger("pstdet")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _boxes(records) -> list[BoundingBox]:
    return [BoundingBox.from_dict(r) for r in records]


def _box_records(boxes) -> list[dict]:
    return [b.to_dict() for b in boxes]


def load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return ExperimentConfig.from_dict(data)


def _out(args, default: str = ".") -> Path:
    return Path(args.out if args.out is not None else default)


# -- dataset directories ------------------------------------------------------


def load_dataset(data_dir: str | Path) -> tuple[list[int], list[Scene], list[list[BoundingBox]]]:
    """Scenes and proposals written by ``synth``, ordered by frame index."""
    d = Path(data_dir)
    images = sorted(d.glob("image_*.pgm"))
    if not images:
        raise FileNotFoundError(f"no image_*.pgm files in {d}")
    ids, scenes, props = [], [], []
    for img_path in images:
        k = int(img_path.stem.split("_")[1])
        gts = _boxes(read_jsonl(d / f"gts_{k:05d}.jsonl"))
        dpath = d / f"distractors_{k:05d}.jsonl"
        distractors = _boxes(read_jsonl(dpath)) if dpath.exists() else []
        ids.append(k)
        scenes.append(Scene(read_pgm(img_path), gts, distractors))
        props.append(_boxes(read_jsonl(d / f"proposals_{k:05d}.jsonl")))
    return ids, scenes, props


def labels_from_records(records: list[dict]) -> LabeledProposals:
    records = sorted(records, key=lambda r: r["index"])
    sets = {"pos": [], "neg": [], "omitted": []}
    for r in records:
        if r["set"] not in sets:
            raise ValueError(f"unknown set {r['set']!r} in label record {r['index']}")
        sets[r["set"]].append(int(r["index"]))
    phi = {int(r["index"]): float(r["phi"]) for r in records if r.get("phi") is not None}
    pos, neg = sets["pos"], sets["neg"]
    return LabeledProposals(len(records), tuple(float(r["iou"]) for r in records), pos, neg, sets["omitted"], sorted(pos + neg), phi)


# -- subcommands -------------------------------------------------------------------


def cmd_synth(args, cfg: ExperimentConfig) -> None:
    out = _out(args)
    for k in range(args.start, args.start + args.count):
        scene = generate_scene(cfg.scene, scene_rng(args.seed, k))
        props = simulate_proposals(scene, cfg.rpn, proposal_rng(args.seed, k))
        write_pgm(out / f"image_{k:05d}.pgm", scene.image)
        write_jsonl(out / f"gts_{k:05d}.jsonl", _box_records(scene.gts))
        write_jsonl(out / f"distractors_{k:05d}.jsonl", _box_records(scene.distractors))
        write_jsonl(out / f"proposals_{k:05d}.jsonl", _box_records(props))
    log.info("wrote %d scenes to %s", args.count, out)


def cmd_train_classifier(args, cfg: ExperimentConfig) -> None:
    _, scenes, _ = load_dataset(args.data)
    net = pretrain_classifier(scenes, cfg.classifier, replace(cfg.classifier_train, seed=args.seed))
    path = _out(args) / "classifier.json"
    net.save(path)
    log.info("classifier saved to %s", path)


def cmd_label(args, cfg: ExperimentConfig) -> None:
    image = read_pgm(args.image)
    props = _boxes(read_jsonl(args.proposals))
    gts = _boxes(read_jsonl(args.gts))
    try:
        th = Thresholds(
            args.eps_iou if args.eps_iou is not None else cfg.thresholds.eps_iou,
            args.eps if args.eps is not None else cfg.thresholds.eps,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if args.model is None:
        lp = iou_label(props, gts, th.eps_iou)
    else:
        lp = pst_label(image, props, gts, tn.Network.load(args.model), th)
    out = Path(args.out) if args.out is not None else Path("labels.jsonl")
    write_jsonl(out, lp.records())
    log.info("%d proposals: %d pos, %d neg, %d omitted", lp.n, len(lp.positives), len(lp.negatives), len(lp.omitted))


def cmd_train_subnet(args, cfg: ExperimentConfig) -> None:
    ids, scenes, props = load_dataset(args.data)
    if args.labels is None:
        labels = [iou_label(p, s.gts, cfg.thresholds.eps_iou) for s, p in zip(scenes, props)]
    else:
        labels = [labels_from_records(read_jsonl(Path(args.labels) / f"labels_{k:05d}.jsonl")) for k in ids]
    net, info = train_subnetwork(
        scenes, props, labels, replace(cfg.subnet_train, seed=args.seed), cfg.classifier, cfg.batch_per_image, cfg.pos_fraction
    )
    if info.no_negative_batches:
        log.warning("%d images contributed positives but no negatives", info.no_negative_batches)
    path = _out(args) / "subnet.json"
    net.save(path)
    log.info("subnetwork saved to %s", path)


def cmd_eval(args, cfg: ExperimentConfig) -> None:
    ids, scenes, props = load_dataset(args.data)
    net = tn.Network.load(args.model)
    nms_thresh = args.nms if args.nms is not None else cfg.nms_thresh
    dets = [infer(s, p, net, nms_thresh, frame=k) for k, s, p in zip(ids, scenes, props)]
    gts = [s.gts for s in scenes]
    curve = mr_fppi_curve(dets, gts, iou_thresh=cfg.eval_iou, fppi_range=cfg.fppi_range, n_points=cfg.fppi_points, floor=cfg.mr_floor)
    tp, fp, fn = counts_at(dets, gts, cfg.score_threshold, cfg.eval_iou)
    out = _out(args)
    write_jsonl(out / "detections.jsonl", [{"frame": d.frame, **d.box.to_dict(), "confidence": d.confidence} for fd in dets for d in fd])
    atomic_write_text(out / "curves.csv", curves_csv({args.arm: curve}))
    atomic_write_text(out / "curves.svg", curves_svg({args.arm: curve}, cfg.fppi_range))
    metrics = {"lamr": curve.lamr, "tp": tp, "fp": fp, "fn": fn, "frames": curve.n_frames, "gts": curve.n_gt}
    atomic_write_text(out / "metrics.json", json.dumps(metrics, indent=1, sort_keys=True) + "\n")
    log.info("lamr %.4f  tp %d  fp %d  fn %d", curve.lamr, tp, fp, fn)


def cmd_experiment(args, cfg: ExperimentConfig) -> None:
    if args.seeds:
        cfg = replace(cfg, seeds=tuple(args.seeds))
    elif args.seed_given:
        cfg = replace(cfg, seeds=(args.seed,))
    out = _out(args, "results")
    cfg = replace(cfg, out_dir=str(out / "partial"))
    report = run_experiment(cfg)
    emit_report(report, out)
    for arm, s in report.summary().items():
        log.info("%-8s lamr %.4f +- %.4f over %d seeds", arm, s["mean_lamr"], s["std_lamr"], s["n"])


def _layers_and_shape(cfg: ExperimentConfig):
    size = cfg.classifier.input_size
    return architecture(cfg.classifier), (1, size, size)


def cmd_cost(args, cfg: ExperimentConfig) -> None:
    layers, shape = _layers_and_shape(cfg)
    text = cost_csv(network_cost(layers, shape))
    if args.out is None:
        sys.stdout.write(text)
    else:
        atomic_write_text(Path(args.out) / "cost.csv", text)


def cmd_rf(args, cfg: ExperimentConfig) -> None:
    layers, shape = _layers_and_shape(cfg)
    text = rf_csv(layers, shape[-1])
    if args.out is None:
        sys.stdout.write(text)
    else:
        atomic_write_text(Path(args.out) / "rf.csv", text)


# -- parser ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (default 0)")
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON config mirroring ExperimentConfig fields")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory (a file for 'label')")
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS, help="only log warnings and errors")

    p = argparse.ArgumentParser(prog="pstdet", description="Proposal labeling with a pedestrian-sensitive classifier.", parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate synthetic scenes and proposals")
    s.add_argument("--count", type=int, default=10)
    s.add_argument("--start", type=int, default=0, help="index of the first scene")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train-classifier", parents=[common], help="pretrain the patch classifier on a synth directory")
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_train_classifier)

    s = sub.add_parser("label", parents=[common], help="label the proposals of one image")
    s.add_argument("--image", required=True)
    s.add_argument("--proposals", required=True)
    s.add_argument("--gts", required=True)
    s.add_argument("--model", help="classifier JSON; plain IoU labeling when omitted")
    s.add_argument("--eps-iou", type=float)
    s.add_argument("--eps", type=float)
    s.set_defaults(func=cmd_label)

    s = sub.add_parser("train-subnet", parents=[common], help="train the subnetwork on labeled proposals")
    s.add_argument("--data", required=True)
    s.add_argument("--labels", help="directory of labels_%%05d.jsonl; plain IoU labeling when omitted")
    s.set_defaults(func=cmd_train_subnet)

    s = sub.add_parser("eval", parents=[common], help="run a subnetwork on a synth directory and score it")
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--nms", type=float)
    s.add_argument("--arm", default="model", help="curve label")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("experiment", parents=[common], help="run the baseline versus PST experiment")
    s.add_argument("--seeds", type=int, nargs="+")
    s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("cost", parents=[common], help="per-layer MACs and parameters of the classifier")
    s.set_defaults(func=cmd_cost)

    s = sub.add_parser("rf", parents=[common], help="receptive field per layer of the classifier")
    s.set_defaults(func=cmd_rf)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    args.seed_given = hasattr(args, "seed")
    for name, default in (("seed", 0), ("config", None), ("out", None), ("quiet", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        args.func(args, cfg)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (OSError, ValueError, RuntimeError, KeyError, AssertionError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
