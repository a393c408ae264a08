"""A/B experiment: plain IoU labeling versus classifier-refined labeling.

For every seed a fresh set of scenes is generated and split by index
parity into training and test halves. A classifier is pretrained on the
training half, proposals are labeled both ways, one subnetwork is trained
per labeling, and both are evaluated on the test half.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from pstdet import tensor_nn as tn
from pstdet.classifier import ClassifierConfig, default_architecture, extract_patches, pretrain_classifier
from pstdet.evaluation import (
    DEFAULT_FPPI_RANGE,
    FPPI_PRESETS,
    MR_FLOOR,
    Detection,
    EvalCurve,
    counts_at,
    mr_fppi_curve,
)
from pstdet.geometry import BoundingBox, ScoredBox, nms
from pstdet.io import atomic_write_text
from pstdet.labeling import LabeledProposals, Thresholds, iou_label, pst_label, sample_minibatch
from pstdet.synth import RpnSimConfig, Scene, SceneConfig, generate_scenes, misleading_negative_oracle, proposal_rng, simulate_proposals

log = logging.getLogger(__name__)

ARMS = ("baseline", "pst")


class ConfigError(ValueError):
    pass


class NoPositivesError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    scene: SceneConfig = SceneConfig()
    rpn: RpnSimConfig = RpnSimConfig()
    thresholds: Thresholds = Thresholds()
    classifier: ClassifierConfig = ClassifierConfig(channels=(4, 8, 16, 32, 32), negative_max_coverage=0.3)
    classifier_train: tn.TrainConfig = tn.TrainConfig(lr=0.01, momentum=0.9, epochs=6, batch_size=16)
    subnet_train: tn.TrainConfig = tn.TrainConfig(lr=0.01, momentum=0.9, epochs=4, batch_size=16)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    n_scenes: int = 80
    # extra scenes, never evaluated on, that only feed classifier pretraining
    pretrain_scenes: int = 80
    batch_per_image: int = 32
    pos_fraction: float = 0.25
    nms_thresh: float = 0.3
    eval_iou: float = 0.5
    score_threshold: float = 0.5
    misleading_coverage: float = 0.5
    fppi_range: tuple[float, float] = DEFAULT_FPPI_RANGE
    fppi_points: int = 9
    mr_floor: float = MR_FLOOR
    out_dir: str | None = None

    def __post_init__(self) -> None:
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        lo, hi = self.fppi_range
        if not 0 < lo < hi:
            raise ConfigError(f"fppi_range {self.fppi_range} must be positive and increasing")
        if self.n_scenes < 2:
            raise ConfigError("n_scenes must be >= 2 (train/test split)")
        if self.pretrain_scenes < 0:
            raise ConfigError("pretrain_scenes must be >= 0")
        if self.batch_per_image < 1 or not 0.0 <= self.pos_fraction <= 1.0:
            raise ConfigError("bad minibatch settings")
        for name in ("nms_thresh", "eval_iou", "score_threshold", "misleading_coverage"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known - {"fppi_preset"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            kw: dict = {}
            if "scene" in d:
                kw["scene"] = SceneConfig.from_dict(d["scene"])
            if "rpn" in d:
                kw["rpn"] = RpnSimConfig.from_dict(d["rpn"])
            if "thresholds" in d:
                kw["thresholds"] = Thresholds(**d["thresholds"])
            if "classifier" in d:
                kw["classifier"] = ClassifierConfig.from_dict(d["classifier"])
            for name in ("classifier_train", "subnet_train"):
                if name in d:
                    kw[name] = replace(cls.__dataclass_fields__[name].default, **d[name])
            if "seeds" in d:
                kw["seeds"] = tuple(int(s) for s in d["seeds"])
            if "fppi_preset" in d:
                if d["fppi_preset"] not in FPPI_PRESETS:
                    raise ConfigError(f"unknown fppi_preset {d['fppi_preset']!r}")
                kw["fppi_range"] = FPPI_PRESETS[d["fppi_preset"]]
            if "fppi_range" in d:
                kw["fppi_range"] = tuple(float(v) for v in d["fppi_range"])
            for name in ("n_scenes", "pretrain_scenes", "batch_per_image", "fppi_points"):
                if name in d:
                    kw[name] = int(d[name])
            for name in ("pos_fraction", "nms_thresh", "eval_iou", "score_threshold", "misleading_coverage", "mr_floor"):
                if name in d:
                    kw[name] = float(d[name])
            if "out_dir" in d:
                kw["out_dir"] = d["out_dir"]
            return cls(**kw)
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc


# -- subnetwork -----------------------------------------------------------


@dataclass
class SubnetInfo:
    samples: int = 0
    positives: int = 0
    negatives: int = 0
    # images whose minibatch held positives but no negatives
    no_negative_batches: int = 0


def train_subnetwork(
    scenes: Sequence[Scene],
    proposals: Sequence[Sequence[BoundingBox]],
    labels: Sequence[LabeledProposals],
    tcfg: tn.TrainConfig,
    ccfg: ClassifierConfig = ClassifierConfig(),
    batch_per_image: int = 32,
    pos_fraction: float = 0.25,
) -> tuple[tn.Network, SubnetInfo]:
    """Train a patch classifier on proposals drawn from each image's training set.

    A fresh minibatch is sampled from every image each epoch; omitted
    proposals are never drawn.
    """
    if not any(lp.positives for lp in labels):
        raise NoPositivesError("no positive proposals in any image")
    size = ccfg.input_size
    # patches for every trainable proposal, extracted once
    bank = []
    for scene, props, lp in zip(scenes, proposals, labels):
        idx = lp.merged
        patches = extract_patches(scene.image, [props[i] for i in idx], size)
        bank.append({i: k for k, i in enumerate(idx)} | {"_patches": patches})
    rng = np.random.default_rng(np.random.SeedSequence([int(tcfg.seed), 11]))
    net = default_architecture(ccfg, seed=np.random.default_rng(np.random.SeedSequence([int(tcfg.seed), 13])))
    velocity = tn.zero_velocity(net)
    info = SubnetInfo()
    for epoch in range(tcfg.epochs):
        xs, ys = [], []
        for lp, entry in zip(labels, bank):
            if not lp.merged:
                continue
            chosen = sample_minibatch(lp, batch_per_image, pos_fraction, rng)
            pos = set(lp.positives)
            n_pos = sum(1 for i in chosen if i in pos)
            if epoch == 0:
                info.positives += n_pos
                info.negatives += len(chosen) - n_pos
                if n_pos and n_pos == len(chosen):
                    info.no_negative_batches += 1
            xs.append(entry["_patches"][[entry[i] for i in chosen]])
            ys.extend(1.0 if i in pos else 0.0 for i in chosen)
        x = np.concatenate(xs)
        y = np.asarray(ys)
        if epoch == 0:
            info.samples = len(y)
        order = rng.permutation(len(y))
        for start in range(0, len(y), tcfg.batch_size):
            sel = order[start : start + tcfg.batch_size]
            net, velocity, loss = tn.train_batch(net, x[sel], y[sel], velocity, tcfg)
            if not math.isfinite(loss):
                raise tn.TrainingError(epoch, "loss became non-finite")
    return net, info


def infer(scene: Scene, props: Sequence[BoundingBox], subnet: tn.Network, nms_thresh: float = 0.5, frame: int = 0) -> list[Detection]:
    """Score every proposal with ``subnet`` and keep the NMS survivors."""
    if not props:
        return []
    x = extract_patches(scene.image, props, subnet.input_shape[-1])
    scores = tn.predict_batched(subnet, x)
    dets = [ScoredBox(b, float(s)) for b, s in zip(props, scores)]
    return [Detection(dets[k].box, dets[k].score, frame) for k in nms(dets, nms_thresh)]


# -- experiment -----------------------------------------------------------


@dataclass
class ArmResult:
    seed: int
    arm: str
    lamr: float
    tp: int
    fp: int
    fn: int
    trained_negatives: int
    omitted: int
    misleading_removed_frac: float
    clean_removed_frac: float
    warnings: int
    curve: EvalCurve | None = None
    detections: list[list[Detection]] = field(default_factory=list)
    gts: list[list[BoundingBox]] = field(default_factory=list)

    def row(self) -> dict:
        return {
            "seed": self.seed,
            "arm": self.arm,
            "lamr": self.lamr,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "misleading_removed_frac": self.misleading_removed_frac,
            "clean_removed_frac": self.clean_removed_frac,
        }


@dataclass
class Report:
    config: ExperimentConfig
    results: list[ArmResult] = field(default_factory=list)
    misleading: dict[int, dict] = field(default_factory=dict)

    def arm(self, name: str) -> list[ArmResult]:
        return [r for r in self.results if r.arm == name]

    def pooled_curve(self, name: str) -> EvalCurve | None:
        rs = self.arm(name)
        if not rs:
            return None
        dets = [d for r in rs for d in r.detections]
        gts = [g for r in rs for g in r.gts]
        c = self.config
        return mr_fppi_curve(dets, gts, iou_thresh=c.eval_iou, fppi_range=c.fppi_range, n_points=c.fppi_points, floor=c.mr_floor)

    def summary(self) -> dict:
        out = {}
        for name in ARMS:
            vals = [r.lamr for r in self.arm(name)]
            if vals:
                out[name] = {"mean_lamr": float(np.mean(vals)), "std_lamr": float(np.std(vals)), "n": len(vals)}
        return out


def label_stats(
    proposals: Sequence[Sequence[BoundingBox]],
    gts: Sequence[Sequence[BoundingBox]],
    labels: Sequence[LabeledProposals],
    coverage_thresh: float,
    eps_iou: float,
) -> dict:
    """How the omitted set splits between misleading and clean negatives."""
    mis = mis_removed = clean = clean_removed = 0
    for props, g, lp in zip(proposals, gts, labels):
        omitted = set(lp.omitted)
        for i in lp.raw_negatives:
            if misleading_negative_oracle(props[i], g, coverage_thresh, eps_iou):
                mis += 1
                mis_removed += i in omitted
            else:
                clean += 1
                clean_removed += i in omitted
    return {
        "misleading": mis,
        "clean": clean,
        "misleading_removed": mis_removed,
        "clean_removed": clean_removed,
        "misleading_removed_frac": mis_removed / mis if mis else 0.0,
        "clean_removed_frac": clean_removed / clean if clean else 0.0,
        "misleading_frac": mis / (mis + clean) if mis + clean else 0.0,
    }


def label_lines(labels: Sequence[LabeledProposals]) -> str:
    """Canonical text of a labeling (assignments and IoUs, no classifier scores)."""
    return "".join(json.dumps(r, separators=(",", ":")) + "\n" for lp in labels for r in lp.records(include_phi=False))


def run_seed(cfg: ExperimentConfig, seed: int) -> tuple[list[ArmResult], dict]:
    scenes = generate_scenes(cfg.scene, cfg.n_scenes, seed)
    proposals = [simulate_proposals(s, cfg.rpn, proposal_rng(seed, i)) for i, s in enumerate(scenes)]
    train_idx = [i for i in range(len(scenes)) if i % 2 == 0]
    test_idx = [i for i in range(len(scenes)) if i % 2 == 1]
    train_scenes = [scenes[i] for i in train_idx]
    train_props = [proposals[i] for i in train_idx]
    train_gts = [scenes[i].gts for i in train_idx]

    pool = train_scenes + generate_scenes(cfg.scene, cfg.pretrain_scenes, seed, start=cfg.n_scenes)
    log.info("seed %d: pretraining classifier on %d scenes", seed, len(pool))
    classifier = pretrain_classifier(pool, cfg.classifier, replace(cfg.classifier_train, seed=seed))

    th = cfg.thresholds
    arms_labels = {
        "baseline": [iou_label(p, s.gts, th.eps_iou) for s, p in zip(train_scenes, train_props)],
        "pst": [pst_label(s.image, p, s.gts, classifier, th) for s, p in zip(train_scenes, train_props)],
    }
    stats = label_stats(train_props, train_gts, arms_labels["pst"], cfg.misleading_coverage, th.eps_iou)
    if th.eps >= 1.0 and label_lines(arms_labels["pst"]) != label_lines(arms_labels["baseline"]):
        raise AssertionError("eps = 1 must reproduce plain IoU labeling")

    results = []
    subnet_cfg = replace(cfg.subnet_train, seed=seed)
    for arm in ARMS:
        labels = arms_labels[arm]
        log.info("seed %d: training %s subnetwork", seed, arm)
        net, info = train_subnetwork(train_scenes, train_props, labels, subnet_cfg, cfg.classifier, cfg.batch_per_image, cfg.pos_fraction)
        dets = [infer(scenes[i], proposals[i], net, cfg.nms_thresh, frame=i) for i in test_idx]
        gts = [scenes[i].gts for i in test_idx]
        curve = mr_fppi_curve(dets, gts, iou_thresh=cfg.eval_iou, fppi_range=cfg.fppi_range, n_points=cfg.fppi_points, floor=cfg.mr_floor)
        tp, fp, fn = counts_at(dets, gts, cfg.score_threshold, cfg.eval_iou)
        arm_stats = stats if arm == "pst" else {"misleading_removed_frac": 0.0, "clean_removed_frac": 0.0}
        results.append(
            ArmResult(
                seed=seed,
                arm=arm,
                lamr=curve.lamr,
                tp=tp,
                fp=fp,
                fn=fn,
                trained_negatives=info.negatives,
                omitted=sum(len(lp.omitted) for lp in labels),
                misleading_removed_frac=arm_stats["misleading_removed_frac"],
                clean_removed_frac=arm_stats["clean_removed_frac"],
                warnings=info.no_negative_batches,
                curve=curve,
                detections=dets,
                gts=gts,
            )
        )
        log.info("seed %d %s: lamr %.4f", seed, arm, curve.lamr)
    return results, stats


def run_experiment(cfg: ExperimentConfig) -> Report:
    report = Report(cfg)
    for seed in cfg.seeds:
        results, stats = run_seed(cfg, seed)
        report.results.extend(results)
        report.misleading[seed] = stats
        if cfg.out_dir:
            partial = {"seed": seed, "rows": [r.row() for r in results], "misleading": stats}
            atomic_write_text(Path(cfg.out_dir) / f"seed_{seed}.json", json.dumps(partial, indent=1) + "\n")
    if cfg.thresholds.eps >= 1.0:
        for seed in cfg.seeds:
            a, b = [[r for r in report.results if r.seed == seed and r.arm == arm][0] for arm in ARMS]
            if {**a.row(), "arm": ""} != {**b.row(), "arm": ""}:
                raise AssertionError(f"seed {seed}: eps = 1 arms differ")
    return report
