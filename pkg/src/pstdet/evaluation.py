"""Detection evaluation: greedy matching, miss-rate/FPPI curves, log-average miss rate."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from pstdet.geometry import BoundingBox, iou

DEFAULT_FPPI_RANGE = (1e-2, 1e0)
FPPI_PRESETS = {
    "default": (1e-2, 1e0),
    "wide": (1e-3, 1e0),
    "caltech": (1e-4, 1e2),
}
MR_FLOOR = 1e-4


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    confidence: float
    frame: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


def _by_confidence(dets: Sequence[Detection]) -> list[Detection]:
    return sorted(dets, key=lambda d: -d.confidence)


def match_flags(dets: Sequence[Detection], gts: Sequence[BoundingBox], iou_thresh: float = 0.5) -> list[bool]:
    """Greedy one-to-one matching in the given order; True marks a true positive.

    Each detection takes the unmatched ground truth with the highest IoU,
    provided that IoU is at least ``iou_thresh``.
    """
    used = [False] * len(gts)
    flags = []
    for d in dets:
        best, best_k = iou_thresh, -1
        for k, gt in enumerate(gts):
            if used[k]:
                continue
            v = iou(d.box, gt)
            if v >= best and (best_k < 0 or v > best):
                best, best_k = v, k
        if best_k >= 0:
            used[best_k] = True
        flags.append(best_k >= 0)
    return flags


def match_detections(dets: Sequence[Detection], gts: Sequence[BoundingBox], iou_thresh: float = 0.5) -> tuple[int, int, int]:
    """``(tp, fp, fn)`` for one frame; detections are visited by descending confidence."""
    flags = match_flags(_by_confidence(dets), gts, iou_thresh)
    tp = sum(flags)
    return tp, len(flags) - tp, len(gts) - tp


@dataclass(frozen=True)
class EvalCurve:
    """Operating points of a confidence sweep, sorted by FPPI.

    ``thresholds[k]`` produced ``(fppi[k], mr[k])``; ``inf`` stands for
    "no detections kept".
    """

    thresholds: tuple[float, ...]
    fppi: tuple[float, ...]
    mr: tuple[float, ...]
    lamr: float
    n_frames: int
    n_gt: int

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fppi, self.mr))


def log_average_miss_rate(
    fppi: Sequence[float],
    mr: Sequence[float],
    fppi_range: tuple[float, float] = DEFAULT_FPPI_RANGE,
    n_points: int = 9,
    floor: float = MR_FLOOR,
) -> float:
    """Geometric mean of the miss rate at ``n_points`` log-spaced FPPI references.

    At each reference the curve point with the largest FPPI not above it is
    used (the lowest miss rate among ties). References left of the whole
    curve count as a miss rate of 1.
    """
    lo, hi = fppi_range
    if not (0 < lo < hi):
        raise ValueError(f"bad FPPI range {fppi_range}")
    refs = np.logspace(math.log10(lo), math.log10(hi), n_points)
    f = np.asarray(fppi, dtype=np.float64)
    m = np.asarray(mr, dtype=np.float64)
    logs = []
    for r in refs:
        ok = f <= r
        if not ok.any():
            val = 1.0
        else:
            best = f[ok].max()
            val = m[ok & (f == best)].min()
        logs.append(math.log(max(val, floor)))
    return math.exp(sum(logs) / len(logs))


def mr_fppi_curve(
    frame_dets: Sequence[Sequence[Detection]],
    frame_gts: Sequence[Sequence[BoundingBox]],
    thresholds: Sequence[float] | None = None,
    iou_thresh: float = 0.5,
    fppi_range: tuple[float, float] = DEFAULT_FPPI_RANGE,
    n_points: int = 9,
    floor: float = MR_FLOOR,
) -> EvalCurve:
    """Sweep a confidence threshold over all frames.

    A detection counts at threshold ``t`` when its confidence is ``>= t``.
    Without explicit ``thresholds`` every distinct confidence is used, plus
    ``inf`` (empty detector).
    """
    if not frame_dets or len(frame_dets) != len(frame_gts):
        raise ValueError("need at least one frame and one gt list per frame")
    n_frames = len(frame_dets)
    n_gt = sum(len(g) for g in frame_gts)
    # greedy matching by confidence is prefix-consistent, so one pass per frame
    # classifies every detection for all thresholds at once
    conf, tp_flag = [], []
    for dets, gts in zip(frame_dets, frame_gts):
        ordered = _by_confidence(dets)
        conf.extend(d.confidence for d in ordered)
        tp_flag.extend(match_flags(ordered, gts, iou_thresh))
    conf_a = np.asarray(conf, dtype=np.float64)
    tp_a = np.asarray(tp_flag, dtype=bool)
    if thresholds is None:
        ths = sorted(set(conf), reverse=True)
        ths = [math.inf] + ths
    else:
        ths = sorted(set(float(t) for t in thresholds), reverse=True)
    fppi, mr = [], []
    for t in ths:
        keep = conf_a >= t
        tp = int(np.count_nonzero(keep & tp_a))
        fp = int(np.count_nonzero(keep & ~tp_a))
        fppi.append(fp / n_frames)
        mr.append((n_gt - tp) / n_gt if n_gt else 0.0)
    # thresholds descend, so fppi ascends already; keep that order
    lamr = log_average_miss_rate(fppi, mr, fppi_range, n_points, floor)
    return EvalCurve(tuple(ths), tuple(fppi), tuple(mr), lamr, n_frames, n_gt)


def counts_at(frame_dets, frame_gts, threshold: float, iou_thresh: float = 0.5) -> tuple[int, int, int]:
    """Summed ``(tp, fp, fn)`` over frames for detections with confidence ``>= threshold``."""
    tp = fp = fn = 0
    for dets, gts in zip(frame_dets, frame_gts):
        a, b, c = match_detections([d for d in dets if d.confidence >= threshold], gts, iou_thresh)
        tp, fp, fn = tp + a, fp + b, fn + c
    return tp, fp, fn
