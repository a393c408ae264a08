"""Proposal labeling: IoU partition refined by the pedestrian-sensitive classifier.

Proposals whose best IoU with a ground truth reaches ``eps_iou`` are
positives. The rest are re-scored by a frozen classifier; those scoring at
least ``eps`` carry too much of a person to serve as negatives and are
omitted from training altogether (they are not promoted to positives
either, since their localisation is poor).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from pstdet import tensor_nn as tn
from pstdet.classifier import extract_patches, score_patches
from pstdet.geometry import BoundingBox, max_iou

Scorer = Callable[[np.ndarray, Sequence[BoundingBox]], Sequence[float]]


@dataclass(frozen=True)
class Thresholds:
    eps_iou: float = 0.5
    eps: float = 0.5

    def __post_init__(self) -> None:
        for name in ("eps_iou", "eps"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


@dataclass(frozen=True)
class IoUScores:
    scores: tuple[float, ...]
    matched: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.scores)


@dataclass
class LabeledProposals:
    """Index sets into the proposal list.

    ``negatives`` are the refined negatives, ``omitted`` the negatives the
    classifier rejected, ``merged`` the training set (positives plus refined
    negatives). ``phi`` maps every raw negative index to its classifier score.
    """

    n: int
    iou: tuple[float, ...]
    positives: list[int]
    negatives: list[int]
    omitted: list[int]
    merged: list[int]
    phi: dict[int, float] = field(default_factory=dict)

    @property
    def raw_negatives(self) -> list[int]:
        return sorted(self.negatives + self.omitted)

    def set_of(self, i: int) -> str:
        if i in self._pos_set:
            return "pos"
        if i in self._neg_set:
            return "neg"
        return "omitted"

    def __post_init__(self) -> None:
        self._pos_set = set(self.positives)
        self._neg_set = set(self.negatives)

    def records(self, include_phi: bool = True) -> list[dict]:
        """One JSON-ready record per proposal, in proposal order."""
        out = []
        for i in range(self.n):
            rec = {"index": i, "set": self.set_of(i), "iou": self.iou[i]}
            if include_phi:
                rec["phi"] = self.phi.get(i)
            out.append(rec)
        return out


def score_iou(props: Sequence[BoundingBox], gts: Sequence[BoundingBox]) -> IoUScores:
    """Best IoU of each proposal over all ground truths (lowest index on ties)."""
    best = [max_iou(p, gts) for p in props]
    return IoUScores(tuple(b[0] for b in best), tuple(b[1] for b in best))


def partition(scores: IoUScores | Sequence[float], eps_iou: float) -> tuple[list[int], list[int]]:
    """Split indices into ``IoU >= eps_iou`` and ``IoU < eps_iou``."""
    if not 0.0 <= eps_iou <= 1.0:
        raise ValueError(f"eps_iou={eps_iou} outside [0, 1]")
    vals = scores.scores if isinstance(scores, IoUScores) else scores
    pos = [i for i, v in enumerate(vals) if v >= eps_iou]
    neg = [i for i, v in enumerate(vals) if v < eps_iou]
    return pos, neg


def refine_negatives(neg: Sequence[int], phi: Sequence[float], eps: float) -> tuple[list[int], list[int]]:
    """Keep a negative only if its score is strictly below ``eps``; omit the rest."""
    if len(neg) != len(phi):
        raise ValueError(f"{len(neg)} negatives but {len(phi)} scores")
    kept = [i for i, f in zip(neg, phi) if f < eps]
    omitted = [i for i, f in zip(neg, phi) if not f < eps]
    return kept, omitted


def merge(pos: Sequence[int], kept_neg: Sequence[int]) -> list[int]:
    overlap = set(pos) & set(kept_neg)
    if overlap:
        raise ValueError(f"indices {sorted(overlap)} are both positive and negative")
    return sorted(set(pos) | set(kept_neg))


def network_scorer(net: tn.Network) -> Scorer:
    size = net.input_shape[-1]

    def score(image: np.ndarray, boxes: Sequence[BoundingBox]) -> list[float]:
        return score_patches(net, extract_patches(image, boxes, size))

    return score


def pst_label(
    image: np.ndarray,
    props: Sequence[BoundingBox],
    gts: Sequence[BoundingBox],
    classifier: Union[tn.Network, Scorer],
    th: Thresholds = Thresholds(),
) -> LabeledProposals:
    """Label ``props`` for one image: IoU partition, classifier re-scoring of
    the negatives, omission of human-rich ones, merge."""
    scorer = network_scorer(classifier) if isinstance(classifier, tn.Network) else classifier
    ious = score_iou(props, gts)
    pos, neg = partition(ious, th.eps_iou)
    phi = [float(v) for v in scorer(image, [props[i] for i in neg])] if neg else []
    kept, omitted = refine_negatives(neg, phi, th.eps)
    return LabeledProposals(
        n=len(props),
        iou=ious.scores,
        positives=pos,
        negatives=kept,
        omitted=omitted,
        merged=merge(pos, kept),
        phi=dict(zip(neg, phi)),
    )


def iou_label(props: Sequence[BoundingBox], gts: Sequence[BoundingBox], eps_iou: float = 0.5) -> LabeledProposals:
    """Plain IoU labeling: every sub-threshold proposal is a negative."""
    ious = score_iou(props, gts)
    pos, neg = partition(ious, eps_iou)
    return LabeledProposals(len(props), ious.scores, pos, neg, [], merge(pos, neg))


def sample_minibatch(lp: LabeledProposals, batch: int, pos_fraction: float, rng: np.random.Generator) -> list[int]:
    """Draw up to ``ceil(batch * pos_fraction)`` positives and fill the rest
    with refined negatives, both without replacement. Omitted proposals are
    never drawn."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    if not 0.0 <= pos_fraction <= 1.0:
        raise ValueError("pos_fraction must be in [0, 1]")
    if not lp.merged:
        raise ValueError("no trainable proposals in this image")
    n_pos = min(math.ceil(batch * pos_fraction), len(lp.positives))
    n_neg = min(batch - n_pos, len(lp.negatives))
    pos = rng.choice(lp.positives, size=n_pos, replace=False).tolist() if n_pos else []
    neg = rng.choice(lp.negatives, size=n_neg, replace=False).tolist() if n_neg else []
    return [int(i) for i in pos + neg]
