"""Pedestrian-sensitive patch classifier.

A nine-layer CNN (five 3x3 convs, three 2x2 max-pools, one fully connected
sigmoid unit) that scores 64x64 grayscale patches for human content. It is
trained once on ground-truth crops versus person-free background crops and
then kept frozen while proposals are labeled.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from pstdet import tensor_nn as tn
from pstdet.geometry import BoundingBox, coverage, max_coverage
from pstdet.synth import Scene

DEFAULT_CHANNELS = (8, 16, 32, 64, 64)


@dataclass(frozen=True)
class ClassifierConfig:
    input_size: int = 64
    channels: tuple[int, ...] = DEFAULT_CHANNELS
    threshold: float = 0.5
    # background crops must overlap every person by less than this fraction
    negative_max_coverage: float = 0.1
    # extra positives per person: loose crops holding at least this much of the body
    partial_positives: int = 2
    hard_negative_frac: float = 0.5
    # share of background crops placed right next to a person
    near_negative_frac: float = 0.3
    positive_min_coverage: float = 0.5

    def __post_init__(self) -> None:
        if len(self.channels) != 5 or min(self.channels) < 1:
            raise ValueError("exactly five positive conv channel counts are required")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must be in [0, 1]")
        if self.input_size < 8 or self.input_size % 8:
            raise ValueError("input_size must be a positive multiple of 8")

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierConfig":
        kw = dict(d)
        if "channels" in kw:
            kw["channels"] = tuple(kw["channels"])
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Patch:
    tensor: np.ndarray
    index: int = -1


class InsufficientDataError(ValueError):
    pass


def architecture(cfg: ClassifierConfig) -> list[tn.LayerSpec]:
    c1, c2, c3, c4, c5 = cfg.channels
    return [
        tn.conv(c1),
        tn.maxpool(),
        tn.conv(c2),
        tn.maxpool(),
        tn.conv(c3),
        tn.maxpool(),
        tn.conv(c4),
        tn.conv(c5),
        tn.fullyconnected(1, activation="sigmoid"),
    ]


def default_architecture(cfg: ClassifierConfig = ClassifierConfig(), seed: int | np.random.Generator | None = None) -> tn.Network:
    """The nine-layer classifier. Zero weights unless ``seed`` is given."""
    shape = (1, cfg.input_size, cfg.input_size)
    if seed is None:
        return tn.Network(architecture(cfg), shape)
    return tn.init_network(architecture(cfg), shape, seed)


def extract_patch(image: np.ndarray, box: BoundingBox, size: int = 64, index: int = -1) -> Patch:
    """Crop ``box`` (clamped to the image) and resample it bilinearly to ``size`` x ``size``.

    Output pixel centres are spread evenly over the crop; samples are taken
    at pixel centres and clamped to the pixels the crop touches, so a crop
    exactly ``size`` pixels wide on integer coordinates is copied verbatim.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ValueError("image must be a non-empty 2-D array")
    H, W = img.shape
    crop = box.clip(W, H)
    if crop is None:
        raise ValueError(f"box {box.as_tuple()} does not intersect the {W}x{H} image")
    ys = _sample_coords(crop.y1, crop.y2, size)
    xs = _sample_coords(crop.x1, crop.x2, size)
    out = _bilinear(img, ys, xs)
    return Patch(out[None], index)


def _sample_coords(lo: float, hi: float, size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    step = (hi - lo) / size
    pos = lo + (np.arange(size) + 0.5) * step - 0.5
    first = np.floor(lo)
    last = np.ceil(hi) - 1
    pos = np.clip(pos, first, last)
    i0 = np.floor(pos)
    frac = pos - i0
    i0 = i0.astype(np.intp)
    i1 = np.minimum(i0 + 1, int(last))
    return i0, i1, frac


def _bilinear(img, ys, xs) -> np.ndarray:
    y0, y1, fy = ys
    x0, x1, fx = xs
    fy = fy[:, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def center(patches: np.ndarray) -> np.ndarray:
    """Subtract each patch's mean intensity."""
    x = np.asarray(patches, dtype=np.float64)
    return x - x.mean(axis=tuple(range(1, x.ndim)), keepdims=True)


def extract_patches(image: np.ndarray, boxes: Sequence[BoundingBox], size: int = 64, normalize: bool = True) -> np.ndarray:
    """Stack of patches ``(N, 1, size, size)``, mean-centred unless ``normalize`` is false."""
    if not boxes:
        return np.zeros((0, 1, size, size))
    x = np.stack([extract_patch(image, b, size).tensor for b in boxes])
    return center(x) if normalize else x


def score_patches(net: tn.Network, patches: Sequence[Patch] | np.ndarray) -> list[float]:
    """Human-content score of each patch, in input order.

    Patches are mean-centred first; centring twice only adds rounding, so
    output from ``extract_patches`` can be passed straight in.
    """
    if isinstance(patches, np.ndarray):
        x = patches
    else:
        if not patches:
            return []
        x = np.stack([p.tensor for p in patches])
    if len(x) == 0:
        return []
    return tn.predict_batched(net, center(x)).tolist()


def _background_boxes(scene: Scene, count: int, cfg: ClassifierConfig, rng) -> list[BoundingBox]:
    """Crops holding little of any person: some centred on distractor
    objects, some placed beside a person, the rest uniform."""
    heights = [g.height for g in scene.gts] or [0.3 * scene.height]
    lo, hi = 0.5 * min(heights), 1.3 * max(heights)
    out: list[BoundingBox] = []
    attempts = 0
    while len(out) < count and attempts < 200 * max(count, 1):
        attempts += 1
        bh = rng.uniform(max(lo, 8.0), max(hi, 12.0))
        bw = bh * rng.uniform(0.3, 0.6)
        mode = rng.random()
        if scene.gts and mode < cfg.near_negative_frac:
            g = scene.gts[int(rng.integers(len(scene.gts)))]
            bh = g.height * rng.uniform(0.7, 1.3)
            bw = bh * rng.uniform(0.3, 0.6)
            angle = rng.uniform(0.0, 2.0 * np.pi)
            cx = (g.x1 + g.x2) / 2 + np.cos(angle) * rng.uniform(0.6, 1.2) * g.width
            cy = (g.y1 + g.y2) / 2 + np.sin(angle) * rng.uniform(0.4, 1.0) * g.height
        elif scene.distractors and mode < cfg.near_negative_frac + cfg.hard_negative_frac:
            d = scene.distractors[int(rng.integers(len(scene.distractors)))]
            cx = (d.x1 + d.x2) / 2 + rng.normal(0.0, 0.2) * bw
            cy = (d.y1 + d.y2) / 2 + rng.normal(0.0, 0.2) * bh
        else:
            cx = rng.uniform(bw / 2, scene.width - bw / 2)
            cy = rng.uniform(bh / 2, scene.height - bh / 2)
        box = BoundingBox(cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2).clip(scene.width, scene.height)
        if box is not None and max_coverage(box, scene.gts) < cfg.negative_max_coverage:
            out.append(box)
    return out


def _loose_crops(scene: Scene, gt: BoundingBox, count: int, cfg: ClassifierConfig, rng) -> list[BoundingBox]:
    out: list[BoundingBox] = []
    attempts = 0
    while len(out) < count and attempts < 100 * count:
        attempts += 1
        w = gt.width * rng.uniform(0.7, 1.5)
        h = gt.height * rng.uniform(0.6, 1.6)
        cx = (gt.x1 + gt.x2) / 2 + rng.normal(0.0, 0.3) * gt.width
        cy = (gt.y1 + gt.y2) / 2 + rng.normal(0.0, 0.3) * gt.height
        box = BoundingBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2).clip(scene.width, scene.height)
        if box is not None and coverage(gt, box) >= cfg.positive_min_coverage:
            out.append(box)
    return out


def pretraining_set(scenes: Sequence[Scene], cfg: ClassifierConfig, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Person crops (label 1) and as many person-free crops (label 0).

    Positives are the ground-truth crops plus ``partial_positives`` loose
    crops per person that still hold most of the body.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7]))
    xs, ys = [], []
    for scene in scenes:
        if not scene.gts:
            continue
        pos = list(scene.gts)
        for gt in scene.gts:
            pos.extend(_loose_crops(scene, gt, cfg.partial_positives, cfg, rng))
        xs.append(extract_patches(scene.image, pos, cfg.input_size))
        ys.append(np.ones(len(pos)))
        negs = _background_boxes(scene, len(pos), cfg, rng)
        if negs:
            xs.append(extract_patches(scene.image, negs, cfg.input_size))
            ys.append(np.zeros(len(negs)))
    if not xs:
        raise InsufficientDataError("no pedestrians in the pretraining scenes")
    return np.concatenate(xs), np.concatenate(ys)


def pretrain_classifier(scenes: Sequence[Scene], cfg: ClassifierConfig, tcfg: tn.TrainConfig) -> tn.Network:
    """Train the classifier from scratch on ``scenes``; deterministic in ``tcfg.seed``."""
    if not scenes:
        raise InsufficientDataError("no scenes to pretrain on")
    x, y = pretraining_set(scenes, cfg, tcfg.seed)
    if y.sum() < 1:
        raise InsufficientDataError("no positive patches")
    net = default_architecture(cfg, seed=np.random.default_rng(np.random.SeedSequence([int(tcfg.seed), 3])))
    net, _ = tn.train(net, x, y, tcfg)
    return net


def patch_accuracy(net: tn.Network, x: np.ndarray, y: np.ndarray, threshold: float = 0.5) -> float:
    if len(x) == 0:
        raise ValueError("no patches to evaluate")
    pred = tn.predict_batched(net, x) >= threshold
    return float(np.mean(pred == (np.asarray(y) > 0.5)))
