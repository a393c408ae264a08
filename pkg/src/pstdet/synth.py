"""Synthetic pedestrian scenes and a proposal-layer simulator.

Pedestrians are drawn as simple glyphs (head disc, torso, arms, legs) on a
smooth textured background with pole/box/disc distractors. The proposal
simulator jitters ground-truth boxes, adds background boxes, and can inject
partial-body crops that contain most of a person but overlap it with an IoU
below the positive threshold.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from pstdet.geometry import BoundingBox, coverage, iou, max_coverage, max_iou


@dataclass(frozen=True)
class SceneConfig:
    width: int = 256
    height: int = 256
    n_pedestrians: tuple[int, int] = (1, 4)
    ped_height: tuple[float, float] = (48.0, 110.0)
    ped_aspect: tuple[float, float] = (0.38, 0.5)
    n_clutter: tuple[int, int] = (4, 9)
    contrast: tuple[float, float] = (0.25, 0.5)
    occlusion_prob: float = 0.1
    noise: float = 0.03
    max_gt_iou: float = 0.7

    def __post_init__(self) -> None:
        for name in ("n_pedestrians", "ped_height", "ped_aspect", "n_clutter", "contrast"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name} range {lo, hi} is empty or negative")
        if self.ped_height[1] >= self.height or self.ped_height[1] * self.ped_aspect[1] >= self.width:
            raise ValueError("pedestrians must fit inside the image")
        if self.ped_height[0] < 4:
            raise ValueError("pedestrians must be at least 4 px tall")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ValueError("occlusion_prob must be in [0, 1]")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Scene:
    image: np.ndarray
    gts: list[BoundingBox]
    distractors: list[BoundingBox] = field(default_factory=list)

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def height(self) -> int:
        return self.image.shape[0]


@dataclass(frozen=True)
class RpnSimConfig:
    jitter_per_gt: int = 8
    sigma_shift: float = 0.1
    sigma_scale: float = 0.1
    partial_crop_prob: float = 0.6
    n_background: int = 24
    distractor_frac: float = 0.4
    eps_iou: float = 0.5

    def __post_init__(self) -> None:
        if self.jitter_per_gt < 0 or self.n_background < 0:
            raise ValueError("proposal counts must be >= 0")
        if self.sigma_shift < 0 or self.sigma_scale < 0:
            raise ValueError("jitter scales must be >= 0")
        for name in ("partial_crop_prob", "distractor_frac", "eps_iou"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "RpnSimConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def scene_rng(seed: int, index: int) -> np.random.Generator:
    """Independent generator for scene ``index`` under master ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def proposal_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index), 1]))


# -- rendering ----------------------------------------------------------


def _background(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    h, w = cfg.height, cfg.width
    coarse = rng.uniform(-1.0, 1.0, size=(6, 6))
    ys = np.linspace(0, 5, h)
    xs = np.linspace(0, 5, w)
    y0 = np.minimum(ys.astype(int), 4)
    x0 = np.minimum(xs.astype(int), 4)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    tex = (
        coarse[y0][:, x0] * (1 - wy) * (1 - wx)
        + coarse[y0 + 1][:, x0] * wy * (1 - wx)
        + coarse[y0][:, x0 + 1] * (1 - wy) * wx
        + coarse[y0 + 1][:, x0 + 1] * wy * wx
    )
    return rng.uniform(0.35, 0.6) + 0.08 * tex


def _fill_rect(img, x1, y1, x2, y2, value):
    h, w = img.shape
    xa, xb = max(int(round(x1)), 0), min(int(round(x2)), w)
    ya, yb = max(int(round(y1)), 0), min(int(round(y2)), h)
    if xa < xb and ya < yb:
        img[ya:yb, xa:xb] = value


def _fill_disc(img, cx, cy, r, value):
    h, w = img.shape
    ya, yb = max(int(cy - r) - 1, 0), min(int(cy + r) + 2, h)
    xa, xb = max(int(cx - r) - 1, 0), min(int(cx + r) + 2, w)
    if xa >= xb or ya >= yb:
        return
    yy, xx = np.mgrid[ya:yb, xa:xb]
    mask = (xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2 <= r * r
    img[ya:yb, xa:xb][mask] = value


def _draw_pedestrian(img, box: BoundingBox, rng, contrast):
    x1, y1, w, h = box.x1, box.y1, box.width, box.height
    base = float(np.median(img[int(y1) : int(box.y2), int(x1) : int(box.x2)]))
    sign = 1.0 if rng.random() < 0.5 else -1.0
    body = float(np.clip(base + sign * rng.uniform(*contrast), 0.0, 1.0))
    legs = float(np.clip(body + rng.uniform(-0.08, 0.08), 0.0, 1.0))
    r = 0.1 * h
    cx = x1 + w / 2
    _fill_disc(img, cx, y1 + r, r, body)
    _fill_rect(img, x1 + 0.2 * w, y1 + 0.21 * h, x1 + 0.8 * w, y1 + 0.6 * h, body)
    _fill_rect(img, x1, y1 + 0.23 * h, x1 + 0.16 * w, y1 + 0.55 * h, body)
    _fill_rect(img, x1 + 0.84 * w, y1 + 0.23 * h, x1 + w, y1 + 0.55 * h, body)
    _fill_rect(img, x1 + 0.2 * w, y1 + 0.6 * h, x1 + 0.44 * w, y1 + h, legs)
    _fill_rect(img, x1 + 0.56 * w, y1 + 0.6 * h, x1 + 0.8 * w, y1 + h, legs)


def _draw_clutter(img, cfg: SceneConfig, rng) -> BoundingBox | None:
    H, W = img.shape
    kind = rng.choice(["pole", "box", "disc", "bars"])
    sign = 1.0 if rng.random() < 0.5 else -1.0
    if kind == "pole":
        bw = rng.uniform(3, 8)
        bh = rng.uniform(0.6, 1.6) * cfg.ped_height[1]
        x1, y1 = rng.uniform(0, W - bw), rng.uniform(-0.2 * bh, H - 0.5 * bh)
        box = (x1, y1, x1 + bw, y1 + bh)
    elif kind == "box":
        bw, bh = rng.uniform(12, 60), rng.uniform(12, 60)
        x1, y1 = rng.uniform(0, W - bw), rng.uniform(0, H - bh)
        box = (x1, y1, x1 + bw, y1 + bh)
    elif kind == "disc":
        r = rng.uniform(4, 14)
        cx, cy = rng.uniform(r, W - r), rng.uniform(r, H - r)
        box = (cx - r, cy - r, cx + r, cy + r)
    else:
        bh = rng.uniform(*cfg.ped_height) * 0.45
        bw = bh * 0.5
        x1, y1 = rng.uniform(0, W - bw), rng.uniform(0, H - bh)
        box = (x1, y1, x1 + bw, y1 + bh)
    x1, y1, x2, y2 = box
    ya, yb = int(np.clip(y1, 0, H - 1)), int(np.clip(y2, 1, H))
    xa, xb = int(np.clip(x1, 0, W - 1)), int(np.clip(x2, 1, W))
    base = float(np.median(img[ya : max(yb, ya + 1), xa : max(xb, xa + 1)]))
    value = float(np.clip(base + sign * rng.uniform(*cfg.contrast), 0.0, 1.0))
    if kind == "pole":
        _fill_rect(img, x1, y1, x2, y2, value)
        if rng.random() < 0.5:
            _fill_disc(img, (x1 + x2) / 2, y1, 2.5 * (x2 - x1), value)
    elif kind == "box":
        _fill_rect(img, x1, y1, x2, y2, value)
    elif kind == "disc":
        _fill_disc(img, (x1 + x2) / 2, (y1 + y2) / 2, (x2 - x1) / 2, value)
    else:
        gap = 0.3 * (x2 - x1)
        half = (x2 - x1 - gap) / 2
        _fill_rect(img, x1, y1, x1 + half, y2, value)
        _fill_rect(img, x2 - half, y1, x2, y2, value)
    clipped = BoundingBox(x1, y1, x2, y2).clip(W, H)
    return clipped


def generate_scene(cfg: SceneConfig, rng: np.random.Generator) -> Scene:
    """Render one scene; identical generator state gives an identical scene."""
    img = _background(cfg, rng)
    distractors = []
    for _ in range(int(rng.integers(cfg.n_clutter[0], cfg.n_clutter[1] + 1))):
        box = _draw_clutter(img, cfg, rng)
        if box is not None:
            distractors.append(box)

    n_ped = int(rng.integers(cfg.n_pedestrians[0], cfg.n_pedestrians[1] + 1))
    gts: list[BoundingBox] = []
    attempts = 0
    while len(gts) < n_ped:
        attempts += 1
        if attempts > 10_000:
            raise RuntimeError(f"could not place {n_ped} pedestrians with IoU < {cfg.max_gt_iou}")
        h = float(round(rng.uniform(*cfg.ped_height)))
        w = float(max(2, round(h * rng.uniform(*cfg.ped_aspect))))
        x1 = float(rng.integers(0, cfg.width - int(w) + 1))
        y1 = float(rng.integers(0, cfg.height - int(h) + 1))
        box = BoundingBox(x1, y1, x1 + w, y1 + h)
        if all(iou(box, g) < cfg.max_gt_iou for g in gts):
            gts.append(box)
    # farther (higher) pedestrians first so nearer ones overlap them
    for box in sorted(gts, key=lambda b: (b.y2, b.x1)):
        _draw_pedestrian(img, box, rng, cfg.contrast)
        if rng.random() < cfg.occlusion_prob:
            frac = rng.uniform(0.25, 0.5)
            occ_value = float(np.clip(rng.uniform(0.3, 0.65), 0, 1))
            _fill_rect(img, box.x1 - 2, box.y2 - frac * box.height, box.x2 + 2, box.y2 + 2, occ_value)

    if cfg.noise > 0:
        img = img + rng.normal(0.0, cfg.noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return Scene(img, gts, distractors)


def generate_scenes(cfg: SceneConfig, count: int, seed: int, start: int = 0) -> list[Scene]:
    return [generate_scene(cfg, scene_rng(seed, i)) for i in range(start, start + count)]


# -- proposal simulation ------------------------------------------------


def _jittered(gt: BoundingBox, cfg: RpnSimConfig, rng) -> BoundingBox | None:
    w, h = gt.width, gt.height
    dx = rng.normal(0.0, cfg.sigma_shift) * w
    dy = rng.normal(0.0, cfg.sigma_shift) * h
    nw = w * np.exp(rng.normal(0.0, cfg.sigma_scale))
    nh = h * np.exp(rng.normal(0.0, cfg.sigma_scale))
    x1 = gt.x1 + dx + (w - nw) / 2
    y1 = gt.y1 + dy + (h - nh) / 2
    try:
        return BoundingBox(x1, y1, x1 + nw, y1 + nh)
    except ValueError:
        return None


def partial_crop(gt: BoundingBox, direction: str, cut: float, extend: float) -> BoundingBox:
    """Keep ``1 - cut`` of ``gt`` along one axis and extend outward by ``extend``.

    The IoU with ``gt`` is ``(1 - cut) / (1 + extend)`` and the covered
    fraction of ``gt`` is ``1 - cut``.
    """
    w, h = gt.width, gt.height
    if direction == "down":
        return BoundingBox(gt.x1, gt.y1 + cut * h, gt.x2, gt.y2 + extend * h)
    if direction == "up":
        return BoundingBox(gt.x1, gt.y1 - extend * h, gt.x2, gt.y2 - cut * h)
    if direction == "right":
        return BoundingBox(gt.x1 + cut * w, gt.y1, gt.x2 + extend * w, gt.y2)
    if direction == "left":
        return BoundingBox(gt.x1 - extend * w, gt.y1, gt.x2 - cut * w, gt.y2)
    raise ValueError(f"unknown direction {direction!r}")


def _partial_crop_for(gt: BoundingBox, width: int, height: int, cfg: RpnSimConfig, rng) -> BoundingBox | None:
    directions = ["down", "up", "down", "up", "left", "right"]
    order = rng.permutation(len(directions))
    cut = rng.uniform(0.2, 0.45)
    extra = rng.uniform(0.05, 0.35)
    for k in order:
        extend = (1.0 - 2.0 * cut) + extra
        box = partial_crop(gt, directions[k], cut, extend).clip(width, height)
        if box is None:
            continue
        if coverage(gt, box) >= 0.5 and iou(gt, box) < cfg.eps_iou:
            return box
    return None


def simulate_proposals(scene: Scene, cfg: RpnSimConfig, rng: np.random.Generator) -> list[BoundingBox]:
    """Emit proposals for ``scene``: jittered GT copies, partial-body crops,
    distractor-anchored boxes and uniform background boxes, all clipped to
    the image."""
    W, H = scene.width, scene.height
    props: list[BoundingBox] = []
    for gt in scene.gts:
        for _ in range(cfg.jitter_per_gt):
            box = _jittered(gt, cfg, rng)
            box = box.clip(W, H) if box is not None else None
            if box is not None:
                props.append(box)
        if cfg.partial_crop_prob > 0 and rng.random() < cfg.partial_crop_prob:
            box = _partial_crop_for(gt, W, H, cfg, rng)
            if box is not None:
                props.append(box)
    heights = [g.height for g in scene.gts] or [0.25 * H]
    lo, hi = 0.6 * min(heights), 1.3 * max(heights)
    for _ in range(cfg.n_background):
        bh = rng.uniform(max(lo, 8.0), max(hi, 12.0))
        bw = bh * rng.uniform(0.3, 0.6)
        if scene.distractors and rng.random() < cfg.distractor_frac:
            d = scene.distractors[int(rng.integers(len(scene.distractors)))]
            cx = (d.x1 + d.x2) / 2 + rng.normal(0, 0.15) * bw
            cy = (d.y1 + d.y2) / 2 + rng.normal(0, 0.15) * bh
        else:
            cx, cy = rng.uniform(0, W), rng.uniform(0, H)
        box = BoundingBox(cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2).clip(W, H)
        if box is not None:
            props.append(box)
    return props


def misleading_negative_oracle(prop: BoundingBox, gts, coverage_thresh: float = 0.5, eps_iou: float = 0.5) -> bool:
    """True for a proposal holding most of a person yet labeled negative by IoU."""
    if not (0.0 <= coverage_thresh <= 1.0 and 0.0 <= eps_iou <= 1.0):
        raise ValueError("thresholds must be in [0, 1]")
    if not gts:
        return False
    return max_coverage(prop, gts) >= coverage_thresh and max_iou(prop, gts)[0] < eps_iou
