"""Label synthesis from score stacks, mIoU scoring, synthetic blob corpora and overlays."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DimMismatch, SpecInfeasible, ValidationError
from .rng import SplitMix64
from .seed_maps import ScoreStack, normalize_cam
from .tensor_io import BACKGROUND, NEUTRAL, ImageRGB, LabelMap


def _axis_weights(n_in: int, n_out: int, stride: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    src = (np.arange(n_out) + 0.5) / stride - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def upsample_bilinear(stack: ScoreStack, stride: int, out_shape: tuple[int, int] | None = None) -> ScoreStack:
    """Bilinear resize by ``stride`` with half-pixel centres and clamped coordinates.

    Output pixel ``X`` samples input coordinate ``(X + 0.5) / stride - 0.5``.
    ``out_shape`` defaults to ``(H * stride, W * stride)``.
    """
    if stride < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    h, w = stack.height, stack.width
    oh, ow = out_shape if out_shape is not None else (h * stride, w * stride)
    if stride == 1 and (oh, ow) == (h, w):
        return stack
    y0, y1, fy = _axis_weights(h, oh, stride)
    x0, x1, fx = _axis_weights(w, ow, stride)
    s = stack.scores.astype(np.float64)
    top = s[:, y0][:, :, x0] * (1 - fx) + s[:, y0][:, :, x1] * fx
    bot = s[:, y1][:, :, x0] * (1 - fx) + s[:, y1][:, :, x1] * fx
    out = top * (1 - fy)[:, None] + bot * fy[:, None]
    return stack.with_scores(out.astype(np.float32))


def synthesize_labels(stack: ScoreStack) -> LabelMap:
    """Per-pixel argmax over object channels and background (lowest index wins ties)."""
    best = np.argmax(stack.scores, axis=0)
    labels = best.astype(np.uint8)
    labels[best == stack.num_classes] = BACKGROUND
    return LabelMap(labels, num_classes=stack.num_classes)


@dataclass
class EvalReport:
    per_class_iou: dict[str, float]
    mean_iou: float
    intersection: dict[str, int]
    union: dict[str, int]
    evaluated_pixels: int
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _label_name(v: int) -> str:
    return "bkg" if v == BACKGROUND else str(v)


def miou(pred: LabelMap, gt: LabelMap, config: dict | None = None) -> EvalReport:
    """IoU per label (background included); ground-truth 255 pixels are ignored."""
    if pred.labels.shape != gt.labels.shape:
        raise DimMismatch(f"prediction {pred.labels.shape} vs ground truth {gt.labels.shape}")
    keep = gt.labels != NEUTRAL
    p = pred.labels[keep].astype(np.int64)
    g = gt.labels[keep].astype(np.int64)
    pc = np.bincount(p, minlength=256)
    gc = np.bincount(g, minlength=256)
    ic = np.bincount(p[p == g], minlength=256)
    ious, inter, union = {}, {}, {}
    for v in range(256):
        if v == NEUTRAL:
            continue
        u = int(pc[v] + gc[v] - ic[v])
        if u == 0:
            continue
        name = _label_name(v)
        inter[name] = int(ic[v])
        union[name] = u
        ious[name] = ic[v] / u
    mean = float(np.mean(list(ious.values()))) if ious else 1.0
    return EvalReport(ious, mean, inter, union, int(keep.sum()), dict(config or {}))


def mean_report(reports: list[EvalReport], config: dict | None = None) -> dict:
    """Corpus summary: mean of per-image mIoU plus pooled per-class IoU."""
    inter: dict[str, int] = {}
    union: dict[str, int] = {}
    for r in reports:
        for k, v in r.intersection.items():
            inter[k] = inter.get(k, 0) + v
        for k, v in r.union.items():
            union[k] = union.get(k, 0) + v
    pooled = {k: inter.get(k, 0) / union[k] for k in sorted(union)}
    return {
        "images": len(reports),
        "mean_image_miou": float(np.mean([r.mean_iou for r in reports])) if reports else float("nan"),
        "per_image_miou": [r.mean_iou for r in reports],
        "pooled_per_class_iou": pooled,
        "pooled_miou": float(np.mean(list(pooled.values()))) if pooled else float("nan"),
        "config": dict(config or {}),
    }


# Synthetic corpora -------------------------------------------------------------

DEFAULT_PALETTE = (
    (40, 40, 48),      # background
    (220, 60, 50),
    (60, 170, 80),
    (70, 90, 220),
    (230, 200, 60),
    (180, 80, 200),
    (60, 200, 210),
)


@dataclass
class FixtureSpec:
    height: int = 64
    width: int = 64
    num_classes: int = 3
    min_blobs: int = 1
    max_blobs: int = 3
    min_radius: float = 8.0
    max_radius: float = 13.0
    max_aspect: float = 1.3
    blob_margin: float = 2.0
    palette: tuple = DEFAULT_PALETTE
    pixel_noise: float = 8.0
    stride: int = 2
    erosion: float = 4.0
    falloff: float = 1.5
    fp_rate: float = 0.02
    noise_sigma: float = 0.1
    seed: int = 42

    def validate(self) -> None:
        if self.erosion < 0:
            raise ValidationError(f"erosion radius must be >= 0, got {self.erosion}")
        if not (0.0 <= self.fp_rate <= 1.0):
            raise ValidationError(f"fp_rate must lie in [0, 1], got {self.fp_rate}")
        if self.noise_sigma < 0 or self.pixel_noise < 0 or self.falloff < 0:
            raise ValidationError("noise levels must be >= 0")
        if self.height < 1 or self.width < 1 or self.stride < 1:
            raise ValidationError("image size and stride must be >= 1")
        if not (1 <= self.num_classes < len(self.palette)):
            raise ValidationError(f"palette has colours for {len(self.palette) - 1} classes")
        if not (0 <= self.min_blobs <= self.max_blobs):
            raise ValidationError("need 0 <= min_blobs <= max_blobs")
        if not (0 < self.min_radius <= self.max_radius) or self.max_aspect < 1:
            raise ValidationError("need 0 < min_radius <= max_radius and max_aspect >= 1")

    def with_seed(self, seed: int) -> "FixtureSpec":
        d = asdict(self)
        d["seed"] = seed
        d["palette"] = tuple(tuple(c) for c in d["palette"])
        return FixtureSpec(**d)


_PLACEMENT_ATTEMPTS = 200


def _ellipse(h: int, w: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    if ry <= 0 or rx <= 0:
        return np.zeros((h, w), dtype=bool)
    yy = (np.arange(h)[:, None] + 0.5 - cy) / ry
    xx = (np.arange(w)[None, :] + 0.5 - cx) / rx
    return yy * yy + xx * xx <= 1.0


def _soft_core(blob, cy, cx, ry, rx, spec: FixtureSpec) -> np.ndarray:
    """1 on the eroded core, Gaussian decay with distance across the rest of the blob."""
    h, w = blob.shape
    core = _ellipse(h, w, cy, cx, ry - spec.erosion, rx - spec.erosion)
    out = core.astype(np.float64)
    band = blob & ~core
    if band.any() and core.any() and spec.falloff > 0:
        dist = ndimage.distance_transform_edt(~core)
        out[band] = np.exp(-0.5 * (dist[band] / spec.falloff) ** 2)
    return out


def _block_mean(mask: np.ndarray, stride: int) -> np.ndarray:
    h, w = mask.shape
    mh, mw = -(-h // stride), -(-w // stride)
    pad = np.zeros((mh * stride, mw * stride), dtype=np.float64)
    cnt = np.zeros_like(pad)
    pad[:h, :w] = mask
    cnt[:h, :w] = 1.0
    s = pad.reshape(mh, stride, mw, stride).sum(axis=(1, 3))
    c = cnt.reshape(mh, stride, mw, stride).sum(axis=(1, 3))
    return s / c


def generate_fixture(spec: FixtureSpec) -> tuple[ImageRGB, LabelMap, ScoreStack]:
    """Colour-blob image, its full ground truth, and a corrupted seed stack.

    The seed object channels are 1 on each blob's eroded core and decay as a
    Gaussian of distance (width ``falloff``) across the eroded band, zero
    outside the blob.  They are block-averaged to map resolution, plus false-positive speckles and Gaussian score noise,
    clamped at zero and max-normalised.  The background channel is left at
    zero for the pipeline to fill.
    """
    spec.validate()
    rng = SplitMix64(spec.seed)
    h, w = spec.height, spec.width
    if 2 * spec.min_radius > min(h, w):
        raise SpecInfeasible(f"blobs of radius {spec.min_radius} cannot fit a {h}x{w} image")

    n_blobs = spec.min_blobs + rng.below(spec.max_blobs - spec.min_blobs + 1)
    blobs = []  # (cls, cy, cx, ry, rx)
    for _ in range(n_blobs):
        for _attempt in range(_PLACEMENT_ATTEMPTS):
            r = rng.uniform(spec.min_radius, spec.max_radius)
            aspect = rng.uniform(1.0, spec.max_aspect)
            ry, rx = (r * aspect, r / aspect) if rng.below(2) else (r / aspect, r * aspect)
            if 2 * ry > h or 2 * rx > w:
                continue
            cy = rng.uniform(ry, h - ry)
            cx = rng.uniform(rx, w - rx)
            if all(
                math.hypot(cy - b[1], cx - b[2]) >= max(ry, rx) + max(b[3], b[4]) + spec.blob_margin
                for b in blobs
            ):
                blobs.append((rng.below(spec.num_classes), cy, cx, ry, rx))
                break
        else:
            raise SpecInfeasible(f"could not place {n_blobs} non-overlapping blobs in {h}x{w}")

    gt = np.full((h, w), BACKGROUND, dtype=np.uint8)
    core = np.zeros((spec.num_classes, h, w), dtype=np.float64)
    for cls, cy, cx, ry, rx in blobs:
        blob = _ellipse(h, w, cy, cx, ry, rx)
        gt[blob] = cls
        core[cls] = np.maximum(core[cls], _soft_core(blob, cy, cx, ry, rx, spec))

    palette = np.asarray(spec.palette, dtype=np.float64)
    colour = palette[np.where(gt == BACKGROUND, 0, gt.astype(np.int64) + 1)]
    if spec.pixel_noise > 0:
        colour = colour + rng.normal_array((h, w, 3), spec.pixel_noise)
    pixels = np.clip(np.rint(colour), 0, 255).astype(np.uint8)

    present = np.zeros(spec.num_classes, dtype=bool)
    for b in blobs:
        present[b[0]] = True

    mh, mw = -(-h // spec.stride), -(-w // spec.stride)
    scores = np.zeros((spec.num_classes + 1, mh, mw), dtype=np.float64)
    for c in np.flatnonzero(present):
        ch = _block_mean(core[c], spec.stride)
        if spec.fp_rate > 0:
            hit = rng.uniform_array((mh, mw)) < spec.fp_rate
            speckle = 0.5 + 0.5 * rng.uniform_array((mh, mw))
            ch = np.where(hit, np.maximum(ch, speckle), ch)
        if spec.noise_sigma > 0:
            ch = ch + rng.normal_array((mh, mw), spec.noise_sigma)
        scores[c] = np.maximum(ch, 0.0)
    seed = normalize_cam(ScoreStack(scores.astype(np.float32), present))
    return ImageRGB(pixels), LabelMap(gt, num_classes=spec.num_classes), seed


# Overlays ------------------------------------------------------------------------

OVERLAY_PALETTE = np.resize(np.array(DEFAULT_PALETTE[1:], dtype=np.float64), (254, 3))
OVERLAY_BACKGROUND = np.array((0, 0, 0), dtype=np.float64)
HATCH_COLOUR = np.array((255, 255, 255), dtype=np.uint8)
OVERLAY_ALPHA = 0.5


def render_overlay(img: ImageRGB, labels: LabelMap) -> ImageRGB:
    """Blend label colours over the image; neutral pixels get diagonal hatching."""
    if (img.height, img.width) != (labels.height, labels.width):
        raise DimMismatch(
            f"image {img.height}x{img.width} vs labels {labels.height}x{labels.width}"
        )
    lab = labels.labels
    base = img.pixels.astype(np.float64)
    colour = np.where(
        (lab == BACKGROUND)[..., None],
        OVERLAY_BACKGROUND,
        OVERLAY_PALETTE[np.minimum(lab, 253)],
    )
    blended = np.rint((1.0 - OVERLAY_ALPHA) * base + OVERLAY_ALPHA * colour)
    out = np.clip(blended, 0, 255).astype(np.uint8)
    neutral = lab == NEUTRAL
    yy, xx = np.indices(lab.shape)
    hatch = neutral & (((yy + xx) % 4) < 2)
    out[neutral] = img.pixels[neutral]
    out[hatch] = HATCH_COLOUR
    return ImageRGB(out)
