"""Affinity supervision mining, the class-balanced affinity loss, and the embedder.

The embedder is a two-layer per-pixel MLP (``11 -> hidden -> out_dim``)
over hand-made colour/position descriptors.  Gradients are written out
by hand and checked against central differences in the test suite.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DimMismatch,
    EmptyCorpus,
    FormatError,
    IndexOutOfRange,
    NoPairsMined,
    NonFiniteParameters,
    ValidationError,
)
from .grid import offset_pairs, radius_offsets
from .rng import SplitMix64
from .tensor_io import (
    BACKGROUND,
    NEUTRAL,
    ImageRGB,
    LabelMap,
    Tensor,
    read_json,
    read_tensor,
    write_json,
    write_tensor,
)

log = logging.getLogger(__name__)

DESCRIPTOR_DIM = 11
_FLOAT32_EXACT = 1 << 24


# Pair mining -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PairSet:
    """Unordered in-radius pixel pairs ``(i, j)``, ``i < j``, linear row-major indices."""

    gamma: float
    height: int
    width: int
    pairs_fg_pos: np.ndarray  # (n, 2) int64
    pairs_bg_pos: np.ndarray
    pairs_neg: np.ndarray

    def __post_init__(self):
        for name in ("pairs_fg_pos", "pairs_bg_pos", "pairs_neg"):
            arr = np.asarray(getattr(self, name), dtype=np.int64).reshape(-1, 2)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def subsets(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.pairs_fg_pos, self.pairs_bg_pos, self.pairs_neg

    @property
    def sizes(self) -> tuple[int, int, int]:
        return tuple(len(p) for p in self.subsets)

    def __len__(self) -> int:
        return sum(self.sizes)

    def __eq__(self, other):
        if not isinstance(other, PairSet):
            return NotImplemented
        return (
            (self.gamma, self.height, self.width) == (other.gamma, other.height, other.width)
            and all(np.array_equal(a, b) for a, b in zip(self.subsets, other.subsets))
        )


def sample_pairs(labels: LabelMap, gamma: float) -> PairSet:
    """Enumerate every unordered pixel pair closer than ``gamma`` and split it.

    Same object class -> foreground positive, both background -> background
    positive, differing labels -> negative.  Pairs touching a neutral pixel
    are dropped.  Each subset is sorted by ``(i, j)``.
    """
    if not gamma > 0:
        raise ValidationError(f"gamma must be > 0, got {gamma}")
    h, w = labels.height, labels.width
    flat = labels.labels.reshape(-1)
    fg, bg, neg = [], [], []
    for dy, dx in radius_offsets(float(gamma), forward_only=True):
        i, j = offset_pairs(h, w, dy, dx)
        if i.size == 0:
            continue
        li, lj = flat[i], flat[j]
        keep = (li != NEUTRAL) & (lj != NEUTRAL)
        same = li == lj
        both = np.stack([i, j], axis=1)
        fg.append(both[keep & same & (li != BACKGROUND)])
        bg.append(both[keep & same & (li == BACKGROUND)])
        neg.append(both[keep & ~same])
    return PairSet(gamma, h, w, *(_sorted_pairs(p) for p in (fg, bg, neg)))


def _sorted_pairs(chunks: list[np.ndarray]) -> np.ndarray:
    if not chunks:
        return np.zeros((0, 2), dtype=np.int64)
    p = np.concatenate(chunks, axis=0)
    order = np.lexsort((p[:, 1], p[:, 0]))
    return p[order]


def encode_pairset(ps: PairSet) -> Tensor:
    """Rank-1 layout: ``[gamma, H, W, n_fg, i, j, ..., n_bg, ..., n_neg, ...]``.

    Indices and counts are stored as float32, exact below 2**24.
    """
    parts = [np.array([ps.gamma, ps.height, ps.width], dtype=np.float64)]
    for sub in ps.subsets:
        if len(sub) >= _FLOAT32_EXACT or ps.height * ps.width >= _FLOAT32_EXACT:
            raise ValidationError("pair set too large for float32 index encoding")
        parts.append(np.array([len(sub)], dtype=np.float64))
        parts.append(sub.reshape(-1).astype(np.float64))
    return Tensor(np.concatenate(parts).astype(np.float32))


def decode_pairset(t: Tensor) -> PairSet:
    v = t.data.astype(np.float64)
    if t.rank != 1 or v.size < 6:
        raise FormatError("pair set tensor must be rank 1 with a header")
    gamma, h, w = float(v[0]), int(v[1]), int(v[2])
    pos = 3
    subs = []
    for _ in range(3):
        if pos >= v.size:
            raise FormatError("pair set tensor truncated")
        n = int(v[pos])
        pos += 1
        if pos + 2 * n > v.size:
            raise FormatError("pair set tensor truncated")
        subs.append(v[pos:pos + 2 * n].astype(np.int64).reshape(n, 2))
        pos += 2 * n
    if pos != v.size:
        raise FormatError("trailing values in pair set tensor")
    return PairSet(gamma, h, w, *subs)


def write_pairset(ps: PairSet, path) -> None:
    write_tensor(encode_pairset(ps), path)


def read_pairset(path) -> PairSet:
    return decode_pairset(read_tensor(path))


# Affinity and loss -------------------------------------------------------------

def affinity(f_i, f_j) -> float:
    """``exp(-||f_i - f_j||_1)``."""
    a = np.asarray(f_i, dtype=np.float64)
    b = np.asarray(f_j, dtype=np.float64)
    if a.shape != b.shape:
        raise DimMismatch(f"feature shapes differ: {a.shape} vs {b.shape}")
    return math.exp(-float(np.abs(a - b).sum()))


@dataclass(frozen=True)
class LossTerms:
    total: float
    fg_pos: float
    bg_pos: float
    neg: float


def _check_indices(ps: PairSet, n_pixels: int) -> None:
    for sub in ps.subsets:
        if sub.size and (sub.min() < 0 or sub.max() >= n_pixels):
            raise IndexOutOfRange(f"pair index outside [0, {n_pixels})")


def _flat_features(f) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 3:
        raise DimMismatch(f"feature map must be [D, H, W], got {f.shape}")
    return f.reshape(f.shape[0], -1).T


def pair_loss_and_feature_grad(
    feats: np.ndarray, ps: PairSet, eps_w: float, need_grad: bool = True
) -> tuple[LossTerms, np.ndarray | None]:
    """Loss terms and ``dL/dfeats`` for per-pixel features ``feats`` (N, D).

    Positive terms use ``-log W = d`` directly.  Negative terms clamp
    ``W <= 1 - eps_w``; inside the clamp the gradient is zero.
    """
    _check_indices(ps, feats.shape[0])
    grad = np.zeros_like(feats) if need_grad else None
    values = []
    clamp_d = -math.log1p(-eps_w)
    names = ("foreground-positive", "background-positive", "negative")
    for k, sub in enumerate(ps.subsets):
        if len(sub) == 0:
            log.warning("empty %s pair subset contributes 0 to the loss", names[k])
            values.append(0.0)
            continue
        diff = feats[sub[:, 0]] - feats[sub[:, 1]]
        d = np.abs(diff).sum(axis=1)
        n = len(sub)
        if k < 2:
            values.append(float(d.sum() / n))
            dl_dd = np.full(n, 1.0 / n)
        else:
            clamped = d < clamp_d
            w = np.where(clamped, 1.0 - eps_w, np.exp(-d))
            values.append(float(-np.log1p(-w).sum() / n))
            with np.errstate(divide="ignore"):
                dl_dd = np.where(clamped, 0.0, -1.0 / np.expm1(np.where(clamped, 1.0, d)))
            dl_dd *= 2.0 / n
        if need_grad:
            g = dl_dd[:, None] * np.sign(diff)
            np.add.at(grad, sub[:, 0], g)
            np.add.at(grad, sub[:, 1], -g)
    fg, bg, neg = values
    return LossTerms(fg + bg + 2.0 * neg, fg, bg, neg), grad


def affinity_loss(features, ps: PairSet, eps_w: float = 1e-5) -> LossTerms:
    """Class-balanced loss: mean per subset, negatives weighted twice."""
    terms, _ = pair_loss_and_feature_grad(_flat_features(features), ps, eps_w, need_grad=False)
    return terms


# Descriptors and embedder --------------------------------------------------------

def map_shape(height: int, width: int, stride: int) -> tuple[int, int]:
    return -(-height // stride), -(-width // stride)


def _box_mean(img: np.ndarray, radius: int) -> np.ndarray:
    """Mean over the in-bounds ``(2r+1)^2`` window around each pixel."""
    h, w = img.shape[:2]
    ii = np.zeros((h + 1, w + 1) + img.shape[2:], dtype=np.float64)
    ii[1:, 1:] = img.cumsum(axis=0).cumsum(axis=1)
    y0 = np.clip(np.arange(h) - radius, 0, h)
    y1 = np.clip(np.arange(h) + radius + 1, 0, h)
    x0 = np.clip(np.arange(w) - radius, 0, w)
    x1 = np.clip(np.arange(w) + radius + 1, 0, w)
    total = (
        ii[y1][:, x1] - ii[y0][:, x1] - ii[y1][:, x0] + ii[y0][:, x0]
    )
    area = ((y1 - y0)[:, None] * (x1 - x0)[None, :]).astype(np.float64)
    if img.ndim == 3:
        area = area[..., None]
    return total / area


def pixel_descriptors(img: ImageRGB, stride: int = 1) -> np.ndarray:
    """``(H', W', 11)`` descriptors sampled at stride-block centres.

    Components: RGB, x/(W-1), y/(H-1), 3x3 mean RGB, 7x7 mean RGB, all in [0, 1].
    A single-pixel dimension maps its coordinate to 0.
    """
    if stride < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    rgb = img.pixels.astype(np.float64) / 255.0
    h, w = img.height, img.width
    mh, mw = map_shape(h, w, stride)
    ys = np.minimum(np.arange(mh) * stride + stride // 2, h - 1)
    xs = np.minimum(np.arange(mw) * stride + stride // 2, w - 1)
    m3 = _box_mean(rgb, 1)
    m7 = _box_mean(rgb, 3)
    out = np.empty((mh, mw, DESCRIPTOR_DIM), dtype=np.float64)
    out[..., 0:3] = rgb[ys][:, xs]
    out[..., 3] = (xs / (w - 1) if w > 1 else np.zeros(mw))[None, :]
    out[..., 4] = (ys / (h - 1) if h > 1 else np.zeros(mh))[:, None]
    out[..., 5:8] = m3[ys][:, xs]
    out[..., 8:11] = m7[ys][:, xs]
    return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True)
class EmbedderModel:
    """``f = w2 @ relu(w1 @ x + b1) + b2`` applied per pixel."""

    w1: np.ndarray  # (hidden, d_in)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (d_out, hidden)
    b2: np.ndarray  # (d_out,)

    def __post_init__(self):
        h, d_in = np.shape(self.w1)
        d_out, h2 = np.shape(self.w2)
        if h2 != h or np.shape(self.b1) != (h,) or np.shape(self.b2) != (d_out,):
            raise DimMismatch(
                f"inconsistent layer shapes w1{np.shape(self.w1)} b1{np.shape(self.b1)} "
                f"w2{np.shape(self.w2)} b2{np.shape(self.b2)}"
            )

    @property
    def layer_sizes(self) -> tuple[int, int, int]:
        return self.w1.shape[1], self.w1.shape[0], self.w2.shape[0]

    @property
    def params(self) -> tuple[np.ndarray, ...]:
        return self.w1, self.b1, self.w2, self.b2

    @classmethod
    def init(cls, rng: SplitMix64, d_in: int = DESCRIPTOR_DIM, hidden: int = 32, d_out: int = 16):
        """He-scaled normal weights, zero biases, rounded to float32."""
        w1 = rng.normal_array((hidden, d_in), math.sqrt(2.0 / d_in))
        w2 = rng.normal_array((d_out, hidden), math.sqrt(2.0 / hidden))
        return cls(
            w1.astype(np.float32),
            np.zeros(hidden, dtype=np.float32),
            w2.astype(np.float32),
            np.zeros(d_out, dtype=np.float32),
        )

    def astype(self, dtype) -> "EmbedderModel":
        return EmbedderModel(*(np.asarray(p, dtype=dtype) for p in self.params))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params)

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Rows of ``x`` (N, d_in) to embeddings (N, d_out), float64."""
        w1, b1, w2, b2 = (np.asarray(p, dtype=np.float64) for p in self.params)
        return np.maximum(x @ w1.T + b1, 0.0) @ w2.T + b2

    def __eq__(self, other):
        if not isinstance(other, EmbedderModel):
            return NotImplemented
        return all(
            np.shape(a) == np.shape(b) and np.asarray(a).tobytes() == np.asarray(b).tobytes()
            for a, b in zip(self.params, other.params)
        )


def embed(model: EmbedderModel, img: ImageRGB, stride: int = 1, dtype=np.float32) -> np.ndarray:
    """Feature map ``[d_out, H', W']`` for the image at map resolution."""
    if not model.is_finite():
        raise NonFiniteParameters("embedder has non-finite parameters")
    if model.layer_sizes[0] != DESCRIPTOR_DIM:
        raise DimMismatch(f"embedder input width {model.layer_sizes[0]} != {DESCRIPTOR_DIM}")
    desc = pixel_descriptors(img, stride)
    mh, mw, _ = desc.shape
    f = model.forward(desc.reshape(-1, DESCRIPTOR_DIM))
    return np.ascontiguousarray(f.T.reshape(-1, mh, mw)).astype(dtype)


def model_grad(model: EmbedderModel, x: np.ndarray, feat_grad_fn) -> tuple:
    """Back-propagate a feature-space gradient through the MLP.

    ``feat_grad_fn(features) -> (value, dL/dfeatures)``; returns
    ``(value, (gw1, gb1, gw2, gb2))``.
    """
    w1, b1, w2, b2 = (np.asarray(p, dtype=np.float64) for p in model.params)
    z1 = x @ w1.T + b1
    a1 = np.maximum(z1, 0.0)
    f = a1 @ w2.T + b2
    value, gf = feat_grad_fn(f)
    gw2 = gf.T @ a1
    gb2 = gf.sum(axis=0)
    gz1 = (gf @ w2) * (z1 > 0)
    gw1 = gz1.T @ x
    gb1 = gz1.sum(axis=0)
    return value, (gw1, gb1, gw2, gb2)


@dataclass
class TrainerConfig:
    step_size: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    pairs_per_step: int = 96
    steps: int = 2000
    eps_w: float = 1e-5
    seed: int = 42
    stride: int = 1
    gamma: float = 5.0
    hidden: int = 32
    out_dim: int = 16

    def __post_init__(self):
        if not (0.0 < self.eps_w < 0.1):
            raise ValidationError(f"eps_w must lie in (0, 0.1), got {self.eps_w}")
        if not self.step_size > 0:
            raise ValidationError(f"step size must be > 0, got {self.step_size}")


def affinity_loss_grad(
    model: EmbedderModel, img: ImageRGB, ps: PairSet, cfg: TrainerConfig
) -> tuple[LossTerms, tuple[np.ndarray, ...]]:
    """Loss terms and exact gradient over ``(w1, b1, w2, b2)``."""
    desc = pixel_descriptors(img, cfg.stride)
    if desc.shape[:2] != (ps.height, ps.width):
        raise DimMismatch(f"pair set is {ps.height}x{ps.width}, feature map {desc.shape[:2]}")
    x = desc.reshape(-1, DESCRIPTOR_DIM)
    return model_grad(model, x, lambda f: pair_loss_and_feature_grad(f, ps, cfg.eps_w))


# Training ----------------------------------------------------------------------

@dataclass
class TrainLog:
    initial: LossTerms
    final: LossTerms
    pair_counts: tuple[int, int, int]
    batch_losses: list[float] = field(default_factory=list)


class _Adam:
    def __init__(self, params, cfg: TrainerConfig):
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.k = 0

    def step(self, params, grads):
        c = self.cfg
        self.k += 1
        corr1 = 1.0 - c.beta1 ** self.k
        corr2 = 1.0 - c.beta2 ** self.k
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p -= c.step_size * (m / corr1) / (np.sqrt(v / corr2) + c.adam_eps)


def _corpus_tables(corpus, cfg: TrainerConfig):
    xs, subsets = [], ([], [], [])
    base = 0
    for img, labels in corpus:
        desc = pixel_descriptors(img, cfg.stride)
        if desc.shape[:2] != (labels.height, labels.width):
            raise DimMismatch(
                f"label map {labels.height}x{labels.width} does not match "
                f"map resolution {desc.shape[:2]} at stride {cfg.stride}"
            )
        ps = sample_pairs(labels, cfg.gamma)
        for acc, sub in zip(subsets, ps.subsets):
            acc.append(sub + base)
        xs.append(desc.reshape(-1, DESCRIPTOR_DIM))
        base += desc.shape[0] * desc.shape[1]
    x = np.concatenate(xs, axis=0)
    merged = tuple(np.concatenate(s, axis=0) for s in subsets)
    return x, PairSet(cfg.gamma, 1, base, *merged)


def _batch(rng: SplitMix64, full: PairSet, per_subset: int) -> PairSet:
    picked = []
    for sub in full.subsets:
        if len(sub) == 0:
            picked.append(sub)
            continue
        idx = [rng.below(len(sub)) for _ in range(per_subset)]
        picked.append(sub[np.array(idx, dtype=np.int64)])
    return PairSet(full.gamma, full.height, full.width, *picked)


def train_embedder(
    corpus, cfg: TrainerConfig, model: EmbedderModel | None = None
) -> tuple[EmbedderModel, TrainLog]:
    """Adam on minibatches with an equal share of pairs from each subset.

    ``corpus`` is a sequence of ``(ImageRGB, LabelMap)`` with label maps at
    map resolution.  Deterministic for a fixed ``cfg.seed``.
    """
    corpus = list(corpus)
    if not corpus:
        raise EmptyCorpus("training corpus is empty")
    rng = SplitMix64(cfg.seed)
    init_rng, batch_rng = rng.fork(), rng.fork()
    if model is None:
        model = EmbedderModel.init(init_rng, DESCRIPTOR_DIM, cfg.hidden, cfg.out_dim)
    if not model.is_finite():
        raise NonFiniteParameters("initial embedder has non-finite parameters")

    x, full = _corpus_tables(corpus, cfg)
    if len(full) == 0:
        raise NoPairsMined("no labelled pairs: every candidate pair touches a neutral pixel")
    for name, n in zip(("foreground-positive", "background-positive", "negative"), full.sizes):
        if n == 0:
            log.warning("corpus has no %s pairs", name)

    def full_loss(m: EmbedderModel) -> LossTerms:
        terms, _ = pair_loss_and_feature_grad(m.forward(x), full, cfg.eps_w, need_grad=False)
        return terms

    initial = full_loss(model)
    train_log = TrainLog(initial, initial, full.sizes)
    if cfg.steps == 0:
        return model, train_log

    work = model.astype(np.float64)
    params = list(work.params)
    adam = _Adam(params, cfg)
    per_subset = max(1, cfg.pairs_per_step // 3)
    for _ in range(cfg.steps):
        batch = _batch(batch_rng, full, per_subset)
        used = np.unique(np.concatenate([s.reshape(-1) for s in batch.subsets]))
        local = PairSet(
            batch.gamma, 1, len(used), *(np.searchsorted(used, s) for s in batch.subsets)
        )
        terms, grads = model_grad(
            EmbedderModel(*params),
            x[used],
            lambda f: pair_loss_and_feature_grad(f, local, cfg.eps_w),
        )
        train_log.batch_losses.append(terms.total)
        adam.step(params, grads)
        if not all(np.all(np.isfinite(p)) for p in params):
            raise NonFiniteParameters("training diverged to non-finite parameters")

    trained = EmbedderModel(*params).astype(np.float32)
    train_log.final = full_loss(trained)
    log.info(
        "embedder trained: loss %.4f -> %.4f over %d steps",
        initial.total, train_log.final.total, cfg.steps,
    )
    return trained, train_log


# Persistence ---------------------------------------------------------------------

_PARAM_NAMES = ("w1", "b1", "w2", "b2")


def save_model(model: EmbedderModel, directory) -> None:
    """``model.json`` manifest plus one AFT1 tensor per parameter."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, p in zip(_PARAM_NAMES, model.params):
        write_tensor(Tensor(np.asarray(p, dtype=np.float32)), d / f"{name}.aft")
    write_json(
        {
            "layer_sizes": list(model.layer_sizes),
            "nonlinearity": "relu",
            "tensors": {name: f"{name}.aft" for name in _PARAM_NAMES},
        },
        d / "model.json",
    )


def load_model(directory) -> EmbedderModel:
    d = Path(directory)
    meta = read_json(d / "model.json")
    params = [read_tensor(d / meta["tensors"][name]).data.copy() for name in _PARAM_NAMES]
    model = EmbedderModel(*params)
    if list(model.layer_sizes) != list(meta["layer_sizes"]):
        raise DimMismatch(f"manifest sizes {meta['layer_sizes']} vs tensors {model.layer_sizes}")
    return model
