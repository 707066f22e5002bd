"""Random differentiable instances for the embedder gradient check."""

import math

import numpy as np

from affseg.affinity_learn import (
    DESCRIPTOR_DIM,
    EmbedderModel,
    PairSet,
    TrainerConfig,
    affinity_loss,
    embed,
    pixel_descriptors,
    sample_pairs,
)
from affseg.tensor_io import ImageRGB, LabelMap

H_STEP = 1e-3
SIZE = 6


def _pick(rng, sub, k):
    if len(sub) == 0 or k == 0:
        return sub[:0]
    return sub[rng.choice(len(sub), size=min(k, len(sub)), replace=False)]


def random_instance(rng, hidden=8, d_out=4, n_pairs=20):
    img = ImageRGB(rng.integers(0, 256, size=(SIZE, SIZE, 3), dtype=np.uint8))
    while True:
        lab = rng.choice([0, 1, 254, 255], size=(SIZE, SIZE)).astype(np.uint8)
        full = sample_pairs(LabelMap(lab), 2.0)
        if all(full.sizes):
            break
    k = [n_pairs // 3, n_pairs // 3, n_pairs - 2 * (n_pairs // 3)]
    ps = PairSet(full.gamma, SIZE, SIZE, *(_pick(rng, s, n) for s, n in zip(full.subsets, k)))
    # He-normal weights and zero biases, as EmbedderModel.init produces
    model = EmbedderModel(
        rng.normal(0, math.sqrt(2 / DESCRIPTOR_DIM), (hidden, DESCRIPTOR_DIM)),
        np.zeros(hidden),
        rng.normal(0, math.sqrt(2 / hidden), (d_out, hidden)),
        np.zeros(d_out),
    )
    return img, ps, model


def kink_values(params, img, ps, eps_w):
    """Quantities whose sign change marks a non-differentiable point of the loss."""
    model = EmbedderModel(*params)
    x = pixel_descriptors(img, 1).reshape(-1, DESCRIPTOR_DIM)
    z1 = x @ model.w1.T + model.b1
    feats = model.forward(x)
    parts = [z1.reshape(-1)]
    for k, sub in enumerate(ps.subsets):
        diff = feats[sub[:, 0]] - feats[sub[:, 1]]
        parts.append(diff.reshape(-1))
        if k == 2:
            parts.append(np.abs(diff).sum(axis=1) + math.log1p(-eps_w))
    return np.concatenate(parts)


def loss_of(params, img, ps, eps_w):
    feats = embed(EmbedderModel(*params), img, 1, dtype=np.float64)
    return affinity_loss(feats, ps, eps_w).total


def numeric_grad_or_none(img, ps, model, cfg: TrainerConfig, h=H_STEP):
    """Central differences, or ``None`` if any +-h probe straddles a kink."""
    params = [np.asarray(p, dtype=np.float64) for p in model.params]
    base = np.sign(kink_values(params, img, ps, cfg.eps_w))
    if np.any(base == 0):
        return None
    grads = []
    for k, p in enumerate(params):
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            for sgn in (1, -1):
                probe = [q.copy() for q in params]
                probe[k][idx] += sgn * h
                if np.any(np.sign(kink_values(probe, img, ps, cfg.eps_w)) != base):
                    return None
            plus = [q.copy() for q in params]
            minus = [q.copy() for q in params]
            plus[k][idx] += h
            minus[k][idx] -= h
            g[idx] = (loss_of(plus, img, ps, cfg.eps_w) - loss_of(minus, img, ps, cfg.eps_w)) / (2 * h)
        grads.append(g)
    return grads


def relative_errors(analytic, numeric, floor=1e-8):
    """Per-tensor relative error ``||a - n|| / max(||a||, ||n||)``, one value per parameter."""
    out = []
    for a, n in zip(analytic, numeric):
        denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
        out.append(float(np.linalg.norm(a - n) / denom))
    return np.array(out)


def elementwise_relative_errors(analytic, numeric, floor=1e-8):
    """Entry-wise relative errors, flattened over every parameter tensor."""
    out = []
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        out.append((np.abs(a - n) / denom).reshape(-1))
    return np.concatenate(out)
