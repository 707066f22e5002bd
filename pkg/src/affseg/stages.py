"""File-level pipeline stages with manifest-based caching.

A stage is skipped when its manifest records the same key (stage name,
relevant config values, input checksums) and every recorded output still
has its recorded checksum.  Otherwise the stage is recomputed and the
manifest rewritten.

Manifest schema (JSON)::

    {"stage": str, "key": sha256 hex, "config": {...}, "config_hash": sha256 hex,
     "inputs": {relpath: sha256}, "outputs": {relpath: sha256}, "wall_time": seconds}

Paths are relative to the manifest's directory.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .affinity_learn import (
    TrainerConfig,
    embed,
    load_model,
    sample_pairs,
    save_model,
    train_embedder,
    write_pairset,
)
from .diffusion import build_affinity_matrix, propagate, transition_matrix
from .errors import ConfigError, FormatError
from .seed_maps import (
    background_map,
    confident_regions,
    read_score_stack,
    write_score_stack,
)
from .synthesis_eval import (
    FixtureSpec,
    generate_fixture,
    mean_report,
    miou,
    render_overlay,
    synthesize_labels,
    upsample_bilinear,
)
from .tensor_io import (
    PipelineConfig,
    read_image_ppm,
    read_json,
    read_label_pgm,
    sha256_file,
    write_image_ppm,
    write_json,
    write_label_pgm,
)

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"

# config keys each stage depends on
STAGE_KEYS = {
    "cam": ("alpha_default",),
    "confidence": ("alpha_low", "alpha_high"),
    "pairs": ("gamma",),
    "train_aff": (
        "gamma", "stride", "seed", "hidden", "out_dim", "step_size", "adam_beta1",
        "adam_beta2", "adam_eps", "pairs_per_step", "steps", "eps_w",
    ),
    "propagate": ("gamma", "beta", "t", "stride", "mode", "max_dense_entries"),
    "synthesize": ("stride",),
    "eval": (),
}

# stages whose outputs feed each stage, directly or indirectly
UPSTREAM = {
    "cam": (),
    "confidence": (),
    "pairs": ("confidence",),
    "train_aff": ("confidence",),
    "propagate": ("cam", "confidence", "train_aff"),
    "synthesize": ("cam", "confidence", "train_aff", "propagate"),
}


def _expand(paths: Iterable[Path]) -> list[Path]:
    out = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            out.extend(sorted(q for q in p.rglob("*") if q.is_file() and q.name != MANIFEST))
        else:
            out.append(p)
    return out


def _rel(p: Path, base: Path) -> str:
    return os.path.relpath(Path(p).resolve(), base.resolve())


def stage_key(stage: str, config: dict, inputs: Iterable[Path]) -> str:
    digests = sorted(sha256_file(p) for p in _expand(inputs))
    blob = json.dumps({"stage": stage, "config": config, "inputs": digests}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def cached_stage(
    stage: str,
    config: dict,
    inputs: list[Path],
    manifest_path: Path,
    produce: Callable[[], list[Path]],
) -> bool:
    """Run ``produce`` unless the manifest proves its outputs are current.

    Returns ``True`` on a cache hit.
    """
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    key = stage_key(stage, config, inputs)
    if manifest_path.exists():
        try:
            m = read_json(manifest_path)
            fresh = m.get("key") == key and all(
                (base / rel).is_file() and sha256_file(base / rel) == digest
                for rel, digest in m.get("outputs", {}).items()
            )
        except (FormatError, ConfigError, AttributeError):
            fresh = False
        if fresh:
            log.info("cache hit: stage %s (%s)", stage, key[:12])
            return True
        log.info("cache invalid: stage %s recomputed", stage)
    start = time.perf_counter()
    outputs = _expand(produce())
    manifest = {
        "stage": stage,
        "key": key,
        "config": config,
        "config_hash": hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest(),
        "inputs": {_rel(p, base): sha256_file(p) for p in _expand(inputs)},
        "outputs": {_rel(p, base): sha256_file(p) for p in outputs},
        "wall_time": time.perf_counter() - start,
    }
    base.mkdir(parents=True, exist_ok=True)
    write_json(manifest, manifest_path)
    return False


def stage_config(cfg: PipelineConfig, stage: str) -> dict:
    d = cfg.to_dict()
    return {k: d[k] for k in STAGE_KEYS[stage]}


def trainer_config(cfg: PipelineConfig) -> TrainerConfig:
    return TrainerConfig(
        step_size=cfg.step_size,
        beta1=cfg.adam_beta1,
        beta2=cfg.adam_beta2,
        adam_eps=cfg.adam_eps,
        pairs_per_step=cfg.pairs_per_step,
        steps=cfg.steps,
        eps_w=cfg.eps_w,
        seed=cfg.seed,
        stride=cfg.stride,
        gamma=cfg.gamma,
        hidden=cfg.hidden,
        out_dim=cfg.out_dim,
    )


# Corpus ------------------------------------------------------------------------------

def write_fixture_corpus(out_dir, spec: FixtureSpec, count: int) -> Path:
    """``count`` fixtures with seeds ``spec.seed + i`` and a ``corpus.json`` index."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    items = []
    for i in range(count):
        img, gt, seed = generate_fixture(spec.with_seed(spec.seed + i))
        ident = f"{i:03d}"
        write_image_ppm(img, out / f"img_{ident}.ppm")
        write_label_pgm(gt, out / f"gt_{ident}.pgm")
        write_score_stack(seed, out / f"seed_{ident}.aft")
        items.append(
            {"id": ident, "image": f"img_{ident}.ppm", "gt": f"gt_{ident}.pgm", "seed": f"seed_{ident}.aft"}
        )
    spec_d = {k: v for k, v in vars(spec).items()}
    spec_d["palette"] = [list(c) for c in spec.palette]
    index = out / "corpus.json"
    write_json(
        {
            "num_classes": spec.num_classes,
            "stride": spec.stride,
            "height": spec.height,
            "width": spec.width,
            "spec": spec_d,
            "items": items,
        },
        index,
    )
    return index


def load_corpus(corpus_dir) -> tuple[Path, dict]:
    root = Path(corpus_dir)
    if root.is_file():
        root = root.parent
    index = read_json(root / "corpus.json")
    if not index.get("items"):
        raise ConfigError(f"{root}: corpus has no items")
    return root, index


# Full pipeline -----------------------------------------------------------------------

def _stage_dir(work: Path, cfg: PipelineConfig, stage: str) -> Path:
    keys = sorted({k for s in (stage, *UPSTREAM[stage]) for k in STAGE_KEYS[s]})
    h = cfg.hash(keys)[:12]
    return work / f"{stage}-{h}"


def run_pipeline(corpus_dir, work_dir, cfg: PipelineConfig, overlays: bool = False) -> dict:
    """Every stage over a fixture corpus; returns the CAM vs CAM+RW report.

    Stage outputs live in ``<work>/<stage>-<config hash>/`` so runs that
    share a stage configuration (e.g. sweep grid points) reuse it.
    """
    root, index = load_corpus(corpus_dir)
    if index["num_classes"] != cfg.num_classes:
        raise ConfigError(
            f"corpus has {index['num_classes']} classes, config says {cfg.num_classes}"
        )
    if index["stride"] != cfg.stride:
        raise ConfigError(f"corpus stride {index['stride']} != config stride {cfg.stride}")
    work = Path(work_dir)
    work.mkdir(parents=True, exist_ok=True)
    items = index["items"]
    images = [root / it["image"] for it in items]
    gts = [root / it["gt"] for it in items]
    seeds = [root / it["seed"] for it in items]
    seed_inputs = seeds + [s.with_name(s.name + ".json") for s in seeds]
    ids = [it["id"] for it in items]

    d_cam = _stage_dir(work, cfg, "cam")
    cams = [d_cam / f"cam_{i}.aft" for i in ids]

    def do_cam():
        d_cam.mkdir(parents=True, exist_ok=True)
        for src, dst in zip(seeds, cams):
            write_score_stack(background_map(read_score_stack(src), cfg.alpha_default), dst)
        return [d_cam]

    cached_stage("cam", stage_config(cfg, "cam"), seed_inputs, d_cam / MANIFEST, do_cam)

    d_conf = _stage_dir(work, cfg, "confidence")
    confs = [d_conf / f"conf_{i}.pgm" for i in ids]

    def do_conf():
        d_conf.mkdir(parents=True, exist_ok=True)
        for src, dst in zip(seeds, confs):
            write_label_pgm(
                confident_regions(read_score_stack(src), cfg.alpha_low, cfg.alpha_high), dst
            )
        return [d_conf]

    cached_stage("confidence", stage_config(cfg, "confidence"), seed_inputs, d_conf / MANIFEST, do_conf)

    d_pairs = _stage_dir(work, cfg, "pairs")

    def do_pairs():
        d_pairs.mkdir(parents=True, exist_ok=True)
        for ident, src in zip(ids, confs):
            write_pairset(sample_pairs(read_label_pgm(src), cfg.gamma), d_pairs / f"pairs_{ident}.aft")
        return [d_pairs]

    cached_stage("pairs", stage_config(cfg, "pairs"), confs, d_pairs / MANIFEST, do_pairs)

    d_model = _stage_dir(work, cfg, "train_aff")

    def do_train():
        corpus = [(read_image_ppm(i), read_label_pgm(c)) for i, c in zip(images, confs)]
        model, train_log = train_embedder(corpus, trainer_config(cfg))
        save_model(model, d_model)
        write_json(
            {
                "initial_loss": vars(train_log.initial),
                "final_loss": vars(train_log.final),
                "pair_counts": list(train_log.pair_counts),
            },
            d_model / "train_log.json",
        )
        return [d_model]

    cached_stage("train_aff", stage_config(cfg, "train_aff"), images + confs, d_model / MANIFEST, do_train)

    d_prop = _stage_dir(work, cfg, "propagate")
    revised = [d_prop / f"rw_{i}.aft" for i in ids]

    def do_prop():
        d_prop.mkdir(parents=True, exist_ok=True)
        model = load_model(d_model)
        for img_p, src, dst in zip(images, cams, revised):
            stack = read_score_stack(src)
            feats = embed(model, read_image_ppm(img_p), cfg.stride)
            t_mat = transition_matrix(build_affinity_matrix(feats, cfg.gamma), cfg.beta)
            out = propagate(t_mat, stack, cfg.t, cfg.mode, cfg.max_dense_entries)
            write_score_stack(out, dst)
        return [d_prop]

    cached_stage(
        "propagate", stage_config(cfg, "propagate"), [d_model] + images + cams, d_prop / MANIFEST, do_prop
    )

    d_syn = _stage_dir(work, cfg, "synthesize")
    lab_cam = [d_syn / f"cam_{i}.pgm" for i in ids]
    lab_rw = [d_syn / f"rw_{i}.pgm" for i in ids]
    size = (index["height"], index["width"])

    def do_syn():
        d_syn.mkdir(parents=True, exist_ok=True)
        for srcs, dsts in ((cams, lab_cam), (revised, lab_rw)):
            for src, dst in zip(srcs, dsts):
                up = upsample_bilinear(read_score_stack(src), cfg.stride, size)
                write_label_pgm(synthesize_labels(up), dst)
        return [d_syn]

    cached_stage("synthesize", stage_config(cfg, "synthesize"), cams + revised, d_syn / MANIFEST, do_syn)

    rep_cam = [miou(read_label_pgm(p), read_label_pgm(g)) for p, g in zip(lab_cam, gts)]
    rep_rw = [miou(read_label_pgm(p), read_label_pgm(g)) for p, g in zip(lab_rw, gts)]
    report = {
        "config": cfg.to_dict(),
        "cam": mean_report(rep_cam),
        "cam_rw": mean_report(rep_rw),
        "ids": ids,
    }
    report["improvement"] = report["cam_rw"]["mean_image_miou"] - report["cam"]["mean_image_miou"]
    write_json(report, d_syn / "report.json")
    write_json(report, work / "report.json")

    if overlays:
        d_ov = d_syn / "overlays"
        d_ov.mkdir(exist_ok=True)
        for ident, img_p, rw_p in zip(ids, images, lab_rw):
            img = read_image_ppm(img_p)
            write_image_ppm(render_overlay(img, read_label_pgm(rw_p)), d_ov / f"rw_{ident}.ppm")
    return report


def run_sweep(corpus_dir, work_dir, cfg: PipelineConfig, grid: str, values) -> list[dict]:
    """One independent pipeline run per grid value; shared stages come from cache."""
    if grid not in ("alpha", "beta", "t"):
        raise ConfigError(f"grid must be alpha, beta or t, got {grid!r}")
    key = "alpha_default" if grid == "alpha" else grid
    rows = []
    for v in values:
        point = replace(cfg, **{key: int(v) if key == "t" else float(v)})
        rep = run_pipeline(corpus_dir, work_dir, point)
        rows.append(
            {
                "grid": grid,
                "value": v,
                "miou_cam": rep["cam"]["mean_image_miou"],
                "miou_cam_rw": rep["cam_rw"]["mean_image_miou"],
                "pooled_miou_cam_rw": rep["cam_rw"]["pooled_miou"],
            }
        )
    return rows
