"""Command-line entry point: ``affseg <subcommand> ...``.

Configuration precedence: command-line flag > ``--config`` JSON > built-in
default.  Every ``PipelineConfig`` field has a flag of the same name
(``--alpha_default``, ``--beta``, ...).

Failures print ``E: <message>`` lines and a final JSON error object on
stderr.  Exit codes: 2 validation, 3 I/O, 4 numeric.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from pathlib import Path

from . import stages
from .affinity_learn import (
    embed,
    load_model,
    sample_pairs,
    save_model,
    train_embedder,
    write_pairset,
)
from .diffusion import build_affinity_matrix, propagate, transition_matrix
from .errors import AffsegError, AlphaOutOfRange, ConfigError, IoFailure
from .seed_maps import (
    ClassifierHead,
    background_map,
    cam_from_features,
    confident_regions,
    normalize_cam,
    read_score_stack,
    write_score_stack,
)
from .synthesis_eval import (
    FixtureSpec,
    miou,
    render_overlay,
    synthesize_labels,
    upsample_bilinear,
)
from .tensor_io import (
    PipelineConfig,
    read_config,
    read_image_ppm,
    read_json,
    read_label_pgm,
    read_tensor,
    write_image_ppm,
    write_json,
    write_label_pgm,
)

log = logging.getLogger("affseg")

_FIXTURE_FLAGS = (
    "height", "width", "min_blobs", "max_blobs", "min_radius", "max_radius",
    "max_aspect", "blob_margin", "pixel_noise", "erosion", "falloff", "fp_rate", "noise_sigma",
)


def _config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("pipeline config")
    g.add_argument("--config", type=Path, help="JSON config file")
    for f in dataclasses.fields(PipelineConfig):
        typ = f.type if not isinstance(f.type, str) else {"int": int, "float": float, "str": str}[f.type]
        g.add_argument(f"--{f.name}", type=typ, default=None, dest=f"cfg_{f.name}")


def _resolve_config(args) -> PipelineConfig:
    base = read_config(args.config).to_dict() if args.config else PipelineConfig().to_dict()
    for f in dataclasses.fields(PipelineConfig):
        v = getattr(args, f"cfg_{f.name}", None)
        if v is not None:
            base[f.name] = v
    return PipelineConfig.from_dict(base)


def _manifest_for(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


def _stack_files(p: Path) -> list[Path]:
    return [p, p.with_name(p.name + ".json")]


# Subcommands ------------------------------------------------------------------------

def cmd_cam(args, cfg: PipelineConfig) -> int:
    alpha = args.alpha if args.alpha is not None else cfg.alpha_default
    present_path = args.present

    def produce():
        feats = read_tensor(args.features)
        head = ClassifierHead(read_tensor(args.head).data)
        present = read_json(present_path)
        if isinstance(present, dict):
            present = present["class_present"]
        stack = normalize_cam(cam_from_features(feats.data, head, present))
        write_score_stack(background_map(stack, alpha), args.out)
        return _stack_files(args.out)

    if not alpha >= 1:
        raise AlphaOutOfRange(f"alpha must be >= 1, got {alpha}")
    stages.cached_stage(
        "cam", {"alpha_default": alpha}, [args.features, args.head, present_path],
        _manifest_for(args.out), produce,
    )
    return 0


def cmd_confidence(args, cfg) -> int:
    def produce():
        stack = read_score_stack(args.stack)
        write_label_pgm(confident_regions(stack, cfg.alpha_low, cfg.alpha_high), args.out)
        return [args.out]

    stages.cached_stage(
        "confidence", stages.stage_config(cfg, "confidence"), _stack_files(args.stack),
        _manifest_for(args.out), produce,
    )
    return 0


def cmd_pairs(args, cfg) -> int:
    def produce():
        ps = sample_pairs(read_label_pgm(args.labels), cfg.gamma)
        write_pairset(ps, args.out)
        log.info("pairs: fg+ %d, bg+ %d, neg %d", *ps.sizes)
        return [args.out]

    stages.cached_stage(
        "pairs", stages.stage_config(cfg, "pairs"), [args.labels], _manifest_for(args.out), produce
    )
    return 0


def cmd_train_aff(args, cfg) -> int:
    listing = read_json(args.list)
    base = Path(args.list).parent
    entries = listing["items"] if isinstance(listing, dict) else listing
    images = [base / e["image"] for e in entries]
    labels = [base / e["labels"] for e in entries]

    def produce():
        corpus = [(read_image_ppm(i), read_label_pgm(l)) for i, l in zip(images, labels)]
        model, train_log = train_embedder(corpus, stages.trainer_config(cfg))
        save_model(model, args.out)
        write_json(
            {"initial_loss": vars(train_log.initial), "final_loss": vars(train_log.final),
             "pair_counts": list(train_log.pair_counts)},
            Path(args.out) / "train_log.json",
        )
        return [Path(args.out)]

    stages.cached_stage(
        "train_aff", stages.stage_config(cfg, "train_aff"), images + labels,
        Path(args.out) / stages.MANIFEST, produce,
    )
    return 0


def cmd_propagate(args, cfg) -> int:
    mode = cfg.mode
    conf = stages.stage_config(cfg, "propagate")

    def produce():
        model = load_model(args.model)
        stack = read_score_stack(args.stack)
        feats = embed(model, read_image_ppm(args.image), cfg.stride)
        t_mat = transition_matrix(build_affinity_matrix(feats, cfg.gamma), cfg.beta)
        write_score_stack(propagate(t_mat, stack, cfg.t, mode, cfg.max_dense_entries), args.out)
        return _stack_files(args.out)

    stages.cached_stage(
        "propagate", conf, [args.model, args.image] + _stack_files(args.stack),
        _manifest_for(args.out), produce,
    )
    return 0


def cmd_synthesize(args, cfg) -> int:
    def produce():
        stack = read_score_stack(args.stack)
        if args.image is not None:
            img = read_image_ppm(args.image)
            size = (img.height, img.width)
        elif args.height and args.width:
            size = (args.height, args.width)
        else:
            size = None
        write_label_pgm(synthesize_labels(upsample_bilinear(stack, cfg.stride, size)), args.out)
        return [args.out]

    inputs = _stack_files(args.stack) + ([args.image] if args.image else [])
    conf = dict(stages.stage_config(cfg, "synthesize"), height=args.height, width=args.width)
    stages.cached_stage("synthesize", conf, inputs, _manifest_for(args.out), produce)
    return 0


def cmd_eval(args, cfg) -> int:
    report = miou(read_label_pgm(args.pred), read_label_pgm(args.gt), config=cfg.to_dict())
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    print(text)
    if args.out:
        write_json(report.to_dict(), args.out)
    return 0


def cmd_overlay(args, cfg) -> int:
    write_image_ppm(render_overlay(read_image_ppm(args.image), read_label_pgm(args.labels)), args.out)
    return 0


def _fixture_spec(args, cfg) -> FixtureSpec:
    kw = {k: getattr(args, k) for k in _FIXTURE_FLAGS if getattr(args, k) is not None}
    return FixtureSpec(num_classes=cfg.num_classes, stride=cfg.stride, seed=cfg.seed, **kw)


def cmd_fixture(args, cfg) -> int:
    spec = _fixture_spec(args, cfg)
    index = stages.write_fixture_corpus(args.out, spec, args.count)
    log.info("wrote %d fixtures to %s", args.count, index.parent)
    return 0


def cmd_run(args, cfg) -> int:
    report = stages.run_pipeline(args.corpus, args.work, cfg, overlays=args.overlays)
    summary = {
        "miou_cam": report["cam"]["mean_image_miou"],
        "miou_cam_rw": report["cam_rw"]["mean_image_miou"],
        "improvement": report["improvement"],
    }
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def _parse_values(grid: str, text: str) -> list:
    vals = [v for v in text.split(",") if v.strip()]
    if not vals:
        raise ConfigError("empty grid")
    if grid == "t":
        return [int(v) for v in vals]
    return [float(v) for v in vals]


def cmd_sweep(args, cfg) -> int:
    values = _parse_values(args.grid, args.values)
    rows = stages.run_sweep(args.corpus, args.work, cfg, args.grid, values)
    out = Path(args.out) if args.out else Path(args.work)
    out.mkdir(parents=True, exist_ok=True)
    miou_vals = [r["miou_cam_rw"] for r in rows]
    table = {
        "grid": args.grid,
        "rows": rows,
        "spread": max(miou_vals) - min(miou_vals),
        "config": cfg.to_dict(),
    }
    write_json(table, out / f"sweep_{args.grid}.json")
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    (out / f"sweep_{args.grid}.csv").write_text(buf.getvalue())
    print(json.dumps(table, indent=2, sort_keys=True))
    return 0


# Parser -------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="affseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, aliases=()):
        sp = sub.add_parser(name, help=help_, aliases=list(aliases))
        sp.set_defaults(func=fn)
        _config_flags(sp)
        return sp

    sp = add("cam", cmd_cam, "features + classifier head -> normalized seed stack")
    sp.add_argument("features", type=Path)
    sp.add_argument("head", type=Path)
    sp.add_argument("present", type=Path)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--alpha", type=float, default=None, help="background exponent (alpha_default)")

    sp = add("confidence", cmd_confidence, "seed stack -> confident-region label map")
    sp.add_argument("stack", type=Path)
    sp.add_argument("--out", type=Path, required=True)

    sp = add("pairs", cmd_pairs, "confident labels -> affinity pair set")
    sp.add_argument("labels", type=Path)
    sp.add_argument("--out", type=Path, required=True)

    sp = add("train_aff", cmd_train_aff, "train the affinity embedder", aliases=("train-aff",))
    sp.add_argument("list", type=Path, help='JSON list of {"image": ..., "labels": ...}')
    sp.add_argument("--out", type=Path, required=True, help="model directory")

    sp = add("propagate", cmd_propagate, "random-walk revision of a score stack")
    sp.add_argument("model", type=Path)
    sp.add_argument("image", type=Path)
    sp.add_argument("stack", type=Path)
    sp.add_argument("--out", type=Path, required=True)

    sp = add("synthesize", cmd_synthesize, "score stack -> label map at image resolution")
    sp.add_argument("stack", type=Path)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--image", type=Path, default=None, help="take output size from this image")
    sp.add_argument("--height", type=int, default=None)
    sp.add_argument("--width", type=int, default=None)

    sp = add("eval", cmd_eval, "mIoU of a prediction against ground truth")
    sp.add_argument("pred", type=Path)
    sp.add_argument("gt", type=Path)
    sp.add_argument("--out", type=Path, default=None)

    sp = add("overlay", cmd_overlay, "render labels over an image")
    sp.add_argument("image", type=Path)
    sp.add_argument("labels", type=Path)
    sp.add_argument("--out", type=Path, required=True)

    sp = add("fixture", cmd_fixture, "generate a synthetic blob corpus")
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--count", type=int, default=20)
    for name in _FIXTURE_FLAGS:
        typ = int if name in ("height", "width", "min_blobs", "max_blobs") else float
        sp.add_argument(f"--{name}", type=typ, default=None)

    sp = add("run", cmd_run, "full pipeline over a fixture corpus")
    sp.add_argument("corpus", type=Path)
    sp.add_argument("--work", type=Path, required=True)
    sp.add_argument("--overlays", action="store_true")

    sp = add("sweep", cmd_sweep, "mIoU over a hyper-parameter grid")
    sp.add_argument("corpus", type=Path)
    sp.add_argument("--work", type=Path, required=True)
    sp.add_argument("--grid", choices=("alpha", "beta", "t"), required=True)
    sp.add_argument("--values", required=True, help="comma-separated grid values")
    sp.add_argument("--out", type=Path, default=None)

    return p


class _PrefixFormatter(logging.Formatter):
    def format(self, record):
        return f"{record.levelname[0]}: {record.getMessage()}"


def _setup_logging(verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_PrefixFormatter())
    root = logging.getLogger("affseg")
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.propagate = False


def _fail(exc: Exception, code: int) -> int:
    log.error("%s", exc)
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        cfg = _resolve_config(args)
        return args.func(args, cfg)
    except AffsegError as exc:
        return _fail(exc, exc.exit_code)
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        return _fail(IoFailure(f"{type(exc).__name__}: {exc}"), 3)
    except (FloatingPointError, ArithmeticError) as exc:
        return _fail(exc, 4)
    except TypeError as exc:
        return _fail(ConfigError(str(exc)), 2)


if __name__ == "__main__":
    sys.exit(main())
