#!/usr/bin/env python3
"""Sweep one hyper-parameter over a fixture corpus and tabulate mIoU.

Grid points share cached stages, so a beta or t sweep trains the embedder once.

    python scripts/run_sweep.py --grid beta --values 4,6,8,10,12
"""

import argparse
import csv
import logging
import sys
from pathlib import Path

from affseg.stages import run_sweep, write_fixture_corpus
from affseg.synthesis_eval import FixtureSpec
from affseg.tensor_io import PipelineConfig


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/sweep"))
    ap.add_argument("--grid", choices=("alpha", "beta", "t"), default="beta")
    ap.add_argument("--values", default="4,6,8,10,12")
    ap.add_argument("--count", type=int, default=20)
    ap.add_argument("--seed", type=int, default=42)
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING, format="%(levelname).1s: %(message)s")

    cfg = PipelineConfig(seed=args.seed)
    corpus = args.out / "corpus"
    if not (corpus / "corpus.json").exists():
        write_fixture_corpus(corpus, FixtureSpec(stride=cfg.stride, seed=args.seed), args.count)
    cast = int if args.grid == "t" else float
    values = [cast(v) for v in args.values.split(",")]
    rows = run_sweep(corpus, args.out / "work", cfg, args.grid, values)

    writer = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    scores = [100 * r["miou_cam_rw"] for r in rows]
    print(f"spread: {max(scores) - min(scores):.2f} mIoU points", file=sys.stderr)


if __name__ == "__main__":
    main()
