"""Loss ablation (rows A1-A6) on the seed-7 synthetic corpus.

    python scripts/run_ablation.py --out runs/ablation [--seeds 3]

Cells are cached under --out, so an interrupted run resumes where it stopped.
Set CU_THREADS to train several cells at once.
"""
import argparse
import sys
from pathlib import Path

from ptsg.cli import main


def run(grid: str) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs") / grid, help="experiment directory")
    ap.add_argument("--seeds", type=int, default=3, help="training seeds per row")
    ap.add_argument("--samples", type=int, default=200, help="corpus size")
    args = ap.parse_args()
    corpus = args.out / "corpus"
    if not (corpus / "manifest.txt").exists():
        code = main(["gen", "--out", str(corpus), "--samples", str(args.samples), "--seed", "7"])
        if code:
            return code
    return main([grid, "--corpus", str(corpus), "--out", str(args.out), "--seeds", str(args.seeds)])


if __name__ == "__main__":
    sys.exit(run("ablate"))
