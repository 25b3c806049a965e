"""Label-type robustness grid (uniform re-samplings, gaussian, 2s/3s/4s clips).

    python scripts/run_robustness.py --out runs/robustness [--seeds 3]
"""
import sys

from run_ablation import run

if __name__ == "__main__":
    sys.exit(run("robustness"))
