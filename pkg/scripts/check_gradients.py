import os
import sys

import numpy as np
from dotenv import load_dotenv

# Ensure repository root is on sys.path when running this script directly
ROOT_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT_DIR not in sys.path:
    sys.path.insert(0, ROOT_DIR)

from pan_model import build_variant
from run_config import ModelConfig
from tensor_core import grad_check, parameter_objective, projected_objective

"""
Finite-difference check of the full model on a small grid.
Usage:
  python scripts/check_gradients.py [pasti_count] [seed]
Prints the max relative error for the input and for every parameter array.
"""

load_dotenv()

TOLERANCE = 1e-4


def main():
    pasti_count = int(sys.argv[1]) if len(sys.argv) > 1 else 2
    seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0

    cfg = ModelConfig(pasti_count=pasti_count, n0=1, n1=1, n2=1, c0=2, c1=2, c2=2, c_f=4, dropout_rate=0.5,
                      head_init="he")
    model = build_variant("full", cfg, rows=4, cols=4, in_channels=2, states=1, seed=seed)
    rng = np.random.default_rng(seed + 1)
    x = rng.uniform(0.0, 1.0, size=(2, 4, 4, 2))
    direction = rng.standard_normal((2, 4, 4, 1))

    worst = 0.0
    err = grad_check(projected_objective(lambda v: model.forward(v, "eval"), model.backward, direction), x)
    print(f"{'input':40s} {err:.3e}")
    worst = max(worst, err)

    params = model.parameters()
    for p in params:
        run = lambda: (model.forward(x, "eval"), model.backward)
        err = grad_check(parameter_objective(p, params, run, direction), p.value.copy())
        print(f"{p.name:40s} {err:.3e}")
        worst = max(worst, err)

    status = "OK" if worst < TOLERANCE else "FAILED"
    print(f"max relative error {worst:.3e} ({status}, tolerance {TOLERANCE:g})")
    sys.exit(0 if worst < TOLERANCE else 1)


if __name__ == "__main__":
    main()
