"""Signal informativeness against persuasion-induced share shifts across theta.

For each theta on a grid, evaluates on the true prior of the recovery design
the per-group signal marginal entropy (bits) and the largest absolute change
in unconditional choice probabilities caused by persuasion.

    python scripts/entropy_sweep.py [--out sweep.csv]
"""

import argparse

import numpy as np

from ripersuasion.infotheory import signal_marginal_entropy
from ripersuasion.io import write_table
from ripersuasion.persuasion import signal_solutions
from ripersuasion.recovery import recovery_design
from ripersuasion.simulate import true_params

THETAS = (0.5, 0.7, 0.8, 0.9, 0.95, 0.97, 0.98, 0.99, 0.995, 0.999)


def sweep(thetas=THETAS):
    rows = []
    for theta in thetas:
        spec = recovery_design(theta)
        p0 = true_params(spec).p0
        for k in range(spec.alpha.shape[1]):
            h = signal_solutions(spec.prior, spec.strategy, k, spec.alpha[:, k, 0]).h
            ent = signal_marginal_entropy(spec.prior, spec.strategy, k)
            rows.append([theta, k + 1, spec.strategy.families[k], ent, float(np.abs(h - p0[:, k, 0]).max())])
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", help="optional CSV output")
    args = ap.parse_args()
    rows = sweep()
    print(f"{'theta':>6} {'group':>5} {'family':>15} {'entropy':>9} {'shift':>9}")
    for t, k, fam, ent, shift in rows:
        flag = "  <- entropy < 0.1 and shift > 0.01" if ent < 0.1 and shift > 0.01 else ""
        print(f"{t:6.3f} {k:5d} {fam:>15} {ent:9.4f} {shift:9.5f}{flag}")
    if args.out:
        write_table(args.out, ["theta", "group", "family", "entropy_bits", "max_share_shift"], rows)


if __name__ == "__main__":
    main()
