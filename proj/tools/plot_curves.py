#!/usr/bin/env python3
"""Plot the averaged segment curve written by `neuron-probe curves --out DIR`.

usage: plot_curves.py DIR/curves.csv OUT.png
"""

import argparse
import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def read_curve(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(line for line in f if not line.startswith("#")))
    if not rows:
        raise SystemExit(f"{path}: no rows")
    return ([int(r["segment"]) for r in rows],
            [float(r["prob_increase"]) for r in rows],
            [float(r["log_prob_increase"]) for r in rows])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("csv")
    ap.add_argument("png")
    args = ap.parse_args()
    seg, prob, logp = read_curve(args.csv)

    fig, (left, right) = plt.subplots(1, 2, figsize=(9, 3.5))
    left.plot(seg, prob)
    left.set_title("probability increase")
    right.plot(seg, logp)
    right.set_title("log-probability increase")
    for ax in (left, right):
        ax.set_xlabel("segment")
        ax.set_xlim(0, seg[-1])
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(args.png, dpi=120)


if __name__ == "__main__":
    main()
