"""Render benchmark CSV into the two standard line plots.

Convenience only; the CSV is the contract.  Requires matplotlib
(``pip install dtlstack[plot]``).
"""

from __future__ import annotations

import argparse

from .bench import by_variant, parse_csv


def render(records, out_prefix: str):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    variants = sorted({r.variant for r in records})

    fig, ax = plt.subplots()
    for variant in variants:
        rows = by_variant(records, variant)
        xs = [r.payload for r in rows]
        ax.errorbar(xs, [r.t_full_mean for r in rows],
                    yerr=[r.t_full_std for r in rows],
                    label="%s full stack" % variant, marker="o")
        if any(r.t_dtls_mean for r in rows):
            ax.errorbar(xs, [r.t_dtls_mean for r in rows],
                        yerr=[r.t_dtls_std for r in rows],
                        label="%s security layer only" % variant, marker="s",
                        linestyle="--")
    ax.set_xlabel("payload size [B]")
    ax.set_ylabel("processing time [us]")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.savefig(out_prefix + "_time.png", dpi=150, bbox_inches="tight")

    fig, ax = plt.subplots()
    for variant in variants:
        rows = by_variant(records, variant)
        ax.plot([r.payload for r in rows], [r.goodput_mean for r in rows],
                label=variant, marker="o")
    ax.set_xlabel("payload size [B]")
    ax.set_ylabel("goodput [kbit/s]")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.savefig(out_prefix + "_goodput.png", dpi=150, bbox_inches="tight")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="dtls-bench-plot")
    parser.add_argument("csv")
    parser.add_argument("--out-prefix", default="bench")
    args = parser.parse_args(argv)
    render(parse_csv(args.csv), args.out_prefix)
    print("wrote %s_time.png and %s_goodput.png"
          % (args.out_prefix, args.out_prefix))
    return 0
