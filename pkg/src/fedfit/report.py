"""Render fit results to delimited files plus matplotlib figures.

The CLI's report path drops a small bundle next to the printed output: the
summary table as CSV alongside a coefficient plot for Cox fits, and the
singular values/vectors as CSV alongside a scree plot for SVD runs.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .cox import CoxFitResult, cox_summary
from .svd import SvdResult


def _use_agg():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def write_cox_report(fit: CoxFitResult, outdir: str | Path) -> list[Path]:
    """Write cox_summary.csv and cox_coefficients.png; returns the paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    table = cox_summary(fit)

    csv_path = outdir / "cox_summary.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["covariate", "coef", "exp_coef", "se", "z", "p"])
        for row in table.rows:
            writer.writerow(
                [row.name, repr(row.coef), repr(row.exp_coef), repr(row.se),
                 repr(row.z), repr(row.p_value)]
            )

    plt = _use_agg()
    names = [row.name for row in table.rows]
    coefs = np.array([row.coef for row in table.rows])
    ses = np.array([row.se for row in table.rows])
    y = np.arange(len(names))[::-1]
    fig, ax = plt.subplots(figsize=(6, 0.5 * max(len(names), 4) + 1))
    ax.errorbar(coefs, y, xerr=1.959964 * ses, fmt="o", capsize=3)
    ax.axvline(0.0, color="grey", lw=0.8, ls="--")
    ax.set_yticks(y)
    ax.set_yticklabels(names)
    ax.set_xlabel("coefficient (95% CI)")
    ax.set_title("Stratified Cox fit")
    fig.tight_layout()
    png_path = outdir / "cox_coefficients.png"
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return [csv_path, png_path]


def write_svd_report(result: SvdResult, outdir: str | Path) -> list[Path]:
    """Write svd_values.csv, svd_vectors.csv, and svd_scree.png."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)

    values_path = outdir / "svd_values.csv"
    with open(values_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["component", "d", "iterations", "converged"])
        for i, d in enumerate(result.d, start=1):
            writer.writerow(
                [i, repr(float(d)), result.iterations_per_component[i - 1],
                 result.converged[i - 1]]
            )

    vectors_path = outdir / "svd_vectors.csv"
    with open(vectors_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"v{j + 1}" for j in range(result.k)])
        for row in result.v:
            writer.writerow([repr(float(x)) for x in row])

    plt = _use_agg()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(np.arange(1, result.k + 1), result.d, "o-")
    ax.set_xlabel("component")
    ax.set_ylabel("singular value")
    ax.set_xticks(np.arange(1, result.k + 1))
    ax.set_title("Distributed rank-k SVD")
    fig.tight_layout()
    png_path = outdir / "svd_scree.png"
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return [values_path, vectors_path, png_path]
