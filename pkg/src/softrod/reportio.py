"""CSV and figure output helpers shared by all experiment runners.

Every CSV carries a header row with units in brackets and a trailing
``nonfinite_flag[-]`` column: rows containing non-finite values are written
with the flag set to 1 instead of silently emitting NaN.
"""

import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

FLAG_COLUMN = "nonfinite_flag[-]"


def write_csv(path, columns, rows):
    """Write a delimited table with unit-annotated headers and a NaN flag."""
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    if rows.size and rows.shape[1] != len(columns):
        raise ValueError(f"{len(columns)} columns declared, rows have "
                         f"{rows.shape[1]}")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        fh.write(",".join(list(columns) + [FLAG_COLUMN]) + "\n")
        for row in rows:
            flag = 0 if np.all(np.isfinite(row)) else 1
            cells = [format(v, ".12g") for v in row] + [str(flag)]
            fh.write(",".join(cells) + "\n")


def write_summary(path, payload):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)

    def default(o):
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        if isinstance(o, np.ndarray):
            return o.tolist()
        raise TypeError(f"not serializable: {type(o)}")

    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=default)
        fh.write("\n")


def line_figure(path, x, series, xlabel="", ylabel="", title="",
                logy=False, logx=False):
    """Render labelled line series to a PNG next to the CSV it plots."""
    fig, ax = plt.subplots(figsize=(7, 4.2))
    for label, y in series.items():
        ax.plot(x, y, label=label, lw=1.4)
    if logy:
        ax.set_yscale("log")
    if logx:
        ax.set_xscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.grid(True, alpha=0.3)
    if len(series) > 1:
        ax.legend(fontsize=8)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
