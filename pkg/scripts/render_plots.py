"""Plot an eval directory: scalar and vorticity fields, error growth and line profiles.

    python3 scripts/render_plots.py runs/toy/ev --out runs/toy/plots

Needs matplotlib (``pip install meshrom[plots]``).
"""
import argparse
import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _table(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    head, body = rows[0], np.array(rows[1:], dtype=float)
    return {h: body[:, k] for k, h in enumerate(head)}


def fields(ev: Path, out: Path):
    for path in sorted(ev.glob("fields_step*.csv")):
        t = _table(path)
        fig, axes = plt.subplots(2, 2, figsize=(9, 7), constrained_layout=True)
        for row, name in enumerate(("scalar", "vorticity")):
            lo = min(t[f"{name}_truth"].min(), t[f"{name}_pred"].min())
            hi = max(t[f"{name}_truth"].max(), t[f"{name}_pred"].max())
            for col, which in enumerate(("truth", "pred")):
                ax = axes[row, col]
                im = ax.tricontourf(t["x"], t["y"], t[f"{name}_{which}"], levels=20, vmin=lo, vmax=hi)
                ax.set_aspect("equal")
                ax.set_title(f"{name} ({which})")
            fig.colorbar(im, ax=axes[row])
        fig.savefig(out / f"{path.stem}.png", dpi=120)
        plt.close(fig)


def error(ev: Path, out: Path):
    t = _table(ev / "error_vs_step.csv")
    fig, ax = plt.subplots(figsize=(5, 3.5), constrained_layout=True)
    ax.plot(t["step"], t["rmse_scalar"], marker="o", ms=3)
    ax.set_xlabel("rollout step")
    ax.set_ylabel("scalar RMSE")
    fig.savefig(out / "error_vs_step.png", dpi=120)
    plt.close(fig)


def profiles(ev: Path, out: Path):
    pred, truth = _table(ev / "profiles_pred.csv"), _table(ev / "profiles_truth.csv")
    lines = np.unique(truth["x_line"])
    fig, axes = plt.subplots(1, len(lines), figsize=(3 * len(lines), 4), sharey=True, constrained_layout=True,
                             squeeze=False)
    for ax, x in zip(axes[0], lines):
        for t, style, label in ((truth, "-", "truth"), (pred, "--", "prediction")):
            m = t["x_line"] == x
            ax.plot(t["mean"][m], t["y_bin"][m], style, label=f"{label} mean")
            ax.plot(t["std"][m], t["y_bin"][m], style, alpha=0.5, label=f"{label} std")
        ax.set_title(f"x = {x:g}")
    axes[0, 0].set_ylabel("y")
    axes[0, 0].legend(fontsize=7)
    fig.savefig(out / "profiles.png", dpi=120)
    plt.close(fig)


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("ev", type=Path)
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()
    out = args.out or args.ev / "plots"
    out.mkdir(parents=True, exist_ok=True)
    fields(args.ev, out)
    error(args.ev, out)
    profiles(args.ev, out)
    print(f"wrote {len(list(out.glob('*.png')))} figures to {out}")
