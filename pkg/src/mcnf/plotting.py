"""Quick-look PNGs written next to the plot-data CSVs."""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

COLORS = {"MCNF": "#1f6f8b", "MCD": "#c8553d"}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.stem + ".tmp.png")
    # fixed metadata so reruns produce identical bytes
    fig.savefig(tmp, dpi=120, metadata={"Software": None})
    plt.close(fig)
    tmp.replace(path)
    return path


def render_ridges(curves, path, overlap=0.8):
    """Stacked KDE curves, one ridge per grid point.

    ``curves`` is a list of ``(x, {source: (values, density)})``.
    """
    fig, ax = plt.subplots(figsize=(6, 1.0 + 0.6 * len(curves)))
    for i, (x, curve) in enumerate(curves):
        peak = max(d.max() for _, d in curve.values()) or 1.0
        for source, (v, d) in curve.items():
            ax.plot(v, i + overlap * d / peak, color=COLORS.get(source), lw=1,
                    label=source if i == 0 else None)
            ax.fill_between(v, i, i + overlap * d / peak, color=COLORS.get(source), alpha=0.15)
    ax.set_yticks(range(len(curves)))
    ax.set_yticklabels([f"x={x:.2f}" for x, _ in curves])
    ax.set_xlabel("y")
    ax.legend(frameon=False, loc="upper right")
    fig.tight_layout()
    return _save(fig, path)


def render_band(x, lo, hi, median, y, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.fill_between(x, lo, hi, color=COLORS["MCNF"], alpha=0.25, lw=0, label="interval")
    ax.plot(x, median, color=COLORS["MCNF"], lw=1, label="median")
    inside = (y >= lo) & (y <= hi)
    ax.scatter(x[inside], y[inside], s=6, color="k", label="covered")
    ax.scatter(x[~inside], y[~inside], s=10, color=COLORS["MCD"], marker="x", label="missed")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    return _save(fig, path)
