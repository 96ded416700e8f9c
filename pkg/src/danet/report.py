"""Figure rendering for run directories.

Reads the delimited training log and writes PNG figures next to it: one
for the loss terms, one for the learning-rate schedule, one for the
validation quality metrics.  Columns that never held a value are left out
of the figures, so logs from fidelity-only runs render without empty axes.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

LOSS_COLUMNS = ("loss_D", "loss_R", "loss_G", "gp")
LR_COLUMNS = ("lr_R", "lr_G", "lr_D")
QUALITY_COLUMNS = ("psnr_val", "akld_val")


def read_log(path: Path) -> dict[str, list[float | None]]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: empty log")
        columns: dict[str, list[float | None]] = {name: [] for name in reader.fieldnames}
        for row in reader:
            for name in reader.fieldnames:
                cell = row.get(name, "")
                columns[name].append(float(cell) if cell not in ("", None) else None)
    return columns


def _series(columns, names):
    """Pick the named columns that carry at least one value."""
    epochs = [int(e) for e in columns["epoch"]]
    found = []
    for name in names:
        values = columns.get(name)
        if values is None or all(v is None for v in values):
            continue
        xs = [e for e, v in zip(epochs, values) if v is not None]
        ys = [v for v in values if v is not None]
        found.append((name, xs, ys))
    return found


def _render(series, title: str, ylabel: str, path: Path, logy: bool = False) -> bool:
    if not series:
        return False
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for name, xs, ys in series:
        ax.plot(xs, ys, marker="o", markersize=3, label=name)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return True


def render_run(run_dir: Path, out_dir: Path) -> list[Path]:
    """Render figures for one run directory, returning the files written."""
    columns = read_log(Path(run_dir) / "log.csv")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    jobs = (
        ("losses.png", _series(columns, LOSS_COLUMNS), "training losses", "loss", False),
        ("lr.png", _series(columns, LR_COLUMNS), "learning rates", "learning rate", True),
    )
    for fname, series, title, ylabel, logy in jobs:
        path = out_dir / fname
        if _render(series, title, ylabel, path, logy):
            written.append(path)
    # quality metrics live on different scales, so each gets its own figure
    for name, xs, ys in _series(columns, QUALITY_COLUMNS):
        path = out_dir / f"{name}.png"
        if _render([(name, xs, ys)], f"validation {name.removesuffix('_val')}", name, path):
            written.append(path)
    return written
