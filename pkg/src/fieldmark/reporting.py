"""Delimited result files and the figures rendered alongside them.

Every report lands as a CSV (the machine-readable artifact) plus PNG charts
in the same directory.  Writers are atomic: a partial file never appears
under its final name.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .checkpoint import atomic_write_bytes


def write_csv(path, rows: Sequence[dict], fieldnames: Optional[Sequence[str]] = None) -> None:
    if not rows:
        raise ValueError("refusing to write an empty report")
    if fieldnames is None:
        fieldnames = list(rows[0].keys())
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fieldnames)
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    atomic_write_bytes(path, buf.getvalue().encode())


def read_csv(path) -> List[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def write_json(path, payload) -> None:
    atomic_write_bytes(path, (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode())


def _save_fig(fig, path) -> Path:
    buf = io.BytesIO()
    fig.savefig(buf, format=Path(path).suffix.lstrip("."), dpi=120,
                bbox_inches="tight")
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())
    return Path(path)


def plot_sweep(rows: Sequence[dict], out_dir) -> List[Path]:
    """Accuracy and quality against the number of embedded watermarks."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ns = [int(r["num_watermarks"]) for r in rows]
    acc = [float(r["bit_acc"]) for r in rows]
    paths = []

    fig, ax = plt.subplots(figsize=(5, 3.4))
    ax.plot(ns, acc, "o-", color="tab:blue")
    ax.set_xscale("log", base=2)
    ax.set_xticks(ns, [str(n) for n in ns])
    ax.set_xlabel("embedded watermarks")
    ax.set_ylabel("bit accuracy")
    ax.set_ylim(0.45, 1.02)
    ax.axhline(0.5, color="gray", lw=0.8, ls="--", label="chance")
    ax.grid(alpha=0.3)
    ax.legend()
    paths.append(_save_fig(fig, out_dir / "sweep_accuracy.png"))

    if all("psnr" in r for r in rows):
        fig, ax = plt.subplots(figsize=(5, 3.4))
        ax.plot(ns, [float(r["psnr"]) for r in rows], "s-", color="tab:orange")
        ax.set_xscale("log", base=2)
        ax.set_xticks(ns, [str(n) for n in ns])
        ax.set_xlabel("embedded watermarks")
        ax.set_ylabel("PSNR (dB)")
        ax.grid(alpha=0.3)
        paths.append(_save_fig(fig, out_dir / "sweep_quality.png"))
    return paths


def plot_attacks(rows: Sequence[dict], out_dir) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = [r["attack"] for r in rows]
    acc = [float(r["bit_acc"]) for r in rows]
    fig, ax = plt.subplots(figsize=(max(5, 0.55 * len(names)), 3.4))
    ax.bar(range(len(names)), acc, color="tab:blue")
    ax.set_xticks(range(len(names)), names, rotation=45, ha="right")
    ax.set_ylabel("bit accuracy")
    ax.set_ylim(0, 1.05)
    ax.axhline(0.5, color="gray", lw=0.8, ls="--")
    ax.grid(axis="y", alpha=0.3)
    return [_save_fig(fig, out_dir / "attack_accuracy.png")]


def plot_training_log(rows: Sequence[dict], out_dir) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []

    def series(col):
        xs, ys = [], []
        for r in rows:
            v = r.get(col, "")
            if v not in ("", None):
                xs.append(int(r["iteration"]))
                ys.append(float(v))
        return xs, ys

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    for col, color in (("L_RGB", "tab:blue"), ("L_secret", "tab:red"),
                       ("L_SSIM", "tab:green")):
        xs, ys = series(col)
        if xs:
            axes[0].plot(xs, ys, lw=1.0, label=col, color=color)
    axes[0].set_yscale("log")
    axes[0].set_xlabel("iteration")
    axes[0].set_ylabel("loss")
    axes[0].legend(fontsize=8)
    axes[0].grid(alpha=0.3)
    for col, color in (("bit_acc", "tab:purple"), ("psnr", "tab:orange")):
        xs, ys = series(col)
        if xs:
            ax = axes[1] if col == "bit_acc" else axes[1].twinx()
            ax.plot(xs, ys, lw=1.0, label=col, color=color)
            ax.set_ylabel(col)
    axes[1].set_xlabel("iteration")
    axes[1].grid(alpha=0.3)
    paths.append(_save_fig(fig, out_dir / "training_curves.png"))
    return paths


def plot_id_matrix(matrix: np.ndarray, out_dir) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    im = ax.imshow(matrix, vmin=0.4, vmax=1.0, cmap="viridis")
    ax.set_xlabel("scored message")
    ax.set_ylabel("rendered ID")
    fig.colorbar(im, ax=ax, label="bit accuracy")
    return [_save_fig(fig, out_dir / "id_matrix.png")]


def render_report(csv_path, out_dir) -> List[Path]:
    """Figures for a result CSV, dispatched on its columns."""
    rows = read_csv(csv_path)
    if not rows:
        raise ValueError(f"{csv_path} holds no data rows")
    cols = set(rows[0])
    if {"num_watermarks", "bit_acc"} <= cols:
        return plot_sweep(rows, out_dir)
    if {"attack", "bit_acc"} <= cols:
        return plot_attacks(rows, out_dir)
    if {"iteration"} <= cols:
        return plot_training_log(rows, out_dir)
    raise ValueError(
        f"{csv_path} does not look like a sweep, attack or training log "
        f"(columns: {sorted(cols)})")
