"""Figures rendered from the CSV files of an archive (matplotlib, Agg backend)."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import ArchiveError  # noqa: E402


def _read(path: Path) -> list[dict]:
    try:
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))
    except OSError as exc:
        raise ArchiveError(path, exc.strerror or str(exc)) from exc


def _num(v: str) -> float:
    return float(v) if v != "" else np.nan


def _save(fig, path: Path) -> None:
    try:
        fig.savefig(path, dpi=110, bbox_inches="tight", metadata={"Software": None})
    except OSError as exc:
        raise ArchiveError(path, exc.strerror or str(exc)) from exc
    finally:
        plt.close(fig)


def plot_accuracy_matrix(csv_path, png_path) -> None:
    rows = _read(Path(csv_path))
    cols = [k for k in rows[0] if k.startswith("task_")]
    A = np.array([[_num(r[c]) for c in cols] for r in rows])
    fig, ax = plt.subplots(figsize=(4.8, 4.2))
    im = ax.imshow(np.ma.masked_invalid(A), vmin=0.0, vmax=1.0, cmap="viridis")
    ax.set_xlabel("evaluated task")
    ax.set_ylabel("after training task")
    ax.set_title("accuracy matrix")
    fig.colorbar(im, ax=ax, fraction=0.046)
    _save(fig, Path(png_path))


def plot_cycle_sweep(csv_path, png_path) -> None:
    rows = _read(Path(csv_path))
    nums = [int(r["num"]) for r in rows]
    acc = [_num(r["acc"]) for r in rows]
    fig, ax = plt.subplots(figsize=(4.4, 3.2))
    ax.plot(nums, acc, marker="o")
    ax.set_xlabel("inference cycles")
    ax.set_ylabel("final average accuracy")
    ax.set_xticks(nums)
    _save(fig, Path(png_path))


def plot_prompt_pca(csv_path, png_path) -> None:
    rows = _read(Path(csv_path))
    xy = np.array([[_num(r["pc1"]), _num(r["pc2"])] for r in rows])
    fig, ax = plt.subplots(figsize=(4.4, 4.0))
    ax.plot(xy[:, 0], xy[:, 1], color="0.7", zorder=1)
    ax.scatter(xy[:, 0], xy[:, 1], c=np.arange(len(xy)), cmap="plasma", zorder=2)
    for r, (a, b) in zip(rows, xy):
        ax.annotate(r["task"], (a, b), textcoords="offset points", xytext=(4, 4), fontsize=8)
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.set_title("task prompts")
    _save(fig, Path(png_path))


def plot_loss_curve(csv_path, png_path) -> None:
    rows = _read(Path(csv_path))
    loss = np.array([_num(r["loss"]) for r in rows])
    task = np.array([int(r["task"]) for r in rows])
    fig, ax = plt.subplots(figsize=(5.2, 3.2))
    ax.plot(np.arange(len(loss)), loss, lw=0.8)
    for b in np.flatnonzero(np.diff(task)) + 1:
        ax.axvline(b, color="0.85", lw=0.6)
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    _save(fig, Path(png_path))


def render_sweep(csv_path, png_path) -> None:
    rows = _read(Path(csv_path))
    vals = [float(r["value"]) for r in rows]
    fig, ax = plt.subplots(figsize=(4.4, 3.2))
    ax.plot(vals, [_num(r["acc"]) for r in rows], marker="o", label="ACC")
    ax.plot(vals, [_num(r["af"]) for r in rows], marker="s", label="AF")
    ax.set_xlabel(rows[0]["axis"] if rows else "value")
    ax.legend()
    _save(fig, Path(png_path))


def render_archive(archive) -> list[Path]:
    """Render every figure whose source CSV exists; returns the written paths."""
    out = Path(archive)
    fig_dir = out / "figures"
    try:
        fig_dir.mkdir(exist_ok=True)
    except OSError as exc:
        raise ArchiveError(fig_dir, exc.strerror or str(exc)) from exc
    jobs = [("accuracy_matrix.csv", plot_accuracy_matrix), ("cycle_sweep.csv", plot_cycle_sweep),
            ("prompt_pca.csv", plot_prompt_pca), ("loss_curve.csv", plot_loss_curve)]
    written = []
    for name, fn in jobs:
        src = out / name
        if src.exists() and len(_read(src)) > 0:
            dst = fig_dir / (Path(name).stem + ".png")
            fn(src, dst)
            written.append(dst)
    return written
