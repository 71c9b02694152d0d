"""Heatmap images, delimited tables and matplotlib figures.

Heatmaps are always written as binary grayscale PGM (``P5``, maxval 255):

    value v in [lo, hi]  ->  level = floor(255 * (v - lo) / (hi - lo) + 0.5)

Values outside [lo, hi] are clamped first and counted in a ``.note.txt``
sidecar next to the image. The optional color PNG maps the same level through
a piecewise-linear colormap with these stops (level -> RGB):

    0   ->  (0, 0, 0)
    64  ->  (64, 0, 160)
    128 ->  (200, 30, 60)
    192 ->  (255, 140, 0)
    255 ->  (255, 255, 200)
"""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .fields import ScalarField  # noqa: E402

COLOR_STOPS = ((0, (0, 0, 0)), (64, (64, 0, 160)), (128, (200, 30, 60)),
               (192, (255, 140, 0)), (255, (255, 255, 200)))

# PNG metadata left empty so repeated renders are byte-identical
_PNG_META = {"Software": None}


def _values(f) -> np.ndarray:
    return f.values if isinstance(f, ScalarField) else np.asarray(f, dtype=np.float64)


def intensity(values, lo: float, hi: float) -> tuple[np.ndarray, int, int]:
    """Map to uint8 levels; also returns how many pixels were clamped low and high."""
    if not (math.isfinite(lo) and math.isfinite(hi)) or hi <= lo:
        raise ValueError(f"degenerate render range [{lo}, {hi}]")
    v = np.asarray(values, dtype=np.float64)
    below, above = int(np.count_nonzero(v < lo)), int(np.count_nonzero(v > hi))
    scaled = (np.clip(v, lo, hi) - lo) / (hi - lo)
    return np.floor(255.0 * scaled + 0.5).astype(np.uint8), below, above


def colorize(levels: np.ndarray) -> np.ndarray:
    """(H, W) uint8 levels -> (H, W, 3) uint8 RGB through ``COLOR_STOPS``."""
    xs = [s[0] for s in COLOR_STOPS]
    lut = np.stack([np.interp(np.arange(256), xs, [s[1][c] for s in COLOR_STOPS])
                    for c in range(3)], axis=1)
    lut = np.floor(lut + 0.5).astype(np.uint8)
    return lut[levels]


def pgm_bytes(levels: np.ndarray) -> bytes:
    h, w = levels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(levels, np.uint8).tobytes()


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5" or parts[2] != b"255":
        raise ValueError(f"{path} is not an 8-bit binary PGM")
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


def render_heatmap(f, lo: float, hi: float, path, png: bool = False) -> dict:
    """Write ``path`` (.pgm) and optionally a sibling .png; returns the written paths.

    Clamped pixels are recorded in ``<stem>.note.txt``; no note is written
    when everything is in range.
    """
    levels, below, above = intensity(_values(f), lo, hi)
    path = Path(path).with_suffix(".pgm")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(pgm_bytes(levels))
    out = {"pgm": str(path)}
    note = path.with_suffix(".note.txt")
    if below or above:
        note.write_text(f"range\t{lo!r}\t{hi!r}\nclamped_below\t{below}\nclamped_above\t{above}\n")
        out["note"] = str(note)
    elif note.exists():
        note.unlink()
    if png:
        png_path = path.with_suffix(".png")
        plt.imsave(png_path, colorize(levels), metadata=_PNG_META)
        out["png"] = str(png_path)
    return out


# --- delimited output ---------------------------------------------------

def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def tsv_text(rows: list[dict], columns: list[str] | None = None) -> str:
    if columns is None:
        columns = list(rows[0]) if rows else []
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in columns])
    return buf.getvalue()


def write_tsv(path, rows: list[dict], columns: list[str] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(tsv_text(rows, columns))
    return path


def read_tsv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def write_json(path, record: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_json_safe(record), sort_keys=True, indent=2) + "\n")
    return path


# --- figures ------------------------------------------------------------

def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_stage_metrics(buckets: list[dict], path, title: str = "") -> Path:
    """RMSE, NPD and SSIM per transient stage."""
    labels = [f"{b['start']}-{b['end']}" for b in buckets]
    x = np.arange(len(buckets))
    fig, axes = plt.subplots(1, 3, figsize=(10, 3))
    for ax, key, unit in zip(axes, ("rmse", "npd", "ssim"), ("C", "", "")):
        vals = [np.nan if b[key] is None else b[key] for b in buckets]
        ax.bar(x, vals, color="0.4")
        ax.set_xticks(x, labels, rotation=30)
        ax.set_title(key.upper() + (f" ({unit})" if unit else ""))
        ax.set_xlabel("step")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_rollout_panel(pred: np.ndarray, truth: np.ndarray | None, stages: list[int], path,
                       lo: float, hi: float) -> Path:
    """Predicted maps at the snapshot stages, with truth and |error| rows when available."""
    rows = 1 if truth is None else 3
    fig, axes = plt.subplots(rows, len(stages), figsize=(2.2 * len(stages), 2.2 * rows), squeeze=False)
    err_hi = float(np.max(np.abs(pred[stages] - truth[stages]))) if truth is not None else 0.0
    for j, k in enumerate(stages):
        axes[0, j].imshow(pred[k], vmin=lo, vmax=hi, cmap="inferno")
        axes[0, j].set_title(f"t = {k}")
        if truth is not None:
            axes[1, j].imshow(truth[k], vmin=lo, vmax=hi, cmap="inferno")
            axes[2, j].imshow(np.abs(pred[k] - truth[k]), vmin=0, vmax=err_hi or 1.0, cmap="viridis")
    axes[0, 0].set_ylabel("predicted")
    if truth is not None:
        axes[1, 0].set_ylabel("solver")
        axes[2, 0].set_ylabel("|error|")
    for ax in axes.ravel():
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    return _save(fig, path)


def plot_history(history: list[dict], path) -> Path:
    epochs = [h["epoch"] for h in history]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for key, style in (("train_total", "-"), ("val_total", "--"), ("train_l_rmse", ":")):
        if history and key in history[0]:
            ax.plot(epochs, [h[key] for h in history], style, label=key)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    fig.tight_layout()
    return _save(fig, path)


def plot_ablation(rows: list[dict], path, key: str = "val_rmse_c") -> Path:
    names = [r["config"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar(np.arange(len(rows)), [float(r[key]) for r in rows], color="0.4")
    ax.set_xticks(np.arange(len(rows)), names, rotation=20)
    ax.set_ylabel(key)
    fig.tight_layout()
    return _save(fig, path)


def plot_sweep(rows: list[dict], path) -> Path:
    """Held-out RMSE and physics residual against the physics weight."""
    lams = [float(r["lambda"]) for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(8, 3))
    for ax, key, label in zip(axes, ("val_rmse_c", "val_l_physics"), ("RMSE (C)", "physics residual")):
        ax.plot(lams, [float(r[key]) for r in rows], "o-", color="0.3")
        ax.set_xscale("symlog", linthresh=0.01)
        ax.set_yscale("log")
        ax.set_xlabel("lambda")
        ax.set_ylabel(label)
    fig.tight_layout()
    return _save(fig, path)
