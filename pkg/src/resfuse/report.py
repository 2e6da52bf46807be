"""Report rendering: slice exports, comparison tables, and figures.

Delimited artifacts (JSON, aligned text) are always written; matplotlib
figures are rendered to PNG files alongside them.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from . import phantom

VARIANT_ORDER = ("post-only", "direct", "weighted")


# -- portable gray/pix map slice exports -------------------------------------

def _to_u8(img: np.ndarray) -> np.ndarray:
    lo, hi = float(img.min()), float(img.max())
    if hi <= lo:
        return np.zeros(img.shape, dtype=np.uint8)
    return np.clip((img - lo) / (hi - lo) * 255.0, 0, 255).astype(np.uint8)


def write_pgm(path, gray: np.ndarray):
    """Binary PGM (P5) of a 2-D uint8-able image."""
    img = _to_u8(np.asarray(gray)) if np.asarray(gray).dtype != np.uint8 else np.asarray(gray)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def write_ppm(path, rgb: np.ndarray):
    """Binary PPM (P6) of an (H, W, 3) uint8 image."""
    img = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def _contour(mask: np.ndarray) -> np.ndarray:
    """Boundary voxels of a 2-D mask (4-neighborhood erosion residue)."""
    m = mask.astype(bool)
    interior = m.copy()
    interior[1:, :] &= m[:-1, :]
    interior[:-1, :] &= m[1:, :]
    interior[:, 1:] &= m[:, :-1]
    interior[:, :-1] &= m[:, 1:]
    return m & ~interior


def export_case_slices(directory, case: int, sample: phantom.Sample,
                       pred_mask: np.ndarray):
    """Axial mid-slice: post volume as PGM, overlay as PPM (GT contour in
    green, prediction in red), plus a PNG panel figure."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    z = sample.post.shape[0] // 2
    post = sample.post[z]
    gt = sample.lesion_mask[z]
    pred = np.asarray(pred_mask)[z]
    write_pgm(d / f"case_{case}_post.pgm", post)

    base = _to_u8(post)
    rgb = np.stack([base, base, base], axis=-1)
    rgb[pred] = [255, 64, 64]
    rgb[_contour(gt)] = [0, 255, 0]
    write_ppm(d / f"case_{case}_overlay.ppm", rgb)

    fig, axes = plt.subplots(1, 4, figsize=(10, 2.8))
    for ax, img, title in zip(
            axes,
            (sample.pre[z], post, gt, pred),
            ("pre", "post", "ground truth", "prediction")):
        ax.imshow(img, cmap="gray", interpolation="nearest")
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(d / f"case_{case}_panel.png", dpi=110)
    plt.close(fig)


# -- comparison table ---------------------------------------------------------

def format_compare_table(results: dict) -> str:
    """Aligned text table; rows in fixed variant order, one line per seed
    plus the median."""
    lines = [f"{'variant':<10} {'seed':>6} {'val_dsc':>9} {'recall':>9} {'gland_fp':>9}"]
    for variant in VARIANT_ORDER:
        if variant not in results:
            continue
        cells = results[variant]
        for cell in cells:
            gfp = cell.get("gland_fp")
            lines.append(f"{variant:<10} {cell['seed']:>6} {cell['dsc']:>9.4f} "
                         f"{cell['recall']:>9.4f} "
                         f"{(f'{gfp:9.4f}' if gfp is not None else '      n/a')}")
        med = float(np.median([c["dsc"] for c in cells]))
        lines.append(f"{variant:<10} {'median':>6} {med:>9.4f}")
    return "\n".join(lines) + "\n"


def render_compare_figure(results: dict, path):
    """Bar chart of median val DSC per variant, with per-seed points."""
    variants = [v for v in VARIANT_ORDER if v in results]
    medians = [float(np.median([c["dsc"] for c in results[v]])) for v in variants]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(variants, medians, color=["#888888", "#6699cc", "#cc6655"][:len(variants)])
    for i, v in enumerate(variants):
        pts = [c["dsc"] for c in results[v]]
        ax.plot([i] * len(pts), pts, "k.", ms=6)
    ax.set_ylabel("validation DSC")
    ax.set_ylim(0, 1)
    ax.set_title("phantom segmentation by fusion variant (median over seeds)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_compare_report(results: dict, out_dir) -> dict:
    """Write results.json, results.txt and results.png; returns summary."""
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    summary = {
        variant: {
            "median_dsc": float(np.median([c["dsc"] for c in cells])),
            "cells": cells,
        }
        for variant, cells in results.items()
    }
    with open(d / "results.json", "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
    with open(d / "results.txt", "w") as fh:
        fh.write(format_compare_table(results))
    render_compare_figure(results, d / "results.png")
    return summary


def render_training_curves(log_records: list, path):
    """Validation DSC and train loss over epochs."""
    epochs = [r["epoch"] for r in log_records]
    fig, ax1 = plt.subplots(figsize=(5, 3.2))
    ax1.plot(epochs, [r["dsc"] for r in log_records], "o-", color="#cc6655",
             label="val DSC")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("val DSC")
    ax1.set_ylim(0, 1)
    ax2 = ax1.twinx()
    ax2.plot(epochs, [r["loss"] for r in log_records], "s--", color="#6699cc",
             label="train loss")
    ax2.set_ylabel("train loss")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
