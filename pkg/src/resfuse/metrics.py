"""Overlap metrics and BraTS-style region composition."""

from __future__ import annotations

import numpy as np

# labels for compose_regions
REGION_BACKGROUND = 0
REGION_ENHANCING = 1
REGION_NECROTIC = 2
REGION_EDEMA = 3


def _as_bool(mask, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    return arr.astype(bool)


def dice_coefficient(pred_mask, gt_mask) -> float:
    """2|P∩G| / (|P|+|G|); 1.0 when both masks are empty."""
    p = _as_bool(pred_mask, "pred")
    g = _as_bool(gt_mask, "gt")
    if p.shape != g.shape:
        raise ValueError(f"dice_coefficient: shape mismatch {p.shape} vs {g.shape}")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def pixel_recall(pred_mask, gt_mask) -> float:
    """|P∩G| / |G|; 1.0 when G is empty."""
    p = _as_bool(pred_mask, "pred")
    g = _as_bool(gt_mask, "gt")
    if p.shape != g.shape:
        raise ValueError(f"pixel_recall: shape mismatch {p.shape} vs {g.shape}")
    total = int(g.sum())
    if total == 0:
        return 1.0
    return int((p & g).sum()) / total


def compose_regions(labelmap) -> dict:
    """Nested evaluation masks from a 4-class labelmap.

    EN = enhancing; TC = enhancing ∪ necrotic; WT = TC ∪ edema.
    """
    lab = np.asarray(labelmap)
    known = {REGION_BACKGROUND, REGION_ENHANCING, REGION_NECROTIC, REGION_EDEMA}
    present = set(np.unique(lab).tolist())
    unknown = present - known
    if unknown:
        raise ValueError(f"compose_regions: unknown labels {sorted(unknown)}")
    en = lab == REGION_ENHANCING
    tc = en | (lab == REGION_NECROTIC)
    wt = tc | (lab == REGION_EDEMA)
    return {"EN": en, "TC": tc, "WT": wt}
