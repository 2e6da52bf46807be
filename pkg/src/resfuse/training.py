"""Soft-Dice loss, the training loop, and the evaluation protocol.

Training is deterministic given the config seed: weight init, epoch
shuffles and crop positions are all derived from (seed, epoch), never
from global RNG state, so a run resumed from a checkpoint is bit-equal
to an uninterrupted one.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from . import phantom
from .network import (DualBranchSegNet, ModelConfig, build,
                      checkpoint_load, checkpoint_save)
from .optim import AdamState, adam_step
from .tensor import Tensor, no_grad, softmax_channels, tsum, mul, scale, add

DICE_SMOOTH = 1e-5


class TrainingDivergedError(RuntimeError):
    """Loss went NaN/Inf; aborted rather than silently clipped."""


def dice_loss(logits: Tensor, target_labels: np.ndarray) -> Tensor:
    """1 − mean soft Dice over foreground classes, via channel softmax."""
    k = logits.shape[1]
    if k < 2:
        raise ValueError(f"dice_loss: need >= 2 classes, got {k}")
    labels = np.asarray(target_labels)
    if labels.shape != (logits.shape[0],) + tuple(logits.shape[2:]):
        raise ValueError(f"dice_loss: labels shape {labels.shape} does not match "
                         f"logits {tuple(logits.shape)}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"dice_loss: labels outside [0, {k})")
    probs = softmax_channels(logits)
    dice_sum = None
    for c in range(1, k):
        tk = (labels == c).astype(logits.data.dtype)
        pk = probs[:, c]
        inter = tsum(mul(pk, Tensor(tk, dtype=logits.data.dtype)))
        psum = tsum(pk)
        dice_c = (scale(inter, 2.0) + DICE_SMOOTH) / (psum + float(tk.sum()) + DICE_SMOOTH)
        dice_sum = dice_c if dice_sum is None else add(dice_sum, dice_c)
    return 1.0 - scale(dice_sum, 1.0 / (k - 1))


@dataclass
class TrainConfig:
    data_dir: str = ""
    checkpoint_path: str = "model.ckpt"
    log_path: str | None = None
    epochs: int = 30
    batch_size: int = 2
    lr: float = 1e-3
    seed: int = 0
    variant: str = "weighted"
    post_only: bool = False
    crop_size: int | None = None
    levels: int = 3
    base_channels: int = 8
    num_classes: int = 2
    aux_descends_fused: bool = False
    fusion_zero_init: bool = False

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs/batch_size/lr must be positive")
        if self.post_only and self.variant != "plain":
            raise ValueError("post_only is the single-sequence baseline; it requires "
                             "variant='plain'")

    def model_config(self) -> ModelConfig:
        return ModelConfig(levels=self.levels, base_channels=self.base_channels,
                           variant=self.variant, num_classes=self.num_classes,
                           aux_descends_fused=self.aux_descends_fused,
                           fusion_zero_init=self.fusion_zero_init, seed=self.seed)


@dataclass
class MetricsRecord:
    case: int
    dsc: float
    recall: float
    gland_fp: float | None = None


@dataclass
class TrainResult:
    best_path: str
    last_path: str
    best_val_dsc: float
    records: list = field(default_factory=list)


def _to_batch(volumes: list[np.ndarray]) -> Tensor:
    return Tensor(np.stack(volumes)[:, None, :, :, :].astype(np.float32))


def _binary_target(labels: np.ndarray) -> np.ndarray:
    return (labels == phantom.LABEL_LESION).astype(np.int64)


def _crop(arrs, origin, size):
    d, h, w = origin
    return [a[d:d + size, h:h + size, w:w + size] for a in arrs]


def _predict_case(net: DualBranchSegNet, sample: phantom.Sample,
                  post_only: bool) -> np.ndarray:
    pre = sample.post if post_only else sample.pre
    with no_grad():
        logits = net.forward(_to_batch([pre]), _to_batch([sample.post]))
    return logits.data[0].argmax(axis=0)


def case_metrics(net: DualBranchSegNet, sample: phantom.Sample, case: int,
                 post_only: bool = False) -> MetricsRecord:
    from .metrics import dice_coefficient, pixel_recall

    pred = _predict_case(net, sample, post_only)
    pred_mask = pred == 1
    gt = sample.lesion_mask
    gland = sample.labels == phantom.LABEL_GLAND
    gland_fp = float((pred_mask & gland).sum() / gland.sum()) if gland.any() else None
    return MetricsRecord(case=case, dsc=dice_coefficient(pred_mask, gt),
                         recall=pixel_recall(pred_mask, gt), gland_fp=gland_fp)


def evaluate(net: DualBranchSegNet, data_dir, split: str = "val",
             post_only: bool = False, export_dir=None, batch_size: int = 4,
             cases: dict | None = None) -> tuple[list[MetricsRecord], dict]:
    """Per-case and mean DSC/recall over one manifest split.

    Cases are batched through the forward pass; ``cases`` may hold
    preloaded samples to skip re-reading volumes from disk.
    """
    from .metrics import dice_coefficient, pixel_recall

    manifest = phantom.read_manifest(data_dir)
    if split not in ("train", "val"):
        raise ValueError(f"split must be train or val, got {split!r}")
    ids = manifest[split]
    records = []
    for lo in range(0, len(ids), batch_size):
        chunk = ids[lo:lo + batch_size]
        samples = [cases[i] if cases is not None else phantom.load_case(data_dir, i)
                   for i in chunk]
        pres = [s.post if post_only else s.pre for s in samples]
        posts = [s.post for s in samples]
        with no_grad():
            logits = net.forward(_to_batch(pres), _to_batch(posts))
        preds = logits.data.argmax(axis=1)
        for case, sample, pred in zip(chunk, samples, preds):
            pred_mask = pred == 1
            gt = sample.lesion_mask
            gland = sample.labels == phantom.LABEL_GLAND
            gland_fp = (float((pred_mask & gland).sum() / gland.sum())
                        if gland.any() else None)
            records.append(MetricsRecord(
                case=case, dsc=dice_coefficient(pred_mask, gt),
                recall=pixel_recall(pred_mask, gt), gland_fp=gland_fp))
            if export_dir is not None:
                from .report import export_case_slices

                export_case_slices(export_dir, case, sample, pred_mask)
    gland_vals = [r.gland_fp for r in records if r.gland_fp is not None]
    aggregate = {
        "dsc": float(np.mean([r.dsc for r in records])) if records else 0.0,
        "recall": float(np.mean([r.recall for r in records])) if records else 0.0,
        "gland_fp": float(np.mean(gland_vals)) if gland_vals else None,
        "cases": len(records),
    }
    return records, aggregate


def evaluate_checkpoint(ckpt_path, data_dir, split: str = "val",
                        post_only: bool = False, export_dir=None):
    net, _, _ = checkpoint_load(ckpt_path)
    return evaluate(net, data_dir, split, post_only=post_only, export_dir=export_dir)


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def train(config: TrainConfig, resume_path=None) -> TrainResult:
    """Run the training loop; saves best-by-val-DSC and last checkpoints.

    ``<checkpoint_path>`` holds the last state, ``<checkpoint_path>.best``
    the best one. With ``resume_path`` training continues from the stored
    epoch and is bit-identical to an uninterrupted run of the same config.
    """
    config.validate()
    manifest = phantom.read_manifest(config.data_dir)
    train_ids = manifest["train"]
    cases = {i: phantom.load_case(config.data_dir, i)
             for i in set(manifest["train"]) | set(manifest["val"])}

    if resume_path is not None:
        net, opt, start_epoch = checkpoint_load(resume_path, config.model_config())
    else:
        net, opt, start_epoch = build(config.model_config()), AdamState(), 0

    best_path = str(config.checkpoint_path) + ".best"
    last_path = str(config.checkpoint_path)
    log_fh = open(config.log_path, "a") if config.log_path else None
    best_dsc = -1.0
    records = []
    try:
        if config.epochs == 0 and resume_path is None:
            checkpoint_save(net, last_path, opt, epoch=0)
            checkpoint_save(net, best_path, opt, epoch=0)
            return TrainResult(best_path, last_path, 0.0, [])

        for epoch in range(start_epoch, config.epochs):
            t0 = time.monotonic()
            rng = _epoch_rng(config.seed, epoch)
            order = [train_ids[i] for i in rng.permutation(len(train_ids))]
            losses = []
            for lo in range(0, len(order) - len(order) % config.batch_size,
                            config.batch_size):
                batch = order[lo:lo + config.batch_size]
                pres, posts, labs = [], [], []
                for case in batch:
                    s = cases[case]
                    pre, post, lab = s.pre, s.post, s.labels
                    if config.crop_size:
                        c = config.crop_size
                        origin = [int(rng.integers(0, dim - c + 1)) if dim > c else 0
                                  for dim in lab.shape]
                        pre, post, lab = _crop((pre, post, lab), origin, c)
                    pres.append(post if config.post_only else pre)
                    posts.append(post)
                    labs.append(lab)
                net.zero_grad()
                logits = net.forward(_to_batch(pres), _to_batch(posts))
                loss = dice_loss(logits, _binary_target(np.stack(labs)))
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingDivergedError(f"loss became {value} at epoch {epoch}")
                loss.backward()
                adam_step(net.params, opt, lr=config.lr)
                losses.append(value)

            val_records, agg = evaluate(net, config.data_dir, "val",
                                        post_only=config.post_only, cases=cases)
            wall_ms = int((time.monotonic() - t0) * 1e3)
            record = {"epoch": epoch, "split": "val", "dsc": agg["dsc"],
                      "recall": agg["recall"], "gland_fp": agg["gland_fp"],
                      "loss": float(np.mean(losses)) if losses else None,
                      "wall_ms": wall_ms}
            records.append(record)
            if log_fh:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                log_fh.flush()
            checkpoint_save(net, last_path, opt, epoch=epoch + 1)
            if agg["dsc"] > best_dsc:
                best_dsc = agg["dsc"]
                checkpoint_save(net, best_path, opt, epoch=epoch + 1)
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(best_path, last_path, best_dsc, records)
