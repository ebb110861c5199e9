"""Binarization, confusion counts, DICE and evaluation reports."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .dataset import Manifest, batch_iter
from .errors import DataIOError, ShapeError, UsageError
from .unet import ParamStore, UNetConfig, predict

# (method, DICE %) as published; shown for context only, never recomputed here.
REFERENCE_ROWS = (
    ("Candemir et al.", 94.1),
    ("ED-CNN", 97.4),
    ("FCN", 97.7),
    ("Proposed model", 98.6),
)
REFERENCE_LABEL = "paper-reported, not locally reproduced"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def binarize(pred, threshold: float = 0.5) -> np.ndarray:
    """1 where pred >= threshold (ties go to foreground), else 0."""
    return (np.asarray(pred) >= threshold).astype(np.uint8)


def _check_pair(s, gt) -> tuple[np.ndarray, np.ndarray]:
    s, gt = np.asarray(s) != 0, np.asarray(gt) != 0
    if s.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {s.shape} vs {gt.shape}")
    return s, gt


def confusion(s, gt) -> ConfusionCounts:
    s, gt = _check_pair(s, gt)
    tp = int(np.count_nonzero(s & gt))
    fp = int(np.count_nonzero(s & ~gt))
    fn = int(np.count_nonzero(~s & gt))
    return ConfusionCounts(tp, fp, fn, s.size - tp - fp - fn)


def dice_from_counts(c: ConfusionCounts) -> float:
    denom = 2 * c.tp + c.fn + c.fp
    if denom == 0:
        return 1.0  # both masks empty: agreement on absence
    return 2 * c.tp / denom


def dice(s, gt) -> float:
    return dice_from_counts(confusion(s, gt))


@dataclass
class EvalReport:
    split: str
    threshold: float
    per_sample: list[tuple[str, float]] = field(default_factory=list)
    pooled_dice: float = float("nan")

    @property
    def values(self) -> np.ndarray:
        return np.array([d for _, d in self.per_sample], dtype=np.float64)

    @property
    def mean(self) -> float:
        return float(self.values.mean())

    @property
    def std(self) -> float:
        # population std over images
        return float(self.values.std())

    def summary(self) -> str:
        lines = [
            f"split: {self.split} ({len(self.per_sample)} samples, threshold {self.threshold:g})",
            f"mean DICE: {self.mean:.4f}  std: {self.std:.4f}  (mean over images)",
            f"pooled-pixel DICE: {self.pooled_dice:.4f}",
            f"reference DICE % ({REFERENCE_LABEL}):",
        ]
        width = max(len(name) for name, _ in REFERENCE_ROWS)
        lines += [f"  {name:<{width}}  {value:.1f}" for name, value in REFERENCE_ROWS]
        return "\n".join(lines)

    def write_tsv(self, path) -> None:
        try:
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, delimiter="\t", lineterminator="\n")
                w.writerow(("sample_id", "dice"))
                for sid, d in self.per_sample:
                    w.writerow((sid, repr(d)))
        except OSError as exc:
            raise DataIOError(f"cannot write report {path}: {exc}") from exc


def evaluate(params: ParamStore, cfg: UNetConfig, manifest: Manifest, split: str = "test",
             threshold: float = 0.5, batch_size: int = 4, dilate_iterations: int = 1) -> EvalReport:
    """Per-image DICE of thresholded predictions on one split (no augmentation).

    Samples are processed in manifest order so the report is deterministic.
    """
    members = manifest.subset(split)
    if not members:
        raise UsageError(f"split {split!r} is empty; nothing to evaluate")
    report = EvalReport(split, threshold)
    ids = [r.id for r in members]
    num = den = 0
    batches = batch_iter(manifest, split, batch_size, 0, augment=False, size=cfg.input_size,
                         dilate_iterations=dilate_iterations, shuffle=False)
    k = 0
    for x, y in batches:
        preds = predict(params, x.data)
        for pred, gt in zip(preds[:, 0], y.data[:, 0]):
            c = confusion(binarize(pred, threshold), gt)
            num += 2 * c.tp
            den += 2 * c.tp + c.fp + c.fn
            report.per_sample.append((ids[k], dice_from_counts(c)))
            k += 1
    report.pooled_dice = num / den if den else 1.0
    return report
