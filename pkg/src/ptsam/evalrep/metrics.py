"""Dice score, confusion error maps and model evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..numcore import DimensionError, no_grad

TN, TP, FP, FN = 0, 1, 2, 3
# gray levels for error-map PGMs
ERROR_GRAY = {TN: 0, TP: 255, FP: 170, FN: 85}


def dice_score(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|P and G| / (|P| + |G|); two empty masks score 1.0."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"dice_score: {pred.shape} vs {gt.shape}")
    denom = int(pred.sum()) + int(gt.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(pred & gt)) / denom


def error_map(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-pixel confusion label (TN=0, TP=1, FP=2, FN=3)."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"error_map: {pred.shape} vs {gt.shape}")
    out = np.full(pred.shape, TN, dtype=np.uint8)
    out[pred & gt] = TP
    out[pred & ~gt] = FP
    out[~pred & gt] = FN
    return out


def confusion_counts(emap: np.ndarray) -> dict[str, int]:
    return {name: int(np.count_nonzero(emap == code)) for name, code in (("TN", TN), ("TP", TP), ("FP", FP), ("FN", FN))}


@dataclass
class DiceResult:
    per_image: list[float]
    ids: list[str]

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_image)) if self.per_image else float("nan")

    @property
    def std(self) -> float:
        return float(np.std(self.per_image)) if self.per_image else float("nan")


def predict_mask(model, image, threshold: float = 0.5) -> np.ndarray:
    """Binary mask from sigmoid(logits) > threshold."""
    from ..samarch import forward_segment

    with no_grad():
        logits = forward_segment(model, image).data
    # sigmoid(z) > t  <=>  z > logit(t)
    cut = np.log(threshold / (1.0 - threshold))
    return (logits > cut).astype(np.uint8)


def evaluate(model, samples: Sequence, threshold: float = 0.5) -> DiceResult:
    scores = [dice_score(predict_mask(model, s.image, threshold), s.mask) for s in samples]
    return DiceResult(scores, [s.id for s in samples])


def write_triptych(path: str | Path, image: np.ndarray, gt: np.ndarray, pred: np.ndarray) -> None:
    """Side-by-side PGM: input | ground truth | labelled prediction."""
    from ..datagen import image_to_u8, write_pgm

    emap = error_map(pred, gt)
    lab = np.zeros(emap.shape, dtype=np.uint8)
    for code, gray in ERROR_GRAY.items():
        lab[emap == code] = gray
    img = image_to_u8(np.asarray(image).reshape(gt.shape))
    sep = np.full((gt.shape[0], 2), 128, dtype=np.uint8)
    write_pgm(path, np.concatenate([img, sep, (np.asarray(gt) > 0).astype(np.uint8) * 255, sep, lab], axis=1))
