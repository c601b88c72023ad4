"""Confidence-filtered pseudo-labels and class-wise thresholds."""
from __future__ import annotations

from typing import Iterable

import numpy as np

from .errors import ShapeError
from .tensorcore import NO_LABEL

THRESHOLD_CAP = 0.9


def pseudo_label(prob: np.ndarray, thresholds) -> np.ndarray:
    """Argmax label where its probability exceeds that class's threshold, else NO_LABEL.

    ``prob`` is (C, H, W) or (1, C, H, W). Ties resolve to the lowest index.
    """
    prob = np.asarray(prob)
    if prob.ndim == 4:
        if prob.shape[0] != 1:
            raise ShapeError("pseudo_label handles one image at a time")
        prob = prob[0]
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if thresholds.shape != (prob.shape[0],):
        raise ShapeError(f"threshold vector length {thresholds.shape} does not match {prob.shape[0]} classes")
    best = prob.argmax(axis=0)
    conf = np.take_along_axis(prob, best[None], axis=0)[0]
    return np.where(conf > thresholds[best], best, NO_LABEL).astype(np.uint8)


def lower_median(values: np.ndarray) -> float:
    """Median of a non-empty multiset; for an even count the lower middle element."""
    v = np.sort(np.asarray(values).ravel())
    return float(v[(v.size - 1) // 2])


def _class_confidences(prob: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    best = prob.argmax(axis=0).ravel()
    conf = prob.max(axis=0).ravel()
    return best, conf


def thresholds_from_probs(probs: Iterable[np.ndarray], n_classes: int, cap: float = THRESHOLD_CAP) -> np.ndarray:
    """min(cap, median confidence of pixels predicted as j), pooled over all maps.

    Classes never predicted fall back to ``cap``.
    """
    per_class: list[list[np.ndarray]] = [[] for _ in range(n_classes)]
    for prob in probs:
        prob = np.asarray(prob)
        if prob.ndim == 4:
            prob = prob[0]
        if prob.shape[0] != n_classes:
            raise ShapeError(f"probability map has {prob.shape[0]} classes, expected {n_classes}")
        best, conf = _class_confidences(prob)
        order = np.argsort(best, kind="stable")
        splits = np.searchsorted(best[order], np.arange(n_classes + 1))
        for j in range(n_classes):
            chunk = conf[order[splits[j]:splits[j + 1]]]
            if chunk.size:
                per_class[j].append(chunk)
    out = np.full(n_classes, cap, dtype=np.float64)
    for j, chunks in enumerate(per_class):
        if chunks:
            out[j] = min(cap, lower_median(np.concatenate(chunks)))
    return out


def dataset_thresholds(model, dataset, cap: float = THRESHOLD_CAP) -> np.ndarray:
    """Class-wise thresholds from ``model``'s predictions over a whole dataset."""
    from .segmodel import predict_proba

    return thresholds_from_probs((predict_proba(model, x) for x in dataset), model.n_classes, cap)


def image_thresholds(prob: np.ndarray, current=None, cap: float = THRESHOLD_CAP) -> tuple[np.ndarray, np.ndarray]:
    """Per-image thresholds plus a mask of classes that occur in this image.

    Absent classes carry ``current[j]`` (or ``cap`` without a current vector)
    and are marked invalid so an EMA step leaves them alone.
    """
    prob = np.asarray(prob)
    if prob.ndim == 4:
        prob = prob[0]
    C = prob.shape[0]
    best, conf = _class_confidences(prob)
    valid = np.zeros(C, dtype=bool)
    out = np.full(C, cap, dtype=np.float64) if current is None else np.array(current, dtype=np.float64)
    for j in range(C):
        sel = conf[best == j]
        if sel.size:
            valid[j] = True
            out[j] = min(cap, lower_median(sel))
    return out, valid


def ema_update(p, p_k, mask=None, lam: float = 0.99) -> np.ndarray:
    """p <- lam * p + (1 - lam) * p_k on valid classes."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"EMA factor must lie in [0, 1], got {lam}")
    p = np.asarray(p, dtype=np.float64)
    p_k = np.asarray(p_k, dtype=np.float64)
    new = lam * p + (1.0 - lam) * p_k
    if mask is None:
        return new
    return np.where(np.asarray(mask, dtype=bool), new, p)
