"""Confusion matrices, OA / AA / kappa, and PPM classification maps."""
from __future__ import annotations

import csv
import json
import warnings
from pathlib import Path

import numpy as np


class MetricsError(ValueError):
    pass


class ConfusionMatrix:
    """C x C counts; rows are true classes, columns predictions. Labels are 1-based."""

    def __init__(self, n_classes: int, counts: np.ndarray | None = None):
        self.n_classes = n_classes
        self.counts = np.zeros((n_classes, n_classes), dtype=np.int64) if counts is None \
            else np.asarray(counts, dtype=np.int64).copy()
        if self.counts.shape != (n_classes, n_classes):
            raise MetricsError(f"counts shape {self.counts.shape} != ({n_classes}, {n_classes})")
        if (self.counts < 0).any():
            raise MetricsError("negative counts")

    def accumulate(self, true_label: int, pred_label: int) -> "ConfusionMatrix":
        if true_label == 0 or pred_label == 0:
            raise MetricsError("label 0 marks unlabeled pixels and cannot be counted")
        if not (1 <= true_label <= self.n_classes and 1 <= pred_label <= self.n_classes):
            raise MetricsError(f"labels ({true_label}, {pred_label}) outside 1..{self.n_classes}")
        self.counts[true_label - 1, pred_label - 1] += 1
        return self

    def update(self, true_labels, pred_labels) -> "ConfusionMatrix":
        t = np.asarray(true_labels, dtype=np.int64).ravel()
        p = np.asarray(pred_labels, dtype=np.int64).ravel()
        if t.shape != p.shape:
            raise MetricsError("truth and prediction lengths differ")
        if t.size and (t.min() < 1 or p.min() < 1 or t.max() > self.n_classes or p.max() > self.n_classes):
            raise MetricsError(f"labels must lie in 1..{self.n_classes}")
        np.add.at(self.counts, (t - 1, p - 1), 1)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.n_classes != self.n_classes:
            raise MetricsError("cannot merge matrices of different class counts")
        return ConfusionMatrix(self.n_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def _check(cm: ConfusionMatrix) -> np.ndarray:
    if cm.total == 0:
        raise MetricsError("empty confusion matrix")
    return cm.counts.astype(np.float64)


def oa(cm: ConfusionMatrix) -> float:
    c = _check(cm)
    return float(np.trace(c) / c.sum())


def per_class_accuracy(cm: ConfusionMatrix) -> np.ndarray:
    """Recall per class; NaN where the class has no test pixels."""
    c = _check(cm)
    rows = c.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(rows > 0, np.diag(c) / rows, np.nan)


def aa(cm: ConfusionMatrix) -> float:
    acc = per_class_accuracy(cm)
    return float(np.nanmean(acc))


def absent_classes(cm: ConfusionMatrix) -> list[int]:
    return [i + 1 for i, n in enumerate(cm.counts.sum(axis=1)) if n == 0]


def kappa(cm: ConfusionMatrix) -> float:
    c = _check(cm)
    total = c.sum()
    p_o = np.trace(c) / total
    p_e = float((c.sum(axis=1) * c.sum(axis=0)).sum() / total ** 2)
    if np.isclose(p_e, 1.0, rtol=0.0, atol=1e-15):
        warnings.warn("degenerate label distribution (p_e == 1); kappa set to 0", RuntimeWarning)
        return 0.0
    return float((p_o - p_e) / (1.0 - p_e))


def summary(cm: ConfusionMatrix) -> dict:
    acc = per_class_accuracy(cm)
    return {
        "oa": oa(cm),
        "aa": aa(cm),
        "kappa": kappa(cm),
        "per_class": [None if np.isnan(a) else float(a) for a in acc],
        "absent_classes": absent_classes(cm),
        "n": cm.total,
    }


def write_json(metrics: dict, path) -> None:
    Path(path).write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")


def write_csv(metrics: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for key in ("oa", "aa", "kappa"):
            w.writerow([key, repr(metrics[key])])
        for i, a in enumerate(metrics["per_class"], start=1):
            w.writerow([f"class_{i}", "" if a is None else repr(a)])


# ---------------------------------------------------------------- maps

def palette(n_classes: int) -> np.ndarray:
    """Fixed, well-separated RGB colours for classes 1..n (row 0 is black for unlabeled)."""
    hues = (np.arange(n_classes) * 0.618033988749895) % 1.0
    sat = np.where(np.arange(n_classes) % 2 == 0, 0.85, 0.6)
    val = np.where(np.arange(n_classes) % 3 == 2, 0.75, 0.95)
    i = np.floor(hues * 6).astype(int)
    f = hues * 6 - i
    p, q, t = val * (1 - sat), val * (1 - f * sat), val * (1 - (1 - f) * sat)
    table = [(val, t, p), (q, val, p), (p, val, t), (p, q, val), (t, p, val), (val, p, q)]
    rgb = np.zeros((n_classes, 3))
    for k in range(6):
        sel = (i % 6) == k
        for ch in range(3):
            rgb[sel, ch] = table[k][ch][sel]
    out = np.zeros((n_classes + 1, 3), dtype=np.uint8)
    out[1:] = np.round(rgb * 255).astype(np.uint8)
    return out


def render_map(predictions: np.ndarray, n_classes: int, mask: np.ndarray | None = None,
               mode: str = "full") -> np.ndarray:
    """H x W x 3 uint8 image. ``labeled`` mode paints pixels where ``mask`` is 0 black."""
    pred = np.asarray(predictions, dtype=np.int64)
    if pred.ndim != 2:
        raise MetricsError("predictions must be H x W")
    if pred.min() < 0 or pred.max() > n_classes:
        raise MetricsError(f"prediction ids must lie in 0..{n_classes}")
    img = palette(n_classes)[pred]
    if mode == "labeled":
        if mask is None:
            raise MetricsError("labeled mode needs the ground-truth mask")
        img[np.asarray(mask) == 0] = 0
    elif mode != "full":
        raise MetricsError(f"unknown map mode {mode!r}")
    return img


def write_ppm(img: np.ndarray, path) -> None:
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P6"):
        raise MetricsError("not a binary PPM")
    pos, fields = 2, []
    while len(fields) < 3:
        while raw[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(int(raw[pos:end]))
        pos = end
    w, h, maxval = fields
    if maxval != 255:
        raise MetricsError("only 8-bit PPM supported")
    start = pos + 1
    return np.frombuffer(raw[start:start + w * h * 3], dtype=np.uint8).reshape(h, w, 3)
