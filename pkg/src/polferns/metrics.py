"""Segmentation metrics, posterior entropy and calibration."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError


def confusion(pred, ref, num_classes: int) -> np.ndarray:
    """Confusion counts, rows = reference class, columns = predicted class.

    Pixels unlabelled in the reference (0) are skipped, as are pixels the
    prediction left unlabelled.
    """
    pred = np.asarray(pred)
    ref = np.asarray(ref)
    if pred.shape != ref.shape:
        raise DomainError(f"prediction {pred.shape} and reference {ref.shape} differ in size")
    keep = (ref > 0) & (pred > 0)
    r = ref[keep].astype(np.int64) - 1
    p = pred[keep].astype(np.int64) - 1
    if r.size and max(r.max(), p.max()) >= num_classes:
        raise DomainError("label exceeds class count")
    cm = np.bincount(r * num_classes + p, minlength=num_classes ** 2)
    return cm.reshape(num_classes, num_classes)


@dataclass(frozen=True)
class MetricsReport:
    oa: float
    aa: float
    kappa: float
    f1_macro: float
    miou: float
    per_class_accuracy: np.ndarray
    per_class_iou: np.ndarray
    per_class_f1: np.ndarray

    def as_dict(self) -> dict[str, float]:
        d = {"oa": self.oa, "aa": self.aa, "kappa": self.kappa,
             "f1_macro": self.f1_macro, "miou": self.miou}
        for name, arr in (("accuracy", self.per_class_accuracy),
                          ("iou", self.per_class_iou), ("f1", self.per_class_f1)):
            for c, v in enumerate(arr, start=1):
                d[f"{name}_class{c}"] = float(v)
        return d


def metrics(cm) -> MetricsReport:
    """OA, AA, Cohen's kappa, macro F1 and mIoU from a confusion matrix.

    Classes without reference pixels get NaN per-class values and are left
    out of the class averages.
    """
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise DomainError("confusion matrix must be square")
    if total <= 0:
        raise DomainError("confusion matrix is empty")
    tp = np.diag(cm)
    ref_tot = cm.sum(axis=1)
    pred_tot = cm.sum(axis=0)
    present = ref_tot > 0
    fp = pred_tot - tp
    fn = ref_tot - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = np.where(present, tp / ref_tot, np.nan)
        iou = np.where(present, tp / (tp + fp + fn), np.nan)
        f1 = np.where(present, 2 * tp / (2 * tp + fp + fn), np.nan)
    oa = tp.sum() / total
    pe = float((ref_tot * pred_tot).sum() / total ** 2)
    kappa = (oa - pe) / (1 - pe) if pe < 1 else (1.0 if oa == 1 else 0.0)
    return MetricsReport(
        oa=float(oa), aa=float(acc[present].mean()), kappa=float(kappa),
        f1_macro=float(f1[present].mean()), miou=float(iou[present].mean()),
        per_class_accuracy=acc, per_class_iou=iou, per_class_f1=f1,
    )


def average_accuracy(pred, ref, num_classes: int) -> float:
    return metrics(confusion(pred, ref, num_classes)).aa


def posterior_entropy(dist, num_classes: int | None = None) -> np.ndarray | float:
    """Entropy in base L, so one-hot gives 0 and uniform gives 1.

    Works row-wise on ``(..., L)`` arrays; ``0 log 0`` counts as 0.
    """
    p = np.asarray(dist, dtype=np.float64)
    L = num_classes or p.shape[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    h = -terms.sum(axis=-1) / np.log(L)
    h = np.clip(h, 0.0, 1.0)
    return float(h) if np.ndim(h) == 0 else h


def entropy_histogram(posteriors, bins: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Normalized histogram of posterior entropies over ``[0, 1]``.

    ``posteriors`` is ``(n, L)`` or an ``(H, W, L)`` raster; all-zero rows
    (pixels never classified) are ignored. Returns ``(probabilities, edges)``.
    """
    if bins < 2:
        raise DomainError("need at least 2 bins")
    P = np.asarray(posteriors, dtype=np.float64)
    P = P.reshape(-1, P.shape[-1])
    P = P[P.sum(axis=1) > 0]
    h = posterior_entropy(P, P.shape[-1])
    counts, edges = np.histogram(np.atleast_1d(h), bins=bins, range=(0.0, 1.0))
    total = counts.sum()
    return (counts / total if total else counts.astype(float)), edges


@dataclass(frozen=True)
class CalibrationCurve:
    edges: np.ndarray
    confidence: np.ndarray  # mean max-posterior per bin (NaN when empty)
    accuracy: np.ndarray  # empirical accuracy per bin (NaN when empty)
    count: np.ndarray


def calibration_curve(posteriors, pred, ref, bins: int = 20) -> CalibrationCurve:
    """Bin labelled pixels by max posterior over ``[1/L, 1]``; accuracy per bin."""
    if bins < 2:
        raise DomainError("need at least 2 bins")
    P = np.asarray(posteriors, dtype=np.float64)
    L = P.shape[-1]
    P = P.reshape(-1, L)
    pred = np.asarray(pred).ravel()
    ref = np.asarray(ref).ravel()
    if not (len(P) == len(pred) == len(ref)):
        raise DomainError("posteriors, prediction and reference differ in size")
    keep = (ref > 0) & (pred > 0)
    conf = P[keep].max(axis=1)
    correct = (pred[keep] == ref[keep]).astype(float)
    edges = np.linspace(1.0 / L, 1.0, bins + 1)
    idx = np.clip(np.searchsorted(edges, conf, side="right") - 1, 0, bins - 1)
    count = np.bincount(idx, minlength=bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_conf = np.bincount(idx, weights=conf, minlength=bins) / count
        acc = np.bincount(idx, weights=correct, minlength=bins) / count
    return CalibrationCurve(edges, mean_conf, acc, count)


def format_report(report: MetricsReport, cm, class_names=None) -> str:
    """Plain-text metrics summary plus a row-normalized confusion table (%)."""
    cm = np.asarray(cm)
    L = cm.shape[0]
    names = list(class_names) if class_names else [f"class{c}" for c in range(1, L + 1)]
    lines = [
        f"OA = {100 * report.oa:.2f}  AA = {100 * report.aa:.2f}  "
        f"kappa = {100 * report.kappa:.2f}  F1 = {100 * report.f1_macro:.2f}  "
        f"mIoU = {100 * report.miou:.2f}",
        "",
    ]
    width = max(8, max(len(n) for n in names) + 1)
    lines.append(" " * width + "".join(f"{n:>{width}}" for n in names))
    rows = cm.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        pct = 100.0 * cm / rows
    for name, row in zip(names, pct):
        lines.append(f"{name:<{width}}" + "".join(f"{v:>{width}.1f}" for v in row))
    return "\n".join(lines) + "\n"
