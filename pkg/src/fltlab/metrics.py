"""Scalar evaluation: MSE, SSIM, per-class F1, victim/rest splits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .numcore import FlatVector, ModelSpec, forward_batch


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"mse: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def ssim(a, b, window: int = 8, dynamic_range: float = 1.0) -> float:
    """Mean structural similarity over uniform sliding windows, stride 1.

    Window statistics use population variance.  C1 = (0.01 L)^2 and
    C2 = (0.03 L)^2 with L the dynamic range.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ShapeError("ssim expects 2-D images")
    if window > min(a.shape):
        raise ShapeError(f"window {window} larger than image {a.shape}")
    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2
    wa = sliding_window_view(a, (window, window)).reshape(-1, window * window)
    wb = sliding_window_view(b, (window, window)).reshape(-1, window * window)
    mu_a = wa.mean(axis=1)
    mu_b = wb.mean(axis=1)
    var_a = wa.var(axis=1)
    var_b = wb.var(axis=1)
    cov = (wa * wb).mean(axis=1) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def confusion_matrix(true_labels, pred_labels, classes: int) -> np.ndarray:
    """rows = true class, columns = predicted class."""
    conf = np.zeros((classes, classes), dtype=np.int64)
    for t, p in zip(true_labels, pred_labels):
        conf[int(t), int(p)] += 1
    return conf


def micro_f1(conf: np.ndarray, c: int) -> float:
    """One-vs-rest F1 for class c from a confusion matrix."""
    tp = conf[c, c]
    fp = conf[:, c].sum() - tp
    fn = conf[c, :].sum() - tp
    denom = 2 * tp + fp + fn
    if denom == 0:
        return 0.0
    return float(2 * tp / denom)


@dataclass
class EvalReport:
    accuracy: float
    per_class_f1: list[float]
    victim_f1: float
    rest_f1: float
    confusion: np.ndarray


def eval_model(
    spec: ModelSpec,
    params: FlatVector,
    test_images,
    test_labels,
    victim_class: int = 0,
) -> EvalReport:
    probs = forward_batch(spec, params, test_images)
    preds = probs.argmax(axis=1)
    labels = np.asarray(test_labels, dtype=np.int64)
    conf = confusion_matrix(labels, preds, spec.classes)
    acc = float(np.mean(preds == labels))
    f1s = [micro_f1(conf, c) for c in range(spec.classes)]
    rest = [f for c, f in enumerate(f1s) if c != victim_class]
    return EvalReport(
        accuracy=acc,
        per_class_f1=f1s,
        victim_f1=f1s[victim_class],
        rest_f1=float(np.mean(rest)) if rest else 0.0,
        confusion=conf,
    )
