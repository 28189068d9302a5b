"""Task metrics: classification accuracy and SSIM for reconstructions."""

from __future__ import annotations

import numpy as np

from .errors import DomainError, ShapeError
from .tensor import Tensor


def accuracy(predictions, truth) -> float:
    """Fraction of matching labels."""
    predictions = list(predictions)
    truth = list(truth)
    if len(predictions) != len(truth):
        raise DomainError(f"length mismatch: {len(predictions)} vs {len(truth)}")
    if not predictions:
        raise DomainError("empty label lists")
    hits = sum(1 for p, t in zip(predictions, truth) if p == t)
    return hits / len(predictions)


def ssim(a: np.ndarray, b: np.ndarray, window: int = 8,
         k1: float = 0.01, k2: float = 0.03, dynamic_range: float = 1.0) -> float:
    """Structural similarity of two images in [0, dynamic_range].

    Uniform sliding window (shrunk to the image when smaller), channel
    results averaged. Accepts [h, w] or [c, h, w] arrays.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        return float(np.mean([ssim(a[c], b[c], window, k1, k2, dynamic_range)
                              for c in range(a.shape[0])]))
    if a.ndim != 2:
        raise ShapeError(f"ssim expects 2-d or 3-d images, got shape {a.shape}")

    h, w = a.shape
    win = min(window, h, w)
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2

    wa = np.lib.stride_tricks.sliding_window_view(a, (win, win))
    wb = np.lib.stride_tricks.sliding_window_view(b, (win, win))
    mu_a = wa.mean(axis=(2, 3))
    mu_b = wb.mean(axis=(2, 3))
    var_a = (wa ** 2).mean(axis=(2, 3)) - mu_a ** 2
    var_b = (wb ** 2).mean(axis=(2, 3)) - mu_b ** 2
    cov = (wa * wb).mean(axis=(2, 3)) - mu_a * mu_b

    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def mean_ssim(model_a, model_b, dataset, dynamic_range: float = 1.0,
              window: int = 8) -> float:
    """Mean per-image SSIM between two models' outputs on a dataset.

    Outputs are clamped to [0, dynamic_range] and viewed in the dataset's
    sample shape (reconstruction models may emit flattened images).
    """
    image_shape = dataset.sample_shape
    values = []
    for batch in dataset.batches:
        out_a = np.clip(model_a.forward(batch).data, 0.0, dynamic_range)
        out_b = np.clip(model_b.forward(batch).data, 0.0, dynamic_range)
        if out_a.shape != out_b.shape:
            raise ShapeError(f"model outputs differ: {out_a.shape} vs {out_b.shape}")
        n = out_a.shape[0]
        try:
            out_a = out_a.reshape((n,) + image_shape)
            out_b = out_b.reshape((n,) + image_shape)
        except ValueError:
            raise ShapeError(f"output size {out_a.shape} does not view as "
                             f"images of shape {image_shape}") from None
        for i in range(n):
            values.append(ssim(out_a[i], out_b[i], window=window,
                               dynamic_range=dynamic_range))
    if not values:
        raise DomainError("mean_ssim: empty dataset")
    return float(np.mean(values))


def classification_accuracy(model, dataset) -> float:
    """Accuracy of argmax predictions over a labeled dataset."""
    if dataset.labels is None:
        raise DomainError("dataset has no labels")
    preds, truth = [], []
    for batch, labels in zip(dataset.batches, dataset.labels):
        logits = model.forward(batch).data
        preds.extend(int(i) for i in np.argmax(logits, axis=1))
        truth.extend(int(l) for l in labels)
    return accuracy(preds, truth)


def predict_labels(model, batch: Tensor) -> np.ndarray:
    return np.argmax(model.forward(batch).data, axis=1)
