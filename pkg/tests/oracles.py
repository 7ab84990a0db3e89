"""Independent reference implementations used as test oracles.

These stay deliberately naive (O(n^2) transforms, per-element loops) and
share no code with the library paths they check.
"""

import numpy as np


def naive_dft(x: np.ndarray) -> np.ndarray:
    """Direct O(n^2) discrete Fourier transform."""
    x = np.asarray(x, dtype=np.complex128)
    n = len(x)
    k = np.arange(n)
    basis = np.exp(-2j * np.pi * np.outer(k, k) / n)
    return basis @ x


def naive_windowed_frames(x: np.ndarray, window: np.ndarray, hop: int) -> np.ndarray:
    """Centered framing + window + naive DFT, keeping the first n//2+1 bins."""
    x = np.asarray(x, dtype=np.float64)
    n = len(window)
    padded = np.pad(x, n // 2, mode="reflect")
    count = len(x) // hop
    bins = n // 2 + 1
    out = np.empty((count, bins), dtype=np.complex128)
    for t in range(count):
        frame = padded[t * hop : t * hop + n] * window
        out[t] = naive_dft(frame)[:bins]
    return out


def numeric_gradient(f, array: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central finite differences of a scalar function, element by element."""
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f()
        flat[i] = orig - h
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(1, |n|): relative error with an absolute floor."""
    diff = np.abs(np.asarray(analytic, dtype=np.float64) - numeric)
    scale = np.maximum(1.0, np.abs(numeric))
    return float((diff / scale).max()) if diff.size else 0.0


def brute_force_metrics(y_true, y_pred, num_classes: int) -> dict:
    """Per-class precision/recall/F1 and accuracy via explicit counting."""
    y_true, y_pred = list(y_true), list(y_pred)
    confusion = [[0] * num_classes for _ in range(num_classes)]
    for t, p in zip(y_true, y_pred):
        confusion[t][p] += 1
    precision, recall, f1 = [], [], []
    for k in range(num_classes):
        tp = confusion[k][k]
        fp = sum(confusion[i][k] for i in range(num_classes)) - tp
        fn = sum(confusion[k]) - tp
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        precision.append(p)
        recall.append(r)
        f1.append(2 * p * r / (p + r) if p + r else 0.0)
    correct = sum(confusion[k][k] for k in range(num_classes))
    return {
        "confusion": confusion,
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "accuracy": correct / len(y_true),
        "macro_f1": sum(f1) / num_classes,
    }
