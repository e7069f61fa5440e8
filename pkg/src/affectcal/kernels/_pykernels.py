"""Pure numpy implementations of the hot kernels.

Each function performs its floating-point accumulations in the same order as
the compiled version in ``_ckernels.pyx`` so both backends give bit-identical
results.
"""

import numpy as np


def macro_from_counts(tp, fp, fn) -> tuple[np.ndarray, float]:
    """Per-class F1 = 2TP/(2TP+FP+FN) (0 on empty denominator) and their mean."""
    tp = np.asarray(tp, dtype=np.float64)
    denom = 2.0 * tp + np.asarray(fp, dtype=np.float64) + np.asarray(fn, dtype=np.float64)
    f1 = np.zeros_like(tp)
    nz = denom > 0
    f1[nz] = 2.0 * tp[nz] / denom[nz]
    total = 0.0
    for v in f1.tolist():
        total += v
    return f1, total / len(f1)


def confusion_matrix(pred, truth, num_classes: int) -> np.ndarray:
    """Rows are truth, columns are predictions."""
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    flat = np.bincount(truth * num_classes + pred, minlength=num_classes * num_classes)
    return flat.reshape(num_classes, num_classes)


def bias_sweep(logp, truth, bias, c: int, grid) -> np.ndarray:
    """Macro-F1 of ``argmax(logp + bias)`` with ``bias[c]`` replaced by each grid value."""
    logp = np.asarray(logp, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.int64)
    n, k = logp.shape
    adj = logp + np.asarray(bias, dtype=np.float64)
    others = adj.copy()
    others[:, c] = -np.inf
    best_other = np.argmax(others, axis=1)
    m_other = others[np.arange(n), best_other]
    col = logp[:, c]
    out = np.empty(len(grid), dtype=np.float64)
    for gi, g in enumerate(np.asarray(grid, dtype=np.float64).tolist()):
        s = col + g
        # Ties on the max go to the lowest class index.
        wins = (s > m_other) | ((s == m_other) & (c < best_other))
        pred = np.where(wins, c, best_other)
        cm = confusion_matrix(pred, truth, k)
        tp = np.diag(cm)
        _, out[gi] = macro_from_counts(tp, cm.sum(axis=0) - tp, cm.sum(axis=1) - tp)
    return out


def threshold_sweep(scores, truth, grid) -> np.ndarray:
    """Binary F1 of ``scores >= t`` for each threshold ``t`` in ``grid``."""
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.int64).astype(bool)
    out = np.empty(len(grid), dtype=np.float64)
    for gi, t in enumerate(np.asarray(grid, dtype=np.float64).tolist()):
        pos = scores >= t
        tp = np.count_nonzero(pos & truth)
        fp = np.count_nonzero(pos & ~truth)
        fn = np.count_nonzero(~pos & truth)
        denom = 2 * tp + fp + fn
        out[gi] = 2.0 * tp / denom if denom > 0 else 0.0
    return out


def window_mean(x, half: int) -> np.ndarray:
    """Centered moving average over rows ``t-half..t+half``, truncated at the ends."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if half <= 0 or n == 0:
        return x.copy()
    acc = np.zeros_like(x)
    cnt = np.zeros(n, dtype=np.float64)
    idx = np.arange(n)
    for o in range(-half, half + 1):
        src = idx + o
        ok = (src >= 0) & (src < n)
        acc[ok] += x[src[ok]]
        cnt[ok] += 1.0
    return acc / cnt[:, None]


def scatter_mean(index, values, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-target sum and hit count of ``values`` scattered to ``index``."""
    index = np.asarray(index, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    sums = np.zeros(n, dtype=np.float64)
    np.add.at(sums, index, values)
    counts = np.bincount(index, minlength=n).astype(np.int64)
    return sums, counts
