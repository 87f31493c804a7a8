"""Independent oracles shared by the test suite.

Everything here avoids the library's own code paths on purpose: gradients
come from central finite differences, counting oracles run plain Python
pixel loops, and scores are recomputed from raw label maps.
"""

import math

import numpy as np


def fd_grad(f, x, eps=1e-5):
    """Central finite-difference gradient of scalar f at x (flat or nd array)."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.ravel()
    xf = x.ravel()
    for i in range(xf.size):
        plus = x.copy().ravel()
        minus = x.copy().ravel()
        plus[i] += eps
        minus[i] -= eps
        flat[i] = (f(plus.reshape(x.shape)) - f(minus.reshape(x.shape))) / (2 * eps)
    return grad


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# pixel-loop counting oracles
# ---------------------------------------------------------------------------


def count_frequencies(labels, num_classes):
    """Plain-loop known-class frequencies of a label grid."""
    counts = [0] * (num_classes + 1)
    for v in np.asarray(labels).ravel():
        counts[int(v) - 1] += 1
    total = sum(counts[:num_classes])
    if total == 0:
        return counts, [0.0] * num_classes
    return counts, [c / total for c in counts[:num_classes]]


def rarity_oracle(freq, temperature):
    zs = [(1.0 - f) / temperature for f in freq]
    m = max(zs)
    es = [math.exp(z - m) for z in zs]
    s = sum(es)
    return [e / s for e in es]


def reliability_oracle(probs, tau_t):
    probs = np.asarray(probs)
    h, w, _ = probs.shape
    hits = 0
    for i in range(h):
        for j in range(w):
            if max(probs[i, j, :-1]) >= tau_t:
                hits += 1
    return hits / (h * w)


def select_source_oracle(ids, label_maps, target_labels, num_classes, temperature):
    """Recompute every match score from raw pixels and take the argmax."""
    _, freq = count_frequencies(target_labels, num_classes)
    rarity = rarity_oracle(freq, temperature)
    t_counts, _ = count_frequencies(target_labels, num_classes)

    best_id, best_score = None, None
    for img_id, labels in sorted(zip(ids, label_maps)):
        counts = [0] * num_classes
        for v in np.asarray(labels).ravel():
            if 1 <= int(v) <= num_classes:
                counts[int(v) - 1] += 1
        score = sum(
            counts[c] * rarity[c]
            for c in range(num_classes)
            if counts[c] > 0 and t_counts[c] > 0
        )
        if best_score is None or score > best_score:
            best_id, best_score = img_id, score
    return best_id


def confusion_oracle(preds, gts, num_common, num_source, private_ids):
    """Per-pixel double-loop confusion accumulation."""
    rows, cols = num_common + 1, num_source + 1
    mat = np.zeros((rows, cols), dtype=np.int64)
    for pred, gt in zip(preds, gts):
        pred = np.asarray(pred).ravel()
        gt = np.asarray(gt).ravel()
        for p, g in zip(pred, gt):
            row = g if g <= num_common else num_common + 1
            mat[row - 1, p - 1] += 1
    return mat


def iou_from_confusion(mat, row, col):
    tp = mat[row, col]
    denom = mat[row, :].sum() + mat[:, col].sum() - tp
    return math.nan if denom == 0 else tp / denom
