"""Independent reference implementations shared by the unit and acceptance tests."""
import itertools
import math

import numpy as np


def jaccard_table(fg: np.ndarray) -> dict:
    """Jaccard loss of every mistake set M: |M| / |fg U M|, enumerated over all subsets."""
    n = len(fg)
    fg_set = set(np.flatnonzero(fg))
    table = {}
    for bits in itertools.product((0, 1), repeat=n):
        m = {i for i in range(n) if bits[i]}
        union = fg_set | m
        table[bits] = len(m) / len(union) if union else 0.0
    return table


def lovasz_extension(errors: np.ndarray, table: dict) -> float:
    """Integral over t in [0, 1] of F({i : m_i >= t}) with F read from the table."""
    levels = sorted(set(errors.tolist()) | {0.0}, reverse=True)
    total = 0.0
    for hi, lo in zip(levels, levels[1:]):
        bits = tuple(int(e >= hi) for e in errors)
        total += (hi - lo) * table[bits]
    return total


def lovasz_oracle(p: np.ndarray, y: np.ndarray) -> float:
    p, y = p.ravel(), y.ravel()
    vals = []
    for c in (0, 1):
        fg = (y == c).astype(int)
        if not fg.any():
            continue
        pc = p if c == 1 else 1 - p
        vals.append(lovasz_extension(np.abs(fg - pc), jaccard_table(fg)))
    return float(np.mean(vals))


def iou_per_class(pred, y):
    out = []
    for c in (0, 1):
        if not (y == c).any():
            continue
        inter = np.sum((pred == c) & (y == c))
        union = np.sum((pred == c) | (y == c))
        out.append(inter / union)
    return np.array(out)


def naive_sum_log(rda: np.ndarray) -> np.ndarray:
    """Doppler sum of natural-log magnitudes, one scalar at a time."""
    n_r, n_d, n_a = rda.shape
    out = np.zeros((n_r, n_a))
    for i in range(n_r):
        for k in range(n_a):
            acc = 0.0
            for j in range(n_d):
                acc += math.log(abs(complex(rda[i, j, k])) + 1e-12)
            out[i, k] = acc
    return out
