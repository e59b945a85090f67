"""Segmentation losses over open-class probabilities.

All losses take ``p`` with shape [N, H, W] (probability of class 1 = open) and
integer labels of the same shape, treat ``(1 - p, p)`` as the two-class
distribution, and return ``(loss, dloss/dp)``; the trainable-weight loss also
returns the gradient for its class weights.
"""
from __future__ import annotations

import numpy as np

CLAMP = 1e-7
N_CLASSES = 2


def _check_labels(labels: np.ndarray) -> None:
    if labels.size and (labels.min() < 0 or labels.max() >= N_CLASSES):
        raise ValueError("labels must be 0 (occupied) or 1 (open)")


def smce_pixel(probs2: np.ndarray, labels: np.ndarray):
    """Per-pixel cross-entropy -ln p[label] on a [..., 2] distribution.

    Returns the loss array and its gradient w.r.t. ``probs2``; the gradient is
    zero where the clamp to [1e-7, 1 - 1e-7] is active.
    """
    labels = np.asarray(labels)
    _check_labels(labels)
    probs2 = np.asarray(probs2)
    p_true = np.take_along_axis(probs2, labels[..., None].astype(np.intp), axis=-1)[..., 0]
    clamped = np.clip(p_true, CLAMP, 1 - CLAMP)
    loss = -np.log(clamped)
    grad = np.zeros_like(probs2)
    inside = (p_true > CLAMP) & (p_true < 1 - CLAMP)
    g = np.where(inside, -1.0 / clamped, 0.0)
    np.put_along_axis(grad, labels[..., None].astype(np.intp), g[..., None], axis=-1)
    return loss, grad


def _pixel_ce(p: np.ndarray, labels: np.ndarray):
    """Cross-entropy per pixel and d/dp, for the (1 - p, p) expansion."""
    probs2 = np.stack([1.0 - p, p], axis=-1)
    loss, g2 = smce_pixel(probs2, labels)
    return loss, g2[..., 1] - g2[..., 0]


def smce_loss(p: np.ndarray, labels: np.ndarray):
    """Plain cross-entropy averaged over pixels and frames."""
    loss, dp = _pixel_ce(p, labels)
    return float(loss.mean()), dp / loss.size


def smce_train_loss(p: np.ndarray, labels: np.ndarray, w: np.ndarray):
    """Cross-entropy with a trainable per-class weight.

    Per frame: sum over classes present in the label mask of
    ``exp(-w_c) * mean_{i in c}(CE_i) + |w_c|``; averaged over frames.
    Returns ``(loss, dL/dp, dL/dw)``.
    """
    p = p if p.ndim == 3 else p[None]
    labels = labels if labels.ndim == 3 else labels[None]
    w = np.asarray(w, dtype=np.float64)
    ce, dce = _pixel_ce(p, labels)
    n_frames = p.shape[0]
    total = 0.0
    dp = np.zeros_like(p)
    dw = np.zeros(N_CLASSES)
    for f in range(n_frames):
        for c in range(N_CLASSES):
            sel = labels[f] == c
            n_c = int(sel.sum())
            if n_c == 0:
                continue
            mean_c = float(ce[f][sel].sum()) / n_c
            scale = np.exp(-w[c])
            total += scale * mean_c + abs(w[c])
            dp[f][sel] = dce[f][sel] * (scale / n_c / n_frames)
            dw[c] += (-scale * mean_c + np.sign(w[c])) / n_frames
    return total / n_frames, dp, dw


def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Jaccard-loss increments along a descending error ordering."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    if len(gt_sorted) > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax(p: np.ndarray, labels: np.ndarray):
    """Lovasz-softmax surrogate of 1 - IoU, per frame over present classes.

    Returns ``(loss, dL/dp)``; the gradient follows the piecewise-linear
    extension for the current sort order.
    """
    p = p if p.ndim == 3 else p[None]
    labels = labels if labels.ndim == 3 else labels[None]
    _check_labels(labels)
    n_frames = p.shape[0]
    total = 0.0
    dp = np.zeros_like(p, dtype=np.float64)
    for f in range(n_frames):
        pf = p[f].reshape(-1).astype(np.float64)
        lf = labels[f].reshape(-1)
        present = [c for c in range(N_CLASSES) if (lf == c).any()]
        dpf = np.zeros_like(pf)
        for c in present:
            fg = (lf == c).astype(np.float64)
            pc = pf if c == 1 else 1.0 - pf
            errors = np.abs(fg - pc)
            order = np.argsort(-errors, kind="stable")
            g = lovasz_grad(fg[order])
            total += float(errors[order] @ g) / len(present) / n_frames
            derr = np.empty_like(g)
            derr[order] = g
            # d|fg - pc|/dpc = -1 on class pixels, +1 elsewhere; dpc/dp = +-1
            dpc = np.where(fg == 1, -derr, derr)
            dpf += (dpc if c == 1 else -dpc) / len(present) / n_frames
        dp[f] = dpf.reshape(p.shape[1:])
    return total, dp.astype(p.dtype)


LOSSES = ("smce_train", "smce", "lovasz")


def compute_loss(name: str, p: np.ndarray, labels: np.ndarray, w: np.ndarray | None = None):
    """Dispatch by name; always returns ``(loss, dp, dw)`` with ``dw`` zeros if unused."""
    if name == "smce_train":
        return smce_train_loss(p, labels, w)
    if name == "smce":
        loss, dp = smce_loss(p, labels)
    elif name == "lovasz":
        loss, dp = lovasz_softmax(p, labels)
    else:
        raise ValueError(f"unknown loss {name!r}; choose from {LOSSES}")
    return loss, dp, np.zeros(N_CLASSES)
