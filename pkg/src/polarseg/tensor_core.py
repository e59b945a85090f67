"""Dense tensor ops with hand-written forward and backward passes.

Every op works on numpy arrays laid out as ``[N, H, W, C]`` (rows = range,
columns = azimuth, channels last). Forward functions return ``(out, cache)``
and the matching ``*_backward`` consumes the upstream gradient plus that
cache. Ops preserve the input dtype, so float64 inputs give a double
precision path for gradient checking.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9
RMSPROP_RHO = 0.9
RMSPROP_EPS = 1e-7


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def check_finite(x: np.ndarray, what: str = "tensor") -> None:
    if not np.isfinite(x).all():
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise NonFiniteError(f"{what} contains {bad} non-finite value(s)")


@dataclass
class Tensor:
    """A named parameter: values plus an optional gradient buffer."""

    data: np.ndarray
    grad: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        check_finite(self.data, "Tensor.data")
        if self.grad is not None and self.grad.shape != self.data.shape:
            raise ShapeError(f"grad shape {self.grad.shape} != data shape {self.data.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


@dataclass(frozen=True)
class ConvSpec:
    kernel_rows: int
    kernel_cols: int
    in_channels: int
    out_channels: int
    stride_rows: int = 1
    stride_cols: int = 1
    padding: str = "same"

    def __post_init__(self):
        for name in ("kernel_rows", "kernel_cols", "in_channels", "out_channels",
                     "stride_rows", "stride_cols"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"ConvSpec.{name} must be a positive integer")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"unknown padding {self.padding!r}")

    @property
    def is_column_wise(self) -> bool:
        return self.kernel_cols == 1 and self.kernel_rows > 1

    @property
    def is_row_wise(self) -> bool:
        return self.kernel_rows == 1 and self.kernel_cols > 1

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.kernel_rows, self.kernel_cols, self.in_channels, self.out_channels)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        if self.padding == "same":
            return math.ceil(h / self.stride_rows), math.ceil(w / self.stride_cols)
        oh = (h - self.kernel_rows) // self.stride_rows + 1
        ow = (w - self.kernel_cols) // self.stride_cols + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"valid conv of {self.kernel_rows}x{self.kernel_cols} on {h}x{w} is empty")
        return oh, ow

    def pads(self, h: int, w: int) -> tuple[int, int, int, int]:
        """(top, bottom, left, right); the kernel is centred, odd pad goes bottom/right."""
        if self.padding == "valid":
            return 0, 0, 0, 0
        oh, ow = self.output_hw(h, w)
        top = (self.kernel_rows - 1) // 2
        left = (self.kernel_cols - 1) // 2
        bottom = max(0, (oh - 1) * self.stride_rows + self.kernel_rows - h - top)
        right = max(0, (ow - 1) * self.stride_cols + self.kernel_cols - w - left)
        return top, bottom, left, right


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ShapeError(f"expected [H,W,C] or [N,H,W,C], got shape {x.shape}")
    return x, False


def _im2col(xp: np.ndarray, spec: ConvSpec, oh: int, ow: int) -> np.ndarray:
    n, _, _, c = xp.shape
    kh, kw, sh, sw = spec.kernel_rows, spec.kernel_cols, spec.stride_rows, spec.stride_cols
    cols = np.empty((n, oh, ow, kh, kw, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + sh * (oh - 1) + 1:sh, j:j + sw * (ow - 1) + 1:sw, :]
    return cols.reshape(n * oh * ow, kh * kw * c)


def _col2im(cols: np.ndarray, spec: ConvSpec, n: int, h: int, w: int, c: int,
            oh: int, ow: int) -> np.ndarray:
    """Scatter-add patches back to an unpadded [n, h, w, c] image."""
    kh, kw, sh, sw = spec.kernel_rows, spec.kernel_cols, spec.stride_rows, spec.stride_cols
    top, bottom, left, right = spec.pads(h, w)
    xp = np.zeros((n, h + top + bottom, w + left + right, c), dtype=cols.dtype)
    cols = cols.reshape(n, oh, ow, kh, kw, c)
    for i in range(kh):
        for j in range(kw):
            xp[:, i:i + sh * (oh - 1) + 1:sh, j:j + sw * (ow - 1) + 1:sw, :] += cols[:, :, :, i, j, :]
    return xp[:, top:top + h, left:left + w, :]


def _check_conv_args(x: np.ndarray, w: np.ndarray, b: np.ndarray, spec: ConvSpec,
                     x_channels: int) -> None:
    if w.shape != spec.weight_shape:
        raise ShapeError(f"weight shape {w.shape} does not match spec {spec.weight_shape}")
    if x.shape[-1] != x_channels:
        raise ShapeError(f"input has {x.shape[-1]} channels, expected {x_channels}")
    check_finite(x, "conv input")


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, spec: ConvSpec):
    """Strided cross-correlation. ``w`` is ``[kh, kw, Cin, Cout]``."""
    x, squeeze = _as_batch(x)
    _check_conv_args(x, w, b, spec, spec.in_channels)
    if b.shape != (spec.out_channels,):
        raise ShapeError(f"bias shape {b.shape} != ({spec.out_channels},)")
    n, h, wd, _ = x.shape
    oh, ow = spec.output_hw(h, wd)
    top, bottom, left, right = spec.pads(h, wd)
    xp = np.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0))) if top + bottom + left + right else x
    cols = _im2col(xp, spec, oh, ow)
    y = cols @ w.reshape(-1, spec.out_channels)
    y += b
    y = y.reshape(n, oh, ow, spec.out_channels)
    cache = (cols, w, spec, x.shape, squeeze)
    return (y[0] if squeeze else y), cache


def conv2d_backward(dy: np.ndarray, cache, need_dx: bool = True):
    """Gradients (dx, dw, db); ``need_dx=False`` skips dx and returns None for it."""
    cols, w, spec, xshape, squeeze = cache
    n, h, wd, c = xshape
    if squeeze:
        dy = dy[None]
    oh, ow = dy.shape[1:3]
    dy2 = dy.reshape(-1, spec.out_channels)
    dw = (cols.T @ dy2).reshape(w.shape)
    db = dy2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = dy2 @ w.reshape(-1, spec.out_channels).T
    dx = _col2im(dcols, spec, n, h, wd, c, oh, ow)
    return (dx[0] if squeeze else dx), dw, db


def transposed_conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, spec: ConvSpec):
    """Adjoint of ``conv2d`` with the same ``w`` and ``spec`` (same padding).

    ``w`` keeps the conv layout ``[kh, kw, C_out_here, C_in_here]``, i.e. this op
    maps ``spec.out_channels`` channels to ``spec.in_channels`` channels and
    multiplies the spatial size by the strides.
    """
    x, squeeze = _as_batch(x)
    _check_conv_args(x, w, b, spec, spec.out_channels)
    if b.shape != (spec.in_channels,):
        raise ShapeError(f"bias shape {b.shape} != ({spec.in_channels},)")
    if spec.padding != "same":
        raise ShapeError("transposed_conv2d supports same padding only")
    n, h, wd, _ = x.shape
    oh, ow = h * spec.stride_rows, wd * spec.stride_cols
    x2 = x.reshape(-1, spec.out_channels)
    wmat = w.reshape(-1, spec.out_channels)
    y = _col2im(x2 @ wmat.T, spec, n, oh, ow, spec.in_channels, h, wd)
    y += b
    cache = (x2, w, spec, x.shape, squeeze)
    return (y[0] if squeeze else y), cache


def transposed_conv2d_backward(dy: np.ndarray, cache):
    x2, w, spec, xshape, squeeze = cache
    n, h, wd, _ = xshape
    if squeeze:
        dy = dy[None]
    db = dy.sum(axis=(0, 1, 2))
    oh, ow = dy.shape[1:3]
    top, bottom, left, right = spec.pads(oh, ow)
    dyp = np.pad(dy, ((0, 0), (top, bottom), (left, right), (0, 0)))
    cols = _im2col(dyp, spec, h, wd)
    wmat = w.reshape(-1, spec.out_channels)
    dx = (cols @ wmat).reshape(xshape)
    dw = (cols.T @ x2).reshape(w.shape)
    return (dx[0] if squeeze else dx), dw, db


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPSILON

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32, momentum: float = BN_MOMENTUM,
              eps: float = BN_EPSILON) -> "BatchNormState":
        return cls(np.zeros(channels, dtype), np.ones(channels, dtype), momentum, eps)


def batchnorm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, state: BatchNormState,
              mode: str = "train"):
    """Per-channel normalisation over every axis but the last.

    Train mode normalises with batch statistics and updates ``state`` in place.
    """
    if x.shape[0] == 0:
        raise ShapeError("batchnorm on an empty batch")
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,) or state.running_mean.shape != (c,):
        raise ShapeError(f"batchnorm channel mismatch: input has {c} channels")
    check_finite(x, "batchnorm input")
    axes = tuple(range(x.ndim - 1))
    if mode == "train":
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        m = state.momentum
        state.running_mean = (m * state.running_mean + (1 - m) * mean).astype(state.running_mean.dtype)
        state.running_var = (m * state.running_var + (1 - m) * var).astype(state.running_var.dtype)
    elif mode == "infer":
        mean, var = state.running_mean.astype(x.dtype), state.running_var.astype(x.dtype)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x - mean) * inv_std
    y = xhat * gamma + beta
    return y, (xhat, inv_std, gamma, mode)


def batchnorm_backward(dy: np.ndarray, cache):
    xhat, inv_std, gamma, mode = cache
    axes = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * gamma
    if mode == "infer":
        return dxhat * inv_std, dgamma, dbeta
    m = dy.size // dy.shape[-1]
    dx = inv_std / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dgamma, dbeta


def dropout(x: np.ndarray, rate: float, mode: str, rng: np.random.Generator | None):
    """Inverted dropout; returns ``(y, mask)`` where ``mask`` is None for identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "infer" or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("train-mode dropout needs an explicit rng")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask, mask


def dropout_backward(dy: np.ndarray, mask):
    return dy if mask is None else dy * mask


def relu(x: np.ndarray):
    check_finite(x, "relu input")
    y = np.maximum(x, 0)
    return y, y > 0


def relu_backward(dy: np.ndarray, positive: np.ndarray):
    return dy * positive


def sigmoid(x: np.ndarray):
    check_finite(x, "sigmoid input")
    y = 0.5 * (1.0 + np.tanh(0.5 * x))
    return y, y


def sigmoid_backward(dy: np.ndarray, y: np.ndarray):
    return dy * y * (1.0 - y)


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Align-corners linear interpolation weights, shape [n_out, n_in]."""
    a = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1 or n_out == 1:
        a[:, 0] = 1.0
        return a
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    a[np.arange(n_out), lo] = 1.0 - frac
    a[np.arange(n_out), lo + 1] += frac
    return a


def bilinear_upsample(x: np.ndarray, out_h: int, out_w: int):
    x, squeeze = _as_batch(x)
    _, h, w, _ = x.shape
    if out_h < 1 or out_w < 1:
        raise ShapeError("bilinear_upsample to an empty grid")
    if out_h < h or out_w < w:
        raise ShapeError(f"cannot upsample {h}x{w} down to {out_h}x{out_w}")
    ah = _interp_matrix(h, out_h, x.dtype)
    aw = _interp_matrix(w, out_w, x.dtype)
    y = np.einsum("ih,nhwc->niwc", ah, x, optimize=True)
    y = np.einsum("jw,niwc->nijc", aw, y, optimize=True)
    return (y[0] if squeeze else y), (ah, aw, squeeze)


def bilinear_upsample_backward(dy: np.ndarray, cache):
    ah, aw, squeeze = cache
    if squeeze:
        dy = dy[None]
    dx = np.einsum("jw,nijc->niwc", aw, dy, optimize=True)
    dx = np.einsum("ih,niwc->nhwc", ah, dx, optimize=True)
    return dx[0] if squeeze else dx


def concat_channels(a: np.ndarray, b: np.ndarray):
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"cannot concat {a.shape} with {b.shape}: spatial mismatch")
    return np.concatenate([a, b], axis=-1), a.shape[-1]


def concat_channels_backward(dy: np.ndarray, split: int):
    return dy[..., :split], dy[..., split:]


@dataclass
class RMSPropState:
    accum: dict[str, np.ndarray] = field(default_factory=dict)


def rmsprop_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
                 state: RMSPropState, lr: float, rho: float = RMSPROP_RHO,
                 eps: float = RMSPROP_EPS) -> None:
    """In-place update: s <- rho*s + (1-rho)*g^2 ; p <- p - lr*g/sqrt(s+eps)."""
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, param {p.shape}")
        s = state.accum.get(name)
        if s is None:
            s = np.zeros_like(p)
        s = rho * s + (1.0 - rho) * g * g
        state.accum[name] = s.astype(p.dtype, copy=False)
        denom = np.sqrt(s + eps)
        step = np.divide(g, denom, out=np.zeros_like(g), where=denom > 0)
        p -= (lr * step).astype(p.dtype, copy=False)


def finite_diff_gradcheck(loss_fn: Callable[[], float], params: Mapping[str, np.ndarray],
                          analytic: Mapping[str, np.ndarray], eps: float = 1e-6,
                          max_entries: int | None = None,
                          rng: np.random.Generator | None = None) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``loss_fn`` re-evaluates the scalar loss reading the arrays in ``params``,
    which are perturbed in place and restored. Per tensor the error is
    ``|a - n| / max(|a|, |n|)`` over the checked entries (2-norms); with
    ``max_entries`` a random subset of entries is checked.
    """
    worst = 0.0
    for name, p in params.items():
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        num = np.empty(len(idx))
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            fp = loss_fn()
            flat[i] = orig - eps
            fm = loss_fn()
            flat[i] = orig
            num[k] = (fp - fm) / (2 * eps)
        ana = np.asarray(analytic[name], dtype=np.float64).reshape(-1)[idx]
        scale = max(np.linalg.norm(ana), np.linalg.norm(num))
        if scale == 0.0:
            continue
        worst = max(worst, float(np.linalg.norm(ana - num) / scale))
    return worst
