"""Finite-difference verification of every differentiable op and of a reduced PolarNet.

Each op is checked in float64 by projecting its output onto a fixed random
tensor (a scalar loss), comparing the op's backward pass against central
differences of that loss.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor_core as tc
from .losses import compute_loss
from .polarnet import ModelConfig, build_model
from .tensor_core import ConvSpec, finite_diff_gradcheck


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.sign(x) * (np.abs(x) + margin)


def check_op(forward: Callable, backward: Callable, inputs: dict[str, np.ndarray],
             rng: np.random.Generator, eps: float = 1e-6) -> float:
    """``forward(**inputs) -> (out, cache)``; ``backward(dout, cache) -> {name: grad}``."""
    out, cache = forward(**inputs)
    proj = rng.standard_normal(np.shape(out))
    analytic = backward(proj, cache)

    def loss() -> float:
        return float(np.sum(forward(**inputs)[0] * proj))

    return finite_diff_gradcheck(loss, {k: inputs[k] for k in analytic}, analytic, eps)


def _conv_case(spec: ConvSpec, hw: tuple[int, int], rng):
    inputs = {"x": rng.standard_normal((2, *hw, spec.in_channels)),
              "w": rng.standard_normal(spec.weight_shape),
              "b": rng.standard_normal(spec.out_channels)}
    fwd = lambda x, w, b: tc.conv2d(x, w, b, spec)

    def bwd(d, cache):
        dx, dw, db = tc.conv2d_backward(d, cache)
        return {"x": dx, "w": dw, "b": db}
    return fwd, bwd, inputs


def _tconv_case(spec: ConvSpec, hw: tuple[int, int], rng):
    inputs = {"x": rng.standard_normal((2, *hw, spec.out_channels)),
              "w": rng.standard_normal(spec.weight_shape),
              "b": rng.standard_normal(spec.in_channels)}
    fwd = lambda x, w, b: tc.transposed_conv2d(x, w, b, spec)

    def bwd(d, cache):
        dx, dw, db = tc.transposed_conv2d_backward(d, cache)
        return {"x": dx, "w": dw, "b": db}
    return fwd, bwd, inputs


def _bn_case(mode: str, rng):
    c = 3
    inputs = {"x": rng.standard_normal((2, 4, 4, c)) * 2 + 1,
              "gamma": rng.standard_normal(c), "beta": rng.standard_normal(c)}
    state = tc.BatchNormState(rng.standard_normal(c), rng.uniform(0.5, 2, c), eps=tc.BN_EPSILON)

    def fwd(x, gamma, beta):
        st = tc.BatchNormState(state.running_mean.copy(), state.running_var.copy(), eps=state.eps)
        return tc.batchnorm(x, gamma, beta, st, mode)

    def bwd(d, cache):
        dx, dg, db = tc.batchnorm_backward(d, cache)
        return {"x": dx, "gamma": dg, "beta": db}
    return fwd, bwd, inputs


def op_cases(rng: np.random.Generator) -> dict[str, tuple]:
    seed = int(rng.integers(2 ** 31))
    cases = {
        "conv2d_3x3": _conv_case(ConvSpec(3, 3, 2, 4), (8, 8), rng),
        "conv2d_column_stride2": _conv_case(ConvSpec(5, 1, 2, 3, 2, 1), (9, 4), rng),
        "conv2d_row_stride2": _conv_case(ConvSpec(1, 4, 2, 3, 1, 2), (3, 8), rng),
        "conv2d_5x2": _conv_case(ConvSpec(5, 2, 2, 2), (6, 5), rng),
        "conv2d_valid": _conv_case(ConvSpec(3, 2, 2, 2, padding="valid"), (6, 5), rng),
        "transposed_conv2d_rows": _tconv_case(ConvSpec(3, 1, 2, 3, 2, 1), (4, 3), rng),
        "transposed_conv2d_cols": _tconv_case(ConvSpec(1, 4, 2, 3, 1, 2), (3, 4), rng),
        "batchnorm_train": _bn_case("train", rng),
        "batchnorm_infer": _bn_case("infer", rng),
    }
    cases["dropout"] = (
        lambda x: tc.dropout(x, 0.5, "train", np.random.default_rng(seed)),
        lambda d, mask: {"x": tc.dropout_backward(d, mask)},
        {"x": rng.standard_normal((2, 5, 5, 2))})
    cases["relu"] = (tc.relu, lambda d, c: {"x": tc.relu_backward(d, c)},
                     {"x": _away_from_zero(rng, (3, 4, 5))})
    cases["sigmoid"] = (tc.sigmoid, lambda d, c: {"x": tc.sigmoid_backward(d, c)},
                        {"x": rng.standard_normal((3, 4, 5)) * 3})
    cases["bilinear_upsample"] = (
        lambda x: tc.bilinear_upsample(x, 7, 9),
        lambda d, c: {"x": tc.bilinear_upsample_backward(d, c)},
        {"x": rng.standard_normal((2, 3, 4, 2))})

    def concat_bwd(d, split):
        da, db = tc.concat_channels_backward(d, split)
        return {"a": da, "b": db}
    cases["concat_channels"] = (tc.concat_channels, concat_bwd,
                                {"a": rng.standard_normal((2, 3, 3, 2)),
                                 "b": rng.standard_normal((2, 3, 3, 3))})
    return cases


def reduced_config(**overrides) -> ModelConfig:
    """PolarNet topology at 16x16 with tiny widths, for end-to-end checks."""
    base = dict(input_size=(16, 16), encoder_channels=(3, 4, 4), column_kernel=3, row_kernel=3,
                decoder_channels=(5, 4, 3, 3), up_row_kernel=3, up_column_kernel=3,
                wide_kernel=8)
    base.update(overrides)
    return ModelConfig(**base)


def check_polarnet(seed: int, loss: str = "smce_train", max_entries: int = 12,
                   eps: float = 1e-6, config: ModelConfig | None = None) -> float:
    """End-to-end float64 check of PolarNet + loss w.r.t. every parameter tensor."""
    rng = np.random.default_rng(seed)
    cfg = config or reduced_config()
    model = build_model(cfg, rng, dtype=np.float64)
    # zero biases put dropped-out windows exactly on the ReLU kink
    for name, v in model.params.items():
        if name.endswith(".b") or name.endswith(".beta"):
            v[...] = rng.normal(0, 0.2, v.shape)
    x = rng.standard_normal((2, *cfg.input_size, cfg.input_channels))
    labels = (rng.random((2, *cfg.input_size)) < 0.6).astype(np.uint8)
    w = rng.normal(0, 0.3, 2)
    drop_seed = int(rng.integers(2 ** 31))

    def run():
        probs, caches = model.forward(x, "train", np.random.default_rng(drop_seed))
        return compute_loss(loss, probs, labels, w), caches

    (value, dp, dw), caches = run()
    analytic = dict(model.backward(dp, caches))
    params = dict(model.params)
    if loss == "smce_train":
        params["class_weights"] = w
        analytic["class_weights"] = dw
    return finite_diff_gradcheck(lambda: run()[0][0], params, analytic, eps,
                                 max_entries=max_entries, rng=rng)


def run_suite(seeds=range(10), include_model: bool = True) -> dict[str, float]:
    """Worst relative error per op (and for the reduced PolarNet) over ``seeds``."""
    worst: dict[str, float] = {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, (fwd, bwd, inputs) in op_cases(rng).items():
            err = check_op(fwd, bwd, inputs, rng)
            worst[name] = max(worst.get(name, 0.0), err)
        if include_model:
            worst["polarnet_end_to_end"] = max(worst.get("polarnet_end_to_end", 0.0),
                                               check_polarnet(seed))
    return worst
