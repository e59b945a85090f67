"""PolarNet: column/row-wise convolutional encoder-decoder on polar radar maps.

Layout of the default network for a 128x128 input::

    enc1  9x1  stride (2,1)   ->  64x128     column-wise, ReLU
    enc2  1x5  stride (1,2)   ->  64x64      row-wise, ReLU, BN, dropout
    enc3  9x1  stride (2,1)   ->  32x64
    enc4  1x5  stride (1,2)   ->  32x32      BN, dropout
    enc5  9x1  stride (2,1)   ->  16x32
    enc6  1x5  stride (1,2)   ->  16x16      BN, dropout
    enc7  3x3  stride 1       ->  16x16      concat with enc6 output
    dec1  1x7  transposed (1,2) -> 16x32
    dec2  9x1  transposed (2,1) -> 32x32
    dec3  5x2                 ->  32x32      ReLU, BN, dropout
    dec4  32x1                ->  32x32      sigmoid
    bilinear upsample         -> 128x128
    head  1x1                 -> 128x128     sigmoid (open-space probability)
"""
from __future__ import annotations

import dataclasses
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .tensor_core import BatchNormState, ConvSpec, ShapeError

# Table 3 reference totals for the RA and RAD variants.
REFERENCE_PARAMS = {"RA": 562_472, "RAD": 598_758}


@dataclass
class ModelConfig:
    input_channels: int = 1
    input_size: tuple[int, int] = (128, 128)
    encoder_channels: tuple[int, int, int] = (48, 64, 96)
    column_kernel: int = 9
    row_kernel: int = 5
    bottleneck_kernel: tuple[int, int] = (3, 3)
    decoder_channels: tuple[int, int, int, int] = (128, 64, 48, 32)
    up_row_kernel: int = 7
    up_column_kernel: int = 9
    smooth_kernel: tuple[int, int] = (5, 2)
    wide_kernel: int = 32
    dropout_rate: float = 0.5
    bn_epsilon: float = tc.BN_EPSILON
    bn_momentum: float = tc.BN_MOMENTUM
    head: str = "sigmoid_1ch"

    @classmethod
    def for_input(cls, kind: str, **overrides) -> "ModelConfig":
        channels = {"RA": 1, "RAD": 64}[kind]
        return cls(input_channels=channels, **overrides)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("input_size", "encoder_channels", "bottleneck_kernel",
                    "decoder_channels", "smooth_kernel"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def layer_specs(self) -> "OrderedDict[str, ConvSpec]":
        """Conv geometry per layer; decoder transposed layers use conv layout."""
        c1, c2, c3 = self.encoder_channels
        d1, d2, d3, d4 = self.decoder_channels
        kc, kr = self.column_kernel, self.row_kernel
        head_out = 2 if self.head == "softmax_2ch" else 1
        specs = OrderedDict()
        specs["enc1"] = ConvSpec(kc, 1, self.input_channels, c1, 2, 1)
        specs["enc2"] = ConvSpec(1, kr, c1, c1, 1, 2)
        specs["enc3"] = ConvSpec(kc, 1, c1, c2, 2, 1)
        specs["enc4"] = ConvSpec(1, kr, c2, c2, 1, 2)
        specs["enc5"] = ConvSpec(kc, 1, c2, c3, 2, 1)
        specs["enc6"] = ConvSpec(1, kr, c3, c3, 1, 2)
        specs["enc7"] = ConvSpec(*self.bottleneck_kernel, c3, c3)
        # transposed: spec.out_channels is the incoming depth
        specs["dec1"] = ConvSpec(1, self.up_row_kernel, d1, 2 * c3, 1, 2)
        specs["dec2"] = ConvSpec(self.up_column_kernel, 1, d2, d1, 2, 1)
        specs["dec3"] = ConvSpec(*self.smooth_kernel, d2, d3)
        specs["dec4"] = ConvSpec(self.wide_kernel, 1, d3, d4)
        specs["head"] = ConvSpec(1, 1, d4, head_out)
        return specs


TRANSPOSED = ("dec1", "dec2")
SIGMOID_LAYERS = ("dec4", "head")
# batchnorm + dropout after these layers
NORM_AFTER = {"enc2": "bn1", "enc4": "bn2", "enc6": "bn3", "dec3": "bn4"}


class PolarNet:
    """Parameter store plus forward/backward for one ModelConfig."""

    def __init__(self, config: ModelConfig, params: "OrderedDict[str, np.ndarray]",
                 bn_states: dict[str, BatchNormState]):
        self.config = config
        self.specs = config.layer_specs()
        self.params = params
        self.bn_states = bn_states

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "PolarNet":
        params = OrderedDict((k, v.astype(dtype)) for k, v in self.params.items())
        bn = {k: BatchNormState(s.running_mean.astype(dtype), s.running_var.astype(dtype),
                                s.momentum, s.eps) for k, s in self.bn_states.items()}
        return PolarNet(self.config, params, bn)

    def copy(self) -> "PolarNet":
        return self.astype(self.dtype)

    def param_count(self) -> int:
        return sum(int(v.size) for v in self.params.values())

    def param_breakdown(self) -> "OrderedDict[str, int]":
        out: OrderedDict[str, int] = OrderedDict()
        for name, v in self.params.items():
            layer = name.split(".")[0]
            out[layer] = out.get(layer, 0) + int(v.size)
        return out

    def shape_chain(self) -> "OrderedDict[str, tuple[int, int, int]]":
        """Per-layer output shape (H, W, C) for the configured input size."""
        h, w = self.config.input_size
        chain: OrderedDict[str, tuple[int, int, int]] = OrderedDict()
        chain["input"] = (h, w, self.config.input_channels)
        for name, spec in self.specs.items():
            if name in TRANSPOSED:
                h, w, c = h * spec.stride_rows, w * spec.stride_cols, spec.in_channels
            else:
                if name == "head":
                    h, w = self.config.input_size
                    chain["upsample"] = (h, w, spec.in_channels)
                h, w = spec.output_hw(h, w)
                c = spec.out_channels
            if name == "enc7":
                c += self.specs["enc6"].out_channels
                chain[name] = (h, w, spec.out_channels)
                chain["concat"] = (h, w, c)
                continue
            chain[name] = (h, w, c)
        return chain

    def forward(self, x: np.ndarray, mode: str = "infer", rng: np.random.Generator | None = None):
        """Probabilities of the open class, shape [N, H, W], plus a backward cache."""
        if x.ndim == 3:
            x = x[..., None]
        cfg = self.config
        if x.shape[1:] != (*cfg.input_size, cfg.input_channels):
            raise ShapeError(f"input shape {x.shape[1:]} does not match model "
                             f"{(*cfg.input_size, cfg.input_channels)}")
        if mode not in ("train", "infer"):
            raise ValueError(f"unknown mode {mode!r}")
        p = self.params
        caches: dict[str, object] = {}
        h = x.astype(self.dtype, copy=False)
        skip = None
        for name, spec in self.specs.items():
            if name in TRANSPOSED:
                h, caches[name] = tc.transposed_conv2d(h, p[f"{name}.w"], p[f"{name}.b"], spec)
            else:
                h, caches[name] = tc.conv2d(h, p[f"{name}.w"], p[f"{name}.b"], spec)
            if name == "head":
                # The 1x1 head and per-channel bilinear upsampling are both linear and
                # interpolation weights sum to one, so they commute; upsampling after
                # the head touches 1-2 channels instead of decoder_channels[-1].
                h, caches["upsample"] = tc.bilinear_upsample(h, *cfg.input_size)
                break
            if name in SIGMOID_LAYERS:
                h, caches[name + ".act"] = tc.sigmoid(h)
            else:
                h, caches[name + ".act"] = tc.relu(h)
            if name in NORM_AFTER:
                bn = NORM_AFTER[name]
                h, caches[bn] = tc.batchnorm(h, p[f"{bn}.gamma"], p[f"{bn}.beta"],
                                             self.bn_states[bn], mode)
                h, caches[bn + ".drop"] = tc.dropout(h, cfg.dropout_rate, mode, rng)
            if name == "enc6":
                skip = h
            if name == "enc7":
                h, caches["concat"] = tc.concat_channels(h, skip)
        if cfg.head == "softmax_2ch":
            z = h[..., 1] - h[..., 0]
            probs, caches["head.act"] = tc.sigmoid(z)
        else:
            probs, caches["head.act"] = tc.sigmoid(h[..., 0])
        if not np.isfinite(probs).all():
            raise tc.NonFiniteError("non-finite activations in PolarNet forward")
        return probs, caches

    def backward(self, dprobs: np.ndarray, caches) -> "OrderedDict[str, np.ndarray]":
        grads: dict[str, np.ndarray] = {}
        dz = tc.sigmoid_backward(dprobs, caches["head.act"])
        if self.config.head == "softmax_2ch":
            dh = np.stack([-dz, dz], axis=-1)
        else:
            dh = dz[..., None]
        dskip = None
        for name in reversed(self.specs):
            if name == "enc7":
                dh, dskip = tc.concat_channels_backward(dh, caches["concat"])
            if name == "enc6":
                dh = dh + dskip
            if name in NORM_AFTER:
                bn = NORM_AFTER[name]
                dh = tc.dropout_backward(dh, caches[bn + ".drop"])
                dh, grads[f"{bn}.gamma"], grads[f"{bn}.beta"] = tc.batchnorm_backward(dh, caches[bn])
            if name != "head":
                if name in SIGMOID_LAYERS:
                    dh = tc.sigmoid_backward(dh, caches[name + ".act"])
                else:
                    dh = tc.relu_backward(dh, caches[name + ".act"])
            if name == "head":
                dh = tc.bilinear_upsample_backward(dh, caches["upsample"])
            if name in TRANSPOSED:
                dh, grads[f"{name}.w"], grads[f"{name}.b"] = tc.transposed_conv2d_backward(dh, caches[name])
            else:
                dh, grads[f"{name}.w"], grads[f"{name}.b"] = tc.conv2d_backward(
                    dh, caches[name], need_dx=name != "enc1")
        return OrderedDict((k, grads[k]) for k in self.params)


def build_model(config: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> PolarNet:
    """He-uniform init for ReLU layers, Glorot-uniform for sigmoid layers, zero biases."""
    specs = config.layer_specs()
    chain_in = config.input_channels
    for name, spec in specs.items():
        incoming = spec.out_channels if name in TRANSPOSED else spec.in_channels
        if name == "dec1":
            chain_in = 2 * config.encoder_channels[2]
        if incoming != chain_in:
            raise ShapeError(f"layer {name} expects {incoming} channels, previous layer gives {chain_in}")
        chain_in = spec.in_channels if name in TRANSPOSED else spec.out_channels
    if not 0.0 <= config.dropout_rate < 1.0:
        raise ValueError("dropout_rate must be in [0, 1)")

    params: OrderedDict[str, np.ndarray] = OrderedDict()
    bn_states: dict[str, BatchNormState] = {}
    for name, spec in specs.items():
        kh, kw, cin, cout = spec.weight_shape
        if name in TRANSPOSED:
            fan_in, fan_out = kh * kw * cout, kh * kw * cin
        else:
            fan_in, fan_out = kh * kw * cin, kh * kw * cout
        if name in SIGMOID_LAYERS:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
        else:
            limit = np.sqrt(6.0 / fan_in)
        params[f"{name}.w"] = rng.uniform(-limit, limit, spec.weight_shape).astype(dtype)
        nbias = cin if name in TRANSPOSED else cout
        params[f"{name}.b"] = np.zeros(nbias, dtype)
        if name in NORM_AFTER:
            bn = NORM_AFTER[name]
            params[f"{bn}.gamma"] = np.ones(cout, dtype)
            params[f"{bn}.beta"] = np.zeros(cout, dtype)
            bn_states[bn] = BatchNormState.fresh(cout, dtype, config.bn_momentum, config.bn_epsilon)
    return PolarNet(config, params, bn_states)


def standardize(x: np.ndarray) -> np.ndarray:
    """Per-frame zero mean / unit variance over all cells and channels."""
    axes = tuple(range(1, x.ndim))
    mean = x.mean(axis=axes, keepdims=True)
    std = x.std(axis=axes, keepdims=True)
    return (x - mean) / np.maximum(std, 1e-6)


def predict_mask(probs: np.ndarray) -> np.ndarray:
    """1 = open where probability >= 0.5, else 0 (occupied)."""
    probs = np.asarray(probs)
    if probs.size and (np.nanmin(probs) < 0 or np.nanmax(probs) > 1 or np.isnan(probs).any()):
        raise ValueError("probabilities must lie in [0, 1]")
    return (probs >= 0.5).astype(np.uint8)


def param_count(model: PolarNet) -> int:
    return model.param_count()
