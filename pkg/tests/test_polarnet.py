from collections import OrderedDict

import numpy as np
import pytest

from polarseg import tensor_core as tc
from polarseg.gradcheck import check_polarnet, reduced_config
from polarseg.polarnet import (REFERENCE_PARAMS, ModelConfig, PolarNet, build_model, param_count,
                               predict_mask, standardize)

EXPECTED_CHAIN = OrderedDict([
    ("input", (128, 128, 1)), ("enc1", (64, 128, 48)), ("enc2", (64, 64, 48)),
    ("enc3", (32, 64, 64)), ("enc4", (32, 32, 64)), ("enc5", (16, 32, 96)),
    ("enc6", (16, 16, 96)), ("enc7", (16, 16, 96)), ("concat", (16, 16, 192)),
    ("dec1", (16, 32, 128)), ("dec2", (32, 32, 64)), ("dec3", (32, 32, 48)),
    ("dec4", (32, 32, 32)), ("upsample", (128, 128, 32)), ("head", (128, 128, 1)),
])


@pytest.fixture(scope="module")
def ra_model():
    return build_model(ModelConfig(), np.random.default_rng(0))


def test_shape_chain(ra_model):
    assert ra_model.shape_chain() == EXPECTED_CHAIN


def test_forward_shapes_match_chain():
    model = build_model(reduced_config(), np.random.default_rng(1), np.float64)
    x = np.random.default_rng(2).standard_normal((3, 16, 16, 1))
    probs, caches = model.forward(x, "infer")
    assert probs.shape == (3, 16, 16)
    chain = model.shape_chain()
    for name in ("enc1", "enc6", "dec1", "dec2", "dec4"):
        assert caches[name + ".act"].shape[1:] == chain[name]


def test_default_forward_is_128(ra_model):
    x = np.random.default_rng(0).standard_normal((1, 128, 128, 1)).astype(np.float32)
    probs, _ = ra_model.forward(x, "infer")
    assert probs.shape == (1, 128, 128) and probs.dtype == np.float32
    assert ((probs >= 0) & (probs <= 1)).all()


@pytest.mark.parametrize("kind", ["RA", "RAD"])
def test_param_count_within_ten_percent(kind):
    model = build_model(ModelConfig.for_input(kind), np.random.default_rng(0))
    n = param_count(model)
    print(f"{kind}: {n:,} parameters (reference {REFERENCE_PARAMS[kind]:,})")
    assert abs(n - REFERENCE_PARAMS[kind]) <= 0.10 * REFERENCE_PARAMS[kind]


def test_ra_and_rad_differ_only_in_first_layer():
    ra = build_model(ModelConfig.for_input("RA"), np.random.default_rng(0)).param_breakdown()
    rad = build_model(ModelConfig.for_input("RAD"), np.random.default_rng(0)).param_breakdown()
    diff = [k for k in ra if ra[k] != rad[k]]
    assert diff == ["enc1"]
    assert rad["enc1"] - ra["enc1"] == 9 * 63 * 48


def test_param_count_of_single_conv():
    spec = tc.ConvSpec(3, 3, 1, 1)
    model = PolarNet.__new__(PolarNet)
    model.params = OrderedDict(w=np.zeros(spec.weight_shape), b=np.zeros(1))
    assert param_count(model) == 10


def test_same_seed_same_init():
    a = build_model(ModelConfig(), np.random.default_rng(5))
    b = build_model(ModelConfig(), np.random.default_rng(5))
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])


def test_decoder_widths_non_increasing(ra_model):
    chain = ra_model.shape_chain()
    widths = [chain[k][2] for k in ("concat", "dec1", "dec2", "dec3", "dec4")]
    assert widths == sorted(widths, reverse=True)


def test_zero_head_outputs_half(ra_model):
    model = ra_model.copy()
    model.params["head.w"][...] = 0
    model.params["head.b"][...] = 0
    x = np.random.default_rng(3).standard_normal((2, 128, 128, 1)).astype(np.float32)
    probs, _ = model.forward(x, "infer")
    assert (probs == 0.5).all()
    assert predict_mask(probs).all()


def test_infer_is_deterministic_and_pure(ra_model):
    x = np.random.default_rng(4).standard_normal((1, 128, 128, 1)).astype(np.float32)
    before = {k: v.copy() for k, v in ra_model.params.items()}
    a, _ = ra_model.forward(x, "infer")
    b, _ = ra_model.forward(x, "infer")
    np.testing.assert_array_equal(a, b)
    for k, v in ra_model.params.items():
        np.testing.assert_array_equal(v, before[k])


def test_train_mode_dropout_is_seeded():
    model = build_model(reduced_config(), np.random.default_rng(1), np.float64)
    x = np.random.default_rng(2).standard_normal((2, 16, 16, 1))
    a, _ = model.copy().forward(x, "train", np.random.default_rng(9))
    b, _ = model.copy().forward(x, "train", np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)


def test_first_layer_commutes_with_column_permutation(ra_model):
    rng = np.random.default_rng(6)
    x = rng.standard_normal((1, 128, 128, 1)).astype(np.float64)
    perm = rng.permutation(128)
    spec = ra_model.specs["enc1"]
    w, b = ra_model.params["enc1.w"].astype(np.float64), ra_model.params["enc1.b"].astype(np.float64)
    y, _ = tc.conv2d(x, w, b, spec)
    yp, _ = tc.conv2d(x[:, :, perm], w, b, spec)
    np.testing.assert_allclose(yp, y[:, :, perm], rtol=1e-12)


@pytest.mark.parametrize("loss", ["smce_train", "smce", "lovasz"])
def test_end_to_end_gradcheck(loss):
    assert check_polarnet(0, loss=loss) < 1e-4


def test_softmax_head_gradcheck():
    assert check_polarnet(1, config=reduced_config(head="softmax_2ch")) < 1e-4


def test_input_validation(ra_model):
    with pytest.raises(tc.ShapeError):
        ra_model.forward(np.zeros((1, 64, 64, 1), np.float32))
    with pytest.raises(ValueError):
        ra_model.forward(np.zeros((1, 128, 128, 1), np.float32), "eval")
    with pytest.raises(ValueError):
        build_model(ModelConfig(dropout_rate=1.0), np.random.default_rng(0))


def test_predict_mask_boundary():
    np.testing.assert_array_equal(predict_mask(np.array([0.4999, 0.5, 1.0, 0.0])), [0, 1, 1, 0])
    assert predict_mask(np.full((4, 4), 0.5)).all()
    rng = np.random.default_rng(7)
    p = rng.random((5, 6))
    ref = np.array([[1 if p[i, j] >= 0.5 else 0 for j in range(6)] for i in range(5)])
    np.testing.assert_array_equal(predict_mask(p), ref)
    with pytest.raises(ValueError):
        predict_mask(np.array([1.2]))


def test_standardize_per_frame():
    x = np.random.default_rng(8).standard_normal((3, 4, 4, 1)) * 5 + 2
    z = standardize(x)
    np.testing.assert_allclose(z.mean(axis=(1, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(z.std(axis=(1, 2, 3)), 1, atol=1e-12)


def test_config_round_trip():
    cfg = ModelConfig.for_input("RAD", dropout_rate=0.3)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
