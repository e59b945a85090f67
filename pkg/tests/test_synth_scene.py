import filecmp
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polarseg import radar_dsp as dsp
from polarseg.synth_scene import (NO_OBSTACLE, DifficultyParams, PointTarget, SceneSpec,
                                  frame_streams, generate_dataset, ground_truth_mask,
                                  open_fraction, render_frame, sample_scene, scene_for_seed,
                                  split_for, synthesize_sca)

N_BINS = dsp.N_SAMPLES * dsp.N_CHIRPS * 128


def open_scene(targets, sigma=0.0, seed=0):
    return SceneSpec(targets, np.full(128, NO_OBSTACLE), sigma, seed, 128)


def test_empty_difficulty():
    scene = scene_for_seed(3, DifficultyParams.named("empty"))
    assert scene.targets == [] and (scene.obstacle_boundary == NO_OBSTACLE).all()
    assert ground_truth_mask(scene).all()
    with pytest.raises(ValueError):
        DifficultyParams.named("nightmare")


def test_scene_is_deterministic_per_seed():
    assert scene_for_seed(42).to_json() == scene_for_seed(42).to_json()
    assert scene_for_seed(42).to_json() != scene_for_seed(43).to_json()


def test_open_fraction_band_over_1000_scenes():
    fr = [open_fraction(ground_truth_mask(scene_for_seed(s))) for s in range(1000)]
    assert 0.35 <= min(fr) and max(fr) <= 0.85


def test_single_target_peak_closed_form():
    t = PointTarget.from_bins(40, 10, 80, 1.7)
    rda = np.abs(dsp.sca_to_rda(synthesize_sca(open_scene([t]))).data)
    assert np.unravel_index(np.argmax(rda), rda.shape) == (40, 10, 80)
    assert rda[40, 10, 80] == pytest.approx(N_BINS * 1.7, rel=1e-6)


def test_empty_noise_free_cube_is_zero():
    sca = synthesize_sca(open_scene([]))
    assert sca.data.shape == (128, 64, 128) and not sca.data.any()


@pytest.mark.parametrize("seed", range(4))
def test_snr_prediction(seed):
    """20 dB per-bin SNR: RA(max) peak over median vs the Rayleigh order-statistic prediction."""
    sigma = math.sqrt(N_BINS / 10 ** (20 / 10))
    t = PointTarget.from_bins(60, 33, 70, 1.0)
    ra = dsp.rda_to_ra(dsp.sca_to_rda(synthesize_sca(open_scene([t], sigma, seed))), "max").data
    measured = 20 / math.log(10) * (ra[60, 70] - np.median(ra))
    sigma_bin = math.sqrt(sigma ** 2 * N_BINS / 2)
    # median of the max of 64 Rayleigh magnitudes
    median_noise = sigma_bin * math.sqrt(-2 * math.log(1 - 0.5 ** (1 / 64)))
    predicted = 20 * math.log10(N_BINS / median_noise)
    assert abs(measured - predicted) <= 2.0


def test_mask_definitions():
    zero = open_scene([])
    zero.obstacle_boundary = np.zeros(128, dtype=np.int64)
    assert not ground_truth_mask(zero).any()
    scene = open_scene([])
    scene.obstacle_boundary[60:71] = 50
    m = ground_truth_mask(scene)
    assert m.shape == (128, 128) and m.dtype == np.uint8
    assert (m[49, 65], m[50, 65], m[100, 65], m[50, 30]) == (1, 0, 0, 1)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1))
def test_targets_sit_on_or_behind_their_boundary(seed):
    scene = scene_for_seed(seed)
    mask = ground_truth_mask(scene)
    for t in scene.targets:
        r, d, a = t.bins
        assert mask[r, a] == 0
        assert r >= scene.obstacle_boundary[a] != NO_OBSTACLE
        assert abs(d - 32) <= 2


@pytest.mark.parametrize("seed", range(5))
def test_noise_free_bins_are_exact(seed):
    scene = scene_for_seed(seed, DifficultyParams.named("clean"))
    mag = np.abs(dsp.sca_to_rda(synthesize_sca(scene)).data)
    want = {t.bins for t in scene.targets}
    peak = min(t.amplitude for t in scene.targets) * N_BINS
    got = set(map(tuple, np.argwhere(mag > 0.5 * peak).tolist()))
    assert got == want


def test_point_target_validation_and_bins():
    t = PointTarget.from_bins(12, 30, 100, 0.8)
    assert t.bins == (12, 30, 100)
    with pytest.raises(ValueError):
        PointTarget(20.0, 0.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        PointTarget(1.0, 50.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        PointTarget(1.0, 0.0, 0.0, 0.0)


def test_streams_are_independent():
    a, b = frame_streams(9)
    assert a.random() != b.random()
    layout, _ = frame_streams(9)
    s1 = sample_scene(layout, seed=9)
    assert s1.to_json() == scene_for_seed(9).to_json()


def test_split_blocks():
    s = split_for(100)
    assert s[:80] == ["train"] * 80 and s[80:] == ["test"] * 20
    assert split_for(1) == ["train"]
    assert "test" in split_for(3) and "train" in split_for(3)


def test_render_frame_shapes():
    fr = render_frame(5)
    assert fr.ra.shape == (128, 128) and fr.rad.shape == (128, 128, 64)
    assert fr.ra.dtype == np.float32 and fr.mask.dtype == np.uint8


def test_generate_dataset(tmp_path):
    m = generate_dataset(10, 7, tmp_path / "a")
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert len(files) == 41 and "manifest.json" in files
    assert json.loads((tmp_path / "a" / "manifest.json").read_text()) == m
    train = {f["seed"] for f in m["frames"] if f["split"] == "train"}
    test = {f["seed"] for f in m["frames"] if f["split"] == "test"}
    assert train and test and not train & test
    generate_dataset(10, 7, tmp_path / "b")
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", files, shallow=False)
    assert len(match) == 41 and not mismatch and not errors
