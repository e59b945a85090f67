"""Deterministic synthetic parking scenes with exactly known FFT bins.

Each scene is a row of parked cars seen by the radar. A car covers a
contiguous block of azimuth columns and presents a flat near face at range
bin ``r0``; its echoes are point targets snapped to integer (range, Doppler,
azimuth) bins, always including both edge columns. Everything from the
near face backwards is labelled occupied.

Randomness: ``numpy.random.PCG64`` streams derived from ``SeedSequence(seed)``;
scene layout and receiver noise draw from separate child streams so either
can change without perturbing the other.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import radar_dsp as dsp
from . import rten

DOPPLER_BIN_KMPH = 2 * dsp.VELOCITY_SPAN_KMPH / dsp.N_CHIRPS
DEG_PER_COL = 90.0 / (dsp.N_AZIMUTH - 1)
NO_OBSTACLE = -1


@dataclass(frozen=True)
class DifficultyParams:
    n_obstacles: tuple[int, int] = (2, 8)
    targets_per_obstacle: tuple[int, int] = (3, 10)
    car_width_m: tuple[float, float] = (1.8, 4.8)
    near_face_bins: tuple[int, int] = (16, 100)
    span_cols: tuple[int, int] = (4, 48)
    min_gap_cols: int = 2
    depth_jitter_bins: int = 3
    doppler_offset_bins: int = 2
    amplitude: tuple[float, float] = (0.5, 2.0)
    noise_sigma: float = 32.0
    n_antennas: int = 128
    # layouts whose open-pixel fraction falls outside this band are re-drawn
    open_fraction_band: tuple[float, float] | None = (0.35, 0.85)

    @classmethod
    def named(cls, name: str) -> "DifficultyParams":
        if name == "default":
            return cls()
        if name == "empty":
            return cls(n_obstacles=(0, 0), open_fraction_band=None)
        if name == "clean":
            return cls(noise_sigma=0.0)
        raise ValueError(f"unknown difficulty {name!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "DifficultyParams":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PointTarget:
    range_m: float
    azimuth_deg: float
    velocity_kmph: float
    amplitude: float
    obstacle: int = -1

    def __post_init__(self):
        if not 0 <= self.range_m < dsp.N_SAMPLES * dsp.RANGE_BIN_M:
            raise ValueError(f"range {self.range_m} m outside the range axis")
        if not -45.0 - 1e-9 <= self.azimuth_deg <= 45.0 + 1e-9:
            raise ValueError(f"azimuth {self.azimuth_deg} outside [-45, 45]")
        if abs(self.velocity_kmph) > dsp.VELOCITY_SPAN_KMPH + 1e-9:
            raise ValueError(f"velocity {self.velocity_kmph} outside the Doppler span")
        if self.amplitude <= 0:
            raise ValueError("amplitude must be positive")

    @classmethod
    def from_bins(cls, range_bin: int, doppler_bin: int, azimuth_bin: int, amplitude: float,
                  obstacle: int = -1) -> "PointTarget":
        return cls(range_bin * dsp.RANGE_BIN_M,
                   -45.0 + azimuth_bin * DEG_PER_COL,
                   (doppler_bin - dsp.N_CHIRPS // 2) * DOPPLER_BIN_KMPH,
                   float(amplitude), obstacle)

    @property
    def bins(self) -> tuple[int, int, int]:
        """(range, centre-shifted Doppler, azimuth) bin indices."""
        return (round(self.range_m / dsp.RANGE_BIN_M),
                round(self.velocity_kmph / DOPPLER_BIN_KMPH) + dsp.N_CHIRPS // 2,
                round((self.azimuth_deg + 45.0) / DEG_PER_COL))


@dataclass
class SceneSpec:
    targets: list[PointTarget]
    obstacle_boundary: np.ndarray  # int per azimuth column, NO_OBSTACLE when open
    noise_sigma: float = 0.0
    seed: int = 0
    n_antennas: int = 128

    def to_dict(self) -> dict:
        return {"targets": [asdict(t) for t in self.targets],
                "obstacle_boundary": [int(b) for b in self.obstacle_boundary],
                "noise_sigma": self.noise_sigma, "seed": self.seed,
                "n_antennas": self.n_antennas}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def frame_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """(layout, noise) generators for one frame."""
    layout, noise = np.random.SeedSequence(seed).spawn(2)
    return np.random.Generator(np.random.PCG64(layout)), np.random.Generator(np.random.PCG64(noise))


def _span_for(rng: np.random.Generator, r0: int, p: DifficultyParams) -> int:
    width = rng.uniform(*p.car_width_m)
    span_deg = math.degrees(2 * math.atan(width / 2 / (r0 * dsp.RANGE_BIN_M)))
    return int(np.clip(round(span_deg / DEG_PER_COL) + 1, *p.span_cols))


def sample_scene(rng: np.random.Generator, params: DifficultyParams = DifficultyParams(),
                 seed: int = 0) -> SceneSpec:
    """Draw a parking row; re-draws until the open fraction is inside the band."""
    for _ in range(1000):
        scene = _draw_layout(rng, params, seed)
        band = params.open_fraction_band
        if band is None or band[0] <= open_fraction(ground_truth_mask(scene)) <= band[1]:
            return scene
    raise RuntimeError(f"no layout within open-fraction band {band} after 1000 draws")


def _draw_layout(rng: np.random.Generator, params: DifficultyParams, seed: int) -> SceneSpec:
    n_cols = dsp.N_AZIMUTH
    boundary = np.full(n_cols, NO_OBSTACLE, dtype=np.int64)
    taken = np.zeros(n_cols, dtype=bool)
    targets: list[PointTarget] = []
    n_obstacles = int(rng.integers(params.n_obstacles[0], params.n_obstacles[1] + 1))
    placed = 0
    for _ in range(50 * max(n_obstacles, 1)):
        if placed == n_obstacles:
            break
        r0 = int(rng.integers(params.near_face_bins[0], params.near_face_bins[1] + 1))
        span = _span_for(rng, r0, params)
        left = int(rng.integers(0, n_cols - span + 1))
        right = left + span - 1
        g = params.min_gap_cols
        if taken[max(0, left - g):right + g + 1].any():
            continue
        taken[left:right + 1] = True
        boundary[left:right + 1] = r0
        n_t = min(int(rng.integers(params.targets_per_obstacle[0],
                                   params.targets_per_obstacle[1] + 1)), span)
        interior = np.arange(left + 1, right)
        cols = [left, right] + sorted(rng.choice(interior, n_t - 2, replace=False).tolist())
        dop = dsp.N_CHIRPS // 2 + int(rng.integers(-params.doppler_offset_bins,
                                                   params.doppler_offset_bins + 1))
        for k, col in enumerate(cols):
            depth = 0 if k < 2 else int(rng.integers(0, params.depth_jitter_bins + 1))
            amp = float(np.exp(rng.uniform(*np.log(params.amplitude))))
            targets.append(PointTarget.from_bins(r0 + depth, dop, int(col), amp, placed))
        placed += 1
    return SceneSpec(targets, boundary, params.noise_sigma, seed, params.n_antennas)


def scene_for_seed(seed: int, params: DifficultyParams = DifficultyParams()) -> SceneSpec:
    layout, _ = frame_streams(seed)
    return sample_scene(layout, params, seed)


def synthesize_sca(scene: SceneSpec, rng: np.random.Generator | None = None,
                   dtype=np.complex128) -> dsp.RadarCubeSCA:
    """Sum of unit-phase complex tones, one per target, plus circular Gaussian noise."""
    ns, nc, na, npad = dsp.N_SAMPLES, dsp.N_CHIRPS, scene.n_antennas, dsp.N_AZIMUTH
    cube = np.zeros((ns, nc, na), dtype=np.complex128)
    if scene.targets:
        bins = np.array([t.bins for t in scene.targets])
        amp = np.array([t.amplitude for t in scene.targets])
        k_r, k_d, k_a = bins[:, 0], (bins[:, 1] - nc // 2) % nc, bins[:, 2]
        e_s = np.exp(2j * np.pi * np.outer(k_r, np.arange(ns)) / ns)
        e_c = np.exp(2j * np.pi * np.outer(k_d, np.arange(nc)) / nc)
        e_a = np.exp(2j * np.pi * np.outer(k_a, np.arange(na)) / npad)
        sc = (amp[:, None, None] * e_s[:, :, None] * e_c[:, None, :]).reshape(len(amp), ns * nc)
        cube = (sc.T @ e_a).reshape(ns, nc, na)
    if scene.noise_sigma > 0:
        if rng is None:
            _, rng = frame_streams(scene.seed)
        noise = rng.standard_normal((ns, nc, na, 2)) * (scene.noise_sigma / math.sqrt(2))
        cube = cube + (noise[..., 0] + 1j * noise[..., 1])
    return dsp.RadarCubeSCA(cube.astype(dtype))


def ground_truth_mask(scene: SceneSpec, n_range: int = dsp.N_SAMPLES) -> np.ndarray:
    """[range, azimuth] uint8; 1 = open up to each column's first obstacle."""
    b = np.asarray(scene.obstacle_boundary)
    b = np.where(b == NO_OBSTACLE, n_range, b)
    return (np.arange(n_range)[:, None] < b[None, :]).astype(np.uint8)


def open_fraction(mask: np.ndarray) -> float:
    return float(np.mean(mask))


def split_for(n_frames: int, n_sequences: int = 10, test_fraction: float = 0.2) -> list[str]:
    """Contiguous seed blocks act as sequences; the last blocks are held out."""
    n_seq = max(1, min(n_sequences, n_frames))
    n_test = min(n_seq - 1, max(1, round(n_seq * test_fraction))) if n_seq > 1 else 0
    seq = [i * n_seq // n_frames for i in range(n_frames)]
    return ["test" if s >= n_seq - n_test else "train" for s in seq]


@dataclass
class FrameData:
    seed: int
    scene: SceneSpec
    sca: dsp.RadarCubeSCA
    ra: np.ndarray
    rad: np.ndarray
    mask: np.ndarray


def render_frame(seed: int, params: DifficultyParams = DifficultyParams(),
                 ra_mode: str = "max") -> FrameData:
    layout, noise = frame_streams(seed)
    scene = sample_scene(layout, params, seed)
    sca = synthesize_sca(scene, noise)
    rda = dsp.sca_to_rda(sca)
    ra = dsp.rda_to_ra(rda, ra_mode).data.astype(np.float32)
    rad = dsp.rda_to_rad(rda).astype(np.float32)
    return FrameData(seed, scene, sca, ra, rad, ground_truth_mask(scene))


def generate_dataset(n_frames: int, base_seed: int, out_dir: str | Path,
                     params: DifficultyParams = DifficultyParams(), ra_mode: str = "max",
                     n_sequences: int = 10, test_fraction: float = 0.2) -> dict:
    """Write sca/ra/rad tensors and a mask per frame plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = split_for(n_frames, n_sequences, test_fraction)
    n_seq = max(1, min(n_sequences, n_frames))
    frames = []
    for i in range(n_frames):
        seed = base_seed + i
        fr = render_frame(seed, params, ra_mode)
        names = {k: f"{k}_{i:05d}.rten" for k in ("sca", "ra", "rad")}
        names["mask"] = f"mask_{i:05d}.pgm"
        rten.write(out / names["sca"], fr.sca.data.astype(np.complex64))
        rten.write(out / names["ra"], fr.ra)
        rten.write(out / names["rad"], fr.rad)
        rten.write_pgm(out / names["mask"], fr.mask * 255)
        frames.append({"index": i, "seed": seed, "sequence": i * n_seq // n_frames,
                       "split": splits[i], "open_fraction": open_fraction(fr.mask), **names})
    manifest = {"format": "polarseg-dataset", "version": 1, "n_frames": n_frames,
                "base_seed": base_seed, "ra_mode": ra_mode, "params": params.to_dict(),
                "n_sequences": n_seq, "test_fraction": test_fraction, "frames": frames}
    text = json.dumps(manifest, indent=2, sort_keys=True)
    (out / "manifest.json").write_text(text + "\n")
    return json.loads(text)
