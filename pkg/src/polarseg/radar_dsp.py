"""Radar cube processing: FFT cascade, Doppler reduction, FOV crop, polar/Cartesian
resampling and a cell-averaging CFAR baseline."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

N_SAMPLES = 128
N_CHIRPS = 64
N_AZIMUTH = 128
RANGE_BIN_M = 0.1117
MAX_RANGE_M = 15.0
VELOCITY_SPAN_KMPH = 37.3
AZIMUTH_FOV_DEG = (-45.0, 45.0)
LOG_FLOOR = 1e-12

# Cartesian render grid: x forward in [0, 15] m, y lateral in +-15*sin(45deg) m
CART_X_RANGE = (0.0, 15.0)
CART_Y_RANGE = (-10.61, 10.61)
CART_SHAPE = (128, 128)


@dataclass
class RadarMeta:
    range_bin_m: float = RANGE_BIN_M
    max_range_m: float = MAX_RANGE_M
    velocity_span_kmph: float = VELOCITY_SPAN_KMPH
    azimuth_fov_deg: tuple[float, float] = AZIMUTH_FOV_DEG


@dataclass
class RadarCubeSCA:
    data: np.ndarray  # complex [samples, chirps, antennas]
    meta: RadarMeta = field(default_factory=RadarMeta)

    def __post_init__(self):
        if self.data.ndim != 3 or not np.iscomplexobj(self.data):
            raise ValueError(f"SCA cube must be complex 3-D, got {self.data.dtype} {self.data.shape}")


@dataclass
class RadarCubeRDA:
    data: np.ndarray  # complex [range, doppler (centre-shifted), azimuth]
    meta: RadarMeta = field(default_factory=RadarMeta)


@dataclass
class RangeAzimuthMap:
    data: np.ndarray  # real [range, azimuth]
    mode: str = "sum_log"
    angles_deg: np.ndarray | None = None
    meta: RadarMeta = field(default_factory=RadarMeta)

    def __post_init__(self):
        if self.angles_deg is None:
            self.angles_deg = azimuth_angles(self.data.shape[1], *self.meta.azimuth_fov_deg)
        if len(self.angles_deg) != self.data.shape[1]:
            raise ValueError("one angle per azimuth column required")


@dataclass(frozen=True)
class CfarSpec:
    guard_cells: tuple[int, int] = (1, 1)
    training_cells: tuple[int, int] = (4, 4)
    scale_alpha: float = 5.0

    def __post_init__(self):
        if min(self.training_cells) < 1:
            raise ValueError("CFAR needs at least one training cell per axis")
        if min(self.guard_cells) < 0:
            raise ValueError("guard cells cannot be negative")

    def n_training(self) -> int:
        """Training-cell count for an interior cell."""
        (gr, gc), (tr, tc) = self.guard_cells, self.training_cells
        return (2 * (gr + tr) + 1) * (2 * (gc + tc) + 1) - (2 * gr + 1) * (2 * gc + 1)


def azimuth_angles(n_cols: int = N_AZIMUTH, lo: float = -45.0, hi: float = 45.0) -> np.ndarray:
    """Linear column -> angle map; column k sits at lo + (hi - lo) * k / (n - 1)."""
    if n_cols == 1:
        return np.array([(lo + hi) / 2])
    return lo + (hi - lo) * np.arange(n_cols) / (n_cols - 1)


def doppler_velocities(n_chirps: int = N_CHIRPS, span: float = VELOCITY_SPAN_KMPH) -> np.ndarray:
    """Velocity (km/h) at each centre-shifted Doppler bin; bin n/2 is zero."""
    return (np.arange(n_chirps) - n_chirps // 2) * (2 * span / n_chirps)


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def fft_axis(cube: np.ndarray, axis: int, n: int | None = None) -> np.ndarray:
    """Unnormalised forward DFT along ``axis``, zero-padding to ``n`` if given."""
    length = cube.shape[axis] if n is None else n
    if not _is_pow2(length):
        raise ValueError(f"FFT length must be a power of two, got {length}")
    if length < cube.shape[axis]:
        raise ValueError(f"cannot zero-pad axis of length {cube.shape[axis]} down to {length}")
    return np.fft.fft(cube, n=length, axis=axis)


def sca_to_rda(sca: RadarCubeSCA | np.ndarray, n_azimuth: int = N_AZIMUTH) -> RadarCubeRDA:
    """Samples -> range, chirps -> Doppler (centre-shifted), zero-padded antennas -> azimuth."""
    if isinstance(sca, np.ndarray):
        sca = RadarCubeSCA(sca)
    data = sca.data
    if data.shape[2] > n_azimuth:
        raise ValueError(f"{data.shape[2]} antennas exceed azimuth FFT length {n_azimuth}")
    out = fft_axis(data, 0)
    out = fft_axis(out, 1)
    out = fft_axis(out, 2, n=n_azimuth)
    out = np.fft.fftshift(out, axes=1)
    return RadarCubeRDA(out.astype(np.complex64 if data.dtype == np.complex64 else np.complex128),
                        sca.meta)


def rda_to_ra(rda: RadarCubeRDA | np.ndarray, mode: str = "sum_log",
              floor: float = LOG_FLOOR) -> RangeAzimuthMap:
    """Collapse Doppler: sum of ln|.| (``sum_log``) or max of ln|.| (``max``)."""
    data = rda.data if isinstance(rda, RadarCubeRDA) else rda
    meta = rda.meta if isinstance(rda, RadarCubeRDA) else RadarMeta()
    logmag = np.log(np.abs(data).astype(np.float64) + floor)
    if mode == "sum_log":
        ra = logmag.sum(axis=1)
    elif mode == "max":
        ra = logmag.max(axis=1)
    else:
        raise ValueError(f"unknown RA mode {mode!r}")
    return RangeAzimuthMap(ra, mode=mode, meta=meta)


def rda_to_rad(rda: RadarCubeRDA | np.ndarray, floor: float = LOG_FLOOR) -> np.ndarray:
    """Log-magnitude cube viewed as [range, azimuth, doppler]."""
    data = rda.data if isinstance(rda, RadarCubeRDA) else rda
    return np.log(np.abs(data).astype(np.float64) + floor).transpose(0, 2, 1)


def crop_fov(ra: RangeAzimuthMap, angle_min_deg: float, angle_max_deg: float) -> RangeAzimuthMap:
    """Keep azimuth columns whose angle lies within [angle_min, angle_max].

    Bounds wider than the map are allowed, which makes repeated crops idempotent.
    """
    ang = ra.angles_deg
    tol = 1e-9
    if angle_max_deg < angle_min_deg:
        raise ValueError(f"empty crop interval [{angle_min_deg}, {angle_max_deg}]")
    keep = (ang >= angle_min_deg - tol) & (ang <= angle_max_deg + tol)
    if not keep.any():
        raise ValueError(f"crop [{angle_min_deg}, {angle_max_deg}] selects no columns of "
                         f"[{ang[0]}, {ang[-1]}]")
    cols = np.flatnonzero(keep)
    new_angles = ang[cols]
    meta = replace(ra.meta, azimuth_fov_deg=(float(new_angles[0]), float(new_angles[-1])))
    return RangeAzimuthMap(ra.data[:, cols], ra.mode, new_angles, meta)


# ----------------------------------------------------------------- geometry

@dataclass(frozen=True)
class PolarGrid:
    n_range: int = N_SAMPLES
    n_azimuth: int = N_AZIMUTH
    range_bin_m: float = RANGE_BIN_M
    angle_min_deg: float = AZIMUTH_FOV_DEG[0]
    angle_max_deg: float = AZIMUTH_FOV_DEG[1]

    def __post_init__(self):
        if self.n_range < 2 or self.n_azimuth < 2 or self.range_bin_m <= 0 \
                or self.angle_max_deg <= self.angle_min_deg:
            raise ValueError("degenerate polar grid")

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_range, self.n_azimuth

    @property
    def deg_per_col(self) -> float:
        return (self.angle_max_deg - self.angle_min_deg) / (self.n_azimuth - 1)

    def to_index(self, r: np.ndarray, theta_deg: np.ndarray):
        """Fractional (row, col) of a polar point."""
        return r / self.range_bin_m, (theta_deg - self.angle_min_deg) / self.deg_per_col

    def to_polar(self, row, col):
        return np.asarray(row) * self.range_bin_m, self.angle_min_deg + np.asarray(col) * self.deg_per_col


@dataclass(frozen=True)
class CartesianGrid:
    """Row i <-> x (forward), column j <-> y (lateral); coordinates at cell nodes."""

    n_x: int = CART_SHAPE[0]
    n_y: int = CART_SHAPE[1]
    x_range: tuple[float, float] = CART_X_RANGE
    y_range: tuple[float, float] = CART_Y_RANGE

    def __post_init__(self):
        if self.n_x < 2 or self.n_y < 2 or self.x_range[1] <= self.x_range[0] \
                or self.y_range[1] <= self.y_range[0]:
            raise ValueError("degenerate Cartesian grid")

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_x, self.n_y

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        x = np.linspace(*self.x_range, self.n_x)
        y = np.linspace(*self.y_range, self.n_y)
        return np.meshgrid(x, y, indexing="ij")

    def to_index(self, x, y):
        (x0, x1), (y0, y1) = self.x_range, self.y_range
        return ((np.asarray(x) - x0) / (x1 - x0) * (self.n_x - 1),
                (np.asarray(y) - y0) / (y1 - y0) * (self.n_y - 1))


def polar_to_cartesian_point(r, theta_deg):
    t = np.deg2rad(theta_deg)
    return r * np.cos(t), r * np.sin(t)


def cartesian_to_polar_point(x, y):
    return np.hypot(x, y), np.rad2deg(np.arctan2(y, x))


def _sample(src: np.ndarray, row: np.ndarray, col: np.ndarray, interp: str, fill: float):
    """Sample ``src`` at fractional indices; out-of-domain -> ``fill``."""
    n_r, n_c = src.shape
    inside = (row >= -0.5) & (row <= n_r - 0.5) & (col >= -0.5) & (col <= n_c - 0.5)
    out = np.full(row.shape, fill, dtype=np.float64)
    if interp == "nearest":
        ri = np.clip(np.floor(row + 0.5).astype(int), 0, n_r - 1)
        ci = np.clip(np.floor(col + 0.5).astype(int), 0, n_c - 1)
        out[inside] = src[ri[inside], ci[inside]]
    elif interp == "bilinear":
        rr = np.clip(row, 0, n_r - 1)
        cc = np.clip(col, 0, n_c - 1)
        r0 = np.minimum(np.floor(rr).astype(int), n_r - 2)
        c0 = np.minimum(np.floor(cc).astype(int), n_c - 2)
        fr, fc = rr - r0, cc - c0
        val = (src[r0, c0] * (1 - fr) * (1 - fc) + src[r0 + 1, c0] * fr * (1 - fc)
               + src[r0, c0 + 1] * (1 - fr) * fc + src[r0 + 1, c0 + 1] * fr * fc)
        out[inside] = val[inside]
    else:
        raise ValueError(f"unknown interpolation {interp!r}")
    return out


def polar_cartesian_resample(src: np.ndarray, direction: str = "polar_to_cart",
                             interp: str = "nearest", polar: PolarGrid | None = None,
                             cart: CartesianGrid | None = None, fill: float = np.nan) -> np.ndarray:
    """Resample between the polar range/azimuth lattice and a Cartesian BEV grid.

    Each destination cell looks up its source coordinate (r = hypot(x, y),
    theta = atan2(y, x), or the inverse); cells outside the source domain get ``fill``.
    """
    polar = polar or PolarGrid()
    cart = cart or CartesianGrid()
    src = np.asarray(src, dtype=np.float64)
    if direction == "polar_to_cart":
        if src.shape != polar.shape:
            raise ValueError(f"source {src.shape} does not match polar grid {polar.shape}")
        x, y = cart.coords()
        r, th = cartesian_to_polar_point(x, y)
        row, col = polar.to_index(r, th)
        return _sample(src, row, col, interp, fill)
    if direction == "cart_to_polar":
        if src.shape != cart.shape:
            raise ValueError(f"source {src.shape} does not match Cartesian grid {cart.shape}")
        rows, cols = np.meshgrid(np.arange(polar.n_range), np.arange(polar.n_azimuth), indexing="ij")
        r, th = polar.to_polar(rows, cols)
        x, y = polar_to_cartesian_point(r, th)
        xi, yi = cart.to_index(x, y)
        return _sample(src, xi, yi, interp, fill)
    raise ValueError(f"unknown direction {direction!r}")


# -------------------------------------------------------------------- CFAR

def _box_sum(a: np.ndarray, half_r: int, half_c: int) -> np.ndarray:
    """Sum over the (2*half_r+1) x (2*half_c+1) window clipped to the array."""
    n_r, n_c = a.shape
    s = np.zeros((n_r + 1, n_c + 1), dtype=np.float64)
    s[1:, 1:] = a.cumsum(axis=0).cumsum(axis=1)
    r = np.arange(n_r)
    c = np.arange(n_c)
    r0 = np.clip(r - half_r, 0, n_r)[:, None]
    r1 = np.clip(r + half_r + 1, 0, n_r)[:, None]
    c0 = np.clip(c - half_c, 0, n_c)[None, :]
    c1 = np.clip(c + half_c + 1, 0, n_c)[None, :]
    return s[r1, c1] - s[r0, c1] - s[r1, c0] + s[r0, c0]


def ca_cfar_2d(power: np.ndarray, spec: CfarSpec = CfarSpec()) -> np.ndarray:
    """Cell-averaging CFAR on a linear-power map.

    A cell is detected when it exceeds ``scale_alpha`` times the mean of its
    training ring (outer window minus guard window). Edge cells average over
    whichever training cells fall inside the map.
    """
    power = np.asarray(power, dtype=np.float64)
    if power.ndim != 2:
        raise ValueError("CFAR expects a 2-D map")
    (gr, gc), (tr, tc) = spec.guard_cells, spec.training_cells
    ones = np.ones_like(power)
    outer_sum = _box_sum(power, gr + tr, gc + tc)
    inner_sum = _box_sum(power, gr, gc)
    count = _box_sum(ones, gr + tr, gc + tc) - _box_sum(ones, gr, gc)
    if (count <= 0).any():
        raise ValueError("CFAR training window is empty for some cells")
    noise = (outer_sum - inner_sum) / count
    return (power > spec.scale_alpha * noise).astype(np.uint8)


def cfar_alpha_for_pfa(pfa: float, n_training: int) -> float:
    """Threshold multiplier giving false-alarm rate ``pfa`` for exponential noise."""
    return n_training * (pfa ** (-1.0 / n_training) - 1.0)
