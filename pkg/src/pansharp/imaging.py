"""Sensor models and resampling primitives shared by simulation and fusion.

Rasters live as float64 numpy arrays scaled to [0, 1]: multispectral as
H x W x C, panchromatic as H x W. All filters run with mirrored boundaries
so edge statistics stay unbiased. Resampling uses offset-0 alignment
throughout: pixel centers of the two grids coincide at even offsets and
no half-pixel phase shift is introduced by upsampling or decimation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d
from scipy.signal import fftconvolve

from .errors import DataError

RESOLUTIONS = ("reduced", "full")


@dataclass(frozen=True)
class SensorSpec:
    """Acquisition model: band count, scale ratio, MTF gains, bit depth."""

    name: str
    bands: int
    ratio: int
    ms_nyquist_gains: tuple[float, ...]
    pan_nyquist_gain: float
    bit_depth: int

    def __post_init__(self):
        if self.bands not in (4, 8):
            raise ValueError(f"SensorSpec: bands must be 4 or 8, got {self.bands}")
        if self.ratio < 2:
            raise ValueError(f"SensorSpec: ratio must be >= 2, got {self.ratio}")
        if len(self.ms_nyquist_gains) != self.bands:
            raise ValueError(
                f"SensorSpec: {len(self.ms_nyquist_gains)} MS gains for "
                f"{self.bands} bands")
        for g in (*self.ms_nyquist_gains, self.pan_nyquist_gain):
            if not 0.0 < g < 1.0:
                raise ValueError(f"SensorSpec: Nyquist gain {g} outside (0, 1)")
        if not 8 <= self.bit_depth <= 16:
            raise ValueError(f"SensorSpec: bit depth {self.bit_depth} outside 8..16")

    @property
    def max_value(self) -> int:
        return (1 << self.bit_depth) - 1


def _uniform(g: float, bands: int) -> tuple[float, ...]:
    return (g,) * bands

SENSORS: dict[str, SensorSpec] = {
    "wv3": SensorSpec("wv3", 8, 4, _uniform(0.35, 8), 0.15, 11),
    "gf2": SensorSpec("gf2", 4, 4, _uniform(0.30, 4), 0.15, 10),
    "qb": SensorSpec("qb", 4, 4, _uniform(0.34, 4), 0.15, 11),
}


def get_sensor(name: str) -> SensorSpec:
    try:
        return SENSORS[name]
    except KeyError:
        raise DataError(
            f"unknown sensor {name!r}; known: {sorted(SENSORS)}") from None


def generic_sensor(bands: int, bit_depth: int, name: str = "generic") -> SensorSpec:
    """Fallback spec for rasters whose sensor is not in the registry."""
    return SensorSpec(name, bands, 4, _uniform(0.30, bands), 0.15, bit_depth)


@dataclass
class MsImage:
    """Multispectral raster (H x W x C in [0, 1]) tied to a sensor."""

    data: np.ndarray
    sensor: SensorSpec
    resolution: str = "full"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise DataError(f"MsImage: expected H x W x C data, got shape {self.data.shape}")
        if self.data.shape[2] != self.sensor.bands:
            raise DataError(
                f"MsImage: {self.data.shape[2]} bands but sensor "
                f"{self.sensor.name!r} has {self.sensor.bands}")
        _check_range01("MsImage", self.data)
        if self.resolution not in RESOLUTIONS:
            raise DataError(f"MsImage: resolution must be one of {RESOLUTIONS}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


@dataclass
class PanImage:
    """Panchromatic raster (H x W in [0, 1]) tied to a sensor."""

    data: np.ndarray
    sensor: SensorSpec
    resolution: str = "full"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise DataError(f"PanImage: expected H x W data, got shape {self.data.shape}")
        _check_range01("PanImage", self.data)
        if self.resolution not in RESOLUTIONS:
            raise DataError(f"PanImage: resolution must be one of {RESOLUTIONS}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


def _check_range01(what: str, data: np.ndarray) -> None:
    if not np.all(np.isfinite(data)):
        raise DataError(f"{what}: non-finite samples present")
    if data.size and (data.min() < 0.0 or data.max() > 1.0):
        raise DataError(
            f"{what}: samples outside [0, 1] (min {data.min():.4g}, "
            f"max {data.max():.4g})")


# -- radiometry -----------------------------------------------------------


def normalize(raw: np.ndarray, sensor: SensorSpec) -> np.ndarray:
    """Scale integer counts to [0, 1] by the sensor's full range."""
    raw = np.asarray(raw)
    top = sensor.max_value
    if raw.size and (raw.min() < 0 or raw.max() > top):
        raise DataError(
            f"normalize: sample outside [0, {top}] for {sensor.bit_depth}-bit "
            f"sensor (min {raw.min()}, max {raw.max()})")
    return raw.astype(np.float64) / top


def denormalize(img: np.ndarray, sensor: SensorSpec) -> np.ndarray:
    """Back to integer counts (round-half-even), inverse of normalize."""
    img = np.asarray(img, dtype=np.float64)
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise DataError("denormalize: values outside [0, 1]")
    return np.rint(img * sensor.max_value).astype(np.uint16)


# -- MTF-matched Gaussian low-pass ----------------------------------------


def mtf_sigma(nyquist_gain: float, ratio: int) -> float:
    """Std-dev (in samples) whose frequency response hits nyquist_gain at
    the scale-ratio cutoff: sigma = sqrt(-2 ln(gain) (ratio/pi)^2) / 2."""
    if not 0.0 < nyquist_gain < 1.0:
        raise ValueError(f"nyquist gain {nyquist_gain} outside (0, 1)")
    return math.sqrt(-2.0 * math.log(nyquist_gain) * (ratio / math.pi) ** 2) / 2.0


def mtf_gaussian_kernel(nyquist_gain: float, ratio: int, support: int = 41) -> np.ndarray:
    """Separable Gaussian low-pass matched to a sensor MTF gain.

    Returns a support x support unit-sum kernel. Smaller gains give wider
    kernels (stronger blur).
    """
    if support < 3 or support % 2 == 0:
        raise ValueError(f"kernel support must be odd and >= 3, got {support}")
    sigma = mtf_sigma(nyquist_gain, ratio)
    n = np.arange(support) - support // 2
    g1 = np.exp(-0.5 * (n / sigma) ** 2)
    kernel = np.outer(g1, g1)
    return kernel / kernel.sum()


def lowpass(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Per-band 2-D convolution with symmetric (edge-repeating) mirror
    boundary; output matches the input size."""
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 2 or kernel.shape[0] % 2 == 0 or kernel.shape[1] % 2 == 0:
        raise ValueError(f"lowpass: kernel must be 2-D with odd sides, got {kernel.shape}")
    image = np.asarray(image, dtype=np.float64)
    ph, pw = kernel.shape[0] // 2, kernel.shape[1] // 2
    if image.ndim == 2:
        padded = np.pad(image, ((ph, ph), (pw, pw)), mode="symmetric")
        return fftconvolve(padded, kernel, mode="valid")
    if image.ndim == 3:
        padded = np.pad(image, ((ph, ph), (pw, pw), (0, 0)), mode="symmetric")
        return fftconvolve(padded, kernel[:, :, None], mode="valid", axes=(0, 1))
    raise ValueError(f"lowpass: expected 2-D or 3-D image, got shape {image.shape}")


def box_kernel(half_width: int) -> np.ndarray:
    """(2h+1) x (2h+1) uniform smoothing kernel."""
    if half_width < 1:
        raise ValueError(f"box half-width must be >= 1, got {half_width}")
    side = 2 * half_width + 1
    return np.full((side, side), 1.0 / (side * side))


def decimate(image: np.ndarray, factor: int) -> np.ndarray:
    """Keep every factor-th sample starting at the top-left (offset 0)."""
    if factor < 1:
        raise ValueError(f"decimate: factor must be >= 1, got {factor}")
    image = np.asarray(image)
    if image.shape[0] % factor or image.shape[1] % factor:
        raise ValueError(
            f"decimate: spatial dims {image.shape[:2]} not divisible by {factor}")
    return image[::factor, ::factor]


# -- 23-tap interpolation --------------------------------------------------


def interp23_taps() -> np.ndarray:
    """Half-band windowed-sinc taps for one x2 stage.

    h[n] = sinc(n/2) * hamming(n), n = -11..11; even taps are exactly zero
    except the unit center, and the odd taps are renormalized to sum to 1
    so constants survive interpolation.
    """
    n = np.arange(23) - 11
    taps = np.sinc(n / 2.0) * np.hamming(23)
    taps[(n % 2 == 0) & (n != 0)] = 0.0
    taps[n == 0] = 1.0
    odd = n % 2 != 0
    taps[odd] /= taps[odd].sum()
    return taps


def _upsample2_axis(arr: np.ndarray, axis: int, taps: np.ndarray) -> np.ndarray:
    shape = list(arr.shape)
    if shape[axis] < 6:
        raise ValueError(
            f"interp23: axis {axis} has {shape[axis]} samples; need >= 6")
    shape[axis] *= 2
    up = np.zeros(shape, dtype=np.float64)
    index = [slice(None)] * arr.ndim
    index[axis] = slice(0, None, 2)
    up[tuple(index)] = arr
    # 'mirror' reflects about the edge sample, preserving the zero phase,
    # which keeps original samples bit-exact through the filter.
    return correlate1d(up, taps, axis=axis, mode="mirror")


def interp23(image: np.ndarray, factor: int) -> np.ndarray:
    """Upsample by a power-of-two factor as repeated x2 stages.

    Each stage zero-interleaves (samples at even offsets) then applies the
    separable 23-tap half-band filter along both spatial axes.
    """
    if factor < 2 or factor & (factor - 1):
        raise ValueError(f"interp23: factor must be a power of two >= 2, got {factor}")
    out = np.asarray(image, dtype=np.float64)
    if out.ndim not in (2, 3):
        raise ValueError(f"interp23: expected 2-D or 3-D image, got shape {out.shape}")
    taps = interp23_taps()
    stages = factor.bit_length() - 1
    for _ in range(stages):
        out = _upsample2_axis(out, 0, taps)
        out = _upsample2_axis(out, 1, taps)
    return out
