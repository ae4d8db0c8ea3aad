"""Classical detail-injection fusion.

Every method here is one instance of the same resolution-pyramid recipe:
upsample the multispectral image, extract the panchromatic detail plane
P - P_L with some low-pass P_L, scale it by a per-band gain G, and add:

    fused_k = ms_up_k + G_k * (P - P_L)

Choosing P_L and G yields the familiar family: plain upsampling (EXP),
box-smoothed intensity modulation (SFIM), and the sensor-matched Gaussian
pyramid with unit, ratio, or regression gains.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .imaging import (
    MsImage,
    PanImage,
    box_kernel,
    decimate,
    interp23,
    lowpass,
    mtf_gaussian_kernel,
)

PAN_LOWPASS_MODES = ("mtf_glp", "box")
GAIN_MODES = ("unit", "hpm", "regression")


@dataclass(frozen=True)
class MraConfig:
    """Selects the low-pass estimator and the injection-gain rule.

    ``equalize`` radiometrically matches the panchromatic plane to each
    band (global mean/std affine, estimated against the band's low-pass)
    before extracting details.  Without it, multiplicative injection
    rescales every band by the same per-pixel factor and so cannot move
    the spectral angle; matching makes the modulation band-aware, which
    is what lets the Gaussian-pyramid method improve on plain
    upsampling spectrally.  Pure intensity modulation (SFIM) keeps it
    off to preserve its classical ratio form.
    """

    pan_lowpass_mode: str = "mtf_glp"
    gain_mode: str = "unit"
    equalize: bool = False
    box_half_width: int | None = None  # defaults to the sensor ratio
    hpm_epsilon: float = 1e-4
    mtf_support: int = 41

    def __post_init__(self):
        if self.pan_lowpass_mode not in PAN_LOWPASS_MODES:
            raise ValueError(
                f"pan_lowpass_mode must be one of {PAN_LOWPASS_MODES}, "
                f"got {self.pan_lowpass_mode!r}")
        if self.gain_mode not in GAIN_MODES:
            raise ValueError(
                f"gain_mode must be one of {GAIN_MODES}, got {self.gain_mode!r}")
        if self.hpm_epsilon <= 0:
            raise ValueError("hpm_epsilon must be positive")


# Named method presets selectable from the CLI.
METHODS: dict[str, MraConfig | None] = {
    "exp": None,  # upsample only
    "mra-unit": MraConfig("mtf_glp", "unit"),
    "sfim": MraConfig("box", "hpm"),
    "glp-hpm": MraConfig("mtf_glp", "hpm", equalize=True),
    "glp-reg": MraConfig("mtf_glp", "regression"),
}


def pan_lowpass(pan: PanImage, config: MraConfig) -> np.ndarray:
    """Low-resolution estimate P_L of the panchromatic plane, full size.

    mtf_glp: sensor-matched Gaussian blur, decimate by the ratio, then
    23-tap interpolation back up (so P_L sees exactly the resampling the
    MS image went through). box: plain uniform smoothing.
    """
    ratio = pan.sensor.ratio
    if config.pan_lowpass_mode == "box":
        half = config.box_half_width or ratio
        return lowpass(pan.data, box_kernel(half))
    kernel = mtf_gaussian_kernel(pan.sensor.pan_nyquist_gain, ratio,
                                 config.mtf_support)
    blurred = lowpass(pan.data, kernel)
    return interp23(decimate(blurred, ratio), ratio)


def band_match(pan_data: np.ndarray, pan_l: np.ndarray,
               ms_up: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Affine-match the PAN plane and its low-pass to each band.

    Per band the scale is std(band) / std(P_L) and the offset aligns the
    means, estimated against the low-pass so the matched P_L shares the
    band's radiometry.  A (near-)constant low-pass leaves the planes
    unchanged: there is no detail to rescale.

    Returns matched (P, P_L) stacks shaped H x W x C.
    """
    h, w = pan_data.shape
    c = ms_up.shape[2]
    matched = np.empty((h, w, c))
    matched_low = np.empty((h, w, c))
    mu_p = pan_l.mean()
    var_p = np.mean((pan_l - mu_p) ** 2)
    for k in range(c):
        if var_p < 1e-12:
            scale, offset = 1.0, 0.0
        else:
            band = ms_up[:, :, k]
            scale = band.std() / np.sqrt(var_p)
            offset = band.mean() - scale * mu_p
        matched[:, :, k] = scale * pan_data + offset
        matched_low[:, :, k] = scale * pan_l + offset
    return matched, matched_low


def injection_gain(ms_up: np.ndarray, pan_l: np.ndarray,
                   config: MraConfig) -> np.ndarray:
    """Per-band, per-pixel gain G applied to the detail plane.

    ``pan_l`` is the low-pass plane, either a single H x W raster or a
    per-band H x W x C stack (after :func:`band_match`).
    """
    h, w, c = ms_up.shape
    if config.gain_mode == "unit":
        return np.ones((h, w, c))
    if config.gain_mode == "hpm":
        # High-pass modulation: gain proportional to local band intensity.
        low = pan_l if pan_l.ndim == 3 else pan_l[:, :, None]
        return ms_up / np.maximum(low, config.hpm_epsilon)
    # Global per-band least-squares slope of ms_up on pan_l.
    gains = np.empty((h, w, c))
    p = pan_l.ravel()
    p_centered = p - p.mean()
    var = np.mean(p_centered ** 2)
    for k in range(c):
        if var < 1e-12:
            warnings.warn(
                "injection_gain: pan low-pass is constant; falling back to "
                "unit gain for regression", RuntimeWarning, stacklevel=2)
            slope = 1.0
        else:
            m = ms_up[:, :, k].ravel()
            slope = np.mean(p_centered * (m - m.mean())) / var
        gains[:, :, k] = slope
    return gains


def exp_baseline(ms: MsImage) -> np.ndarray:
    """Plain 23-tap upsampling to the panchromatic grid (no injection)."""
    return interp23(ms.data, ms.sensor.ratio)


def _check_pair(ms: MsImage, pan: PanImage) -> None:
    ratio = ms.sensor.ratio
    expect = (ms.data.shape[0] * ratio, ms.data.shape[1] * ratio)
    if pan.data.shape != expect:
        raise DataError(
            f"mra_fuse: pan shape {pan.data.shape} does not match MS "
            f"{ms.data.shape[:2]} at ratio {ratio} (expected {expect})")
    if pan.sensor.name != ms.sensor.name:
        raise DataError(
            f"mra_fuse: sensor mismatch ({ms.sensor.name!r} vs {pan.sensor.name!r})")


def mra_fuse(ms: MsImage, pan: PanImage, config: MraConfig, *,
             clamp: bool = True,
             pan_lowpass_override: np.ndarray | None = None,
             gain_override: np.ndarray | None = None):
    """Detail-injection fusion of a reduced MS image with its PAN plane.

    Returns an MsImage clamped to [0, 1]; with clamp=False returns the raw
    float64 array, which may exceed the range. The two overrides substitute
    P_L or G directly (diagnostics and degeneracy checks).
    """
    _check_pair(ms, pan)
    ms_up = interp23(ms.data, ms.sensor.ratio)
    p_l = pan_lowpass(pan, config) if pan_lowpass_override is None \
        else np.asarray(pan_lowpass_override, dtype=np.float64)
    if p_l.shape != pan.data.shape:
        raise DataError(
            f"mra_fuse: pan low-pass shape {p_l.shape} != pan {pan.data.shape}")
    if config.equalize and config.gain_mode == "hpm":
        p_bands, p_l_bands = band_match(pan.data, p_l, ms_up)
        detail = p_bands - p_l_bands
        gain_source = p_l_bands
    else:
        detail = (pan.data - p_l)[:, :, None]
        gain_source = p_l
    gains = injection_gain(ms_up, gain_source, config) if gain_override is None \
        else np.asarray(gain_override, dtype=np.float64)
    fused = ms_up + gains * detail
    if not clamp:
        return fused
    return MsImage(np.clip(fused, 0.0, 1.0), ms.sensor, pan.resolution)


def fuse(method: str, ms: MsImage, pan: PanImage, *, clamp: bool = True):
    """Run one of the named classical methods (see METHODS)."""
    if method not in METHODS:
        raise DataError(f"unknown fusion method {method!r}; known: {sorted(METHODS)}")
    config = METHODS[method]
    if config is None:
        up = exp_baseline(ms)
        if not clamp:
            return up
        return MsImage(np.clip(up, 0.0, 1.0), ms.sensor, pan.resolution)
    return mra_fuse(ms, pan, config, clamp=clamp)
