"""Fusion quality metrics and the evaluation report container.

Reference metrics (reduced resolution, ground truth available):

* :func:`sam`    -- mean spectral angle in degrees.
* :func:`ergas`  -- relative global dimensionless synthesis error.
* :func:`scc`    -- spatial correlation of high-pass detail planes.
* :func:`uiqi`   -- universal image quality index, single band.
* :func:`q2n`    -- hypercomplex extension of UIQI to 4/8-band stacks.

No-reference metrics (full resolution):

* :func:`d_lambda` -- spectral distortion from inter-band UIQI drift.
* :func:`d_s`      -- spatial distortion versus the panchromatic plane.
* :func:`qnr`      -- combined quality-with-no-reference score.

All metrics take float arrays shaped ``(H, W)`` or ``(H, W, C)``; image
wrapper objects with a ``.data`` attribute are unwrapped automatically.
Identical inputs score exactly 0.0 (sam, ergas) or exactly 1.0 (scc,
uiqi, q2n): the expressions are grouped so the ideal value is reached
without floating-point residue.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DataError
from .imaging import decimate, lowpass, mtf_gaussian_kernel

METRIC_NAMES = ("sam", "ergas", "scc", "q2n", "d_lambda", "d_s", "qnr")

#: 3x3 high-pass kernel used by :func:`scc` to isolate spatial detail.
LAPLACIAN_KERNEL = np.array(
    [[-1.0, -1.0, -1.0], [-1.0, 8.0, -1.0], [-1.0, -1.0, -1.0]])


def _as_bands(image) -> np.ndarray:
    """Return image data as a float64 ``(H, W, C)`` array."""
    data = getattr(image, "data", image)
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 2:
        data = data[:, :, None]
    if data.ndim != 3:
        raise DataError(f"expected a 2-D or 3-D image, got shape {data.shape}")
    return data


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DataError(f"image shapes differ: {a.shape} vs {b.shape}")


def sam(reference, estimate) -> float:
    """Mean per-pixel spectral angle between band vectors, in degrees.

    Pixels where either spectrum is the zero vector contribute an angle
    of zero.  Identical inputs give exactly 0.0.
    """
    x = _as_bands(reference)
    y = _as_bands(estimate)
    _check_same_shape(x, y)
    dot = np.sum(x * y, axis=2)
    sx = np.sum(x * x, axis=2)
    sy = np.sum(y * y, axis=2)
    valid = (sx > 0.0) & (sy > 0.0)
    cosine = np.ones_like(dot)
    np.divide(dot, np.sqrt(sx * sy), out=cosine, where=valid)
    angles = np.degrees(np.arccos(np.clip(cosine, -1.0, 1.0)))
    return float(np.mean(angles))


def ergas(reference, estimate, ratio: int) -> float:
    """Relative global synthesis error for a given resolution ratio.

    Averages per-band mean squared error normalised by the squared band
    mean of the reference, then scales by ``100 / ratio``.
    """
    x = _as_bands(reference)
    y = _as_bands(estimate)
    _check_same_shape(x, y)
    means = x.mean(axis=(0, 1))
    if np.any(means == 0.0):
        raise DataError("reference has a zero-mean band; ergas is undefined")
    mse = np.mean((x - y) ** 2, axis=(0, 1))
    return float(100.0 / ratio * np.sqrt(np.mean(mse / means ** 2)))


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Population correlation; degenerate planes score 1.0 iff identical."""
    ac = a - a.mean()
    bc = b - b.mean()
    cov = np.mean(ac * bc)
    var_a = np.mean(ac * ac)
    var_b = np.mean(bc * bc)
    if var_a == 0.0 or var_b == 0.0:
        return 1.0 if np.array_equal(a, b) else 0.0
    return float(cov / np.sqrt(var_a * var_b))


def scc(reference, estimate) -> float:
    """Mean per-band correlation of high-pass filtered detail planes.

    Both images are filtered with :data:`LAPLACIAN_KERNEL`; correlation
    is computed over the interior (boundary rows/columns excluded) and
    averaged across bands.  Identical inputs give exactly 1.0.
    """
    x = _as_bands(reference)
    y = _as_bands(estimate)
    _check_same_shape(x, y)
    if x.shape[0] < 3 or x.shape[1] < 3:
        raise DataError(f"image {x.shape[:2]} too small for the 3x3 high-pass")
    values = []
    for k in range(x.shape[2]):
        hx = ndimage.correlate(x[:, :, k], LAPLACIAN_KERNEL)[1:-1, 1:-1]
        hy = ndimage.correlate(y[:, :, k], LAPLACIAN_KERNEL)[1:-1, 1:-1]
        values.append(_pearson(hx, hy))
    return float(np.mean(values))


def _iter_windows(height: int, width: int, window: int):
    """Top-left corners of the non-overlapping full windows."""
    for i in range(0, height - window + 1, window):
        for j in range(0, width - window + 1, window):
            yield i, j


def _uiqi_window(a: np.ndarray, b: np.ndarray) -> float:
    mu_a = a.mean()
    mu_b = b.mean()
    ac = a - mu_a
    bc = b - mu_b
    cov = np.mean(ac * bc)
    var_a = np.mean(ac * ac)
    var_b = np.mean(bc * bc)
    mu_prod = mu_a * mu_b
    denominator = (var_a + var_b) * (mu_a * mu_a + mu_b * mu_b)
    if denominator == 0.0:
        return 1.0 if np.array_equal(a, b) else 0.0
    return float(4.0 * cov * mu_prod / denominator)


def uiqi(reference, estimate, window: int = 32) -> float:
    """Universal image quality index over non-overlapping windows.

    Operates on a single band.  Windows are tiled with stride equal to
    the window size; partial windows at the right/bottom edges are
    dropped.  Moments are population moments.  A window with zero
    denominator scores 1.0 when the two windows are bitwise identical
    and 0.0 otherwise.  Identical inputs give exactly 1.0.
    """
    a = np.asarray(getattr(reference, "data", reference), dtype=np.float64)
    b = np.asarray(getattr(estimate, "data", estimate), dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DataError("uiqi expects single-band 2-D arrays")
    _check_same_shape(a, b)
    if a.shape[0] < window or a.shape[1] < window:
        raise DataError(
            f"image {a.shape} has no complete {window}x{window} window")
    values = [
        _uiqi_window(a[i:i + window, j:j + window],
                     b[i:i + window, j:j + window])
        for i, j in _iter_windows(a.shape[0], a.shape[1], window)
    ]
    return float(np.mean(values))


def cd_conjugate(x: np.ndarray) -> np.ndarray:
    """Hypercomplex conjugate: negate every non-real component."""
    out = -x
    out[..., 0] = x[..., 0]
    return out


def cd_multiply(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Cayley-Dickson product of hypercomplex arrays.

    The last axis holds the components and must be a power of two with
    at most 8 entries (real, complex, quaternion, octonion).  The
    doubling rule is ``(a, b)(c, d) = (ac - conj(d) b, da + b conj(c))``,
    which reduces to ordinary complex multiplication for two components.
    """
    n = x.shape[-1]
    if n != y.shape[-1]:
        raise DataError(f"component counts differ: {n} vs {y.shape[-1]}")
    if n == 1:
        return x * y
    if n & (n - 1) or n > 8:
        raise DataError(f"component count must be 1, 2, 4 or 8, got {n}")
    half = n // 2
    a, b = x[..., :half], x[..., half:]
    c, d = y[..., :half], y[..., half:]
    real = cd_multiply(a, c) - cd_multiply(cd_conjugate(d), b)
    imag = cd_multiply(d, a) + cd_multiply(b, cd_conjugate(c))
    return np.concatenate([real, imag], axis=-1)


def _cd_covariance(x: np.ndarray, y: np.ndarray,
                   mu_x: np.ndarray, mu_y: np.ndarray) -> np.ndarray:
    """mean(x * conj(y)) - mu_x * conj(mu_y) over the pixel axis."""
    prod = cd_multiply(x, cd_conjugate(y))
    return prod.mean(axis=0) - cd_multiply(mu_x, cd_conjugate(mu_y))


def _q2n_window(x: np.ndarray, y: np.ndarray) -> float:
    """Quality of one window of pixel spectra shaped ``(n_pixels, comps)``."""
    mu_x = x.mean(axis=0)
    mu_y = y.mean(axis=0)
    sigma_xy = _cd_covariance(x, y, mu_x, mu_y)
    var_x = _cd_covariance(x, x, mu_x, mu_x)[0]
    var_y = _cd_covariance(y, y, mu_y, mu_y)[0]
    msq_x = float(np.sum(mu_x * mu_x))
    msq_y = float(np.sum(mu_y * mu_y))
    denominator = (var_x + var_y) * (msq_x + msq_y)
    if denominator == 0.0:
        return 1.0 if np.array_equal(x, y) else 0.0
    modulus = np.sqrt(np.sum(sigma_xy * sigma_xy))
    return float(4.0 * modulus * np.sqrt(msq_x * msq_y) / denominator)


def q2n(reference, estimate, window: int = 32) -> float:
    """Hypercomplex quality index for multiband stacks.

    Each pixel's band vector is treated as one hypercomplex number; the
    UIQI structure (correlation, luminance and contrast terms) is
    evaluated per non-overlapping window and averaged.  The band count
    is zero-padded up to the next power of two and may not exceed 8.
    Identical inputs give exactly 1.0.
    """
    x = _as_bands(reference)
    y = _as_bands(estimate)
    _check_same_shape(x, y)
    bands = x.shape[2]
    padded = 1 << max(bands - 1, 0).bit_length()
    if padded > 8:
        raise DataError(f"q2n supports at most 8 bands, got {bands}")
    if padded != bands:
        pad = ((0, 0), (0, 0), (0, padded - bands))
        x = np.pad(x, pad)
        y = np.pad(y, pad)
    if x.shape[0] < window or x.shape[1] < window:
        raise DataError(
            f"image {x.shape[:2]} has no complete {window}x{window} window")
    values = [
        _q2n_window(x[i:i + window, j:j + window].reshape(-1, padded),
                    y[i:i + window, j:j + window].reshape(-1, padded))
        for i, j in _iter_windows(x.shape[0], x.shape[1], window)
    ]
    return float(np.mean(values))


def _fusion_ratio(fused: np.ndarray, lrms: np.ndarray, window: int) -> int:
    if fused.shape[2] != lrms.shape[2]:
        raise DataError(
            f"band counts differ: {fused.shape[2]} vs {lrms.shape[2]}")
    ratio, rem = divmod(fused.shape[0], lrms.shape[0])
    if rem or fused.shape[1] != lrms.shape[1] * ratio:
        raise DataError(
            f"fused shape {fused.shape[:2]} is not an integer multiple "
            f"of the low-resolution shape {lrms.shape[:2]}")
    if window % ratio:
        raise DataError(
            f"window {window} is not divisible by the ratio {ratio}")
    return ratio


def d_lambda(fused, lrms, window: int = 32, p: float = 1.0) -> float:
    """Spectral distortion: drift of inter-band UIQI across scales.

    Compares the UIQI of every ordered band pair of the fused image
    (windows of ``window``) against the same pair of the original
    low-resolution bands (windows scaled down by the ratio), averaging
    ``|difference| ** p`` and taking the ``1/p`` root.
    """
    f = _as_bands(fused)
    m = _as_bands(lrms)
    ratio = _fusion_ratio(f, m, window)
    bands = f.shape[2]
    if bands < 2:
        raise DataError("spectral distortion needs at least two bands")
    total = 0.0
    for k in range(bands):
        for l in range(k + 1, bands):
            q_f = uiqi(f[:, :, k], f[:, :, l], window)
            q_m = uiqi(m[:, :, k], m[:, :, l], window // ratio)
            total += 2.0 * abs(q_f - q_m) ** p
    return float((total / (bands * (bands - 1))) ** (1.0 / p))


def d_s(fused, lrms, pan, window: int = 32, q: float = 1.0) -> float:
    """Spatial distortion: drift of band-to-pan UIQI across scales.

    The panchromatic plane is degraded to the low resolution with its
    sensor's modulation-transfer-function blur followed by decimation;
    each fused band is compared against the full pan, each original band
    against the degraded pan, and ``|difference| ** q`` is averaged.
    ``pan`` must be a pan image wrapper so the sensor blur is known.
    """
    f = _as_bands(fused)
    m = _as_bands(lrms)
    ratio = _fusion_ratio(f, m, window)
    pan_data = np.asarray(pan.data, dtype=np.float64)
    if pan_data.shape != f.shape[:2]:
        raise DataError(
            f"pan shape {pan_data.shape} does not match fused {f.shape[:2]}")
    kernel = mtf_gaussian_kernel(pan.sensor.pan_nyquist_gain, ratio)
    pan_low = decimate(lowpass(pan_data, kernel), ratio)
    total = 0.0
    for k in range(f.shape[2]):
        q_f = uiqi(f[:, :, k], pan_data, window)
        q_m = uiqi(m[:, :, k], pan_low, window // ratio)
        total += abs(q_f - q_m) ** q
    return float((total / f.shape[2]) ** (1.0 / q))


def qnr(d_lambda_value: float, d_s_value: float,
        alpha: float = 1.0, beta: float = 1.0) -> float:
    """Quality with no reference: ``(1 - D_lambda)^a * (1 - D_s)^b``."""
    return float((1.0 - d_lambda_value) ** alpha * (1.0 - d_s_value) ** beta)


def reference_metrics(reference, estimate, ratio: int) -> dict:
    """All reduced-resolution scores of an estimate against ground truth."""
    return {
        "sam": sam(reference, estimate),
        "ergas": ergas(reference, estimate, ratio),
        "scc": scc(reference, estimate),
        "q2n": q2n(reference, estimate),
    }


def no_reference_metrics(fused, lrms, pan, window: int = 32) -> dict:
    """All full-resolution scores of a fused product, no ground truth."""
    dl = d_lambda(fused, lrms, window)
    ds = d_s(fused, lrms, pan, window)
    return {"d_lambda": dl, "d_s": ds, "qnr": qnr(dl, ds)}


@dataclass
class EvalReport:
    """Accumulates per-method, per-image metric rows and writes CSV.

    The CSV layout is ``method,image`` followed by the metric columns in
    :data:`METRIC_NAMES` order.  Values are formatted with six
    significant digits; metrics absent from a row are left empty.
    Provenance key/value pairs are emitted as leading ``#`` comment
    lines.  :meth:`add_aggregates` appends ``__mean`` and ``__std``
    pseudo-image rows per method (population standard deviation).
    """

    rows: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def add(self, method: str, image: str, **values) -> None:
        unknown = set(values) - set(METRIC_NAMES)
        if unknown:
            raise ValueError(f"unknown metrics: {sorted(unknown)}")
        row = {"method": str(method), "image": str(image)}
        row.update({name: float(value) for name, value in values.items()})
        self.rows.append(row)

    def methods(self) -> list:
        seen = []
        for row in self.rows:
            if row["method"] not in seen:
                seen.append(row["method"])
        return seen

    def add_aggregates(self) -> None:
        """Append per-method mean and std rows over the plain image rows."""
        aggregates = []
        for method in self.methods():
            plain = [row for row in self.rows
                     if row["method"] == method
                     and not row["image"].startswith("__")]
            mean_row = {"method": method, "image": "__mean"}
            std_row = {"method": method, "image": "__std"}
            for name in METRIC_NAMES:
                values = [row[name] for row in plain if name in row]
                if values:
                    mean_row[name] = float(np.mean(values))
                    std_row[name] = float(np.std(values))
            aggregates.extend([mean_row, std_row])
        self.rows.extend(aggregates)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as handle:
            for key, value in self.provenance.items():
                handle.write(f"# {key}: {value}\n")
            writer = csv.writer(handle)
            writer.writerow(("method", "image") + METRIC_NAMES)
            for row in self.rows:
                writer.writerow(
                    [row["method"], row["image"]]
                    + [format(row[name], ".6g") if name in row else ""
                       for name in METRIC_NAMES])

    @classmethod
    def read_csv(cls, path) -> "EvalReport":
        report = cls()
        with open(path, newline="") as handle:
            lines = []
            for line in handle:
                if line.startswith("#"):
                    key, _, value = line[1:].strip().partition(":")
                    report.provenance[key.strip()] = value.strip()
                else:
                    lines.append(line)
        for record in csv.DictReader(lines):
            values = {name: float(record[name]) for name in METRIC_NAMES
                      if record.get(name)}
            report.add(record["method"], record["image"], **values)
        return report
