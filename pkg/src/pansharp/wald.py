"""Reduced-resolution dataset simulation and deterministic splitting.

The reduced-resolution protocol degrades both inputs by the sensor's
scale ratio so that the original multispectral patch can serve as the
ground-truth reference:

* ``gt``    -- 64x64xC patch cut from the original MS image;
* ``lrms``  -- ``gt`` blurred with the per-band sensor MTF and decimated
  by 4: the simulated low-resolution input;
* ``pan``   -- the co-located 256x256 original PAN patch degraded by 4
  with the PAN MTF;
* ``gt_d``  -- ``gt`` degraded by 2: the intermediate-scale target for
  the two-level network loss.

Also provides a deterministic synthetic scene generator (band-correlated
smooth random fields) so datasets can be simulated without any external
imagery, and a plain-file dataset directory layout:
``manifest.json`` plus one raster per role named ``{id}_{role}.psr1``
with role in ``{pan, lrms, gt, gtd}``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .container import read_psr1, write_psr1
from .errors import DataError
from .grad.rng import SplitMix64, derive_seed
from .imaging import (
    MsImage,
    PanImage,
    SensorSpec,
    decimate,
    get_sensor,
    lowpass,
    mtf_gaussian_kernel,
)

SPLIT_NAMES = ("train", "val", "test")
SAMPLE_ROLES = ("pan", "lrms", "gt", "gtd")
DEFAULT_RATIOS = (0.7, 0.2, 0.1)


def degrade(image, sensor: SensorSpec, factor: int) -> np.ndarray:
    """Blur with the sensor's MTF-matched Gaussian, then decimate.

    2-D input uses the PAN Nyquist gain; 3-D input uses the per-band
    gains and must carry exactly the sensor's band count.  The blur
    sigma is matched to the requested ``factor``, so a x2 degrade uses a
    narrower kernel than a x4 one.
    """
    data = np.asarray(getattr(image, "data", image), dtype=np.float64)
    if data.ndim not in (2, 3):
        raise DataError(f"expected a 2-D or 3-D raster, got shape {data.shape}")
    if data.shape[0] % factor or data.shape[1] % factor:
        raise DataError(
            f"raster dims {data.shape[:2]} are not divisible by {factor}")
    if data.ndim == 2:
        kernel = mtf_gaussian_kernel(sensor.pan_nyquist_gain, factor)
        return decimate(lowpass(data, kernel), factor)
    if data.shape[2] != sensor.bands:
        raise DataError(
            f"raster has {data.shape[2]} bands but sensor "
            f"'{sensor.name}' expects {sensor.bands}")
    low = np.empty_like(data[::factor, ::factor])
    for k in range(sensor.bands):
        kernel = mtf_gaussian_kernel(sensor.ms_nyquist_gains[k], factor)
        low[:, :, k] = decimate(lowpass(data[:, :, k], kernel), factor)
    return low


@dataclass
class SamplePair:
    """One training sample of the reduced-resolution protocol.

    All rasters are float32 in [0, 1].  ``lrms`` and ``pan`` are the
    network inputs, ``gt`` the final target and ``gt_d`` the half-scale
    target.
    """

    id: int
    pan: np.ndarray
    lrms: np.ndarray
    gt: np.ndarray
    gt_d: np.ndarray

    def __post_init__(self):
        patch = self.gt.shape[0]
        expected = {
            "pan": (patch, patch),
            "lrms": (patch // 4, patch // 4, self.gt.shape[2]),
            "gt_d": (patch // 2, patch // 2, self.gt.shape[2]),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DataError(
                    f"sample {self.id}: {name} has shape "
                    f"{getattr(self, name).shape}, expected {shape}")

    @property
    def bands(self) -> int:
        return self.gt.shape[2]


def make_samples(ms_full: MsImage, pan_full: PanImage,
                 patch: int = 64, stride: int | None = None) -> list:
    """Cut ground-truth patches and derive their degraded companions.

    Patches are taken from the original MS image on a stride grid (only
    patches fully inside the bounds); each sample's low-resolution input
    and targets are produced by :func:`degrade`.
    """
    if stride is None:
        stride = patch
    sensor = ms_full.sensor
    ratio = sensor.ratio
    _check_aligned(ms_full, pan_full)
    height, width = ms_full.data.shape[:2]
    if patch > height or patch > width:
        raise DataError(
            f"patch {patch} exceeds image bounds {height}x{width}")
    if patch % 4:
        raise DataError(f"patch size {patch} must be divisible by 4")
    samples = []
    for i in range(0, height - patch + 1, stride):
        for j in range(0, width - patch + 1, stride):
            gt = ms_full.data[i:i + patch, j:j + patch]
            pan_patch = pan_full.data[i * ratio:(i + patch) * ratio,
                                      j * ratio:(j + patch) * ratio]
            samples.append(SamplePair(
                id=len(samples),
                pan=degrade(pan_patch, sensor, ratio).astype(np.float32),
                lrms=degrade(gt, sensor, 4).astype(np.float32),
                gt=gt.astype(np.float32),
                gt_d=degrade(gt, sensor, 2).astype(np.float32),
            ))
    return samples


def full_res_set(ms: MsImage, pan: PanImage, patch_pan: int = 256) -> list:
    """Co-located original-resolution patch pairs for no-reference eval.

    No degradation is applied; the pairs feed fusion directly and are
    scored with the no-reference metrics.
    """
    _check_aligned(ms, pan)
    ratio = ms.sensor.ratio
    if patch_pan % ratio:
        raise DataError(
            f"pan patch {patch_pan} is not divisible by the ratio {ratio}")
    patch_ms = patch_pan // ratio
    height, width = ms.data.shape[:2]
    if patch_ms > height or patch_ms > width:
        raise DataError(
            f"pan patch {patch_pan} exceeds image bounds "
            f"{height * ratio}x{width * ratio}")
    pairs = []
    for i in range(0, height - patch_ms + 1, patch_ms):
        for j in range(0, width - patch_ms + 1, patch_ms):
            ms_patch = MsImage(ms.data[i:i + patch_ms, j:j + patch_ms],
                               ms.sensor, "full")
            pan_patch = PanImage(
                pan.data[i * ratio:(i + patch_ms) * ratio,
                         j * ratio:(j + patch_ms) * ratio],
                pan.sensor, "full")
            pairs.append((ms_patch, pan_patch))
    return pairs


def split(ids, ratios=DEFAULT_RATIOS, seed: int = 0) -> dict:
    """Deterministic shuffled split into train/val/test id lists.

    The id list is shuffled by the portable RNG, then cut contiguously;
    validation and test sizes are floored and the remainder goes to
    training, so 12580 ids yield 8806/2516/1258 at the default ratios.
    """
    ids = list(ids)
    if not ids:
        raise DataError("cannot split an empty id list")
    if len(ratios) != len(SPLIT_NAMES):
        raise DataError(f"expected {len(SPLIT_NAMES)} ratios, got {len(ratios)}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"split ratios {ratios} do not sum to 1")
    shuffled = list(ids)
    SplitMix64(derive_seed(seed, "split")).shuffle(shuffled)
    n_val = int(len(ids) * ratios[1])
    n_test = int(len(ids) * ratios[2])
    n_train = len(ids) - n_val - n_test
    return {
        "train": shuffled[:n_train],
        "val": shuffled[n_train:n_train + n_val],
        "test": shuffled[n_train + n_val:],
    }


@dataclass
class DatasetManifest:
    """Replay record for a simulated dataset directory."""

    seed: int
    sensor: str
    bands: int
    ratio: int
    splits: dict
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for name in SPLIT_NAMES:
            if name not in self.splits:
                raise DataError(f"manifest is missing the '{name}' split")
            overlap = seen & set(self.splits[name])
            if overlap:
                raise DataError(f"splits overlap on ids {sorted(overlap)[:5]}")
            seen |= set(self.splits[name])

    @property
    def all_ids(self) -> list:
        return [i for name in SPLIT_NAMES for i in self.splits[name]]

    def to_json(self) -> str:
        payload = {
            "seed": self.seed,
            "sensor": self.sensor,
            "bands": self.bands,
            "ratio": self.ratio,
            "splits": {name: list(map(int, self.splits[name]))
                       for name in SPLIT_NAMES},
            "provenance": self.provenance,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataError(f"malformed manifest: {exc}") from exc
        return cls(seed=payload["seed"], sensor=payload["sensor"],
                   bands=payload["bands"], ratio=payload["ratio"],
                   splits=payload["splits"],
                   provenance=payload.get("provenance", {}))


def write_dataset(directory, samples, manifest: DatasetManifest) -> None:
    """Write ``manifest.json`` and one PSR1 raster per sample role."""
    os.makedirs(directory, exist_ok=True)
    sensor = get_sensor(manifest.sensor)
    known = set(manifest.all_ids)
    missing = known - {sample.id for sample in samples}
    if missing:
        raise DataError(f"manifest references absent ids {sorted(missing)[:5]}")
    for sample in samples:
        if sample.id not in known:
            continue
        arrays = {"pan": sample.pan, "lrms": sample.lrms,
                  "gt": sample.gt, "gtd": sample.gt_d}
        for role, data in arrays.items():
            write_psr1(_raster_path(directory, sample.id, role),
                       data, sensor.name, sensor.bit_depth)
    with open(os.path.join(directory, "manifest.json"), "w") as handle:
        handle.write(manifest.to_json())


def read_manifest(directory) -> DatasetManifest:
    path = os.path.join(directory, "manifest.json")
    try:
        with open(path) as handle:
            return DatasetManifest.from_json(handle.read())
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc


def load_sample(directory, sample_id: int) -> SamplePair:
    arrays = {}
    for role in SAMPLE_ROLES:
        data, _, _ = read_psr1(_raster_path(directory, sample_id, role))
        arrays[role] = data[:, :, 0] if role == "pan" else data
    return SamplePair(id=sample_id, pan=arrays["pan"], lrms=arrays["lrms"],
                      gt=arrays["gt"], gt_d=arrays["gtd"])


def load_split(directory, split_name: str, limit: int | None = None) -> list:
    manifest = read_manifest(directory)
    if split_name not in manifest.splits:
        raise DataError(f"unknown split '{split_name}'")
    ids = manifest.splits[split_name][:limit]
    return [load_sample(directory, sample_id) for sample_id in ids]


def _raster_path(directory, sample_id: int, role: str) -> str:
    return os.path.join(directory, f"{sample_id}_{role}.psr1")


def _check_aligned(ms: MsImage, pan: PanImage) -> None:
    ratio = ms.sensor.ratio
    expected = (ms.data.shape[0] * ratio, ms.data.shape[1] * ratio)
    if pan.data.shape != expected:
        raise DataError(
            f"pan shape {pan.data.shape} does not match MS shape "
            f"{ms.data.shape[:2]} at ratio {ratio}")
    if pan.sensor.name != ms.sensor.name:
        raise DataError(
            f"sensor mismatch: {ms.sensor.name} vs {pan.sensor.name}")


#: (MTF gain, ratio, amplitude) triples for the octaves of the synthetic
#: scene's shared spatial structure, coarsest first.
SCENE_OCTAVES = ((0.1, 16, 1.0), (0.2, 8, 0.55), (0.3, 4, 0.3), (0.5, 2, 0.15))


def synthetic_scene(seed: int, sensor: SensorSpec,
                    ms_size: int = 128) -> tuple:
    """Deterministic synthetic aligned (MS, PAN) pair at full resolution.

    A shared spatial structure is built from smoothed noise octaves at
    PAN resolution; each band maps it through its own random radiometric
    response (plus a faint band-specific texture), and the PAN plane is
    the band average of that high-resolution world.  The MS image is the
    world degraded by the sensor ratio, so the pair behaves like an
    aligned acquisition with genuine PAN-only detail.
    """
    if ms_size % 4:
        raise DataError(f"ms_size {ms_size} must be divisible by 4")
    ratio = sensor.ratio
    pan_size = ms_size * ratio
    rng = SplitMix64(derive_seed(seed, "scene"))
    structure = np.zeros((pan_size, pan_size))
    for gain, octave_ratio, amplitude in SCENE_OCTAVES:
        noise = rng.uniform_array((pan_size, pan_size)).astype(np.float64)
        layer = lowpass(noise, mtf_gaussian_kernel(gain, octave_ratio))
        layer -= layer.mean()
        scale = np.abs(layer).max()
        if scale > 0:
            layer /= scale
        structure += amplitude * layer
    structure = (structure - structure.min())
    structure /= structure.max()

    world = np.empty((pan_size, pan_size, sensor.bands))
    texture_kernel = mtf_gaussian_kernel(0.4, 2)
    for k in range(sensor.bands):
        offset = rng.uniform(0.05, 0.15)
        slope = rng.uniform(0.5, 0.8)
        curve = rng.uniform(-0.25, 0.25)
        texture = rng.uniform_array((pan_size, pan_size)).astype(np.float64)
        texture = lowpass(texture, texture_kernel)
        texture -= texture.mean()
        band = offset + slope * structure + curve * structure * (1.0 - structure)
        world[:, :, k] = np.clip(band + 0.02 * texture, 0.0, 1.0)

    pan = PanImage(world.mean(axis=2), sensor, "full")
    ms = MsImage(degrade(world, sensor, ratio), sensor, "full")
    return ms, pan
