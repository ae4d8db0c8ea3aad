"""Two-level detail-injection fusion network and its ablation variants.

The network upsamples a low-resolution multispectral stack in two ×2 stages.
A shared PAN branch extracts a 64-channel feature map and projects it to a
per-band detail map at full and half resolution. Each stage injects the
detail map into the upsampled bands through a learned sigmoid gate (MRAB),
then refines the result with a multi-scale convolution block (MSCB) that
mixes 3/5/7 kernels and adds the stage input back as a residual.

Everything is expressed over :class:`~pansharp.grad.Tensor`, so a forward
pass run under an active :class:`~pansharp.grad.Tape` is differentiable in
every parameter. Parameters live in a flat ``{name: Tensor}`` dict whose
canonical order is fixed by :func:`parameter_plan`.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .grad import (
    DTYPE,
    SplitMix64,
    Tensor,
    avgpool2d,
    bilinear_upsample,
    concat,
    conv2d,
    conv2d_transpose,
    derive_seed,
    kaiming_uniform,
    l1_loss,
    maxpool2d,
    pixel_shuffle,
    relu,
    scale,
    sigmoid,
)
from .grad.tensor import Tape

UPSAMPLE_MODES = ("pixel_shuffle", "bilinear", "deconv")
GAIN_MODES = ("learned_attention", "tmra_hpm")

_CKPT_MAGIC = b"PSC1"
_CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sI8x")
_U32 = struct.Struct("<I")


@dataclass(frozen=True)
class TdnetConfig:
    """Architecture hyperparameters and variant switches.

    ``mscb_width`` is the per-kernel channel count inside the multi-scale
    block; the default of 38 puts the 8-band parameter count near 5.5e5.
    ``levels=1`` collapses the model to a single ×``ratio`` stage driven by
    the full-resolution detail map only.
    """

    bands: int
    ratio: int = 4
    feature_width: int = 64
    mscb_kernels: tuple[int, ...] = (3, 5, 7)
    mscb_width: int = 38
    upsample_mode: str = "pixel_shuffle"
    use_mrab: bool = True
    use_pan_branch: bool = True
    levels: int = 2
    gain_mode: str = "learned_attention"

    def __post_init__(self):
        object.__setattr__(self, "mscb_kernels", tuple(self.mscb_kernels))
        if self.bands < 1:
            raise ValueError(f"bands must be >= 1, got {self.bands}")
        if self.levels not in (1, 2):
            raise ValueError(f"levels must be 1 or 2, got {self.levels}")
        if self.levels == 2 and self.ratio != 4:
            raise ValueError(
                f"a two-level model implies two x2 stages, so ratio must be 4 "
                f"(got {self.ratio})"
            )
        if self.ratio not in (2, 4):
            raise ValueError(f"ratio must be 2 or 4, got {self.ratio}")
        if not self.mscb_kernels:
            raise ValueError("mscb_kernels must be nonempty")
        for k in self.mscb_kernels:
            if k < 1 or k % 2 == 0:
                raise ValueError(f"mscb kernel sizes must be odd, got {k}")
        if self.feature_width < 1:
            raise ValueError(f"feature_width must be >= 1, got {self.feature_width}")
        if self.mscb_width < 1:
            raise ValueError(f"mscb_width must be >= 1, got {self.mscb_width}")
        if self.upsample_mode not in UPSAMPLE_MODES:
            raise ValueError(
                f"unknown upsample_mode {self.upsample_mode!r} "
                f"(expected one of {UPSAMPLE_MODES})"
            )
        if self.gain_mode not in GAIN_MODES:
            raise ValueError(
                f"unknown gain_mode {self.gain_mode!r} (expected one of {GAIN_MODES})"
            )

    @property
    def level_names(self) -> tuple[str, ...]:
        return ("level1", "level2") if self.levels == 2 else ("level1",)

    @property
    def stage_scale(self) -> int:
        """Upsampling factor of each stage (2 for two stages, else ratio)."""
        return 2 if self.levels == 2 else self.ratio


@dataclass
class TdnetOutput:
    """Half-resolution and full-resolution fused stacks.

    ``ms_hat_d`` is ``None`` for a single-level model.
    """

    ms_hat_d: Tensor | None
    ms_hat: Tensor


def config_to_dict(config: TdnetConfig) -> dict:
    payload = dataclasses.asdict(config)
    payload["mscb_kernels"] = list(config.mscb_kernels)
    return payload


def config_from_dict(payload: dict) -> TdnetConfig:
    known = {f.name for f in dataclasses.fields(TdnetConfig)}
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ValueError(f"unknown model config keys: {', '.join(unknown)}")
    kwargs = dict(payload)
    if "mscb_kernels" in kwargs:
        kwargs["mscb_kernels"] = tuple(int(k) for k in kwargs["mscb_kernels"])
    return TdnetConfig(**kwargs)


# -- parameters ------------------------------------------------------------


def parameter_plan(config: TdnetConfig) -> list[tuple[str, tuple[int, ...], int | None]]:
    """Canonical layer inventory: (name, shape, fan_in; None means zeros).

    The order here fixes both the initialization stream layout and the
    checkpoint serialization order.
    """
    c = config.bands
    fw = config.feature_width
    plan: list[tuple[str, tuple[int, ...], int | None]] = []

    def conv(name: str, cin: int, cout: int, k: int) -> None:
        plan.append((f"{name}.w", (cout, cin, k, k), cin * k * k))
        plan.append((f"{name}.b", (cout,), None))

    def deconv(name: str, cin: int, cout: int, k: int = 4) -> None:
        plan.append((f"{name}.w", (cin, cout, k, k), cin * k * k))
        plan.append((f"{name}.b", (cout,), None))

    if config.use_pan_branch:
        conv("pan.entry", 1, fw, 3)
        conv("pan.res1", fw, fw, 3)
        conv("pan.res2", fw, fw, 3)
        conv("pan.detail_full", fw, c, 3)
        if config.levels == 2:
            conv("pan.detail_half", fw, c, 3)

    s = config.stage_scale
    for level in config.level_names:
        if config.upsample_mode == "pixel_shuffle":
            conv(f"{level}.up", c, c * s * s, 3)
        elif config.upsample_mode == "deconv":
            if s == 2:
                deconv(f"{level}.up", c, c)
            else:
                deconv(f"{level}.up1", c, c)
                deconv(f"{level}.up2", c, c)
        if config.use_mrab and config.gain_mode == "learned_attention":
            conv(f"{level}.gate1", 2 * c, fw, 3)
            conv(f"{level}.gate2", fw, c, 3)
        conv(f"{level}.mix.entry", 2 * c, fw, 3)
        for k in config.mscb_kernels:
            conv(f"{level}.mix.k{k}", fw, config.mscb_width, k)
        conv(f"{level}.mix.blend", len(config.mscb_kernels) * config.mscb_width, c, 3)
    return plan


def init_params(config: TdnetConfig, seed: int = 0) -> dict[str, Tensor]:
    """Deterministic parameter dict: Kaiming-uniform weights, zero biases.

    Each layer draws from its own seed stream keyed by the layer name, so
    the values of one layer do not depend on the presence of another.
    """
    params: dict[str, Tensor] = {}
    for name, shape, fan_in in parameter_plan(config):
        if fan_in is None:
            data = np.zeros(shape, dtype=DTYPE)
        else:
            rng = SplitMix64(derive_seed(seed, "params", name))
            data = kaiming_uniform(rng, shape, fan_in)
        params[name] = Tensor(data, requires_grad=True)
    return params


def count_parameters(params: dict[str, Tensor]) -> int:
    return sum(t.size for t in params.values())


# -- forward blocks --------------------------------------------------------


def _conv_layer(params: dict[str, Tensor], name: str, x: Tensor) -> Tensor:
    w = params[f"{name}.w"]
    return conv2d(x, w, params[f"{name}.b"], padding=w.shape[2] // 2)


def pan_branch(pan: Tensor, params: dict[str, Tensor],
               config: TdnetConfig) -> tuple[Tensor, Tensor | None]:
    """Detail extraction: shared features, then per-band projections.

    Returns the full-resolution detail map and, for a two-level model, a
    half-resolution one taken after a 2x2 max-pool of the shared features.
    """
    if pan.data.ndim != 4 or pan.shape[1] != 1:
        raise ValueError(f"pan_branch: expected a (B,1,H,W) input, got {pan.shape}")
    if config.levels == 2 and (pan.shape[2] % 2 or pan.shape[3] % 2):
        raise ValueError(
            f"pan_branch: spatial dims must be even to pool, got {pan.shape[2:]}"
        )
    feats = relu(_conv_layer(params, "pan.entry", pan))
    body = _conv_layer(params, "pan.res2",
                       relu(_conv_layer(params, "pan.res1", feats)))
    shared = relu(feats + body)
    d_full = _conv_layer(params, "pan.detail_full", shared)
    if config.levels != 2:
        return d_full, None
    d_half = _conv_layer(params, "pan.detail_half", maxpool2d(shared, 2))
    return d_full, d_half


def _broadcast_pan_details(pan: Tensor,
                           config: TdnetConfig) -> tuple[Tensor, Tensor | None]:
    """PAN-branch substitute: the raw PAN replicated across all bands."""
    c = config.bands
    d_full = Tensor(np.repeat(pan.data, c, axis=1))
    if config.levels != 2:
        return d_full, None
    half = avgpool2d(pan, 2)
    return d_full, Tensor(np.repeat(half.data, c, axis=1))


def _upsample(x: Tensor, params: dict[str, Tensor], level: str, s: int,
              config: TdnetConfig) -> Tensor:
    if config.upsample_mode == "bilinear":
        return bilinear_upsample(x, s)
    if config.upsample_mode == "deconv":
        if s == 2:
            return conv2d_transpose(x, params[f"{level}.up.w"],
                                    params[f"{level}.up.b"])
        mid = conv2d_transpose(x, params[f"{level}.up1.w"], params[f"{level}.up1.b"])
        return conv2d_transpose(mid, params[f"{level}.up2.w"],
                                params[f"{level}.up2.b"])
    return pixel_shuffle(_conv_layer(params, f"{level}.up", x), s)


def _divide_by_constant(x: Tensor, denom: np.ndarray) -> Tensor:
    """x / denom with denom held constant; gradient is g / denom."""
    out = Tensor(x.data / denom)
    tape = Tape.active()
    if tape is not None and x.requires_grad:

        def backward_fn(g: np.ndarray) -> None:
            x.accumulate_grad(g / denom)

        tape.record(out, backward_fn)
    return out


def tmra_injection(ms_up: Tensor, pan_l, d: Tensor,
                   epsilon: float = 1e-4) -> Tensor:
    """Ratio-gain injection: ms_up + (ms_up / max(pan_l, epsilon)) * d.

    ``pan_l`` is a smoothed PAN raster treated as a constant — it may be a
    Tensor or plain array, single-channel (broadcast across bands) or
    per-band. Gradients flow through both ``ms_up`` factors and ``d``.
    """
    low = pan_l.data if isinstance(pan_l, Tensor) else np.asarray(pan_l, dtype=DTYPE)
    if low.ndim != 4:
        raise ValueError(f"tmra_injection: pan_l must be 4-D, got shape {low.shape}")
    if low.shape[1] == 1 and ms_up.shape[1] != 1:
        low = np.repeat(low, ms_up.shape[1], axis=1)
    if low.shape != ms_up.shape:
        raise ValueError(
            f"tmra_injection: pan_l shape {low.shape} does not match "
            f"ms_up shape {ms_up.shape}"
        )
    denom = np.maximum(low, DTYPE(epsilon))
    gain = _divide_by_constant(ms_up, denom)
    return ms_up + gain * d


def _smoothed_pan_pyramid(pan: Tensor, config: TdnetConfig) -> dict[str, Tensor]:
    """Per-level smoothed PAN for the ratio gain: block-mean down, bilinear up.

    The PAN input carries no gradient, so none of this is tape-recorded.
    """
    if config.levels == 1:
        r = config.ratio
        return {"level1": bilinear_upsample(avgpool2d(pan, r), r)}
    half = avgpool2d(pan, 2)
    return {
        "level1": bilinear_upsample(avgpool2d(half, 2), 2),
        "level2": bilinear_upsample(avgpool2d(pan, 2), 2),
    }


def mrab(ms_low: Tensor, d: Tensor, params: dict[str, Tensor],
         config: TdnetConfig, level: str = "level1", *,
         pan_low: Tensor | None = None,
         gate_override: float | None = None) -> Tensor:
    """Upsample ×2 (or ×ratio) and inject the detail map through a gain.

    The learned gain is a sigmoid gate over the concatenated inputs;
    ``gate_override`` replaces it with a constant (a test hook for the
    degenerate gains 0 and 1). With ``use_mrab`` off the detail map is
    added directly; in ``tmra_hpm`` mode the gain is the band-to-PAN ratio.
    """
    if ms_low.data.ndim != 4 or d.data.ndim != 4:
        raise ValueError("mrab: inputs must be 4-D (B,C,H,W)")
    if d.shape[0] != ms_low.shape[0] or d.shape[1] != ms_low.shape[1]:
        raise ValueError(
            f"mrab: detail map {d.shape} does not match input {ms_low.shape} "
            f"in batch/channel dims"
        )
    s = config.stage_scale
    if d.shape[2] != s * ms_low.shape[2] or d.shape[3] != s * ms_low.shape[3]:
        raise ValueError(
            f"mrab: detail map {d.shape} must be {s}x the input {ms_low.shape} "
            f"spatially"
        )
    ms_up = _upsample(ms_low, params, level, s, config)
    if not config.use_mrab:
        return ms_up + d
    if config.gain_mode == "tmra_hpm":
        if pan_low is None:
            raise ValueError("mrab: tmra_hpm mode needs the smoothed PAN raster")
        return tmra_injection(ms_up, pan_low, d)
    if gate_override is not None:
        gain = Tensor(np.full(ms_up.shape, gate_override, dtype=DTYPE))
    else:
        hidden = relu(_conv_layer(params, f"{level}.gate1", concat([ms_up, d])))
        gain = sigmoid(_conv_layer(params, f"{level}.gate2", hidden))
    return ms_up + gain * d


def mscb(x: Tensor, d: Tensor, params: dict[str, Tensor],
         config: TdnetConfig, level: str = "level1") -> Tensor:
    """Multi-scale refinement: parallel odd kernels over shared features.

    concat(x, d) -> entry conv + relu -> one conv per kernel size ->
    concat -> blend conv back to the band count -> + x (residual).
    """
    if x.shape != d.shape:
        raise ValueError(
            f"mscb: fused input {x.shape} and detail map {d.shape} must match"
        )
    h = relu(_conv_layer(params, f"{level}.mix.entry", concat([x, d])))
    branches = [_conv_layer(params, f"{level}.mix.k{k}", h)
                for k in config.mscb_kernels]
    return _conv_layer(params, f"{level}.mix.blend", concat(branches)) + x


def tdnet_forward(lrms: Tensor, pan: Tensor, params: dict[str, Tensor],
                  config: TdnetConfig, *,
                  gate_override: float | None = None) -> TdnetOutput:
    """Run the full network: PAN details, then one injection+refine stage
    per level, coarsest first.
    """
    if lrms.data.ndim != 4 or pan.data.ndim != 4:
        raise ValueError("tdnet_forward: inputs must be 4-D (B,C,H,W)")
    if lrms.shape[1] != config.bands:
        raise ValueError(
            f"tdnet_forward: input has {lrms.shape[1]} bands but the model "
            f"expects {config.bands}"
        )
    if pan.shape[0] != lrms.shape[0] or pan.shape[1] != 1:
        raise ValueError(
            f"tdnet_forward: pan shape {pan.shape} does not pair with "
            f"lrms shape {lrms.shape}"
        )
    r = config.ratio
    if pan.shape[2] != r * lrms.shape[2] or pan.shape[3] != r * lrms.shape[3]:
        raise ValueError(
            f"tdnet_forward: pan dims {pan.shape[2:]} must be {r}x the "
            f"lrms dims {lrms.shape[2:]}"
        )

    if config.use_pan_branch:
        d_full, d_half = pan_branch(pan, params, config)
    else:
        d_full, d_half = _broadcast_pan_details(pan, config)
    pan_lows = (_smoothed_pan_pyramid(pan, config)
                if config.gain_mode == "tmra_hpm" else {})

    if config.levels == 1:
        fused = mrab(lrms, d_full, params, config, "level1",
                     pan_low=pan_lows.get("level1"), gate_override=gate_override)
        return TdnetOutput(ms_hat_d=None,
                           ms_hat=mscb(fused, d_full, params, config, "level1"))

    first = mrab(lrms, d_half, params, config, "level1",
                 pan_low=pan_lows.get("level1"), gate_override=gate_override)
    ms_hat_d = mscb(first, d_half, params, config, "level1")
    second = mrab(ms_hat_d, d_full, params, config, "level2",
                  pan_low=pan_lows.get("level2"), gate_override=gate_override)
    ms_hat = mscb(second, d_full, params, config, "level2")
    return TdnetOutput(ms_hat_d=ms_hat_d, ms_hat=ms_hat)


def tdnet_loss(out: TdnetOutput, gt: Tensor, gt_d: Tensor | None,
               gamma: float = 0.4) -> Tensor:
    """gamma * l1(half-res output, gt_d) + (1 - gamma) * l1(full output, gt)."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    if out.ms_hat_d is None:
        if gamma != 0.0:
            raise ValueError(
                "invalid variant combination: a single-level model has no "
                "half-resolution output, so gamma must be 0"
            )
        return l1_loss(out.ms_hat, gt)
    if gt_d is None:
        raise ValueError("tdnet_loss: a two-level model needs the gt_d target")
    return (scale(l1_loss(out.ms_hat_d, gt_d), gamma)
            + scale(l1_loss(out.ms_hat, gt), 1.0 - gamma))


# -- variants --------------------------------------------------------------


def ablation_configs(base: TdnetConfig) -> dict[str, TdnetConfig]:
    """The full model plus its eight named single-change variants.

    ``tdnet-minus`` shrinks the multi-scale width to a third (38 -> 12 at
    the default width).
    """
    replace = dataclasses.replace
    return {
        "tdnet": base,
        "wo-mrab": replace(base, use_mrab=False),
        "sscb": replace(base, mscb_kernels=(5,)),
        "wo-pan-branch": replace(base, use_pan_branch=False),
        "single-stage": replace(base, levels=1),
        "bilinear": replace(base, upsample_mode="bilinear"),
        "deconv": replace(base, upsample_mode="deconv"),
        "tdnet-minus": replace(base, mscb_width=max(1, base.mscb_width // 3)),
        "tdnet-tmra": replace(base, gain_mode="tmra_hpm"),
    }


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(path, params: dict[str, Tensor], config: TdnetConfig) -> None:
    """Write config + named f32 parameter blobs; round-trips bit-exactly."""
    config_bytes = json.dumps(config_to_dict(config), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(_CKPT_MAGIC, _CKPT_VERSION))
        fh.write(_U32.pack(len(config_bytes)))
        fh.write(config_bytes)
        fh.write(_U32.pack(len(params)))
        for name, tensor in params.items():
            encoded = name.encode("utf-8")
            fh.write(_U32.pack(len(encoded)))
            fh.write(encoded)
            fh.write(_U32.pack(tensor.data.ndim))
            for dim in tensor.data.shape:
                fh.write(_U32.pack(dim))
            fh.write(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    chunk = fh.read(n)
    if len(chunk) != n:
        raise DataError(f"checkpoint truncated while reading {what}")
    return chunk


def load_checkpoint(path) -> tuple[dict[str, Tensor], TdnetConfig]:
    """Read a checkpoint back into (params, config); validates the layout."""
    with open(path, "rb") as fh:
        magic, version = _CKPT_HEADER.unpack(_read_exact(fh, _CKPT_HEADER.size,
                                                         "header"))
        if magic != _CKPT_MAGIC:
            raise DataError(f"not a checkpoint file: bad magic {magic!r}")
        if version != _CKPT_VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        (config_len,) = _U32.unpack(_read_exact(fh, 4, "config length"))
        try:
            payload = json.loads(_read_exact(fh, config_len, "config"))
            config = config_from_dict(payload)
        except (ValueError, TypeError) as exc:
            raise DataError(f"malformed checkpoint config: {exc}") from exc
        (n_params,) = _U32.unpack(_read_exact(fh, 4, "parameter count"))
        params: dict[str, Tensor] = {}
        for _ in range(n_params):
            (name_len,) = _U32.unpack(_read_exact(fh, 4, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (ndim,) = _U32.unpack(_read_exact(fh, 4, "rank"))
            shape = tuple(_U32.unpack(_read_exact(fh, 4, "dim"))[0]
                          for _ in range(ndim))
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = _read_exact(fh, 4 * count, f"data for {name}")
            data = np.frombuffer(raw, dtype="<f4").reshape(shape)
            params[name] = Tensor(data.astype(DTYPE), requires_grad=True)
        if fh.read(1):
            raise DataError("checkpoint has trailing bytes")

    expected = {(name, shape) for name, shape, _ in parameter_plan(config)}
    actual = {(name, tensor.data.shape) for name, tensor in params.items()}
    if expected != actual:
        raise DataError(
            "checkpoint parameters do not match the architecture its config "
            "declares"
        )
    return params, config
