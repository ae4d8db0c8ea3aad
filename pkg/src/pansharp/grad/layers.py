"""Spatial network layers on B x C x H x W float32 tensors.

Convolutions lower onto matrix multiplies via an im2col buffer that is
rebuilt in batch chunks, keeping peak memory bounded; the input-gradient
pass reuses the same kernel as a convolution with swapped/flipped weights,
so everything heavy runs through BLAS.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DTYPE, Tensor, _record

# im2col scratch ceiling per chunk, in float32 elements (~256 MB).
_COL_BUDGET = 64 << 20


def _chunk_batches(batch: int, per_item: int) -> int:
    """Batch chunk size that keeps the im2col buffer under budget."""
    return max(1, min(batch, _COL_BUDGET // max(per_item, 1)))


def _corr2d(x: np.ndarray, w: np.ndarray, padding: int, stride: int = 1) -> np.ndarray:
    """Raw cross-correlation of x (B,Ci,H,W) with w (Co,Ci,k,k)."""
    batch, cin, h, wid = x.shape
    cout, _, k, _ = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wid + 2 * padding - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(
            f"conv2d: spatial input {h}x{wid} too small for kernel {k} "
            f"with padding {padding}"
        )
    xp = x
    if padding:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    wmat = w.reshape(cout, cin * k * k)
    out = np.empty((batch, cout, ho, wo), dtype=DTYPE)
    step = _chunk_batches(batch, cin * k * k * ho * wo)
    for lo in range(0, batch, step):
        hi = min(lo + step, batch)
        win = sliding_window_view(xp[lo:hi], (k, k), axis=(2, 3))
        win = win[:, :, ::stride, ::stride]
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
        cols = cols.reshape((hi - lo) * ho * wo, cin * k * k)
        prod = cols @ wmat.T
        out[lo:hi] = prod.reshape(hi - lo, ho, wo, cout).transpose(0, 3, 1, 2)
    return out


def _corr2d_weight_grad(x: np.ndarray, g: np.ndarray, k: int, padding: int) -> np.ndarray:
    """Gradient wrt conv weights: correlate input with the output gradient."""
    cin = x.shape[1]
    cout = g.shape[1]
    ho, wo = g.shape[2], g.shape[3]
    xp = x
    if padding:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    gw = np.empty((cout, cin, k, k), dtype=DTYPE)
    for di in range(k):
        for dj in range(k):
            patch = xp[:, :, di:di + ho, dj:dj + wo]
            gw[:, :, di, dj] = np.tensordot(g, patch, axes=((0, 2, 3), (0, 2, 3)))
    return gw


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, padding: int) -> Tensor:
    """2-D convolution, stride 1, odd square kernel, zero padding.

    x: (B, Cin, H, W); w: (Cout, Cin, k, k); b: (Cout,) or None.
    """
    if x.data.ndim != 4:
        raise ValueError(f"conv2d: input must be 4-D (B,C,H,W), got shape {x.shape}")
    if w.data.ndim != 4:
        raise ValueError(f"conv2d: weight must be 4-D (Cout,Cin,k,k), got shape {w.shape}")
    cout, cin_w, kh, kw = w.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square with odd size, got {kh}x{kw}")
    if x.shape[1] != cin_w:
        raise ValueError(
            f"conv2d: input channel axis has {x.shape[1]} channels but weight "
            f"expects {cin_w}"
        )
    if b is not None and b.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {b.shape} != ({cout},)")

    out_data = _corr2d(x.data, w.data, padding)
    if b is not None:
        out_data += b.data[None, :, None, None]
    out = Tensor(out_data)
    k = kh

    def backward_fn(g: np.ndarray) -> None:
        if b is not None and b.requires_grad:
            b.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            w.accumulate_grad(_corr2d_weight_grad(x.data, g, k, padding))
        if x.requires_grad:
            # Full correlation with channel-swapped, spatially flipped weights.
            w_swap = np.ascontiguousarray(w.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
            x.accumulate_grad(_corr2d(g, w_swap, k - 1 - padding))

    inputs = (x, w) if b is None else (x, w, b)
    return _record(out, inputs, backward_fn)


def conv2d_transpose(x: Tensor, w: Tensor, b: Tensor | None,
                     stride: int = 2, padding: int = 1) -> Tensor:
    """Transposed convolution (learned upsampling).

    x: (B, Cin, H, W); w: (Cin, Cout, k, k); output is
    (H-1)*stride - 2*padding + k per spatial axis (2x for k=4, s=2, p=1).
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv2d_transpose: input and weight must be 4-D")
    cin_w, cout, k, kw = w.shape
    if k != kw:
        raise ValueError(f"conv2d_transpose: kernel must be square, got {k}x{kw}")
    if x.shape[1] != cin_w:
        raise ValueError(
            f"conv2d_transpose: input channel axis has {x.shape[1]} channels "
            f"but weight expects {cin_w}"
        )
    batch, _, h, wid = x.shape
    out_h = (h - 1) * stride - 2 * padding + k
    out_w = (wid - 1) * stride - 2 * padding + k
    if out_h <= 0 or out_w <= 0:
        raise ValueError("conv2d_transpose: output size would be empty")

    # Zero-dilate the input, then correlate with flipped swapped weights.
    xd = np.zeros((batch, cin_w, (h - 1) * stride + 1, (wid - 1) * stride + 1), DTYPE)
    xd[:, :, ::stride, ::stride] = x.data
    w_conv = np.ascontiguousarray(w.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    out_data = _corr2d(xd, w_conv, k - 1 - padding)
    if b is not None:
        out_data += b.data[None, :, None, None]
    out = Tensor(out_data)

    def backward_fn(g: np.ndarray) -> None:
        if b is not None and b.requires_grad:
            b.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            x.accumulate_grad(_corr2d(g, w.data, padding, stride=stride))
        if w.requires_grad:
            gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
            gw = np.empty_like(w.data)
            span_h = (h - 1) * stride + 1
            span_w = (wid - 1) * stride + 1
            for di in range(k):
                for dj in range(k):
                    patch = gp[:, :, di:di + span_h:stride, dj:dj + span_w:stride]
                    gw[:, :, di, dj] = np.tensordot(
                        x.data, patch, axes=((0, 2, 3), (0, 2, 3)))
            w.accumulate_grad(gw)

    inputs = (x, w) if b is None else (x, w, b)
    return _record(out, inputs, backward_fn)


def _window_split(data: np.ndarray, k: int) -> np.ndarray:
    """(B,C,H,W) -> (B,C,Ho,Wo,k*k) non-overlapping windows, row-major."""
    batch, ch, h, w = data.shape
    v = data.reshape(batch, ch, h // k, k, w // k, k)
    return v.transpose(0, 1, 2, 4, 3, 5).reshape(batch, ch, h // k, w // k, k * k)


def maxpool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k max pooling; ties keep the first window entry."""
    batch, ch, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"maxpool2d: spatial dims {h}x{w} not divisible by {k}")
    windows = _window_split(x.data, k)
    idx = windows.argmax(axis=-1)  # argmax takes the first maximal entry
    out = Tensor(np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0])

    def backward_fn(g: np.ndarray) -> None:
        gw = np.zeros((batch, ch, h // k, w // k, k * k), DTYPE)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gw = gw.reshape(batch, ch, h // k, w // k, k, k)
        x.accumulate_grad(
            gw.transpose(0, 1, 2, 4, 3, 5).reshape(batch, ch, h, w))

    return _record(out, (x,), backward_fn)


def avgpool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k mean pooling (the box degrade used in ablations)."""
    batch, ch, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"avgpool2d: spatial dims {h}x{w} not divisible by {k}")
    out = Tensor(_window_split(x.data, k).mean(axis=-1))
    inv = DTYPE(1.0 / (k * k))

    def backward_fn(g: np.ndarray) -> None:
        gx = np.repeat(np.repeat(g * inv, k, axis=2), k, axis=3)
        x.accumulate_grad(gx)

    return _record(out, (x,), backward_fn)


def pixel_shuffle(x: Tensor, s: int) -> Tensor:
    """Rearrange (B, C*s^2, H, W) -> (B, C, H*s, W*s).

    output[b, c, s*y+dy, s*x+dx] = input[b, c*s^2 + dy*s + dx, y, x]
    """
    batch, ch, h, w = x.shape
    if ch % (s * s):
        raise ValueError(f"pixel_shuffle: {ch} channels not divisible by s^2={s * s}")
    c_out = ch // (s * s)
    v = x.data.reshape(batch, c_out, s, s, h, w)
    out = Tensor(v.transpose(0, 1, 4, 2, 5, 3).reshape(batch, c_out, h * s, w * s))

    def backward_fn(g: np.ndarray) -> None:
        gv = g.reshape(batch, c_out, h, s, w, s)
        x.accumulate_grad(
            np.ascontiguousarray(gv.transpose(0, 1, 3, 5, 2, 4)).reshape(x.shape))

    return _record(out, (x,), backward_fn)


def pixel_unshuffle(x: Tensor, s: int) -> Tensor:
    """Exact inverse of pixel_shuffle: (B, C, H*s, W*s) -> (B, C*s^2, H, W)."""
    batch, ch, hs, ws = x.shape
    if hs % s or ws % s:
        raise ValueError(f"pixel_unshuffle: spatial dims {hs}x{ws} not divisible by {s}")
    h, w = hs // s, ws // s
    v = x.data.reshape(batch, ch, h, s, w, s)
    out = Tensor(v.transpose(0, 1, 3, 5, 2, 4).reshape(batch, ch * s * s, h, w))

    def backward_fn(g: np.ndarray) -> None:
        gv = g.reshape(batch, ch, s, s, h, w)
        x.accumulate_grad(
            np.ascontiguousarray(gv.transpose(0, 1, 4, 2, 5, 3)).reshape(x.shape))

    return _record(out, (x,), backward_fn)


def _bilinear_matrix(n_in: int, scale: int) -> np.ndarray:
    """Dense (n_in*scale, n_in) interpolation matrix, half-pixel centers."""
    n_out = n_in * scale
    mat = np.zeros((n_out, n_in), DTYPE)
    for o in range(n_out):
        src = (o + 0.5) / scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        t = src - i0
        mat[o, i0] += 1.0 - t
        mat[o, i1] += t
    return mat


def bilinear_upsample(x: Tensor, s: int) -> Tensor:
    """Fixed (non-learned) bilinear interpolation by integer factor s."""
    if s < 1:
        raise ValueError(f"bilinear_upsample: scale must be >= 1, got {s}")
    _, _, h, w = x.shape
    mh = _bilinear_matrix(h, s)
    mw = _bilinear_matrix(w, s)
    out = Tensor(np.einsum("ph,bchw,qw->bcpq", mh, x.data, mw, optimize=True))

    def backward_fn(g: np.ndarray) -> None:
        x.accumulate_grad(
            np.einsum("ph,bcpq,qw->bchw", mh, g, mw, optimize=True).astype(DTYPE))

    return _record(out, (x,), backward_fn)
