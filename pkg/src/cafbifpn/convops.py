"""Convolution variants for the feature-enhancement branches: standard
(arbitrary kernel, stride, zero padding, dilation), depthwise, bilinear
sampling, and deformable convolution with a learned offset field.

All spatial layouts are [channels, height, width], single image.  Every
function accepts plain tensors or tape nodes; gradients flow through
values and sampling weights, never through integer sample indices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericError, ShapeError
from .instrumentation import active_kink_monitor


@dataclass(frozen=True)
class Conv2dParams:
    """weights [C_out, C_in, k_h, k_w], bias [C_out]; symmetric zero padding
    given as one int or a (pad_h, pad_w) pair."""

    weights: object
    bias: object
    stride: int = 1
    padding: int | tuple[int, int] = 0
    dilation: int = 1

    @property
    def pad_hw(self) -> tuple[int, int]:
        p = self.padding
        return (p, p) if isinstance(p, int) else (int(p[0]), int(p[1]))


@dataclass(frozen=True)
class DeformableParams:
    """3x3 base convolution plus a 3x3 offset predictor emitting
    2*k_h*k_w channels, (dy, dx) interleaved per tap in row-major tap order."""

    base: Conv2dParams
    offset_predictor: Conv2dParams


def conv_output_extent(extent: int, pad: int, kernel: int, stride: int, dilation: int) -> int:
    return (extent + 2 * pad - dilation * (kernel - 1) - 1) // stride + 1


def _zero_pad2d(x, pad_h: int, pad_w: int):
    v = T._val(x)
    c, h, w = v.shape
    if pad_h > 0:
        band = T.zeros([c, pad_h, w])
        x = T.concat_axis([band, x, band], axis=1)
    if pad_w > 0:
        band = T.zeros([c, h + 2 * pad_h, pad_w])
        x = T.concat_axis([band, x, band], axis=2)
    return x


def conv2d(x, p: Conv2dParams):
    """out[o,y,x] = bias[o] + sum_{c,i,j} w[o,c,i,j] * padded[c, y*s + d*i, x*s + d*j]."""
    xv = T._val(x)
    wv = T._val(p.weights)
    bv = T._val(p.bias)
    if xv.ndim != 3 or wv.ndim != 4:
        raise ShapeError(f"conv2d wants [C,H,W] input and [O,C,kh,kw] weights, got {list(xv.shape)} / {list(wv.shape)}")
    c_out, c_in, kh, kw = wv.shape
    if xv.shape[0] != c_in:
        raise ShapeError(f"conv2d channel mismatch: input {xv.shape[0]} vs weights {c_in}")
    if bv.shape != (c_out,):
        raise ShapeError(f"conv2d bias dims {list(bv.shape)} != [{c_out}]")
    ph, pw = p.pad_hw
    s, d = p.stride, p.dilation
    h_out = conv_output_extent(xv.shape[1], ph, kh, s, d)
    w_out = conv_output_extent(xv.shape[2], pw, kw, s, d)
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"conv2d output extent non-positive: {h_out}x{w_out}")

    padded = _zero_pad2d(x, ph, pw)
    cols = []
    for i in range(kh):
        for j in range(kw):
            win = T.slice_axes(padded, (
                slice(None),
                slice(i * d, i * d + (h_out - 1) * s + 1, s),
                slice(j * d, j * d + (w_out - 1) * s + 1, s),
            ))
            cols.append(T.reshape(win, [c_in, h_out * w_out]))
    stacked = cols[0] if len(cols) == 1 else T.concat_axis(cols, axis=0)
    # weight matrix rows must follow the same tap-major, channel-minor order
    wmat = T.reshape(T.permute(p.weights, (0, 2, 3, 1)), [c_out, kh * kw * c_in])
    out = T.matmul(wmat, stacked)
    out = T.add(out, T.expand(T.reshape(p.bias, [c_out, 1]), [c_out, h_out * w_out]))
    return T.reshape(out, [c_out, h_out, w_out])


def depthwise_conv2d(x, weights, padding: int | None = None):
    """Per-channel k x k convolution, spatial dims preserved; k must be odd."""
    xv = T._val(x)
    wv = T._val(weights)
    if wv.ndim != 3 or wv.shape[1] != wv.shape[2]:
        raise ShapeError(f"depthwise weights must be [C,k,k], got {list(wv.shape)}")
    c, k = wv.shape[0], wv.shape[1]
    if k % 2 == 0:
        raise ConfigError(f"depthwise kernel extent must be odd, got {k}")
    if xv.shape[0] != c:
        raise ShapeError(f"depthwise channel mismatch: input {xv.shape[0]} vs weights {c}")
    pad = (k - 1) // 2
    if padding is not None and padding != pad:
        raise ConfigError(f"depthwise padding must be (k-1)/2 = {pad}, got {padding}")
    h, w = xv.shape[1], xv.shape[2]
    padded = _zero_pad2d(x, pad, pad)
    out = None
    for i in range(k):
        for j in range(k):
            win = T.slice_axes(padded, (slice(None), slice(i, i + h), slice(j, j + w)))
            tap = T.expand(T.slice_axes(weights, (slice(None), slice(i, i + 1), slice(j, j + 1))), [c, h, w])
            term = T.mul(win, tap)
            out = term if out is None else T.add(out, term)
    return out


def bilinear_sample(x: T.Tensor, y: float, x_pos: float) -> T.Tensor:
    """Channel vector at fractional (y, x); neighbors outside the map
    contribute zero."""
    if not (np.isfinite(y) and np.isfinite(x_pos)):
        raise NumericError(f"non-finite sample coordinates ({y}, {x_pos})")
    v = T._val(x)
    c, h, w = v.shape
    y0 = int(np.floor(y))
    x0 = int(np.floor(x_pos))
    out = np.zeros(c, dtype=v.dtype)
    for yy, wy in ((y0, 1.0 - (y - y0)), (y0 + 1, y - y0)):
        for xx, wx in ((x0, 1.0 - (x_pos - x0)), (x0 + 1, x_pos - x0)):
            if 0 <= yy < h and 0 <= xx < w:
                out += wy * wx * v[:, yy, xx]
    return T.Tensor(out, copy=False)


def _sample_maps(x, pos_y, pos_x):
    """Bilinear-sample every channel of x at per-pixel positions [H,W];
    differentiable in the values and the positions."""
    xv = T._val(x)
    c, h, w = xv.shape
    py = T._val(pos_y)
    px = T._val(pos_x)

    monitor = active_kink_monitor()
    if monitor is not None:
        monitor.record_lattice(py)
        monitor.record_lattice(px)

    y0 = np.floor(py)
    x0 = np.floor(px)
    wy1 = T.sub(pos_y, T.Tensor(y0, copy=False))
    wy0 = T.sub(T.Tensor(y0 + 1.0, copy=False), pos_y)
    wx1 = T.sub(pos_x, T.Tensor(x0, copy=False))
    wx0 = T.sub(T.Tensor(x0 + 1.0, copy=False), pos_x)

    out = None
    for yi, wy in ((y0.astype(np.int64), wy0), (y0.astype(np.int64) + 1, wy1)):
        for xi, wx in ((x0.astype(np.int64), wx0), (x0.astype(np.int64) + 1, wx1)):
            inside = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            yc = np.clip(yi, 0, h - 1)
            xc = np.clip(xi, 0, w - 1)
            flat = (np.arange(c)[:, None, None] * (h * w) + yc[None] * w + xc[None])
            corner = T.gather_flat(x, flat, [c, h, w])
            masked = T.mul(corner, T.Tensor(np.broadcast_to(inside, (c, h, w)).astype(np.float64), copy=True))
            weight = T.expand(T.mul(wy, wx), [c, h, w])
            term = T.mul(masked, weight)
            out = term if out is None else T.add(out, term)
    return out


def deformable_conv2d_with_offsets(x, base: Conv2dParams, offsets):
    """Deformable 3x3 with an explicit offset field [2*kh*kw, H, W]."""
    xv = T._val(x)
    wv = T._val(base.weights)
    c_out, c_in, kh, kw = wv.shape
    if xv.shape[0] != c_in:
        raise ShapeError(f"deformable channel mismatch: input {xv.shape[0]} vs weights {c_in}")
    ov = T._val(offsets)
    if ov.shape != (2 * kh * kw, xv.shape[1], xv.shape[2]):
        raise ShapeError(f"offset dims {list(ov.shape)} != [{2 * kh * kw}, {xv.shape[1]}, {xv.shape[2]}]")
    h, w = xv.shape[1], xv.shape[2]
    grid_y = np.broadcast_to(np.arange(h, dtype=np.float64)[:, None], (h, w))
    grid_x = np.broadcast_to(np.arange(w, dtype=np.float64)[None, :], (h, w))

    out = None
    for t in range(kh * kw):
        ry = t // kw - (kh - 1) // 2
        rx = t % kw - (kw - 1) // 2
        dy = T.reshape(T.slice_axes(offsets, (slice(2 * t, 2 * t + 1),)), [h, w])
        dx = T.reshape(T.slice_axes(offsets, (slice(2 * t + 1, 2 * t + 2),)), [h, w])
        pos_y = T.add(dy, T.Tensor(grid_y + ry, copy=True))
        pos_x = T.add(dx, T.Tensor(grid_x + rx, copy=True))
        sampled = _sample_maps(x, pos_y, pos_x)
        w_tap = T.reshape(
            T.slice_axes(base.weights,
                         (slice(None), slice(None), slice(t // kw, t // kw + 1), slice(t % kw, t % kw + 1))),
            [c_out, c_in])
        term = T.matmul(w_tap, T.reshape(sampled, [c_in, h * w]))
        out = term if out is None else T.add(out, term)
    out = T.add(out, T.expand(T.reshape(base.bias, [c_out, 1]), [c_out, h * w]))
    return T.reshape(out, [c_out, h, w])


def deformable_conv2d(x, p: DeformableParams):
    """Predict per-tap offsets from the input, then sample and accumulate;
    a zero-initialized predictor makes this identical to conv2d(x, p.base)."""
    wv = T._val(p.base.weights)
    kh, kw = wv.shape[2], wv.shape[3]
    opv = T._val(p.offset_predictor.weights)
    if opv.shape[0] != 2 * kh * kw:
        raise ShapeError(f"offset predictor emits {opv.shape[0]} channels, base needs {2 * kh * kw}")
    offsets = conv2d(x, p.offset_predictor)
    return deformable_conv2d_with_offsets(x, p.base, offsets)
