"""Multi-branch feature enhancement block: three parallel convolution
branches (asymmetric pairs feeding a dilated or deformable 3x3), channel
concatenated and added to a 1x1 residual projection of the input.

Channel plan: each branch reduces to width/3 with its leading 1x1 and keeps
that width; the residual projects straight to the full width.  All stage
convolutions carry bias and preserve the spatial extents.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .convops import Conv2dParams, DeformableParams, conv2d, deformable_conv2d
from .errors import ConfigError, ShapeError

Stage = "Conv2dParams | DeformableParams"


@dataclass(frozen=True)
class CfeParams:
    """Each branch is the tuple of its stage params in application order:
    branch1 (1x1, 1x3, 3x1, dilated 3x3), branch2 (1x1, 1x5, 5x1, dilated
    3x3), branch3 (1x1, 3x1, 1x3, deformable 3x3)."""

    branch1: tuple
    branch2: tuple
    branch3: tuple
    residual: Conv2dParams
    width: int
    activation: str = "relu"


def _activate(x, activation: str):
    if activation == "relu":
        return T.relu(x)
    if activation == "none":
        return x
    raise ConfigError(f"unknown activation {activation!r}")


def _run_branch(f, stages: tuple, activation: str):
    x = f
    for stage in stages:
        if isinstance(stage, DeformableParams):
            x = deformable_conv2d(x, stage)
        else:
            x = conv2d(x, stage)
        x = _activate(x, activation)
    return x


def cfe_forward(f, p: CfeParams):
    """[C_in, H, W] -> [width, H, W]; no activation after the residual add."""
    if p.width % 3:
        raise ConfigError(f"fusion width {p.width} not divisible by 3")
    branches = [_run_branch(f, stages, p.activation)
                for stages in (p.branch1, p.branch2, p.branch3)]
    stacked = T.concat_axis(branches, axis=0)
    if T._val(stacked).shape[0] != p.width:
        raise ShapeError(f"branch concat width {T._val(stacked).shape[0]} != configured width {p.width}")
    return T.add(stacked, conv2d(f, p.residual))


def _surrogate_stage(stage):
    """Positive-weight, bias-free copy so responses cannot cancel."""
    def strip(c: Conv2dParams) -> Conv2dParams:
        return replace(c, weights=T.tensor(np.abs(T._val(c.weights))),
                       bias=T.zeros([T._val(c.bias).shape[0]], dtype=str(T._val(c.bias).dtype)))

    if isinstance(stage, DeformableParams):
        pred = stage.offset_predictor
        zero_pred = replace(pred, weights=T.zeros(list(T._val(pred.weights).shape)),
                            bias=T.zeros([T._val(pred.bias).shape[0]]))
        return DeformableParams(strip(stage.base), zero_pred)
    return strip(stage)


def cfe_receptive_probe(p: CfeParams) -> int:
    """Chebyshev support radius of the response to a centered unit impulse.

    Measured on a magnitude surrogate (absolute kernels, zero biases, zero
    offsets, no activation) so the radius reflects connectivity rather than
    sign cancellation; a single 3x3 scores 1 under the same procedure.
    """
    q = CfeParams(branch1=tuple(_surrogate_stage(s) for s in p.branch1),
                  branch2=tuple(_surrogate_stage(s) for s in p.branch2),
                  branch3=tuple(_surrogate_stage(s) for s in p.branch3),
                  residual=_surrogate_stage(p.residual),
                  width=p.width, activation="none")
    c_in = T._val(p.residual.weights).shape[1]
    extent = 13
    center = extent // 2
    buf = np.zeros((c_in, extent, extent))
    buf[:, center, center] = 1.0
    out = T._val(cfe_forward(T.tensor(buf), q))
    support = np.abs(out).max(axis=0) > 1e-12
    ys, xs = np.nonzero(support)
    if ys.size == 0:
        return -1
    return int(max(np.abs(ys - center).max(), np.abs(xs - center).max()))


def _rand_conv(rng: T.Rng, c_out: int, c_in: int, kh: int, kw: int,
               padding, dilation: int = 1, weight_scale: float = 1.0,
               bias_scale: float = 0.1) -> Conv2dParams:
    w = rng.tensor([c_out, c_in, kh, kw], -0.1 * weight_scale, 0.1 * weight_scale)
    b = rng.tensor([c_out], -bias_scale, bias_scale)
    return Conv2dParams(weights=w, bias=b, padding=padding, dilation=dilation)


def make_cfe_params(rng: T.Rng, c_in: int, width: int, activation: str = "relu",
                    dilation: int = 2, offset_scale: float = 0.25) -> CfeParams:
    """Seeded random parameters; offset_scale 0 gives a zero offset
    predictor, collapsing the deformable stage to its standard counterpart."""
    if width % 3:
        raise ConfigError(f"fusion width {width} not divisible by 3")
    wb = width // 3
    pad_d = dilation  # same-padding for a dilated 3x3

    branch1 = (_rand_conv(rng, wb, c_in, 1, 1, 0),
               _rand_conv(rng, wb, wb, 1, 3, (0, 1)),
               _rand_conv(rng, wb, wb, 3, 1, (1, 0)),
               _rand_conv(rng, wb, wb, 3, 3, (pad_d, pad_d), dilation=dilation))
    branch2 = (_rand_conv(rng, wb, c_in, 1, 1, 0),
               _rand_conv(rng, wb, wb, 1, 5, (0, 2)),
               _rand_conv(rng, wb, wb, 5, 1, (2, 0)),
               _rand_conv(rng, wb, wb, 3, 3, (pad_d, pad_d), dilation=dilation))
    base = _rand_conv(rng, wb, wb, 3, 3, (1, 1))
    predictor = _rand_conv(rng, 18, wb, 3, 3, (1, 1),
                           weight_scale=offset_scale, bias_scale=0.0)
    branch3 = (_rand_conv(rng, wb, c_in, 1, 1, 0),
               _rand_conv(rng, wb, wb, 3, 1, (1, 0)),
               _rand_conv(rng, wb, wb, 1, 3, (0, 1)),
               DeformableParams(base, predictor))
    residual = _rand_conv(rng, width, c_in, 1, 1, 0)
    return CfeParams(branch1, branch2, branch3, residual, width, activation)
