"""Weighted bidirectional fusion pyramid with routed-attention refinement
of the two top-down intermediate nodes, plus the full assembly that runs
the feature-enhancement block on every backbone level first.

Levels are keyed 2..5 finest to coarsest; spatial extents halve per level
and every pyramid map shares one channel width.  Fusion weights are raw
scalars clamped non-negative inside fuse, so they may be plain floats or
tape leaves interchangeably.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import BraParams, ba_forward, compute_routing, make_bra_params
from .cfe import CfeParams, cfe_forward, make_cfe_params
from .convops import Conv2dParams, conv2d
from .errors import ConfigError, NumericError, PipelineError, ShapeError
from .instrumentation import active_kink_monitor

LEVELS = (2, 3, 4, 5)

RESIZE_MODE = "nearest-up-mean-down"


@dataclass(frozen=True)
class FusionWeights:
    """Raw weights per fusion node; tuple length is the node's input count.

    mid nodes are the top-down intermediates, out nodes the final maps.
    Input order within each tuple follows the fuse call: same-level input
    first, then the refined/lateral term, then the resized neighbour.
    """

    p2_out: tuple = (1.0, 1.0)
    p3_mid: tuple = (1.0, 1.0)
    p3_out: tuple = (1.0, 1.0, 1.0)
    p4_mid: tuple = (1.0, 1.0)
    p4_out: tuple = (1.0, 1.0, 1.0)
    p5_out: tuple = (1.0, 1.0)
    epsilon: float = 1e-4

_WEIGHT_ARITY = {"p2_out": 2, "p3_mid": 2, "p3_out": 3,
                 "p4_mid": 2, "p4_out": 3, "p5_out": 2}


@dataclass(frozen=True)
class PipelineParams:
    """cfe/projection are level-keyed dicts; which one runs is chosen by
    cfe_enabled.  bra holds the two refined levels {4, 3} and is ignored
    when attention_fusion_enabled is off."""

    cfe: dict | None
    projection: dict | None
    bra: dict | None
    fusion: FusionWeights
    cfe_enabled: bool = True
    attention_fusion_enabled: bool = True
    topdown_source: str = "input"
    resize_mode: str = RESIZE_MODE


def resize(f, direction: str):
    """up2 replicates each pixel into a 2x2 block; down2 averages disjoint
    2x2 blocks.  down2(up2(f)) == f exactly."""
    v = T._val(f)
    if v.ndim != 3:
        raise ShapeError(f"resize wants [C,H,W], got {list(v.shape)}")
    c, h, w = v.shape
    if direction == "up2":
        x = T.reshape(f, [c, h, 1, w, 1])
        x = T.expand(x, [c, h, 2, w, 2])
        return T.reshape(x, [c, 2 * h, 2 * w])
    if direction == "down2":
        if h % 2 or w % 2:
            raise ShapeError(f"down2 needs even extents, got {h}x{w}")
        x = T.reshape(f, [c, h // 2, 2, w])
        x = T.reduce_mean_axis(x, axis=2)
        x = T.reshape(x, [c, h // 2, w // 2, 2])
        return T.reduce_mean_axis(x, axis=3)
    raise ConfigError(f"unknown resize direction {direction!r}")


def _as_scalar(w):
    if isinstance(w, (T.Tensor, T.Node)):
        if T._val(w).size != 1:
            raise ShapeError(f"fusion weight must be scalar, got dims {list(T._val(w).shape)}")
        return w
    return T.tensor([float(w)])


def _clamp_nonneg(w):
    v = T._val(w)
    monitor = active_kink_monitor()
    if monitor is not None:
        monitor.record_clamp(v)
    mask = T.tensor((v > 0.0).astype(np.float64))
    return T.mul(w, mask)


def fuse(inputs, raw_weights, epsilon: float):
    """sum(max(w_i,0) * x_i) / (sum(max(w_i,0)) + epsilon), elementwise."""
    if len(inputs) < 1:
        raise ShapeError("fuse needs at least one input")
    if len(raw_weights) != len(inputs):
        raise ShapeError(f"{len(raw_weights)} weights for {len(inputs)} inputs")
    if epsilon < 0:
        raise ConfigError(f"epsilon must be >= 0, got {epsilon}")
    dims0 = T._val(inputs[0]).shape
    for x in inputs[1:]:
        if T._val(x).shape != dims0:
            raise ShapeError(f"fuse input dims {list(T._val(x).shape)} != {list(dims0)}")
    clamped = [_clamp_nonneg(_as_scalar(w)) for w in raw_weights]
    num = None
    for u, x in zip(clamped, inputs):
        term = T.mul(T.expand(u, dims0), x)
        num = term if num is None else T.add(num, term)
    denom = clamped[0]
    for u in clamped[1:]:
        denom = T.add(denom, u)
    denom = T.add(denom, T.tensor([float(epsilon)]))
    if T._val(denom)[0] == 0.0:
        raise NumericError("fusion denominator is zero: all weights clamped away and epsilon is 0")
    return T.div(num, T.expand(denom, dims0))


def _validate_params(p: PipelineParams) -> None:
    if p.topdown_source != "input":
        raise ConfigError(
            f"topdown_source {p.topdown_source!r} unsupported: feeding outputs back "
            "into the top-down intermediates makes the graph cyclic")
    if p.resize_mode != RESIZE_MODE:
        raise ConfigError(f"unknown resize mode {p.resize_mode!r}")
    if p.fusion.epsilon < 0:
        raise ConfigError(f"epsilon must be >= 0, got {p.fusion.epsilon}")
    for name, arity in _WEIGHT_ARITY.items():
        got = len(getattr(p.fusion, name))
        if got != arity:
            raise ConfigError(f"fusion node {name} wants {arity} weights, got {got}")
    if p.cfe_enabled and p.cfe is None:
        raise ConfigError("cfe_enabled but no per-level feature-enhancement params")
    if not p.cfe_enabled and p.projection is None:
        raise ConfigError("cfe disabled but no per-level projection params")
    if p.attention_fusion_enabled:
        if p.bra is None or any(l not in p.bra for l in (3, 4)):
            raise ConfigError("attention fusion enabled but params for levels 3 and 4 missing")


def _check_pyramid(maps: dict, stage: str) -> None:
    for lvl in LEVELS:
        if lvl not in maps:
            raise PipelineError(f"{stage} level {lvl} missing")
    prev = None
    width = None
    for lvl in LEVELS:
        v = T._val(maps[lvl])
        if v.ndim != 3:
            raise PipelineError(f"{stage} level {lvl} must be [C,H,W], got {list(v.shape)}")
        if stage == "stage-I":
            if width is None:
                width = v.shape[0]
            elif v.shape[0] != width:
                raise PipelineError(f"{stage} level {lvl} width {v.shape[0]} != level 2 width {width}")
        if prev is not None:
            ph, pw = prev
            if ph % 2 or pw % 2 or v.shape[1] != ph // 2 or v.shape[2] != pw // 2:
                raise PipelineError(
                    f"{stage} level {lvl} extents {v.shape[1]}x{v.shape[2]} do not halve "
                    f"the previous level's {ph}x{pw}")
        prev = (v.shape[1], v.shape[2])


def _refine(x, p: PipelineParams, level: int, routing_override, capture_routing):
    if not p.attention_fusion_enabled:
        return x
    routing = None
    if routing_override is not None and level in routing_override:
        routing = routing_override[level]
    elif capture_routing is not None:
        routing = compute_routing(x, p.bra[level])
        capture_routing[level] = routing
    return ba_forward(x, p.bra[level], routing=routing)


def afbifpn_forward(inputs: dict, p: PipelineParams, *,
                    routing_override: dict | None = None,
                    capture_routing: dict | None = None) -> dict:
    """Stage-I maps {2..5} -> stage-O maps {2..5}.

    Node order: level-4 intermediate, its refinement, level-3 intermediate,
    its refinement, then outputs 2, 3, 4, 5.  Each refinement is computed
    once and reused by both consumers, so the routed-attention pass runs
    exactly twice.

    routing_override pins the per-level region selection (gradient checks
    perturb parameters without letting routing flip); capture_routing, a
    mutable dict, receives the selections this pass made.
    """
    _validate_params(p)
    _check_pyramid(inputs, "stage-I")
    fw = p.fusion
    eps = fw.epsilon

    def node(name, fn):
        try:
            return fn()
        except ShapeError as exc:
            raise PipelineError(f"node {name}: {exc}") from exc

    p4f = node("level-4 intermediate",
               lambda: fuse([inputs[4], resize(inputs[5], "up2")], fw.p4_mid, eps))
    a4 = node("level-4 refinement",
              lambda: _refine(p4f, p, 4, routing_override, capture_routing))
    p3f = node("level-3 intermediate",
               lambda: fuse([inputs[3], resize(a4, "up2")], fw.p3_mid, eps))
    a3 = node("level-3 refinement",
              lambda: _refine(p3f, p, 3, routing_override, capture_routing))
    p2o = node("level-2 output",
               lambda: fuse([inputs[2], resize(a3, "up2")], fw.p2_out, eps))
    p3o = node("level-3 output",
               lambda: fuse([inputs[3], a3, resize(p2o, "down2")], fw.p3_out, eps))
    p4o = node("level-4 output",
               lambda: fuse([inputs[4], a4, resize(p3o, "down2")], fw.p4_out, eps))
    p5o = node("level-5 output",
               lambda: fuse([inputs[5], resize(p4o, "down2")], fw.p5_out, eps))
    return {2: p2o, 3: p3o, 4: p4o, 5: p5o}


def c_afbifpn_forward(backbone: dict, p: PipelineParams, *,
                      routing_override: dict | None = None,
                      capture_routing: dict | None = None) -> dict:
    """Backbone maps {2..5} (any per-level widths) -> stage-O maps."""
    _validate_params(p)
    _check_pyramid(backbone, "backbone")
    stage_i = {}
    for lvl in LEVELS:
        if p.cfe_enabled:
            stage_i[lvl] = cfe_forward(backbone[lvl], p.cfe[lvl])
        else:
            stage_i[lvl] = conv2d(backbone[lvl], p.projection[lvl])
    return afbifpn_forward(stage_i, p, routing_override=routing_override,
                           capture_routing=capture_routing)


def build_pipeline_params(cfg, channels: dict) -> PipelineParams:
    """Seeded parameters for a config object and per-level backbone widths.

    cfg supplies seed, fusion_width, regions_s, topk_k, heads, epsilon,
    dilation, lce_kernel, activation, cfe_enabled, attention_fusion_enabled,
    topdown_source, and optionally offset_scale / zero_lce.  Draw order:
    one entry block per level 2..5 (feature enhancement, or a single 1x1
    projection when disabled), then attention params for level 4 and
    level 3.  Fusion weights start at raw 1.0 and consume no draws.
    """
    for lvl in LEVELS:
        if lvl not in channels:
            raise ConfigError(f"backbone width for level {lvl} missing")
    rng = T.Rng(cfg.seed)
    width = cfg.fusion_width
    offset_scale = getattr(cfg, "offset_scale", 1.0)
    zero_lce = getattr(cfg, "zero_lce", False)
    cfe_params = None
    projections = None
    if cfg.cfe_enabled:
        cfe_params = {lvl: make_cfe_params(rng, channels[lvl], width,
                                           activation=cfg.activation,
                                           dilation=cfg.dilation,
                                           offset_scale=offset_scale)
                      for lvl in LEVELS}
    else:
        projections = {lvl: Conv2dParams(weights=rng.tensor([width, channels[lvl], 1, 1], -0.1, 0.1),
                                         bias=rng.tensor([width], -0.1, 0.1))
                       for lvl in LEVELS}
    bra = None
    if cfg.attention_fusion_enabled:
        bra = {4: make_bra_params(rng, width, cfg.regions_s, cfg.topk_k, cfg.heads,
                                  cfg.lce_kernel, zero_lce=zero_lce),
               3: make_bra_params(rng, width, cfg.regions_s, cfg.topk_k, cfg.heads,
                                  cfg.lce_kernel, zero_lce=zero_lce)}
    return PipelineParams(cfe=cfe_params, projection=projections, bra=bra,
                          fusion=FusionWeights(epsilon=cfg.epsilon),
                          cfe_enabled=cfg.cfe_enabled,
                          attention_fusion_enabled=cfg.attention_fusion_enabled,
                          topdown_source=cfg.topdown_source)
