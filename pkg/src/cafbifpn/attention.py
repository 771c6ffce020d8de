"""Bi-level routing attention: partition a feature map into a region grid,
route each region to its top-k most affine peers via pooled queries/keys,
run token-level attention against the gathered keys/values only, then add
a depthwise local-context term.

Region index and in-region token index both follow row-major order, so
partition followed by merge is the identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .convops import depthwise_conv2d
from .errors import ConfigError, PartitionError, ShapeError
from .instrumentation import active_kink_monitor, active_mac_counter

# Test hook: when set, ties in the routing sort are broken by descending
# region id instead of ascending, to prove the selfcheck catches it.
CORRUPT_TOPK_TIEBREAK = False


@dataclass(frozen=True)
class RegionTokens:
    """Token view [S^2, tokens_per_region, C] of a [C, H, W] map."""

    data: object
    height: int
    width: int
    regions_s: int

    @property
    def tokens_per_region(self) -> int:
        return (self.height // self.regions_s) * (self.width // self.regions_s)


@dataclass(frozen=True)
class BraParams:
    """Projections [C, C] (token-wise, bias-free), depthwise local-context
    kernel [C, k, k], region grid side, routed-region count, head count."""

    w_q: object
    w_k: object
    w_v: object
    lce_kernel: object
    regions_s: int
    topk_k: int
    heads: int = 1


@dataclass(frozen=True)
class RoutingResult:
    """Region affinity [S^2, S^2] plus per-region routed ids [S^2, k],
    sorted by descending affinity, ties broken by ascending id."""

    affinity: object
    indices: np.ndarray


def region_partition(f, regions_s: int) -> RegionTokens:
    v = T._val(f)
    if v.ndim != 3:
        raise ShapeError(f"region_partition wants [C,H,W], got {list(v.shape)}")
    c, h, w = v.shape
    s = int(regions_s)
    if s < 1 or h % s or w % s:
        raise PartitionError(f"region grid {s}x{s} does not tile H={h}, W={w}")
    th, tw = h // s, w // s
    x = T.reshape(f, [c, s, th, s, tw])
    x = T.permute(x, (1, 3, 2, 4, 0))          # [S, S, th, tw, C]
    x = T.reshape(x, [s * s, th * tw, c])
    return RegionTokens(x, h, w, s)


def region_merge(rt: RegionTokens):
    v = T._val(rt.data)
    s = rt.regions_s
    th, tw = rt.height // s, rt.width // s
    if v.ndim != 3 or v.shape[0] != s * s or v.shape[1] != th * tw:
        raise ShapeError(f"region tokens {list(v.shape)} disagree with H={rt.height}, W={rt.width}, S={s}")
    c = v.shape[2]
    x = T.reshape(rt.data, [s, s, th, tw, c])
    x = T.permute(x, (4, 0, 2, 1, 3))          # [C, S, th, S, tw]
    return T.reshape(x, [c, rt.height, rt.width])


def qkv_project(rt: RegionTokens, p: BraParams):
    v = T._val(rt.data)
    c = v.shape[2]
    for name, w in (("w_q", p.w_q), ("w_k", p.w_k), ("w_v", p.w_v)):
        wv = T._val(w)
        if wv.shape != (c, c):
            raise ShapeError(f"{name} dims {list(wv.shape)} != [{c}, {c}]")
    n_regions, n_tokens = v.shape[0], v.shape[1]
    flat = T.reshape(rt.data, [n_regions * n_tokens, c])

    def proj(w):
        out = T.reshape(T.matmul(flat, w), [n_regions, n_tokens, c])
        return RegionTokens(out, rt.height, rt.width, rt.regions_s)

    return proj(p.w_q), proj(p.w_k), proj(p.w_v)


def region_pool(rt: RegionTokens):
    """Mean over each region's tokens -> [S^2, C]."""
    return T.reduce_mean_axis(rt.data, axis=1)


def _topk_indices_row(row: np.ndarray, k: int) -> np.ndarray:
    order = np.argsort(-row, kind="stable")
    if CORRUPT_TOPK_TIEBREAK:
        out = []
        i = 0
        while i < len(order):
            j = i
            while j + 1 < len(order) and row[order[j + 1]] == row[order[i]]:
                j += 1
            out.extend(order[i:j + 1][::-1])
            i = j + 1
        order = np.asarray(out)
    return order[:k].astype(np.int64)


def topk_routing(q_pooled, k_pooled, topk_k: int) -> RoutingResult:
    qv = T._val(q_pooled)
    n_regions = qv.shape[0]
    k = int(topk_k)
    if k < 1 or k > n_regions:
        raise ConfigError(f"routed-region count {k} outside [1, {n_regions}]")
    affinity = T.matmul(q_pooled, T.permute(k_pooled, (1, 0)))
    counter = active_mac_counter()
    if counter is not None:
        counter.routing += n_regions * n_regions * qv.shape[1]
    av = T._val(affinity)
    indices = np.stack([_topk_indices_row(av[r], k) for r in range(n_regions)])

    monitor = active_kink_monitor()
    if monitor is not None and k < n_regions:
        for r in range(n_regions):
            ranked = np.sort(av[r])[::-1]
            monitor.record_routing_margin(ranked[k - 1] - ranked[k])
    return RoutingResult(affinity, indices)


def gather_kv(k_tokens: RegionTokens, v_tokens: RegionTokens, routing: RoutingResult):
    """Stack the tokens of each routed region, highest affinity first."""
    kv = T._val(k_tokens.data)
    n_regions, n_tokens, c = kv.shape
    idx = np.asarray(routing.indices, dtype=np.int64)
    if idx.ndim != 2 or idx.shape[0] != n_regions:
        raise ShapeError(f"index matrix dims {list(idx.shape)} disagree with {n_regions} regions")
    if idx.size and (idx.min() < 0 or idx.max() >= n_regions):
        raise IndexError(f"routed region id out of range [0, {n_regions})")
    k = idx.shape[1]
    # flat index into [S^2, n, C]: region stride n*C, token stride C
    token_flat = (np.arange(n_tokens)[:, None] * c + np.arange(c)[None, :])
    flat = (idx[:, :, None, None] * (n_tokens * c) + token_flat[None, None]).reshape(n_regions, k * n_tokens, c)
    counter = active_mac_counter()
    if counter is not None:
        counter.gather += 2 * n_regions * k * n_tokens * c
    gathered_k = T.gather_flat(k_tokens.data, flat, [n_regions, k * n_tokens, c])
    gathered_v = T.gather_flat(v_tokens.data, flat, [n_regions, k * n_tokens, c])
    return gathered_k, gathered_v


def token_attention(q_tokens: RegionTokens, gathered_k, gathered_v, heads: int) -> RegionTokens:
    """Per region and head: softmax(q . k_g^T / sqrt(d_k)) applied to v_g;
    heads are contiguous channel groups re-concatenated afterwards."""
    qv = T._val(q_tokens.data)
    n_regions, n_tokens, c = qv.shape
    gv = T._val(gathered_k)
    if gv.shape[0] != n_regions or gv.shape[2] != c:
        raise ShapeError(f"gathered keys {list(gv.shape)} disagree with queries {list(qv.shape)}")
    if c % heads:
        raise ConfigError(f"head count {heads} does not divide channel width {c}")
    d = c // heads
    n_gathered = gv.shape[1]
    inv_scale = 1.0 / np.sqrt(d)
    counter = active_mac_counter()

    region_rows = []
    for r in range(n_regions):
        head_outs = []
        for h in range(heads):
            q = T.reshape(T.slice_axes(q_tokens.data, (slice(r, r + 1), slice(None), slice(h * d, (h + 1) * d))),
                          [n_tokens, d])
            kg = T.reshape(T.slice_axes(gathered_k, (slice(r, r + 1), slice(None), slice(h * d, (h + 1) * d))),
                           [n_gathered, d])
            vg = T.reshape(T.slice_axes(gathered_v, (slice(r, r + 1), slice(None), slice(h * d, (h + 1) * d))),
                           [n_gathered, d])
            logits = T.scale(T.matmul(q, T.permute(kg, (1, 0))), inv_scale)
            weights = T.softmax_lastdim(logits)
            head_outs.append(T.matmul(weights, vg))
            if counter is not None:
                counter.qk += n_tokens * d * n_gathered
                counter.av += n_tokens * n_gathered * d
        row = head_outs[0] if heads == 1 else T.concat_axis(head_outs, axis=1)
        region_rows.append(T.reshape(row, [1, n_tokens, c]))
    out = region_rows[0] if n_regions == 1 else T.concat_axis(region_rows, axis=0)
    return RegionTokens(out, q_tokens.height, q_tokens.width, q_tokens.regions_s)


def lce(v_tokens: RegionTokens, kernel):
    """Depthwise local-context embedding of the re-spatialized value map."""
    kv = T._val(kernel)
    if kv.ndim != 3 or kv.shape[1] != kv.shape[2]:
        raise ShapeError(f"local-context kernel must be [C,k,k], got {list(kv.shape)}")
    spatial = region_merge(v_tokens)
    counter = active_mac_counter()
    if counter is not None:
        counter.lce += kv.shape[0] * v_tokens.height * v_tokens.width * kv.shape[1] * kv.shape[2]
    return depthwise_conv2d(spatial, kernel)


def compute_routing(f, p: BraParams) -> RoutingResult:
    """The region selection a ba_forward call on f would make.  Used to
    freeze routing across nearby evaluations in gradient checks."""
    rt = region_partition(f, p.regions_s)
    q, k, _ = qkv_project(rt, p)
    return topk_routing(region_pool(q), region_pool(k), p.topk_k)


def make_bra_params(rng, c: int, regions_s: int, topk_k: int, heads: int = 1,
                    lce_kernel: int = 5, zero_lce: bool = False) -> BraParams:
    """Seeded projections and local-context kernel, drawn q, k, v, lce."""
    if c % heads:
        raise ConfigError(f"head count {heads} does not divide channel width {c}")
    if lce_kernel % 2 == 0:
        raise ConfigError(f"local-context kernel must be odd, got {lce_kernel}")
    w_q = rng.tensor([c, c], -0.1, 0.1)
    w_k = rng.tensor([c, c], -0.1, 0.1)
    w_v = rng.tensor([c, c], -0.1, 0.1)
    if zero_lce:
        rng.tensor([c, lce_kernel, lce_kernel])  # keep the draw stream stable
        lce_k = T.zeros([c, lce_kernel, lce_kernel])
    else:
        lce_k = rng.tensor([c, lce_kernel, lce_kernel], -0.1, 0.1)
    return BraParams(w_q, w_k, w_v, lce_k, regions_s, topk_k, heads)


def ba_forward(f, p: BraParams, routing: RoutingResult | None = None):
    """Full routed-attention pass over a [C, H, W] map; output dims match.

    Passing a precomputed routing freezes the region selection, which the
    gradient checks use to keep the function smooth under perturbation.
    """
    v = T._val(f)
    c = v.shape[0]
    if c % p.heads:
        raise ConfigError(f"head count {p.heads} does not divide channel width {c}")
    counter = active_mac_counter()
    if counter is not None:
        counter.ba_invocations += 1

    rt = region_partition(f, p.regions_s)
    q, k, vv = qkv_project(rt, p)
    if routing is None:
        q_pooled = region_pool(q)
        k_pooled = region_pool(k)
        if counter is not None:
            counter.routing += v.shape[1] * v.shape[2] * c  # pooling overhead
        routing = topk_routing(q_pooled, k_pooled, p.topk_k)
    gathered_k, gathered_v = gather_kv(k, vv, routing)
    attended = token_attention(q, gathered_k, gathered_v, p.heads)
    return T.add(region_merge(attended), lce(vv, p.lce_kernel))
