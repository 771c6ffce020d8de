"""Brute-force references for the kernels, written as plain loops over
Python floats.  Deliberately slow and structurally unrelated to the main
implementations; run them at desk scale only (extents up to about 32).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericError, ShapeError


def _pad_pair(padding) -> tuple:
    if isinstance(padding, tuple):
        return int(padding[0]), int(padding[1])
    return int(padding), int(padding)


def conv2d_reference(x, p):
    """Direct six-loop evaluation of the convolution contract."""
    xa = T._val(x)
    wa = T._val(p.weights)
    ba = T._val(p.bias)
    if xa.ndim != 3 or wa.ndim != 4:
        raise ShapeError(f"reference conv wants [C,H,W] and [O,C,kh,kw], got {list(xa.shape)}, {list(wa.shape)}")
    c_out, c_in, kh, kw = wa.shape
    if xa.shape[0] != c_in:
        raise ShapeError(f"input channels {xa.shape[0]} != kernel channels {c_in}")
    if ba.shape != (c_out,):
        raise ShapeError(f"bias dims {list(ba.shape)} != [{c_out}]")
    h, w = xa.shape[1], xa.shape[2]
    ph, pw = _pad_pair(p.padding)
    s = int(p.stride)
    d = int(p.dilation)
    out_h = (h + 2 * ph - d * (kh - 1) - 1) // s + 1
    out_w = (w + 2 * pw - d * (kw - 1) - 1) // s + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"kernel does not fit: output extents {out_h}x{out_w}")
    out = np.empty((c_out, out_h, out_w), dtype=np.float64)
    for o in range(c_out):
        for oy in range(out_h):
            for ox in range(out_w):
                acc = float(ba[o])
                for c in range(c_in):
                    for i in range(kh):
                        for j in range(kw):
                            iy = oy * s - ph + i * d
                            ix = ox * s - pw + j * d
                            if 0 <= iy < h and 0 <= ix < w:
                                acc += float(wa[o, c, i, j]) * float(xa[c, iy, ix])
                out[o, oy, ox] = acc
    return T.tensor(out)


def _softmax_floats(logits):
    m = max(logits)
    if not math.isfinite(m):
        raise NumericError("non-finite attention logit in reference")
    exps = [math.exp(v - m) for v in logits]
    z = sum(exps)
    return [e / z for e in exps]


def dense_attention_reference(f, p):
    """Global token attention over every pixel pair: project each token
    with the q/k/v matrices, then per head softmax(q.k / sqrt(d)) applied
    to v.  No local-context term, no routing."""
    fa = T._val(f)
    if fa.ndim != 3:
        raise ShapeError(f"reference attention wants [C,H,W], got {list(fa.shape)}")
    c, h, w = fa.shape
    heads = int(p.heads)
    if c % heads:
        raise ConfigError(f"head count {heads} does not divide channel width {c}")
    wq = T._val(p.w_q)
    wk = T._val(p.w_k)
    wv = T._val(p.w_v)
    for name, m in (("w_q", wq), ("w_k", wk), ("w_v", wv)):
        if m.shape != (c, c):
            raise ShapeError(f"{name} dims {list(m.shape)} != [{c}, {c}]")

    tokens = [[float(fa[i, y, x]) for i in range(c)]
              for y in range(h) for x in range(w)]

    # tokens are rows: projected[i] = sum_j token[j] * mat[j, i]
    def project(mat):
        return [[sum(tok[j] * float(mat[j, i]) for j in range(c)) for i in range(c)]
                for tok in tokens]

    q = project(wq)
    k = project(wk)
    v = project(wv)
    n = len(tokens)
    d = c // heads
    inv = 1.0 / math.sqrt(d)
    out = [[0.0] * c for _ in range(n)]
    for hd in range(heads):
        lo = hd * d
        for t in range(n):
            logits = [inv * sum(q[t][lo + i] * k[u][lo + i] for i in range(d))
                      for u in range(n)]
            alphas = _softmax_floats(logits)
            for i in range(d):
                out[t][lo + i] = sum(alphas[u] * v[u][lo + i] for u in range(n))
    arr = np.array(out, dtype=np.float64).T.reshape(c, h, w)
    return T.tensor(arr)


def topk_reference(row, k: int):
    """Full sort, descending value with ascending-index tie-break."""
    vals = [float(v) for v in np.asarray(T._val(row) if isinstance(row, (T.Tensor, T.Node)) else row).reshape(-1)]
    if k < 1 or k > len(vals):
        raise ConfigError(f"k {k} outside [1, {len(vals)}]")
    order = sorted(range(len(vals)), key=lambda i: (-vals[i], i))
    return order[:k]


def finite_diff_grad(scalar_fn, x, h: float = 1e-5):
    """Central differences, per-coordinate step h * max(1, |x_i|)."""
    base = np.array(T._val(x), dtype=np.float64)
    flat = base.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        step = h * max(1.0, abs(float(flat[i])))
        bumped = flat.copy()
        bumped[i] = flat[i] + step
        fp = float(scalar_fn(T.tensor(bumped.reshape(base.shape))))
        bumped[i] = flat[i] - step
        fm = float(scalar_fn(T.tensor(bumped.reshape(base.shape))))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"non-finite evaluation while differencing coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * step)
    return T.tensor(grad.reshape(base.shape))


@dataclass(frozen=True)
class FlopCount:
    """Exact multiply-accumulate tallies per attention stage; gather is
    copied elements rather than MACs."""

    routing: int
    gather: int
    qk_logits: int
    av_aggregation: int
    lce: int

    def as_dict(self) -> dict:
        return {"routing": self.routing, "gather": self.gather,
                "qk_logits": self.qk_logits, "av_aggregation": self.av_aggregation,
                "lce": self.lce}


def attention_flops(h: int, w: int, c: int, s: int, k: int, heads: int = 1,
                    mode: str = "routed", lce_kernel: int = 5) -> FlopCount:
    """Closed-form counts for one attention pass at the given extents.

    The routed qk and av tallies are exactly k/s^2 of the dense ones; head
    count cancels (heads partition the channel width).
    """
    if s < 1 or h % s or w % s:
        raise ConfigError(f"region grid {s}x{s} does not tile {h}x{w}")
    if k < 1 or k > s * s:
        raise ConfigError(f"routed-region count {k} outside [1, {s * s}]")
    if heads < 1 or c % heads:
        raise ConfigError(f"head count {heads} does not divide channel width {c}")
    tokens = h * w
    if mode == "dense":
        return FlopCount(routing=0, gather=0, qk_logits=tokens * tokens * c,
                         av_aggregation=tokens * tokens * c, lce=0)
    if mode != "routed":
        raise ConfigError(f"unknown mode {mode!r}")
    per_region = tokens // (s * s)
    gathered = k * per_region
    return FlopCount(routing=s ** 4 * c + tokens * c,
                     gather=2 * s * s * k * per_region * c,
                     qk_logits=tokens * gathered * c,
                     av_aggregation=tokens * gathered * c,
                     lce=c * tokens * lce_kernel * lce_kernel)
