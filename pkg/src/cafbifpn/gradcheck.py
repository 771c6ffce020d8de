"""Analytic gradients versus central finite differences.

Routing is captured once on the unperturbed forward and pinned for every
evaluation afterwards, so the region selection cannot flip between the
two sides of a difference step.  A case is accepted only when the forward
pass keeps a margin from every non-smooth point: relu pre-activations and
fusion-weight clamps away from zero, routing score gaps above the cut,
and bilinear sampling positions off the integer lattice.  Positions that
land exactly on the lattice are exempt: they come from identically zero
offsets (dead patches feeding the offset predictor), so perturbations do
not move them.  A violated margin reseeds the case and the event is
reported, not failed.

The pipeline-wide groups run with activation "none"; a small dedicated
case covers the relu path, where the margin is achievable at desk scale.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from . import tensor as T
from .convops import Conv2dParams, DeformableParams, deformable_conv2d_with_offsets
from .errors import NumericError
from .cfe import cfe_forward, make_cfe_params
from .instrumentation import KinkMonitor, watch_kinks
from .pipeline import build_pipeline_params, c_afbifpn_forward

RELU_MARGIN = 1e-4
LATTICE_MARGIN = 1e-3
CLAMP_MARGIN = 1e-3
ROUTING_MARGIN = 1e-3
FD_STEP = 1e-5
PASS_THRESHOLD = 1e-5
REL_FLOOR = 1e-3
MAX_RESEEDS = 32
COORDS_PER_TENSOR = 5


def _monitor_reason(km: KinkMonitor, lattice: bool = False) -> str | None:
    """A margin is demanded only for kinks whose argument can move under
    the perturbations the case applies.  Sampling positions move only
    when offset-making parameters are differenced, so the lattice margin
    is enforced just in the dedicated offset cases; positions exactly on
    the lattice (identically zero offsets) stay put and are exempt."""
    if km.min_relu_gap < RELU_MARGIN:
        return f"relu pre-activation gap {km.min_relu_gap:.2e}"
    if lattice and 0.0 < km.min_lattice_gap < LATTICE_MARGIN:
        return f"sampling position {km.min_lattice_gap:.2e} from the lattice"
    if km.min_clamp_gap < CLAMP_MARGIN:
        return f"fusion weight {km.min_clamp_gap:.2e} from the clamp"
    if km.min_routing_margin < ROUTING_MARGIN:
        return f"routing margin {km.min_routing_margin:.2e}"
    return None


def _rel_err(a: float, f: float) -> float:
    return abs(a - f) / max(abs(a), abs(f), REL_FLOOR)


def _central_diff(fn, base: T.Tensor, flat_index: int) -> float:
    flat = np.array(base.array, dtype=np.float64).reshape(-1)
    step = FD_STEP * max(1.0, abs(float(flat[flat_index])))
    orig = flat[flat_index]
    flat[flat_index] = orig + step
    fp = fn(T.tensor(flat.reshape(base.dims)))
    flat[flat_index] = orig - step
    fm = fn(T.tensor(flat.reshape(base.dims)))
    if not (np.isfinite(fp) and np.isfinite(fm)):
        raise NumericError(f"non-finite loss while differencing coordinate {flat_index}")
    return (fp - fm) / (2.0 * step)


def _sample_coords(rng: T.Rng, size: int, count: int) -> list:
    if size <= count:
        return list(range(size))
    picked = []
    while len(picked) < count:
        i = rng.randint(size)
        if i not in picked:
            picked.append(i)
    return picked


def _check_group(entries, eval_loss, rng: T.Rng) -> dict:
    """entries: list of (name, Tensor).  eval_loss(values: dict) -> float
    or loss node; values maps names to Tensor or Node."""
    tape = T.Tape()
    leaves = {name: tape.leaf(t) for name, t in entries}
    loss_node = eval_loss(dict(leaves))
    grads = tape.backward(loss_node, T.tensor([1.0]))
    worst = 0.0
    coords = 0
    base = {name: t for name, t in entries}
    for name, t in entries:
        analytic = T._val(grads[leaves[name]]).reshape(-1)
        for idx in _sample_coords(rng, t.size, COORDS_PER_TENSOR):
            def fd_fn(perturbed, _name=name):
                values = dict(base)
                values[_name] = perturbed
                out = eval_loss(values)
                return float(T._val(out).reshape(-1)[0])
            fd = _central_diff(fd_fn, t, idx)
            worst = max(worst, _rel_err(float(analytic[idx]), fd))
            coords += 1
    return {"max_rel_err": worst, "coords": coords, "pass": worst <= PASS_THRESHOLD}


def _loss_of(out: dict):
    tot = None
    for lvl in (2, 3, 4, 5):
        s = T.sum_all(out[lvl])
        tot = s if tot is None else T.add(tot, s)
    return tot


def _pipeline_case(cfg, seed: int):
    """Desk-scale backbone sized so the region grid tiles every refined
    level: level 4 is S x S, level 3 is 2S x 2S."""
    s = cfg.regions_s
    h2 = 8 * s
    channels = {2: 3, 3: 3, 4: 4, 5: 4}
    base_cfg = replace(cfg, activation="none", seed=seed)
    events = []
    for attempt in range(MAX_RESEEDS):
        case_seed = seed + attempt
        params = build_pipeline_params(replace(base_cfg, seed=case_seed), channels)
        # The production draw keeps projections small, which squeezes the
        # affinity gaps below the absolute resampling margin.  Boost them
        # for the check; the math under test is unchanged.
        boosted = {lvl: replace(bp,
                                w_q=T.tensor(T._val(bp.w_q) * 10.0),
                                w_k=T.tensor(T._val(bp.w_k) * 10.0),
                                w_v=T.tensor(T._val(bp.w_v) * 10.0))
                   for lvl, bp in params.bra.items()}
        params = replace(params, bra=boosted)
        rng = T.Rng(case_seed ^ 0x5DEECE66D)
        backbone = {lvl: rng.tensor([channels[lvl], h2 >> (lvl - 2), h2 >> (lvl - 2)], -1.0, 1.0)
                    for lvl in (2, 3, 4, 5)}
        capture = {}
        with watch_kinks() as km:
            c_afbifpn_forward(backbone, params, capture_routing=capture)
        reason = _monitor_reason(km)
        if reason is None:
            return params, backbone, capture, events, case_seed
        events.append({"seed": case_seed, "reason": reason})
    raise NumericError(f"no smooth case found in {MAX_RESEEDS} reseeds: {events[-1]['reason']}")


def run_gradcheck(cfg, seed: int) -> dict:
    """Check every parameter group of the full assembly; returns a report
    with per-group worst relative errors."""
    params, backbone, routing, events, case_seed = _pipeline_case(cfg, seed)
    coord_rng = T.Rng(seed ^ 0xC0FFEE)

    def loss_with(p2) -> object:
        return _loss_of(c_afbifpn_forward(backbone, p2, routing_override=routing))

    groups = {}

    cfe2 = params.cfe[2]
    kernel_entries = [
        ("b1-row-conv", cfe2.branch1[1].weights),
        ("b1-dilated", cfe2.branch1[3].weights),
        ("b2-row-conv", cfe2.branch2[1].weights),
        ("b3-deform-base", cfe2.branch3[3].base.weights),
        ("residual", cfe2.residual.weights),
    ]

    def eval_cfe_kernels(vals):
        b1 = list(cfe2.branch1)
        b1[1] = replace(b1[1], weights=vals["b1-row-conv"])
        b1[3] = replace(b1[3], weights=vals["b1-dilated"])
        b2 = list(cfe2.branch2)
        b2[1] = replace(b2[1], weights=vals["b2-row-conv"])
        b3 = list(cfe2.branch3)
        b3[3] = DeformableParams(replace(b3[3].base, weights=vals["b3-deform-base"]),
                                 b3[3].offset_predictor)
        new2 = replace(cfe2, branch1=tuple(b1), branch2=tuple(b2), branch3=tuple(b3),
                       residual=replace(cfe2.residual, weights=vals["residual"]))
        return loss_with(replace(params, cfe={**params.cfe, 2: new2}))

    groups["cfe-kernels"] = _check_group(kernel_entries, eval_cfe_kernels, coord_rng)

    bias_entries = [
        ("b1-reduce-bias", cfe2.branch1[0].bias),
        ("b3-deform-bias", cfe2.branch3[3].base.bias),
        ("residual-bias", cfe2.residual.bias),
    ]

    def eval_cfe_biases(vals):
        b1 = list(cfe2.branch1)
        b1[0] = replace(b1[0], bias=vals["b1-reduce-bias"])
        b3 = list(cfe2.branch3)
        b3[3] = DeformableParams(replace(b3[3].base, bias=vals["b3-deform-bias"]),
                                 b3[3].offset_predictor)
        new2 = replace(cfe2, branch1=tuple(b1), branch3=tuple(b3),
                       residual=replace(cfe2.residual, bias=vals["residual-bias"]))
        return loss_with(replace(params, cfe={**params.cfe, 2: new2}))

    groups["cfe-biases"] = _check_group(bias_entries, eval_cfe_biases, coord_rng)

    bra3, bra4 = params.bra[3], params.bra[4]
    proj_entries = [("l3-query", bra3.w_q), ("l3-key", bra3.w_k),
                    ("l3-value", bra3.w_v), ("l4-query", bra4.w_q)]

    def eval_projections(vals):
        nb3 = replace(bra3, w_q=vals["l3-query"], w_k=vals["l3-key"], w_v=vals["l3-value"])
        nb4 = replace(bra4, w_q=vals["l4-query"])
        return loss_with(replace(params, bra={3: nb3, 4: nb4}))

    groups["bra-projections"] = _check_group(proj_entries, eval_projections, coord_rng)

    lce_entries = [("l3-lce", bra3.lce_kernel), ("l4-lce", bra4.lce_kernel)]

    def eval_lce(vals):
        return loss_with(replace(params, bra={3: replace(bra3, lce_kernel=vals["l3-lce"]),
                                              4: replace(bra4, lce_kernel=vals["l4-lce"])}))

    groups["lce"] = _check_group(lce_entries, eval_lce, coord_rng)

    fusion = params.fusion
    fusion_nodes = ["p2_out", "p3_mid", "p3_out", "p4_mid", "p4_out", "p5_out"]
    fusion_entries = []
    for node_name in fusion_nodes:
        for j, wv in enumerate(getattr(fusion, node_name)):
            fusion_entries.append((f"{node_name}[{j}]", T.tensor([float(wv)])))

    def eval_fusion(vals):
        fields = {}
        for node_name in fusion_nodes:
            fields[node_name] = tuple(vals[f"{node_name}[{j}]"]
                                      for j in range(len(getattr(fusion, node_name))))
        return loss_with(replace(params, fusion=replace(fusion, **fields)))

    groups["fusion-weights"] = _check_group(fusion_entries, eval_fusion, coord_rng)

    groups["offsets"] = _offsets_case(seed, coord_rng)
    groups["offset-predictor"] = _predictor_case(seed, coord_rng, events)
    groups["relu-path"] = _relu_case(seed, coord_rng, events)

    ok = all(g["pass"] for g in groups.values())
    return {"seed": seed, "case_seed": case_seed, "threshold": PASS_THRESHOLD,
            "resample_events": events, "groups": groups, "pass": ok}


def _offsets_case(seed: int, coord_rng: T.Rng) -> dict:
    """Gradient through the sampling positions themselves, with an explicit
    offset field held strictly off the lattice."""
    rng = T.Rng(seed ^ 0x0FF5E75)
    x = rng.tensor([3, 5, 5], -1.0, 1.0)
    base = Conv2dParams(weights=rng.tensor([2, 3, 3, 3], -0.5, 0.5),
                        bias=rng.tensor([2], -0.1, 0.1), padding=1)
    off = T._val(rng.tensor([18, 5, 5], -0.2, 0.2)) + 0.35  # fractions in [0.15, 0.55]
    offsets = T.tensor(off)

    def eval_offsets(vals):
        out = deformable_conv2d_with_offsets(x, base, vals["offsets"])
        return T.sum_all(out)

    with watch_kinks() as km:
        eval_offsets({"offsets": offsets})
    if 0.0 < km.min_lattice_gap < LATTICE_MARGIN:
        raise NumericError("constructed offsets sit near the lattice")
    return _check_group([("offsets", offsets)], eval_offsets, coord_rng)


def _predictor_case(seed: int, coord_rng: T.Rng, events: list) -> dict:
    """Gradient through the offset-predicting convolution, the one chain
    where differencing a weight moves the sampling positions.  Kept at
    desk scale so a real lattice margin is attainable by reseeding."""
    from .convops import deformable_conv2d

    for attempt in range(MAX_RESEEDS):
        case_seed = seed + 2000 + attempt
        rng = T.Rng(case_seed)
        x = rng.tensor([3, 6, 6], -1.0, 1.0)
        base = Conv2dParams(weights=rng.tensor([2, 3, 3, 3], -0.5, 0.5),
                            bias=rng.tensor([2], -0.1, 0.1), padding=1)
        predictor = Conv2dParams(weights=rng.tensor([18, 3, 3, 3], -0.6, 0.6),
                                 bias=rng.tensor([18], -0.4, 0.4), padding=1)

        def eval_pred(vals):
            p = DeformableParams(base, replace(predictor, weights=vals["pred-weights"],
                                               bias=vals["pred-bias"]))
            return T.sum_all(deformable_conv2d(x, p))

        entries = [("pred-weights", predictor.weights), ("pred-bias", predictor.bias)]
        with watch_kinks() as km:
            eval_pred(dict(entries))
        reason = _monitor_reason(km, lattice=True)
        if reason is None:
            return _check_group(entries, eval_pred, coord_rng)
        events.append({"seed": case_seed, "reason": f"predictor case: {reason}"})
    raise NumericError(f"no smooth predictor case found in {MAX_RESEEDS} reseeds")


def _relu_case(seed: int, coord_rng: T.Rng, events: list) -> dict:
    """Small relu-active block where the pre-activation margin is
    attainable; reseeds like the main case."""
    for attempt in range(MAX_RESEEDS):
        case_seed = seed + 1000 + attempt
        rng = T.Rng(case_seed)
        params = make_cfe_params(rng, 3, 6, activation="relu", offset_scale=1.0)
        x = rng.tensor([3, 4, 4], -1.0, 1.0)

        def eval_relu(vals):
            b1 = list(params.branch1)
            b1[1] = replace(b1[1], weights=vals["kernel"])
            p2 = replace(params, branch1=tuple(b1),
                         residual=replace(params.residual, bias=vals["bias"]))
            return T.sum_all(cfe_forward(x, p2))

        entries = [("kernel", params.branch1[1].weights), ("bias", params.residual.bias)]
        with watch_kinks() as km:
            eval_relu(dict(entries))
        reason = _monitor_reason(km)
        if reason is None:
            return _check_group(entries, eval_relu, coord_rng)
        events.append({"seed": case_seed, "reason": f"relu case: {reason}"})
    raise NumericError(f"no smooth relu case found in {MAX_RESEEDS} reseeds")
