"""Central-difference verification suite covering every differentiable op and
the composite blocks (context module, fusion, heads, total loss).

All checks run in float64 with seeded inputs; composites subsample
coordinates to keep the suite fast."""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import tensor as T
from .fpn import (BackboneConfig, BackboneWeights, backbone_forward,
                  fuse_context)
from .heads import (BoxHeadWeights, MaskHeadWeights, RpnWeights,
                    box_head_forward, mask_head_forward, roi_pool,
                    rpn_head_forward)
from .losses import (classification_loss, mask_loss, objectness_loss,
                     smooth_l1)
from .model import Instance, ModelConfig, ModelWeights, compute_losses
from .srnn import DIRECTIONS, IrnnWeights, SrnnConfig, create_srnn_weights, scan, srnn_module
from .tensor import ConvWeights, Tensor4, grad_check

F64 = np.float64


def _rand(rng, *dims, lo=-1.0, hi=1.0):
    return Tensor4(rng.uniform(lo, hi, size=dims).astype(F64))


def _scalarize(rng, dims):
    w = rng.uniform(-1.0, 1.0, size=dims)

    def reduce(t):
        return T.sum_all(T.mul_const(t, w))

    return reduce


_BUG_INJECTED = False


def _maybe_bugged_conv(x, w, stride=1):
    """conv with an optionally negated input gradient (mutation witness)."""
    out = T.conv(x, w, stride)
    if _BUG_INJECTED and out.node is not None:
        orig = out.node.vjp

        def bad_vjp(gout):
            gx, gk, gb = orig(gout)
            return -gx, gk, gb

        out.node.vjp = bad_vjp
    return out


def _check_conv(rng, k, stride, trial):
    x = _rand(rng, 2, 3, 4, 4)
    w = ConvWeights.create(2, 3, k, rng, F64)
    red = _scalarize(rng, (2, 2, (4 + stride - 1) // stride, (4 + stride - 1) // stride))
    return grad_check(lambda x_, kk, bb: red(_maybe_bugged_conv(
        x_, ConvWeights(kk, bb), stride)),
        [x, w.kernel, w.bias], name=f"conv{k}x{k}_s{stride}")


def _check_relu(rng, trial):
    # sample away from the kink at 0
    d = rng.uniform(0.1, 1.0, size=(1, 2, 3, 3)) * rng.choice([-1.0, 1.0],
                                                              size=(1, 2, 3, 3))
    x = Tensor4(d.astype(F64))
    red = _scalarize(rng, x.dims)
    return grad_check(lambda t: red(T.relu(t)), [x], name="relu")


def _check_simple(rng, op, name, dims=(1, 3, 4, 4)):
    x = _rand(rng, *dims)
    out = op(Tensor4(x.data.copy()))
    red = _scalarize(rng, out.dims)
    return grad_check(lambda t: red(op(t)), [x], name=name)


def _check_add(rng, trial):
    a = _rand(rng, 1, 2, 3, 3)
    b = _rand(rng, 1, 2, 3, 3)
    red = _scalarize(rng, a.dims)
    return grad_check(lambda u, v: red(T.add(u, v)), [a, b], name="add")


def _check_concat(rng, trial):
    a = _rand(rng, 1, 2, 3, 3)
    b = _rand(rng, 1, 3, 3, 3)
    red = _scalarize(rng, (1, 5, 3, 3))
    return grad_check(lambda u, v: red(T.concat_channels([u, v])), [a, b],
                      name="concat_channels")


def _check_fc(rng, trial):
    x = _rand(rng, 2, 5, 1, 1)
    w = _rand(rng, 3, 5, 1, 1)
    b = _rand(rng, 1, 3, 1, 1)
    red = _scalarize(rng, (2, 3, 1, 1))
    return grad_check(lambda u, v, c: red(T.fully_connected(u, v, c)),
                      [x, w, b], name="fully_connected")


def _check_l2norm(rng, trial):
    x = _rand(rng, 1, 4, 3, 3)
    g = _rand(rng, 1, 4, 1, 1, lo=0.5, hi=1.5)
    red = _scalarize(rng, x.dims)
    return grad_check(lambda u, v: red(T.channel_l2norm_scale(u, v)),
                      [x, g], name="channel_l2norm_scale")


def _check_scan(rng, direction, trial):
    x = _rand(rng, 1, 2, 5, 7)
    w = _rand(rng, 2, 2, 1, 1, lo=-0.6, hi=0.6)
    red = _scalarize(rng, x.dims)
    return grad_check(lambda u, v: red(scan(u, v, direction)), [x, w],
                      name=f"scan_{direction}")


def _check_srnn_module(rng, trial):
    cfg = SrnnConfig(rounds=2, c_hid=2, c_out=2)
    weights = create_srnn_weights(2, cfg, rng, F64)
    x = _rand(rng, 1, 2, 6, 6)
    red = _scalarize(rng, (1, 2, 6, 6))
    w0 = weights[0]
    return grad_check(
        lambda u, whh, pk: red_srnn(red, u, whh, pk, weights, cfg),
        [x, w0.w_hh["right"], w0.input_proj.kernel],
        name="srnn_module", max_elements=24, rng=rng)


def red_srnn(red, u, whh, pk, weights, cfg):
    weights[0].w_hh["right"] = whh
    weights[0].input_proj.kernel = pk
    return red(srnn_module(u, cfg, weights))


def _check_fuse_context(rng, trial):
    sem = _rand(rng, 1, 3, 4, 4)
    ctx = _rand(rng, 1, 3, 4, 4)
    gamma = _rand(rng, 1, 6, 1, 1, lo=0.5, hi=1.5)
    comp = ConvWeights.create(3, 6, 1, rng, F64)
    red = _scalarize(rng, (1, 3, 4, 4))
    return grad_check(
        lambda s, c, g, k: red(fuse_context(s, c, g, ConvWeights(k, comp.bias))),
        [sem, ctx, gamma, comp.kernel], name="fuse_context")


def _check_backbone(rng, trial):
    cfg = BackboneConfig(widths=(2, 2, 2, 2))
    w = BackboneWeights.create(cfg, rng, F64)
    x = _rand(rng, 1, 1, 32, 32)
    red = _scalarize(rng, (1, 2, 1, 1))
    return grad_check(
        lambda u, k: red(backbone_forward_k(u, k, w)[-1]),
        [x, w.stages[0].conv1.kernel],
        name="backbone", max_elements=24, rng=rng)


def backbone_forward_k(u, k, w):
    w.stages[0].conv1.kernel = k
    return backbone_forward(u, w)


def _check_roi_pool(rng, trial):
    fmap = _rand(rng, 1, 2, 8, 8)
    rois = np.array([[12.0, 10.0, 14.0, 12.0], [20.0, 20.0, 10.0, 16.0]])
    red = _scalarize(rng, (2, 2, 4, 4))
    return grad_check(lambda m: red(roi_pool(m, rois, 4, 4)), [fmap],
                      name="roi_pool")


def _check_rpn_head(rng, trial):
    w = RpnWeights.create(3, rng, F64)
    x = _rand(rng, 1, 3, 4, 4)
    r1 = _scalarize(rng, (1, 1, 4, 4))
    r2 = _scalarize(rng, (1, 4, 4, 4))

    def fn(u, tk):
        w.trunk.kernel = tk
        obj, reg = rpn_head_forward(u, w)
        return T.add(r1(obj), r2(reg))

    return grad_check(fn, [x, w.trunk.kernel], name="rpn_head",
                      max_elements=40, rng=rng)


def _check_box_head(rng, trial):
    w = BoxHeadWeights.create(2, 8, rng, num_classes=3, pool_res=3, dtype=F64)
    pooled = _rand(rng, 2, 2, 3, 3)
    r1 = _scalarize(rng, (2, 3, 1, 1))
    r2 = _scalarize(rng, (2, 12, 1, 1))

    def fn(u, fw):
        w.fc1_w = fw
        cls, reg = box_head_forward(u, w)
        return T.add(r1(cls), r2(reg))

    return grad_check(fn, [pooled, w.fc1_w], name="box_head",
                      max_elements=40, rng=rng)


def _check_mask_head(rng, trial):
    w = MaskHeadWeights.create(2, rng, num_classes=3, pool_res=4, out_res=8,
                               dtype=F64)
    pooled = _rand(rng, 1, 2, 4, 4)
    red = _scalarize(rng, (1, 3, 8, 8))

    def fn(u, k):
        w.convs[0].kernel = k
        return red(mask_head_forward(u, w))

    return grad_check(fn, [pooled, w.convs[0].kernel], name="mask_head",
                      max_elements=40, rng=rng)


def _check_losses(rng, trial):
    reports = []
    logits = _rand(rng, 1, 8, 1, 1, lo=-2.0, hi=2.0)
    labels = rng.integers(0, 2, size=8)
    labels_ig = labels.copy()
    labels_ig[0] = -1
    reports.append(grad_check(lambda z: objectness_loss(z, labels_ig),
                              [logits], name="objectness_loss"))
    res = _rand(rng, 1, 6, 1, 1, lo=-2.0, hi=2.0)
    reports.append(grad_check(lambda x: smooth_l1(x, 1.0), [res],
                              name="smooth_l1"))
    scores = _rand(rng, 3, 6, 1, 1, lo=-2.0, hi=2.0)
    tc = rng.integers(0, 6, size=3)
    reports.append(grad_check(lambda s: classification_loss(s, tc), [scores],
                              name="softmax_ce"))
    ml = _rand(rng, 2, 1, 4, 4, lo=-2.0, hi=2.0)
    truth = rng.integers(0, 2, size=(2, 1, 4, 4)).astype(F64)
    reports.append(grad_check(lambda z: mask_loss(z, truth), [ml],
                              name="mask_loss"))
    return reports


def _tiny_scene(rng):
    cfg = ModelConfig(backbone_widths=(2, 4, 4, 4), pyramid_width=4,
                      box_head_hidden=8, mask_pool_res=4, mask_out_res=8,
                      rois_per_gt=1, bg_rois=1)
    weights = ModelWeights.create(cfg, rng, F64)
    image = _rand(rng, 1, 1, 32, 32, lo=0.0, hi=1.0)
    m1 = np.zeros((32, 32), dtype=bool)
    m1[4:14, 6:18] = True
    m2 = np.zeros((32, 32), dtype=bool)
    m2[18:28, 16:28] = True
    instances = [
        Instance(1, np.array([12.0, 9.0, 12.0, 10.0]), m1),
        Instance(2, np.array([22.0, 23.0, 12.0, 10.0]), m2),
    ]
    return cfg, weights, image, instances


def _check_total_loss(rng, trial):
    cfg, weights, image, instances = _tiny_scene(rng)

    def fn(img, lat_k, whh, boxw, maskk):
        weights.fpn.laterals[0].kernel = lat_k
        weights.fpn.srnn[0][0].w_hh["down"] = whh
        weights.box.fc1_w = boxw
        weights.mask.out.kernel = maskk
        loss, _ = compute_losses(weights, img, instances,
                                 np.random.default_rng(1234))
        return loss

    return grad_check(
        fn,
        [image, weights.fpn.laterals[0].kernel,
         weights.fpn.srnn[0][0].w_hh["down"], weights.box.fc1_w,
         weights.mask.out.kernel],
        name="total_loss", max_elements=8, rng=rng)


def run_suite(op_filter: Optional[str] = None, trials: int = 10,
              inject_bug: Optional[str] = None, tolerance: float = 1e-4):
    """Run the whole check suite; returns a list of report dicts."""
    global _BUG_INJECTED
    _BUG_INJECTED = inject_bug == "conv-backward"
    try:
        reports = []
        for trial in range(trials):
            rng = np.random.default_rng(1000 + trial)
            batch = []
            batch.append(_check_conv(rng, 1, 1, trial))
            batch.append(_check_conv(rng, 3, 1, trial))
            batch.append(_check_conv(rng, 3, 2, trial))
            batch.append(_check_relu(rng, trial))
            batch.append(_check_simple(rng, T.sigmoid, "sigmoid"))
            batch.append(_check_simple(rng, T.softmax_channels, "softmax_channels"))
            batch.append(_check_simple(rng, T.upsample2x_nearest, "upsample2x_nearest"))
            batch.append(_check_simple(rng, T.maxpool2x2, "maxpool2x2"))
            batch.append(_check_simple(rng, T.avgpool2x2, "avgpool2x2"))
            batch.append(_check_add(rng, trial))
            batch.append(_check_concat(rng, trial))
            batch.append(_check_fc(rng, trial))
            batch.append(_check_l2norm(rng, trial))
            for d in DIRECTIONS:
                batch.append(_check_scan(rng, d, trial))
            batch.append(_check_srnn_module(rng, trial))
            batch.append(_check_fuse_context(rng, trial))
            batch.append(_check_backbone(rng, trial))
            batch.append(_check_roi_pool(rng, trial))
            batch.append(_check_rpn_head(rng, trial))
            batch.append(_check_box_head(rng, trial))
            batch.append(_check_mask_head(rng, trial))
            batch.extend(_check_losses(rng, trial))
            batch.append(_check_total_loss(rng, trial))
            for rep in batch:
                rep["trial"] = trial
                rep["passed"] = rep["worst"] <= tolerance
            reports.extend(batch)
        if op_filter:
            reports = [r for r in reports if op_filter in r["name"]]
        return reports
    finally:
        _BUG_INJECTED = False


def summarize(reports) -> tuple[str, bool]:
    """Per-op worst error across trials; returns (text, all_passed)."""
    worst: dict[str, float] = {}
    for r in reports:
        worst[r["name"]] = max(worst.get(r["name"], 0.0), r["worst"])
    tol = reports[0]["tolerance"] if reports else 1e-4
    lines = []
    ok = True
    for name in sorted(worst):
        passed = worst[name] <= tol
        ok &= passed
        lines.append(f"{'PASS' if passed else 'FAIL'} {name}: "
                     f"max rel err {worst[name]:.3e}")
    return "\n".join(lines), ok
