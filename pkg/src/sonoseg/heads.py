"""RPN / box / mask head networks and differentiable ROI pooling.

One weight set per head serves every pyramid level."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (ConvWeights, ShapeError, Tensor4, conv, flatten,
                     fully_connected, make_op, relu, upsample2x_nearest)

NUM_CLASSES = 6  # 5 organs + background


def roi_pool(level_map: Tensor4, rois: np.ndarray, stride: int,
             out_res: int) -> Tensor4:
    """Bilinear sampling of (1, c, hf, wf) at out_res x out_res cell centers
    inside each center-format box (in input-image pixels). Returns
    (R, c, out_res, out_res)."""
    n, c, hf, wf = level_map.dims
    if n != 1:
        raise ShapeError(f"roi_pool expects batch 1, got {level_map.dims}")
    rois = np.asarray(rois, dtype=np.float64)
    if rois.ndim == 1:
        rois = rois[None]
    r = rois.shape[0]
    if np.any(rois[:, 2] < 1.0) or np.any(rois[:, 3] < 1.0):
        raise ValueError("degenerate (sub-pixel) ROI box")
    # cell-center sample points in image coords, then feature coords
    steps = (np.arange(out_res) + 0.5) / out_res
    sx = (rois[:, 0] - rois[:, 2] / 2)[:, None] + rois[:, 2][:, None] * steps[None]
    sy = (rois[:, 1] - rois[:, 3] / 2)[:, None] + rois[:, 3][:, None] * steps[None]
    fx = np.clip(sx / stride - 0.5, 0.0, wf - 1.0)
    fy = np.clip(sy / stride - 0.5, 0.0, hf - 1.0)
    gx = np.broadcast_to(fx[:, None, :], (r, out_res, out_res)).reshape(-1)
    gy = np.broadcast_to(fy[:, :, None], (r, out_res, out_res)).reshape(-1)
    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    x1 = np.minimum(x0 + 1, wf - 1)
    y1 = np.minimum(y0 + 1, hf - 1)
    ax = (gx - x0).astype(level_map.dtype)
    ay = (gy - y0).astype(level_map.dtype)
    flat = level_map.data.reshape(c, hf * wf)
    corners = ((y0 * wf + x0, (1 - ay) * (1 - ax)),
               (y0 * wf + x1, (1 - ay) * ax),
               (y1 * wf + x0, ay * (1 - ax)),
               (y1 * wf + x1, ay * ax))
    acc = np.zeros((c, r * out_res * out_res), dtype=level_map.dtype)
    for idx, wgt in corners:
        acc += flat[:, idx] * wgt[None]
    out = acc.reshape(c, r, out_res, out_res).transpose(1, 0, 2, 3).copy()

    def vjp(gout):
        g = gout.transpose(1, 0, 2, 3).reshape(c, -1)
        gflat = np.zeros((hf * wf, c), dtype=gout.dtype)
        for idx, wgt in corners:
            np.add.at(gflat, idx, (g * wgt[None]).T)
        return (gflat.T.reshape(level_map.dims),)

    return make_op(out, "roi_pool", (level_map,), vjp)


@dataclass
class RpnWeights:
    trunk: ConvWeights  # 3x3, P -> P
    obj: ConvWeights    # 1x1, P -> 1
    reg: ConvWeights    # 1x1, P -> 4

    @classmethod
    def create(cls, p: int, rng, dtype=np.float32) -> "RpnWeights":
        return cls(trunk=ConvWeights.create(p, p, 3, rng, dtype),
                   obj=ConvWeights.create(1, p, 1, rng, dtype),
                   reg=ConvWeights.create(4, p, 1, rng, dtype))

    def params(self, prefix: str = "rpn") -> dict[str, Tensor4]:
        out = {}
        for nm, cw in (("trunk", self.trunk), ("obj", self.obj), ("reg", self.reg)):
            out[f"{prefix}.{nm}.kernel"] = cw.kernel
            out[f"{prefix}.{nm}.bias"] = cw.bias
        return out


def rpn_head_forward(level: Tensor4, w: RpnWeights):
    """Per-cell objectness logit (n,1,h,w) and deltas (n,4,h,w)."""
    t = relu(conv(level, w.trunk))
    return conv(t, w.obj), conv(t, w.reg)


@dataclass
class BoxHeadWeights:
    """Fast R-CNN style head: 2 hidden fully-connected layers over 7x7 pooled
    features, then sibling class-logit and per-class delta outputs."""

    fc1_w: Tensor4
    fc1_b: Tensor4
    fc2_w: Tensor4
    fc2_b: Tensor4
    cls_w: Tensor4
    cls_b: Tensor4
    reg_w: Tensor4
    reg_b: Tensor4
    pool_res: int = 7

    @classmethod
    def create(cls, p: int, hidden: int, rng, num_classes: int = NUM_CLASSES,
               pool_res: int = 7, dtype=np.float32) -> "BoxHeadWeights":
        def fc(co, ci):
            bound = np.sqrt(6.0 / ci)
            w = rng.uniform(-bound, bound, size=(co, ci, 1, 1)).astype(dtype)
            return Tensor4(w), Tensor4(np.zeros((1, co, 1, 1), dtype=dtype))
        fin = p * pool_res * pool_res
        fc1_w, fc1_b = fc(hidden, fin)
        fc2_w, fc2_b = fc(hidden, hidden)
        cls_w, cls_b = fc(num_classes, hidden)
        reg_w, reg_b = fc(num_classes * 4, hidden)
        return cls(fc1_w, fc1_b, fc2_w, fc2_b, cls_w, cls_b, reg_w, reg_b,
                   pool_res=pool_res)

    def params(self, prefix: str = "box_head") -> dict[str, Tensor4]:
        return {f"{prefix}.fc1.w": self.fc1_w, f"{prefix}.fc1.b": self.fc1_b,
                f"{prefix}.fc2.w": self.fc2_w, f"{prefix}.fc2.b": self.fc2_b,
                f"{prefix}.cls.w": self.cls_w, f"{prefix}.cls.b": self.cls_b,
                f"{prefix}.reg.w": self.reg_w, f"{prefix}.reg.b": self.reg_b}


def box_head_forward(pooled: Tensor4, w: BoxHeadWeights):
    """(R, P, 7, 7) -> class logits (R, C, 1, 1) and deltas (R, 4C, 1, 1)."""
    x = relu(fully_connected(flatten(pooled), w.fc1_w, w.fc1_b))
    x = relu(fully_connected(x, w.fc2_w, w.fc2_b))
    return (fully_connected(x, w.cls_w, w.cls_b),
            fully_connected(x, w.reg_w, w.reg_b))


@dataclass
class MaskHeadWeights:
    """4 conv layers over 14x14 pooled features, optional 2x upsample, then a
    1x1 conv emitting per-class mask logits."""

    convs: list[ConvWeights]
    out: ConvWeights
    pool_res: int = 14
    out_res: int = 28

    @classmethod
    def create(cls, p: int, rng, num_classes: int = NUM_CLASSES,
               pool_res: int = 14, out_res: int = 28,
               dtype=np.float32) -> "MaskHeadWeights":
        if out_res not in (pool_res, 2 * pool_res):
            raise ValueError(
                f"out_res must be {pool_res} or {2 * pool_res}, got {out_res}")
        convs = [ConvWeights.create(p, p, 3, rng, dtype) for _ in range(4)]
        out = ConvWeights.create(num_classes, p, 1, rng, dtype)
        return cls(convs=convs, out=out, pool_res=pool_res, out_res=out_res)

    def params(self, prefix: str = "mask_head") -> dict[str, Tensor4]:
        out = {f"{prefix}.out.kernel": self.out.kernel,
               f"{prefix}.out.bias": self.out.bias}
        for i, cw in enumerate(self.convs):
            out[f"{prefix}.conv{i}.kernel"] = cw.kernel
            out[f"{prefix}.conv{i}.bias"] = cw.bias
        return out


def mask_head_forward(pooled: Tensor4, w: MaskHeadWeights) -> Tensor4:
    """(R, P, 14, 14) -> per-class mask logits (R, C, m, m)."""
    x = pooled
    for cw in w.convs:
        x = relu(conv(x, cw))
    if w.out_res == 2 * w.pool_res:
        x = upsample2x_nearest(x)
    return conv(x, w.out)
