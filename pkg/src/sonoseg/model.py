"""Full segmentation model: extractor + heads, training losses, SGD, and
box/mask inference with mask pasting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import boxes as bx
from . import config
from .fpn import BackboneConfig, FpnWeights, extract
from .heads import (BoxHeadWeights, MaskHeadWeights, RpnWeights,
                    box_head_forward, mask_head_forward, roi_pool,
                    rpn_head_forward)
from .losses import (classification_loss, mask_loss, objectness_loss,
                     smooth_l1, total_loss)
from .srnn import SrnnConfig
from .tensor import (Tensor4, add_const, concat_batch, concat_channels,
                     flatten, index_channels, make_op, reshape)


@dataclass
class ModelConfig:
    in_channels: int = 1
    backbone_widths: tuple = (16, 32, 64, 128)
    pyramid_width: int = 64
    srnn_rounds: int = 2
    srnn_enabled: bool = True
    num_classes: int = 6
    box_head_hidden: int = 128
    box_pool_res: int = 7
    mask_pool_res: int = 14
    mask_out_res: int = 28
    anchor_sizes: tuple = bx.ANCHOR_SIZES
    strides: tuple = bx.STRIDES
    iou_fg: float = 0.7
    iou_bg: float = 0.3
    rpn_nms_thresh: float = 0.7
    proposals_per_level: int = 1000
    score_thresh: float = 0.5
    detect_nms_thresh: float = 0.5
    beta: float = 1.0
    normalized_deltas: bool = False
    rois_per_gt: int = 2
    bg_rois: int = 2


@dataclass
class ModelWeights:
    fpn: FpnWeights
    rpn: RpnWeights
    box: BoxHeadWeights
    mask: MaskHeadWeights
    cfg: ModelConfig = field(default_factory=ModelConfig)

    @classmethod
    def create(cls, cfg: ModelConfig, rng: np.random.Generator,
               dtype=np.float32) -> "ModelWeights":
        fpn = FpnWeights.create(
            BackboneConfig(widths=cfg.backbone_widths, in_channels=cfg.in_channels),
            cfg.pyramid_width, SrnnConfig(rounds=cfg.srnn_rounds), rng, dtype)
        rpn = RpnWeights.create(cfg.pyramid_width, rng, dtype)
        box = BoxHeadWeights.create(cfg.pyramid_width, cfg.box_head_hidden, rng,
                                    cfg.num_classes, cfg.box_pool_res, dtype)
        mask = MaskHeadWeights.create(cfg.pyramid_width, rng, cfg.num_classes,
                                      cfg.mask_pool_res, cfg.mask_out_res, dtype)
        return cls(fpn=fpn, rpn=rpn, box=box, mask=mask, cfg=cfg)

    def params(self) -> dict[str, Tensor4]:
        out = self.fpn.params("fpn")
        out.update(self.rpn.params("rpn"))
        out.update(self.box.params("box_head"))
        out.update(self.mask.params("mask_head"))
        return out


@dataclass
class Instance:
    class_id: int
    box: np.ndarray          # (4,) center-format, image pixels
    mask: np.ndarray         # (h, w) bool


def instances_from_mask(label_mask: np.ndarray, min_pixels: int = 8) -> list[Instance]:
    """Ground-truth instances as 8-connected components per class."""
    label_mask = np.asarray(label_mask)
    structure = np.ones((3, 3), dtype=np.int64)
    out = []
    for cid in range(1, int(label_mask.max()) + 1):
        lab, num = ndimage.label(label_mask == cid, structure=structure)
        for k in range(1, num + 1):
            m = lab == k
            if m.sum() < min_pixels:
                continue
            ys, xs = np.nonzero(m)
            x1, x2 = xs.min(), xs.max() + 1
            y1, y2 = ys.min(), ys.max() + 1
            box = np.array([(x1 + x2) / 2.0, (y1 + y2) / 2.0,
                            float(x2 - x1), float(y2 - y1)])
            out.append(Instance(class_id=cid, box=box, mask=m))
    return out


def _sample_mask_targets(inst_masks: list[np.ndarray], rois: np.ndarray,
                         out_res: int) -> np.ndarray:
    """Nearest-neighbor samples of instance masks at ROI cell centers."""
    r = rois.shape[0]
    out = np.zeros((r, 1, out_res, out_res), dtype=np.float64)
    steps = (np.arange(out_res) + 0.5) / out_res
    for i in range(r):
        cx, cy, w, h = rois[i]
        sx = np.clip(np.rint(cx - w / 2 + w * steps - 0.5).astype(int),
                     0, inst_masks[i].shape[1] - 1)
        sy = np.clip(np.rint(cy - h / 2 + h * steps - 0.5).astype(int),
                     0, inst_masks[i].shape[0] - 1)
        out[i, 0] = inst_masks[i][np.ix_(sy, sx)]
    return out


def _pool_rois(pyramid, rois: np.ndarray, cfg: ModelConfig, out_res: int) -> Tensor4:
    """Pool each ROI from its size-assigned level, preserving ROI order."""
    levels = bx.assign_levels(rois, cfg.anchor_sizes)
    pooled = [None] * rois.shape[0]
    for lv in range(4):
        idx = np.nonzero(levels == lv)[0]
        if idx.size == 0:
            continue
        p = roi_pool(pyramid.levels[lv][1], rois[idx], cfg.strides[lv], out_res)
        for slot, j in enumerate(idx):
            pooled[j] = (p, slot)
    # one-row slices keep the tape simple; ROI counts are small
    return concat_batch([index_batch_row(p, slot) for p, slot in pooled])


def index_batch_row(x: Tensor4, row: int) -> Tensor4:
    """Select one batch row as (1, c, h, w)."""
    out = x.data[row:row + 1].copy()

    def vjp(gout):
        g = np.zeros_like(x.data)
        g[row] = gout[0]
        return (g,)

    return make_op(out, "index_batch_row", (x,), vjp)


def compute_losses(weights: ModelWeights, image: Tensor4,
                   instances: list[Instance],
                   rng: np.random.Generator):
    """Five-term training loss for one image; returns (scalar, breakdown)."""
    cfg = weights.cfg
    h_img, w_img = image.dims[2], image.dims[3]
    pyramid = extract(image, weights.fpn, cfg.srnn_enabled)
    gt_boxes = np.stack([inst.box for inst in instances]) if instances else \
        np.zeros((0, 4))

    # RPN over all levels, fixed level order
    obj_parts, reg_parts = [], []
    labels_all, tgt_maps, msk_maps = [], [], []
    for lv, (stride, fmap) in enumerate(pyramid.levels):
        obj, reg = rpn_head_forward(fmap, weights.rpn)
        hf, wf = fmap.dims[2], fmap.dims[3]
        anchors = bx.generate_anchors([(hf, wf)], (cfg.anchor_sizes[lv],),
                                      (stride,))[0]
        labels, matched = bx.match_anchors(anchors, gt_boxes,
                                           cfg.iou_fg, cfg.iou_bg)
        labels_all.append(labels)
        tgt = np.zeros((1, 4, hf, wf), dtype=image.dtype)
        msk = np.zeros((1, 4, hf, wf), dtype=image.dtype)
        fg = np.nonzero(labels == 1)[0]
        if fg.size:
            deltas = bx.encode_deltas(anchors[fg], gt_boxes[matched[fg]],
                                      cfg.normalized_deltas)
            ii, jj = fg // wf, fg % wf
            tgt[0, :, ii, jj] = deltas.astype(image.dtype)
            msk[0, :, ii, jj] = 1.0
        obj_parts.append(flatten(obj))
        reg_parts.append(flatten(add_const(reg, -tgt)))
        tgt_maps.append(tgt)
        msk_maps.append(msk.reshape(1, -1, 1, 1))

    obj_logits = concat_channels(obj_parts)
    labels_cat = np.concatenate(labels_all)
    l_obj = objectness_loss(obj_logits, labels_cat)
    anchor_res = concat_channels(reg_parts)
    anchor_msk = np.concatenate(msk_maps, axis=1)
    l_anchor = smooth_l1(anchor_res, cfg.beta, anchor_msk)

    terms = {"obj": l_obj, "anchor_reg": l_anchor}

    if instances:
        # ROIs: jittered gt boxes (foreground) plus random background boxes
        fg_rois, fg_cls, fg_tgts, fg_masks = [], [], [], []
        for inst in instances:
            for _ in range(cfg.rois_per_gt):
                cx, cy, w, h = inst.box
                jcx = cx + rng.uniform(-0.1, 0.1) * w
                jcy = cy + rng.uniform(-0.1, 0.1) * h
                jw = w * np.exp(rng.uniform(-0.1, 0.1))
                jh = h * np.exp(rng.uniform(-0.1, 0.1))
                roi = bx.clip_box(np.array([[jcx, jcy, jw, jh]]), h_img, w_img)[0]
                fg_rois.append(roi)
                fg_cls.append(inst.class_id)
                fg_tgts.append(inst.box)
                fg_masks.append(inst.mask)
        bg_rois = []
        for _ in range(cfg.bg_rois):
            for _try in range(20):
                w = rng.uniform(8.0, w_img / 2)
                h = rng.uniform(8.0, h_img / 2)
                cx = rng.uniform(w / 2, w_img - w / 2)
                cy = rng.uniform(h / 2, h_img - h / 2)
                cand = np.array([[cx, cy, w, h]])
                if bx.iou_matrix(cand, gt_boxes).max() < cfg.iou_bg:
                    bg_rois.append(cand[0])
                    break
        rois = np.stack(fg_rois + bg_rois)
        cls_targets = np.array(fg_cls + [0] * len(bg_rois), dtype=np.int64)
        nfg = len(fg_rois)

        pooled7 = _pool_rois(pyramid, rois, cfg, cfg.box_pool_res)
        cls_logits, reg_out = box_head_forward(pooled7, weights.box)
        terms["cls"] = classification_loss(cls_logits, cls_targets)

        reg_resh = reshape(reg_out, (rois.shape[0], cfg.num_classes, 4, 1))
        reg_sel = index_batch_rows(reg_resh, np.arange(nfg))
        reg_sel = index_channels(reg_sel, cls_targets[:nfg])
        box_tgt = bx.encode_deltas(np.stack(fg_rois), np.stack(fg_tgts),
                                   cfg.normalized_deltas)
        box_tgt = box_tgt.reshape(nfg, 1, 4, 1).astype(image.dtype)
        terms["box_reg"] = smooth_l1(add_const(reg_sel, -box_tgt), cfg.beta)

        fg_roi_arr = np.stack(fg_rois)
        pooled14 = _pool_rois(pyramid, fg_roi_arr, cfg, cfg.mask_pool_res)
        mlogits = mask_head_forward(pooled14, weights.mask)
        mlogits = index_channels(mlogits, cls_targets[:nfg])
        mtruth = _sample_mask_targets(fg_masks, fg_roi_arr, cfg.mask_out_res)
        terms["mask"] = mask_loss(mlogits, mtruth.astype(image.dtype))

    return total_loss(terms)


def index_batch_rows(x: Tensor4, rows: np.ndarray) -> Tensor4:
    """Select a batch-row subset (rows must be unique)."""
    rows = np.asarray(rows, dtype=np.int64)
    out = x.data[rows].copy()

    def vjp(gout):
        g = np.zeros_like(x.data)
        g[rows] = gout
        return (g,)

    return make_op(out, "index_batch_rows", (x,), vjp)


class SGD:
    """Plain SGD with optional momentum, fixed learning rate."""

    def __init__(self, params: dict[str, Tensor4], lr: float,
                 momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.vel = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            self.vel[k] = self.momentum * self.vel[k] - self.lr * g
            p.data = p.data + self.vel[k]

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


@dataclass
class Detection:
    class_id: int
    score: float
    box: np.ndarray
    mask_prob: np.ndarray  # (m, m)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def propose(pyramid, weights: ModelWeights):
    """Per-level RPN proposals after decode, clip, and greedy NMS."""
    cfg = weights.cfg
    all_boxes, all_scores, all_levels = [], [], []
    for lv, (stride, fmap) in enumerate(pyramid.levels):
        obj, reg = rpn_head_forward(fmap, weights.rpn)
        hf, wf = fmap.dims[2], fmap.dims[3]
        scores = _sigmoid(obj.data.reshape(-1))
        anchors = bx.generate_anchors([(hf, wf)], (cfg.anchor_sizes[lv],),
                                      (stride,))[0]
        deltas = reg.data.reshape(4, -1).T
        props = bx.decode_deltas(anchors, deltas, cfg.normalized_deltas)
        h_img = hf * stride
        w_img = wf * stride
        props = bx.clip_box(props, h_img, w_img)
        keep = bx.nms(props, scores, cfg.rpn_nms_thresh, cfg.proposals_per_level)
        all_boxes.append(props[keep])
        all_scores.append(scores[keep])
        all_levels.append(np.full(len(keep), lv))
    return (np.concatenate(all_boxes), np.concatenate(all_scores),
            np.concatenate(all_levels))


def detect(image: Tensor4, weights: ModelWeights,
           max_detections: int = 20) -> list[Detection]:
    cfg = weights.cfg
    h_img, w_img = image.dims[2], image.dims[3]
    with config.no_grad():
        pyramid = extract(image, weights.fpn, cfg.srnn_enabled)
        props, _, _ = propose(pyramid, weights)
        if props.shape[0] == 0:
            return []
        pooled7 = _pool_rois(pyramid, props, cfg, cfg.box_pool_res)
        cls_logits, reg_out = box_head_forward(pooled7, weights.box)
        z = cls_logits.data.reshape(props.shape[0], cfg.num_classes)
        z = z - z.max(axis=1, keepdims=True)
        sm = np.exp(z)
        sm /= sm.sum(axis=1, keepdims=True)
        cls = sm.argmax(axis=1)
        score = sm[np.arange(len(cls)), cls]
        keep = (cls > 0) & (score >= cfg.score_thresh)
        if not keep.any():
            return []
        rois = props[keep]
        cls = cls[keep]
        score = score[keep]
        deltas = reg_out.data.reshape(-1, cfg.num_classes, 4)[keep]
        deltas = deltas[np.arange(len(cls)), cls]
        final = bx.clip_box(bx.decode_deltas(rois, deltas, cfg.normalized_deltas),
                            h_img, w_img)
        # per-class greedy suppression of the refined boxes
        sel = []
        for c in np.unique(cls):
            idx = np.nonzero(cls == c)[0]
            kept = bx.nms(final[idx], score[idx], cfg.detect_nms_thresh,
                          max_detections)
            sel.extend(idx[kept])
        sel = sorted(sel, key=lambda i: (-score[i], i))[:max_detections]
        if not sel:
            return []
        sel = np.asarray(sel)
        pooled14 = _pool_rois(pyramid, final[sel], cfg, cfg.mask_pool_res)
        mlogits = mask_head_forward(pooled14, weights.mask)
        probs = _sigmoid(mlogits.data)
        return [Detection(class_id=int(cls[i]), score=float(score[i]),
                          box=final[i],
                          mask_prob=probs[k, cls[i]])
                for k, i in enumerate(sel)]


def paste_masks(detections: list[Detection], height: int, width: int,
                thresh: float = 0.5) -> np.ndarray:
    """Bilinearly resize each detection's mask into its box and composite by
    ascending score, so the highest score wins overlapping pixels."""
    out = np.zeros((height, width), dtype=np.int64)
    for det in sorted(detections, key=lambda d: d.score):
        cx, cy, w, h = det.box
        m = det.mask_prob.shape[0]
        x1 = int(np.floor(cx - w / 2))
        y1 = int(np.floor(cy - h / 2))
        x2 = int(np.ceil(cx + w / 2))
        y2 = int(np.ceil(cy + h / 2))
        xs = np.arange(max(x1, 0), min(x2, width))
        ys = np.arange(max(y1, 0), min(y2, height))
        if xs.size == 0 or ys.size == 0:
            continue
        u = np.clip((xs + 0.5 - (cx - w / 2)) / w * m - 0.5, 0, m - 1)
        v = np.clip((ys + 0.5 - (cy - h / 2)) / h * m - 0.5, 0, m - 1)
        u0 = np.floor(u).astype(int)
        v0 = np.floor(v).astype(int)
        u1 = np.minimum(u0 + 1, m - 1)
        v1 = np.minimum(v0 + 1, m - 1)
        au = u - u0
        av = v - v0
        mp = det.mask_prob
        vals = (mp[np.ix_(v0, u0)] * np.outer(1 - av, 1 - au)
                + mp[np.ix_(v0, u1)] * np.outer(1 - av, au)
                + mp[np.ix_(v1, u0)] * np.outer(av, 1 - au)
                + mp[np.ix_(v1, u1)] * np.outer(av, au))
        region = out[np.ix_(ys, xs)]
        region[vals > thresh] = det.class_id
        out[np.ix_(ys, xs)] = region
    return out


def _parse_widths(s: str) -> tuple:
    return tuple(int(v) for v in s.split(","))


MODEL_CONFIG_SCHEMA = {
    "backbone_widths": _parse_widths,
    "pyramid_width": int,
    "srnn_rounds": int,
    "srnn_enabled": bool,
    "num_classes": int,
    "box_head_hidden": int,
    "mask_pool_res": int,
    "mask_out_res": int,
    "score_thresh": float,
    "normalized_deltas": bool,
}


def save_model(dirpath, weights: ModelWeights) -> None:
    from pathlib import Path

    from .archive import save_checkpoint
    save_checkpoint(dirpath, weights.params())
    cfg = weights.cfg
    lines = [
        f"backbone_widths={','.join(str(w) for w in cfg.backbone_widths)}",
        f"pyramid_width={cfg.pyramid_width}",
        f"srnn_rounds={cfg.srnn_rounds}",
        f"srnn_enabled={str(cfg.srnn_enabled).lower()}",
        f"num_classes={cfg.num_classes}",
        f"box_head_hidden={cfg.box_head_hidden}",
        f"mask_pool_res={cfg.mask_pool_res}",
        f"mask_out_res={cfg.mask_out_res}",
        f"score_thresh={cfg.score_thresh}",
        f"normalized_deltas={str(cfg.normalized_deltas).lower()}",
    ]
    (Path(dirpath) / "model_config.txt").write_text("\n".join(lines) + "\n")


def load_model(dirpath) -> ModelWeights:
    from pathlib import Path

    from .archive import load_checkpoint, parse_config_text
    text = (Path(dirpath) / "model_config.txt").read_text()
    kv = parse_config_text(text, MODEL_CONFIG_SCHEMA)
    cfg = ModelConfig(**kv)
    weights = ModelWeights.create(cfg, np.random.default_rng(0))
    load_checkpoint(dirpath, weights.params())
    return weights


def predict_label_mask(image_arr: np.ndarray, weights: ModelWeights) -> np.ndarray:
    """Grayscale [0, 1] image -> per-pixel class map."""
    img = np.asarray(image_arr, dtype=np.float32)
    t = Tensor4(img[None, None])
    dets = detect(t, weights)
    return paste_masks(dets, img.shape[0], img.shape[1])
