"""Anchor geometry, box-delta coding, IoU matching, and greedy NMS.

Boxes are float arrays (..., 4) of center-format (x, y, w, h) in input-image
pixels. Deltas are (d_x, d_y, d_w, d_h) with unnormalized center offsets and
log-ratio extents by default; `normalized` enables the conventional
anchor-scaled variant.
"""

from __future__ import annotations

import numpy as np

ANCHOR_SIZES = (32, 64, 128, 256)
STRIDES = (4, 8, 16, 32)

IGNORE = -1


def generate_anchors(level_dims, sizes=ANCHOR_SIZES, strides=STRIDES):
    """One square anchor per feature cell: cell (i, j) at stride s is centered
    at ((j + 0.5) s, (i + 0.5) s). Returns a list of (h*w, 4) arrays."""
    if len(sizes) != len(strides) or len(level_dims) != len(strides):
        raise ValueError(
            f"levels/sizes/strides length mismatch: {len(level_dims)}/{len(sizes)}/{len(strides)}")
    out = []
    for (h, w), size, stride in zip(level_dims, sizes, strides):
        jj, ii = np.meshgrid(np.arange(w), np.arange(h))
        cx = (jj.ravel() + 0.5) * stride
        cy = (ii.ravel() + 0.5) * stride
        boxes = np.stack([cx, cy, np.full(h * w, float(size)),
                          np.full(h * w, float(size))], axis=1)
        out.append(boxes)
    return out


def _check_extents(boxes, name):
    boxes = np.asarray(boxes, dtype=np.float64)
    if boxes.ndim == 1:
        boxes = boxes[None]
    if np.any(boxes[:, 2] <= 0) or np.any(boxes[:, 3] <= 0):
        raise ValueError(f"{name} boxes must have positive extents")
    return boxes


def encode_deltas(p, g, normalized: bool = False):
    """Deltas taking proposal/anchor p to ground truth g."""
    p = _check_extents(p, "proposal")
    g = _check_extents(g, "target")
    dx = g[:, 0] - p[:, 0]
    dy = g[:, 1] - p[:, 1]
    if normalized:
        dx = dx / p[:, 2]
        dy = dy / p[:, 3]
    dw = np.log(g[:, 2] / p[:, 2])
    dh = np.log(g[:, 3] / p[:, 3])
    return np.stack([dx, dy, dw, dh], axis=1)


def decode_deltas(p, d, normalized: bool = False):
    p = _check_extents(p, "proposal")
    d = np.asarray(d, dtype=np.float64)
    if d.ndim == 1:
        d = d[None]
    dx, dy = d[:, 0], d[:, 1]
    if normalized:
        dx = dx * p[:, 2]
        dy = dy * p[:, 3]
    gx = p[:, 0] + dx
    gy = p[:, 1] + dy
    gw = p[:, 2] * np.exp(d[:, 2])
    gh = p[:, 3] * np.exp(d[:, 3])
    return np.stack([gx, gy, gw, gh], axis=1)


def iou_matrix(a, b):
    """Pairwise IoU of center-format boxes: (Na, 4) x (Nb, 4) -> (Na, Nb)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ax1, ay1 = a[:, 0] - a[:, 2] / 2, a[:, 1] - a[:, 3] / 2
    ax2, ay2 = a[:, 0] + a[:, 2] / 2, a[:, 1] + a[:, 3] / 2
    bx1, by1 = b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2
    bx2, by2 = b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2
    ix = np.maximum(0.0, np.minimum(ax2[:, None], bx2[None]) -
                    np.maximum(ax1[:, None], bx1[None]))
    iy = np.maximum(0.0, np.minimum(ay2[:, None], by2[None]) -
                    np.maximum(ay1[:, None], by1[None]))
    inter = ix * iy
    area_a = (a[:, 2] * a[:, 3])[:, None]
    area_b = (b[:, 2] * b[:, 3])[None]
    return inter / (area_a + area_b - inter)


def match_anchors(anchors, gt_boxes, iou_fg: float = 0.7, iou_bg: float = 0.3):
    """Per-anchor labels: 1 foreground, 0 background, -1 ignore, plus the
    matched ground-truth index for foreground anchors. Each ground truth's
    best anchor is forced foreground."""
    if not (0.0 < iou_bg <= iou_fg < 1.0):
        raise ValueError(f"bad thresholds iou_fg={iou_fg}, iou_bg={iou_bg}")
    anchors = np.asarray(anchors, dtype=np.float64)
    n = anchors.shape[0]
    labels = np.zeros(n, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64)
    if gt_boxes.size == 0:
        return labels, matched
    ious = iou_matrix(anchors, gt_boxes)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]
    labels[best_iou >= iou_fg] = 1
    labels[(best_iou >= iou_bg) & (best_iou < iou_fg)] = IGNORE
    matched[labels == 1] = best_gt[labels == 1]
    # force each gt's best anchor foreground
    forced = ious.argmax(axis=0)
    labels[forced] = 1
    matched[forced] = np.arange(gt_boxes.shape[0])
    return labels, matched


def nms(boxes, scores, iou_thresh: float = 0.7, keep: int = 1000):
    """Greedy-by-score suppression; ties broken by lower index. Returns kept
    indices in selection order."""
    boxes = np.asarray(boxes, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("nms scores must be finite")
    # stable sort descending: lower index wins ties
    order = np.argsort(-scores, kind="stable")
    kept = []
    suppressed = np.zeros(len(scores), dtype=bool)
    for i in order:
        if suppressed[i]:
            continue
        kept.append(int(i))
        if len(kept) >= keep:
            break
        ious = iou_matrix(boxes[i:i + 1], boxes[order]).ravel()
        suppressed[order[ious > iou_thresh]] = True
        suppressed[i] = True
    return np.asarray(kept, dtype=np.int64)


def clip_box(boxes, height, width):
    """Clip center-format boxes to image bounds, keeping extents >= 1 px."""
    b = np.asarray(boxes, dtype=np.float64).copy()
    x1 = np.clip(b[:, 0] - b[:, 2] / 2, 0, width)
    y1 = np.clip(b[:, 1] - b[:, 3] / 2, 0, height)
    x2 = np.clip(b[:, 0] + b[:, 2] / 2, 0, width)
    y2 = np.clip(b[:, 1] + b[:, 3] / 2, 0, height)
    w = np.maximum(x2 - x1, 1.0)
    h = np.maximum(y2 - y1, 1.0)
    return np.stack([(x1 + x2) / 2, (y1 + y2) / 2, w, h], axis=1)


def assign_levels(boxes, sizes=ANCHOR_SIZES):
    """Level whose anchor size is nearest to sqrt(w*h) per box."""
    b = np.asarray(boxes, dtype=np.float64)
    scale = np.sqrt(b[:, 2] * b[:, 3])
    sizes = np.asarray(sizes, dtype=np.float64)
    return np.abs(scale[:, None] - sizes[None]).argmin(axis=1)
