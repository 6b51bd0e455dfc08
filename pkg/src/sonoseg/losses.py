"""Training losses: RPN objectness BCE, smooth-L1 box regression, softmax
cross-entropy classification, and per-class mask BCE.

Each loss is a tape op with a hand-written gradient; probabilities are
clamped to [1e-7, 1 - 1e-7] before any log."""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor4, add, make_op

EPS_P = 1e-7


def _zero_scalar(dtype) -> Tensor4:
    return Tensor4(np.zeros((1, 1, 1, 1), dtype=dtype))


def bce_with_logits_mean(logits: Tensor4, targets: np.ndarray,
                         mask: np.ndarray | None = None) -> Tensor4:
    """Mean binary cross-entropy over (optionally masked) elements."""
    y = np.asarray(targets, dtype=logits.dtype)
    if y.shape != logits.dims:
        raise ShapeError(f"targets shape {y.shape} vs logits {logits.dims}")
    z = logits.data
    p = 1.0 / (1.0 + np.exp(-z))
    pc = np.clip(p, EPS_P, 1.0 - EPS_P)
    terms = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    if mask is not None:
        mask = np.asarray(mask, dtype=logits.dtype)
        n = float(mask.sum())
        if n == 0:
            return _zero_scalar(logits.dtype)
        total = float((terms * mask).sum()) / n
    else:
        n = float(terms.size)
        total = float(terms.sum()) / n
    out = np.array(total, dtype=logits.dtype).reshape(1, 1, 1, 1)
    inside = (p > EPS_P) & (p < 1.0 - EPS_P)

    def vjp(gout):
        g = inside * (p - y) / n
        if mask is not None:
            g = g * mask
        return (g * gout.reshape(()),)

    return make_op(out, "bce_with_logits_mean", (logits,), vjp)


def objectness_loss(pred_logits: Tensor4, labels: np.ndarray) -> Tensor4:
    """RPN foreground/background BCE; label -1 marks ignored anchors, which
    are excluded from the mean. Empty label sets give loss 0."""
    labels = np.asarray(labels).reshape(pred_logits.dims)
    mask = labels >= 0
    y = np.where(mask, labels, 0)
    return bce_with_logits_mean(pred_logits, y, mask)


def smooth_l1(residual: Tensor4, beta: float = 1.0,
              mask: np.ndarray | None = None) -> Tensor4:
    """Smooth L1 over residual elements: 0.5 x^2 if |x| < beta else
    |x| - 0.5 beta; summed, then normalized by element count."""
    if beta <= 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    x = residual.data
    absx = np.abs(x)
    quad = absx < beta
    terms = np.where(quad, 0.5 * x * x, absx - 0.5 * beta)
    if mask is not None:
        mask = np.asarray(mask, dtype=x.dtype)
        n = float(mask.sum())
        if n == 0:
            return _zero_scalar(residual.dtype)
        total = float((terms * mask).sum()) / n
    else:
        n = float(x.size)
        total = float(terms.sum()) / n
    out = np.array(total, dtype=x.dtype).reshape(1, 1, 1, 1)

    def vjp(gout):
        g = np.where(quad, x, np.sign(x)) / n
        if mask is not None:
            g = g * mask
        return (g * gout.reshape(()),)

    return make_op(out, "smooth_l1", (residual,), vjp)


def classification_loss(scores: Tensor4, true_class: np.ndarray) -> Tensor4:
    """Mean softmax cross-entropy over ROIs; scores (R, classes, 1, 1)."""
    r, nc, h, w = scores.dims
    if (h, w) != (1, 1):
        raise ShapeError(f"class scores must be (R, C, 1, 1), got {scores.dims}")
    t = np.asarray(true_class, dtype=np.int64).reshape(r)
    if np.any(t < 0) or np.any(t >= nc):
        raise ValueError(f"class index out of range [0, {nc}): {t}")
    z = scores.data.reshape(r, nc)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    total = float(-logp[np.arange(r), t].sum()) / r
    out = np.array(total, dtype=scores.dtype).reshape(1, 1, 1, 1)
    sm = np.exp(logp)

    def vjp(gout):
        g = sm.copy()
        g[np.arange(r), t] -= 1.0
        return ((g / r).reshape(scores.dims) * gout.reshape(()),)

    return make_op(out, "classification_loss", (scores,), vjp)


def mask_loss(pred_logits: Tensor4, truth: np.ndarray) -> Tensor4:
    """Average BCE over the m x m region(s) of the true class's mask channel."""
    truth = np.asarray(truth)
    if truth.shape != pred_logits.dims:
        raise ShapeError(
            f"mask truth shape {truth.shape} vs logits {pred_logits.dims}")
    return bce_with_logits_mean(pred_logits, truth)


def total_loss(terms: dict[str, Tensor4]) -> tuple[Tensor4, dict[str, float]]:
    """Unit-weight sum of the loss terms, plus a per-term float breakdown."""
    if not terms:
        raise ValueError("total_loss requires at least one term")
    items = list(terms.items())
    total = items[0][1]
    for _, t in items[1:]:
        total = add(total, t)
    breakdown = {k: float(v.data.reshape(())) for k, v in items}
    breakdown["total"] = float(total.data.reshape(()))
    return total, breakdown
