"""SGD training loop over image/mask pairs, batch size 1, fixed learning
rate, deterministic under a fixed seed."""

from __future__ import annotations

import numpy as np

from .model import (ModelConfig, ModelWeights, SGD, compute_losses,
                    instances_from_mask)
from .tensor import NumericError, Tensor4

CSV_HEADER = "step,total,obj,anchor_reg,cls,box_reg,mask"

TERM_KEYS = ("obj", "anchor_reg", "cls", "box_reg", "mask")


class DivergenceError(RuntimeError):
    """Raised when the total loss goes non-finite; carries the last finite step."""

    def __init__(self, step: int, last_finite: int):
        super().__init__(
            f"training diverged at step {step}; last finite step {last_finite}")
        self.step = step
        self.last_finite = last_finite


def format_row(step: int, breakdown: dict[str, float]) -> str:
    vals = [f"{breakdown.get(k, 0.0):.6f}" for k in ("total",) + TERM_KEYS]
    return f"{step}," + ",".join(vals)


def train_loop(weights: ModelWeights, images, masks, *, steps: int,
               lr: float = 0.0025, momentum: float = 0.9, seed: int = 0,
               log_fn=None) -> list[dict]:
    """Cycle through the dataset in order; returns per-step loss breakdowns."""
    if len(images) != len(masks) or not images:
        raise ValueError("images and masks must be non-empty and paired")
    samples = []
    for img, msk in zip(images, masks):
        inst = instances_from_mask(msk)
        samples.append((Tensor4(np.asarray(img, dtype=np.float32)[None, None]),
                        inst))
    params = weights.params()
    opt = SGD(params, lr=lr, momentum=momentum)
    rng = np.random.default_rng(seed)
    history = []
    last_finite = -1
    for step in range(steps):
        image, inst = samples[step % len(samples)]
        opt.zero_grad()
        try:
            loss, breakdown = compute_losses(weights, image, inst, rng)
        except NumericError as exc:
            raise DivergenceError(step, last_finite) from exc
        if not np.isfinite(breakdown["total"]):
            raise DivergenceError(step, last_finite)
        loss.backward()
        opt.step()
        last_finite = step
        breakdown["step"] = step
        history.append(breakdown)
        if log_fn is not None:
            log_fn(step, breakdown)
    return history


def history_to_csv(history: list[dict]) -> str:
    lines = [CSV_HEADER]
    for row in history:
        lines.append(format_row(row["step"], row))
    return "\n".join(lines) + "\n"
