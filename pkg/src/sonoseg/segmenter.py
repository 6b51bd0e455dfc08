"""sklearn-style estimator wrapping the full segmentation model.

X is a sequence of grayscale images (h, w) in [0, 1] with dims divisible by
32; y is a sequence of integer class maps of the same shapes."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data import DEFAULT_PALETTE, mean_dice
from .model import ModelConfig, ModelWeights, predict_label_mask
from .train import train_loop


def _validate_images(X) -> list[np.ndarray]:
    out = []
    for i, img in enumerate(X):
        arr = np.asarray(img, dtype=np.float32)
        if arr.ndim != 2:
            raise ValueError(f"X[{i}] must be a 2-D grayscale image, got {arr.shape}")
        if arr.shape[0] % 32 or arr.shape[1] % 32:
            raise ValueError(
                f"X[{i}] dims {arr.shape} must be divisible by 32; pad the input")
        out.append(arr)
    if not out:
        raise ValueError("X must contain at least one image")
    return out


class OrganSegmenter(BaseEstimator):
    """Multi-organ instance segmenter: FPN + spatial-context extractor with
    RPN/box/mask heads, trained by SGD and evaluated with smoothed Dice."""

    def __init__(self, pyramid_width=64, backbone_widths=(16, 32, 64, 128),
                 srnn_rounds=2, srnn_enabled=True, learning_rate=0.0025,
                 momentum=0.9, batch_size=1, max_steps=2000, seed=0,
                 score_thresh=0.5, normalized_deltas=False):
        self.pyramid_width = pyramid_width
        self.backbone_widths = backbone_widths
        self.srnn_rounds = srnn_rounds
        self.srnn_enabled = srnn_enabled
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.seed = seed
        self.score_thresh = score_thresh
        self.normalized_deltas = normalized_deltas

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            pyramid_width=self.pyramid_width,
            backbone_widths=tuple(self.backbone_widths),
            srnn_rounds=self.srnn_rounds,
            srnn_enabled=self.srnn_enabled,
            score_thresh=self.score_thresh,
            normalized_deltas=self.normalized_deltas,
        )

    def init_weights(self) -> "OrganSegmenter":
        """Seeded weight initialization without training (zero-step fit)."""
        rng = np.random.default_rng(self.seed)
        self.weights_ = ModelWeights.create(self._model_config(), rng)
        self.history_ = []
        return self

    def fit(self, X, y):
        if self.batch_size != 1:
            raise ValueError("only batch_size=1 is supported")
        images = _validate_images(X)
        masks = [np.asarray(m, dtype=np.int64) for m in y]
        if len(images) != len(masks):
            raise ValueError(f"len(X)={len(images)} != len(y)={len(masks)}")
        self.init_weights()
        if self.max_steps > 0:
            self.history_ = train_loop(
                self.weights_, images, masks, steps=self.max_steps,
                lr=self.learning_rate, momentum=self.momentum, seed=self.seed)
        return self

    def predict(self, X):
        if not hasattr(self, "weights_"):
            raise NotFittedError("OrganSegmenter is not fitted")
        return [predict_label_mask(img, self.weights_)
                for img in _validate_images(X)]

    def score(self, X, y):
        """Mean smoothed Dice over the organ classes, averaged over images."""
        preds = self.predict(X)
        scores = [mean_dice(p, np.asarray(t, dtype=np.int64), DEFAULT_PALETTE).mean
                  for p, t in zip(preds, y)]
        return float(np.mean(scores))
