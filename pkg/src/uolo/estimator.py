"""scikit-learn style wrapper around model construction, training and inference."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import dethead, trainer
from .data import Box, Sample, box_side
from .exceptions import ConfigurationError
from .metrics import binarize, overlap_metrics
from .model import ModelConfig, build_model
from .segnet import SegNetConfig
from .tensor import Tensor, no_grad

__all__ = ["UOLOEstimator", "check_images", "check_masks", "check_boxes"]


def check_images(X, size: int | None = None, channels: int | None = None) -> np.ndarray:
    """Validate images and return a float64 ``(n, H, W, C)`` array with values in [0, 1].

    Accepts ``(n, H, W)`` gray stacks or ``(n, H, W, C)``.
    """
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[..., None]
    if arr.ndim != 4 or arr.shape[0] == 0:
        raise ConfigurationError(f"expected images of shape (n, H, W[, C]), got {np.shape(X)}")
    if arr.shape[1] != arr.shape[2]:
        raise ConfigurationError(f"images must be square, got {arr.shape[1]}x{arr.shape[2]}")
    if size is not None and arr.shape[1] != size:
        raise ConfigurationError(f"images must be {size}x{size}, got {arr.shape[1]}x{arr.shape[2]}")
    if channels is not None and arr.shape[3] != channels:
        raise ConfigurationError(f"images must have {channels} channel(s), got {arr.shape[3]}")
    if not np.isfinite(arr).all() or arr.min() < 0.0 or arr.max() > 1.0:
        raise ConfigurationError("image values must be finite and lie in [0, 1]")
    return arr


def check_masks(y, n: int, size: int) -> list[np.ndarray | None]:
    """Per-image binary masks; ``None`` entries mark images without a mask."""
    if y is None:
        return [None] * n
    if isinstance(y, np.ndarray) and y.ndim == 3:
        y = list(y)
    if len(y) != n:
        raise ConfigurationError(f"got {len(y)} masks for {n} images")
    out = []
    for i, m in enumerate(y):
        if m is None:
            out.append(None)
            continue
        m = np.asarray(m)
        if m.shape != (size, size) or not np.isin(m, (0, 1)).all():
            raise ConfigurationError(f"mask {i} must be a binary {size}x{size} array")
        out.append(m.astype(np.uint8))
    return out


def check_boxes(boxes, n: int, size: int) -> list[list[Box]]:
    """Per-image box lists; entries are ``(class, cx, cy)`` or ``(class, cx, cy, side)``."""
    if boxes is None or len(boxes) != n:
        raise ConfigurationError(f"need one box list per image ({n})")
    out = []
    for i, per_image in enumerate(boxes):
        parsed = []
        for b in per_image:
            if len(b) not in (3, 4):
                raise ConfigurationError(f"image {i}: box {b!r} must be (class, cx, cy[, side])")
            c = int(b[0])
            side = float(b[3]) if len(b) == 4 else box_side(c, size)
            if not (0 <= b[1] < size and 0 <= b[2] < size):
                raise ConfigurationError(f"image {i}: box centre ({b[1]}, {b[2]}) outside the image")
            parsed.append(Box(c, float(b[1]), float(b[2]), side))
        out.append(parsed)
    return out


class UOLOEstimator(TransformerMixin, BaseEstimator):
    """Joint detector/segmenter with the estimator interface.

    ``fit(X, y, boxes=...)`` takes images, per-image masks (``None`` for
    images with boxes only) and per-image box lists.  ``predict`` returns
    binary masks, ``predict_boxes`` the best box per class, ``transform``
    the multi-scale feature tensor and ``score`` the mean mask IoU.
    """

    def __init__(self, input_size=64, depth=3, base_channels=8, n_classes=2,
                 n_det=8, n_seg=1, batch_size=8, learning_rate=1e-4, max_steps=2000,
                 augment_flips=False, augment_shift=0.0, priors_px=None, random_state=0):
        self.input_size = input_size
        self.depth = depth
        self.base_channels = base_channels
        self.n_classes = n_classes
        self.n_det = n_det
        self.n_seg = n_seg
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.max_steps = max_steps
        self.augment_flips = augment_flips
        self.augment_shift = augment_shift
        self.priors_px = priors_px
        self.random_state = random_state

    def _model_config(self, channels: int, boxes: list[list[Box]]) -> ModelConfig:
        seg = SegNetConfig(input_size=self.input_size, depth=self.depth,
                           base_channels=self.base_channels, in_channels=channels)
        priors = self.priors_px
        if priors is None:
            shapes = np.array([(b.side, b.side) for bs in boxes for b in bs])
            priors = dethead.kmeans_anchors(shapes, 2, rng_seed=self.random_state)
        return ModelConfig(segnet=seg, n_classes=self.n_classes,
                           priors_px=tuple((float(w), float(h)) for w, h in priors))

    def fit(self, X, y=None, boxes=None, callback=None):
        images = check_images(X, self.input_size)
        n = len(images)
        masks = check_masks(y, n, self.input_size)
        box_lists = check_boxes(boxes, n, self.input_size)
        samples = [Sample(img, m, bs, {"id": f"x{i:05d}"})
                   for i, (img, m, bs) in enumerate(zip(images, masks, box_lists))]
        n_seg = self.n_seg if any(m is not None for m in masks) else 0
        config = trainer.TrainConfig(
            n_det=self.n_det, n_seg=n_seg, batch_size=self.batch_size,
            learning_rate=self.learning_rate, max_steps=self.max_steps,
            rng_seed=self.random_state, augment_flips=self.augment_flips,
            augment_shift=self.augment_shift)
        model = build_model(self._model_config(images.shape[3], box_lists), self.random_state)
        result = trainer.fit(model, samples, config, callback=callback)
        self.model_ = result.model
        self.ledger_ = result.ledger
        self.n_features_in_ = self.input_size * self.input_size * images.shape[3]
        return self

    def _images(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        imgs = check_images(X, self.input_size, self.model_.config.segnet.in_channels)
        return imgs.transpose(0, 3, 1, 2)

    def predict_proba(self, X) -> np.ndarray:
        """Soft masks ``(n, H, W)``."""
        images = self._images(X)
        soft, _ = self.model_.predict_arrays(images, self.batch_size)
        return soft[:, 0]

    def predict(self, X) -> np.ndarray:
        """Binary masks ``(n, H, W)``."""
        return binarize(self.predict_proba(X))

    def predict_boxes(self, X) -> np.ndarray:
        """Best box per class as ``(n, C, 6)``: cx, cy, w, h (pixels), confidence, score."""
        images = self._images(X)
        _, raw = self.model_.predict_arrays(images, self.batch_size)
        grid = self.model_.grid
        scale = self.input_size / grid.S
        out = np.zeros((len(raw), grid.C, 6))
        for i, boxes in enumerate(dethead.decode(raw, grid)):
            for c, b in enumerate(dethead.select_best(boxes, grid.C)):
                out[i, c] = (b.b_x * scale, b.b_y * scale, b.b_w * scale, b.b_h * scale,
                             b.confidence, b.score(c))
        return out

    def transform(self, X) -> np.ndarray:
        """Feature tensor ``(n, N, S, S)`` fed to the detection head."""
        images = self._images(X)
        feats = []
        with no_grad():
            for start in range(0, len(images), self.batch_size):
                _, _, f = self.model_.forward(Tensor(images[start:start + self.batch_size]), "infer")
                feats.append(f.data)
        return np.concatenate(feats)

    def score(self, X, y):
        """Mean IoU between predicted and given masks (images with ``None`` masks skipped)."""
        pred = self.predict(X)
        masks = check_masks(y, len(pred), self.input_size)
        ious = [overlap_metrics(p, m)[0] for p, m in zip(pred, masks) if m is not None]
        if not ious:
            raise ConfigurationError("score needs at least one mask")
        return float(np.mean(ious))
