"""Anchor-grid detection head: raw prediction tensor, box decoding, target
assignment, the four-term detection loss and per-class box selection.

The last axis of the raw prediction ``Y[B, S, S, A, C + 5]`` is laid out as
``[x, y, w, h, conf, class logits...]``.  Grid cell ``(i, j)`` is row ``i``,
column ``j``; box centres and sizes are in grid units, where one unit is
``input_size / S`` pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .exceptions import AssignmentCollisionError, ConfigurationError
from .tensor import Tensor

__all__ = [
    "AnchorGrid",
    "DecodedBox",
    "DetectionTarget",
    "HeadParams",
    "LossWeights",
    "init_head",
    "head_forward",
    "decode",
    "decode_arrays",
    "encode_box",
    "shape_iou",
    "kmeans_anchors",
    "assign_targets",
    "stack_targets",
    "det_loss",
    "select_best",
]

X, Y, W, H, CONF = range(5)
_CLAMP = 1e-12


@dataclass(frozen=True)
class AnchorGrid:
    S: int
    A: int
    C: int
    priors: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if self.S < 1 or self.A < 1 or self.C < 1:
            raise ConfigurationError("S, A and C must all be >= 1")
        if len(self.priors) != self.A:
            raise ConfigurationError(f"expected {self.A} anchor priors, got {len(self.priors)}")
        if any(w <= 0 or h <= 0 for w, h in self.priors):
            raise ConfigurationError("anchor priors must be strictly positive")
        object.__setattr__(self, "priors", tuple((float(w), float(h)) for w, h in self.priors))

    @property
    def channels(self) -> int:
        return self.A * (self.C + 5)

    @property
    def prior_array(self) -> np.ndarray:
        return np.asarray(self.priors, dtype=np.float64)

    @classmethod
    def from_pixel_priors(cls, S: int, C: int, priors_px, input_size: int) -> "AnchorGrid":
        cell = input_size / S
        return cls(S, len(priors_px), C, tuple((w / cell, h / cell) for w, h in priors_px))


@dataclass
class DecodedBox:
    b_x: float
    b_y: float
    b_w: float
    b_h: float
    confidence: float
    class_probs: np.ndarray
    cell: tuple[int, int]
    anchor: int

    def score(self, c: int) -> float:
        return self.confidence * float(self.class_probs[c])

    def to_pixels(self, scale: float) -> tuple[float, float, float, float]:
        return self.b_x * scale, self.b_y * scale, self.b_w * scale, self.b_h * scale


@dataclass
class HeadParams:
    weight: Tensor
    bias: Tensor

    def named_parameters(self):
        return [("head.weight", self.weight), ("head.bias", self.bias)]


@dataclass(frozen=True)
class LossWeights:
    centers: float = 5.0
    dimensions: float = 5.0
    confidence: float = 1.0
    classes: float = 1.0
    noobj_scale: float = 0.5


def init_head(n_features: int, grid: AnchorGrid, rng_seed: int = 0, scale: float = 0.1) -> HeadParams:
    rng = np.random.default_rng(rng_seed)
    w = rng.standard_normal((grid.channels, n_features, 1, 1)) * scale / math.sqrt(n_features)
    return HeadParams(Tensor(w, requires_grad=True, name="head.weight"),
                      Tensor(np.zeros(grid.channels), requires_grad=True, name="head.bias"))


def head_forward(features: Tensor, head: HeadParams, grid: AnchorGrid) -> Tensor:
    """1x1 convolution to ``A*(C+5)`` channels, reshaped to ``[B, S, S, A, C+5]``.

    Output channel ``a*(C+5) + f`` becomes entry ``f`` of anchor ``a``.
    """
    if features.ndim != 4:
        raise ConfigurationError("head_forward expects (B, N, S, S) features")
    b, n, s, s2 = features.shape
    if s != grid.S or s2 != grid.S:
        raise ConfigurationError(f"feature extent {s}x{s2} does not match grid S={grid.S}")
    if head.weight.shape != (grid.channels, n, 1, 1):
        raise ConfigurationError(
            f"head weight {head.weight.shape} incompatible with N={n}, A={grid.A}, C={grid.C}")
    y = T.conv2d(features, head.weight, head.bias)
    y = T.reshape(y, (b, grid.A, grid.C + 5, s, s))
    return T.transpose(y, (0, 3, 4, 1, 2))


# --------------------------------------------------------------------------
# decode / encode
# --------------------------------------------------------------------------


def _sigmoid(x):
    return T._sigmoid(np.asarray(x, dtype=np.float64))


def _logit(p):
    p = np.clip(p, _CLAMP, 1.0 - _CLAMP)
    return np.log(p) - np.log1p(-p)


def decode_arrays(raw, grid: AnchorGrid) -> dict[str, np.ndarray]:
    """Vectorised decode of ``raw[B, S, S, A, C+5]`` into centre/size/confidence arrays."""
    y = raw.data if isinstance(raw, Tensor) else np.asarray(raw, dtype=np.float64)
    s = grid.S
    jj = np.arange(s)[None, None, :, None]
    ii = np.arange(s)[None, :, None, None]
    priors = grid.prior_array
    logits = y[..., 5:]
    z = logits - logits.max(axis=-1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=-1, keepdims=True)
    return {
        "b_x": _sigmoid(y[..., X]) + jj,
        "b_y": _sigmoid(y[..., Y]) + ii,
        "b_w": priors[:, 0] * np.exp(y[..., W]),
        "b_h": priors[:, 1] * np.exp(y[..., H]),
        "confidence": _sigmoid(y[..., CONF]),
        "class_probs": probs,
    }


def decode(raw, grid: AnchorGrid) -> list[list[DecodedBox]]:
    """Every anchor of every cell as a :class:`DecodedBox`, one list per image.

    Within an image boxes are ordered by (row, column, anchor).
    """
    d = decode_arrays(raw, grid)
    out = []
    for b in range(d["b_x"].shape[0]):
        boxes = []
        for i in range(grid.S):
            for j in range(grid.S):
                for k in range(grid.A):
                    boxes.append(DecodedBox(
                        float(d["b_x"][b, i, j, k]), float(d["b_y"][b, i, j, k]),
                        float(d["b_w"][b, i, j, k]), float(d["b_h"][b, i, j, k]),
                        float(d["confidence"][b, i, j, k]), d["class_probs"][b, i, j, k].copy(),
                        (i, j), k))
        out.append(boxes)
    return out


def encode_box(box: DecodedBox, grid: AnchorGrid) -> np.ndarray:
    """Inverse of decode for a single box.

    Class logits are only defined up to an additive constant; the returned
    logits are log-probabilities shifted to zero mean.
    """
    i, j = box.cell
    pw, ph = grid.priors[box.anchor]
    logp = np.log(np.asarray(box.class_probs, dtype=np.float64))
    return np.concatenate([
        [_logit(box.b_x - j), _logit(box.b_y - i),
         math.log(box.b_w / pw), math.log(box.b_h / ph), _logit(box.confidence)],
        logp - logp.mean(),
    ])


# --------------------------------------------------------------------------
# anchors and targets
# --------------------------------------------------------------------------


def shape_iou(wh_a, wh_b) -> np.ndarray:
    """IoU of co-centred boxes; broadcasts ``(..., 2)`` against ``(..., 2)``."""
    a = np.asarray(wh_a, dtype=np.float64)
    b = np.asarray(wh_b, dtype=np.float64)
    inter = np.minimum(a[..., 0], b[..., 0]) * np.minimum(a[..., 1], b[..., 1])
    return inter / (a[..., 0] * a[..., 1] + b[..., 0] * b[..., 1] - inter)


def kmeans_anchors(box_wh, k: int, rng_seed: int = 0, max_iter: int = 300) -> np.ndarray:
    """Cluster box shapes with ``1 - IoU`` distance; returns ``k`` priors sorted by area.

    When the data has at most ``k`` distinct shapes those shapes are the
    answer (repeated from the largest if fewer than ``k``).
    """
    wh = np.asarray(box_wh, dtype=np.float64).reshape(-1, 2)
    if len(wh) == 0:
        raise ConfigurationError("kmeans_anchors needs at least one box")
    if k < 1:
        raise ConfigurationError("k must be >= 1")
    unique = np.unique(wh, axis=0)
    if len(unique) <= k:
        order = np.argsort(unique[:, 0] * unique[:, 1], kind="stable")
        unique = unique[order]
        pad = np.repeat(unique[-1:], k - len(unique), axis=0)
        return np.concatenate([unique, pad])

    rng = np.random.default_rng(rng_seed)
    centers = wh[rng.choice(len(wh), size=k, replace=False)].copy()
    assign = None
    for _ in range(max_iter):
        dist = 1.0 - shape_iou(wh[:, None, :], centers[None, :, :])
        new = dist.argmin(axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for c in range(k):
            members = wh[assign == c]
            if len(members):
                centers[c] = np.median(members, axis=0)
    order = np.argsort(centers[:, 0] * centers[:, 1], kind="stable")
    return centers[order]


@dataclass
class DetectionTarget:
    """Per-anchor training targets for one image or a stacked batch.

    ``xy`` holds centre offsets inside the cell (sigmoid space), ``raw``
    the exact preimage ``[x, y, w, h]`` under decode, ``wh`` the
    log-ratio to the prior, ``cls`` the class index (-1 if unassigned).
    """

    mask: np.ndarray
    xy: np.ndarray
    wh: np.ndarray
    raw: np.ndarray
    conf: np.ndarray
    cls: np.ndarray
    owners: dict = field(default_factory=dict)

    @property
    def n_boxes(self) -> int:
        return int(self.mask.sum())


def _empty_target(shape) -> DetectionTarget:
    return DetectionTarget(
        mask=np.zeros(shape, dtype=bool),
        xy=np.zeros(shape + (2,)),
        wh=np.zeros(shape + (2,)),
        raw=np.zeros(shape + (4,)),
        conf=np.zeros(shape),
        cls=np.full(shape, -1, dtype=np.int64),
    )


def assign_targets(gt_boxes, grid: AnchorGrid, input_size: int) -> DetectionTarget:
    """Encode ``(class, cx_px, cy_px, w_px, h_px)`` boxes for one image.

    The responsible cell contains the box centre; the responsible anchor is
    the prior with the largest co-centred IoU against the box.
    """
    cell = input_size / grid.S
    target = _empty_target((grid.S, grid.S, grid.A))
    priors = grid.prior_array
    for n, (cls, cx, cy, w, h) in enumerate(gt_boxes):
        cls = int(cls)
        if not 0 <= cls < grid.C:
            raise ConfigurationError(f"box {n}: class {cls} outside [0, {grid.C})")
        if not (0 <= cx <= input_size and 0 <= cy <= input_size):
            raise ConfigurationError(f"box {n}: centre ({cx}, {cy}) outside the image")
        if w <= 0 or h <= 0:
            raise ConfigurationError(f"box {n}: non-positive size")
        gx, gy, gw, gh = cx / cell, cy / cell, w / cell, h / cell
        j = min(int(math.floor(gx)), grid.S - 1)
        i = min(int(math.floor(gy)), grid.S - 1)
        k = int(np.argmax(shape_iou(np.array([gw, gh]), priors)))
        key = (i, j, k)
        if key in target.owners:
            other = target.owners[key]
            raise AssignmentCollisionError(
                f"boxes {other} and {n} both map to cell ({i}, {j}) anchor {k}")
        target.owners[key] = n
        fx, fy = gx - j, gy - i
        target.mask[key] = True
        target.xy[key] = (fx, fy)
        target.wh[key] = (math.log(gw / priors[k, 0]), math.log(gh / priors[k, 1]))
        target.raw[key] = (_logit(fx), _logit(fy), *target.wh[key])
        target.conf[key] = 1.0
        target.cls[key] = cls
    return target


def stack_targets(targets: list[DetectionTarget]) -> DetectionTarget:
    return DetectionTarget(
        mask=np.stack([t.mask for t in targets]),
        xy=np.stack([t.xy for t in targets]),
        wh=np.stack([t.wh for t in targets]),
        raw=np.stack([t.raw for t in targets]),
        conf=np.stack([t.conf for t in targets]),
        cls=np.stack([t.cls for t in targets]),
    )


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------


def det_loss(raw: Tensor, target: DetectionTarget,
             weights: LossWeights | None = None) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of centre, dimension, confidence and class terms.

    Centre and dimension terms are squared errors summed over x/y (w/h)
    and averaged over responsible anchors; centres are compared after the
    sigmoid.  The confidence term is the mean squared error against 1 over
    responsible anchors plus ``noobj_scale`` times the mean squared error
    against 0 over every other anchor.  The class term is the mean
    cross-entropy over responsible anchors.
    """
    weights = weights or LossWeights()
    if raw.ndim != 5 or raw.shape[:4] != target.mask.shape:
        raise ConfigurationError(
            f"det_loss: prediction {raw.shape} does not match target {target.mask.shape}")
    c = raw.shape[-1] - 5
    mask = target.mask.astype(np.float64)
    n_obj = float(mask.sum())
    n_noobj = float(mask.size - n_obj)

    conf = T.sigmoid(raw[..., CONF])
    noobj = T.mul(T.square(conf), Tensor(1.0 - mask))
    l_conf = T.tensor_sum(noobj) * (weights.noobj_scale / max(n_noobj, 1.0))

    if n_obj > 0:
        m2 = Tensor(np.repeat(mask[..., None], 2, axis=-1))
        xy = T.sigmoid(raw[..., X:Y + 1])
        l_centers = T.tensor_sum(T.mul(T.square(xy - Tensor(target.xy)), m2)) * (1.0 / n_obj)
        wh = raw[..., W:H + 1]
        l_dims = T.tensor_sum(T.mul(T.square(wh - Tensor(target.wh)), m2)) * (1.0 / n_obj)
        obj = T.mul(T.square(conf - 1.0), Tensor(mask))
        l_conf = l_conf + T.tensor_sum(obj) * (1.0 / n_obj)
        onehot = np.zeros(target.mask.shape + (c,))
        idx = np.nonzero(target.mask)
        onehot[idx + (target.cls[idx],)] = 1.0
        logp = T.log_softmax(raw[..., 5:], axis=-1)
        l_cls = T.tensor_sum(T.mul(logp, Tensor(onehot))) * (-1.0 / n_obj)
    else:
        zero = T.tensor_sum(raw[..., X]) * 0.0
        l_centers = l_dims = l_cls = zero

    total = (l_centers * weights.centers + l_dims * weights.dimensions
             + l_conf * weights.confidence + l_cls * weights.classes)
    breakdown = {
        "L_centers": float(l_centers.data),
        "L_dimensions": float(l_dims.data),
        "L_confidence": float(l_conf.data),
        "L_classes": float(l_cls.data),
    }
    return total, breakdown


# --------------------------------------------------------------------------
# selection
# --------------------------------------------------------------------------


def select_best(boxes: list[DecodedBox], C: int) -> list[DecodedBox | None]:
    """For each class, the box maximising ``confidence * class_prob``.

    Ties go to the lowest (row, column, anchor).  Returns one entry per
    class; ``None`` only when ``boxes`` is empty.
    """
    best: list[DecodedBox | None] = [None] * C
    for c in range(C):
        top = None
        for box in boxes:
            key = (-box.score(c), box.cell[0], box.cell[1], box.anchor)
            if top is None or key < top[0]:
                top = (key, box)
        if top is not None:
            best[c] = top[1]
    return best
