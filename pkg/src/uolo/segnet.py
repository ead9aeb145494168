"""Encoder-decoder segmentation network with a multi-scale feature tap.

Every convolution is followed by batch normalization and ReLU; the encoder
downsamples with stride-2 convolutions instead of pooling, and the decoder
upsamples with 2x2 stride-2 transposed convolutions before concatenating
the matching encoder skip tensor.  Besides the soft mask, ``forward``
returns ``F``: the bottleneck concatenated with every decoder stage output
average-pooled to the bottleneck's ``S x S`` extent.

Parameter names (also used as checkpoint record names)::

    enc{s}.conv{1,2}.{weight,bias}, enc{s}.bn{1,2}.{gamma,beta}
    down{s}.{weight,bias}, down{s}.bn.{gamma,beta}
    mid.conv{1,2}.*, mid.bn{1,2}.*
    up{s}.{weight,bias}, up{s}.bn.{gamma,beta}
    dec{s}.conv{1,2}.*, dec{s}.bn{1,2}.*
    out.{weight,bias}
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import truncnorm

from . import tensor as T
from .exceptions import ConfigurationError
from .tensor import RunningStats, Tensor

__all__ = ["SegNetConfig", "SegNetOutput", "SegNet", "build", "forward", "seg_loss"]


@dataclass(frozen=True)
class SegNetConfig:
    input_size: int = 64
    depth: int = 3
    base_channels: int = 8
    channel_growth: int = 2
    kernel_size: int = 3
    in_channels: int = 1
    feature_pool: str = "avg"
    mask_prior: float = 0.05

    def validate(self) -> None:
        n = self.input_size
        if n < 1 or n & (n - 1):
            raise ConfigurationError(f"input_size must be a power of two, got {n}")
        if self.depth < 1:
            raise ConfigurationError("depth must be >= 1")
        if n // 2 ** self.depth < 2:
            raise ConfigurationError(
                f"input_size {n} with depth {self.depth} leaves a bottleneck smaller than 2x2")
        if self.base_channels < 1 or self.channel_growth < 1:
            raise ConfigurationError("base_channels and channel_growth must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigurationError("kernel_size must be a positive odd integer")
        if self.in_channels not in (1, 3):
            raise ConfigurationError("in_channels must be 1 (gray) or 3 (RGB)")
        if not 0.0 < self.mask_prior < 1.0:
            raise ConfigurationError("mask_prior must lie in (0, 1)")
        if self.feature_pool != "avg":
            raise ConfigurationError(f"unsupported feature_pool {self.feature_pool!r}")

    def channels(self, stage: int) -> int:
        return self.base_channels * self.channel_growth ** stage

    @property
    def grid_size(self) -> int:
        return self.input_size // 2 ** self.depth

    @property
    def feature_channels(self) -> int:
        """N = bottleneck channels + sum of decoder stage channels."""
        return self.channels(self.depth) + sum(self.channels(s) for s in range(self.depth))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SegNetOutput:
    soft_mask: Tensor
    features: Tensor


@dataclass
class SegNet:
    config: SegNetConfig
    params: dict[str, Tensor]
    stats: dict[str, RunningStats] = field(default_factory=dict)

    def named_parameters(self):
        return list(self.params.items())

    def forward(self, images: Tensor, mode: str = "train") -> SegNetOutput:
        return forward(self, images, mode)

    __call__ = forward


def _conv_init(rng: np.random.Generator, cout: int, cin: int, k: int) -> np.ndarray:
    fan_in = cin * k * k
    std = np.sqrt(2.0 / fan_in)
    draws = truncnorm.rvs(-2.0, 2.0, size=(cout, cin, k, k), random_state=rng)
    return draws * std


def layer_plan(config: SegNetConfig) -> list[tuple]:
    """Ordered ``(kind, name, c_in, c_out, k, stride)`` list describing the network."""
    k = config.kernel_size
    plan: list[tuple] = []
    cin = config.in_channels
    for s in range(config.depth):
        c = config.channels(s)
        plan.append(("conv", f"enc{s}.conv1", cin, c, k, 1))
        plan.append(("conv", f"enc{s}.conv2", c, c, k, 1))
        plan.append(("conv", f"down{s}", c, config.channels(s + 1), k, 2))
        cin = config.channels(s + 1)
    cb = config.channels(config.depth)
    plan.append(("conv", "mid.conv1", cb, cb, k, 1))
    plan.append(("conv", "mid.conv2", cb, cb, k, 1))
    cin = cb
    for s in reversed(range(config.depth)):
        c = config.channels(s)
        plan.append(("upconv", f"up{s}", cin, c, 2, 2))
        plan.append(("conv", f"dec{s}.conv1", 2 * c, c, k, 1))
        plan.append(("conv", f"dec{s}.conv2", c, c, k, 1))
        cin = c
    plan.append(("head", "out", cin, 1, 1, 1))
    return plan


def _bn_name(name: str) -> str:
    # enc0.conv1 -> enc0.bn1 ; down0 -> down0.bn
    stem, _, last = name.rpartition(".")
    if last.startswith("conv"):
        return f"{stem}.bn{last[4:]}"
    return f"{name}.bn"


def build(config: SegNetConfig | None = None, rng_seed: int = 0) -> SegNet:
    """Create a network with deterministic initialization from ``rng_seed``."""
    config = config or SegNetConfig()
    config.validate()
    rng = np.random.default_rng(rng_seed)
    params: dict[str, Tensor] = {}
    stats: dict[str, RunningStats] = {}
    for kind, name, cin, cout, k, _ in layer_plan(config):
        if kind == "upconv":
            w = _conv_init(rng, cin, cout, k).reshape(cin, cout, k, k)
        else:
            w = _conv_init(rng, cout, cin, k)
        params[f"{name}.weight"] = Tensor(w, requires_grad=True, name=f"{name}.weight")
        bias = np.zeros(cout)
        if kind == "head":
            # start the soft mask at the expected foreground fraction
            bias[:] = np.log(config.mask_prior / (1.0 - config.mask_prior))
        params[f"{name}.bias"] = Tensor(bias, requires_grad=True, name=f"{name}.bias")
        if kind != "head":
            bn = _bn_name(name)
            params[f"{bn}.gamma"] = Tensor(np.ones(cout), requires_grad=True, name=f"{bn}.gamma")
            params[f"{bn}.beta"] = Tensor(np.zeros(cout), requires_grad=True, name=f"{bn}.beta")
            stats[bn] = RunningStats.create(cout)
    return SegNet(config, params, stats)


def _block(net: SegNet, x: Tensor, name: str, stride: int, mode: str,
           transpose: bool = False) -> Tensor:
    p = net.params
    if transpose:
        y = T.conv2d_transpose(x, p[f"{name}.weight"], p[f"{name}.bias"], stride=2)
    else:
        pad = net.config.kernel_size // 2
        y = T.conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], stride=stride, padding=pad)
    bn = _bn_name(name)
    y = T.batch_norm(y, p[f"{bn}.gamma"], p[f"{bn}.beta"], net.stats[bn], mode)
    return T.relu(y)


def forward(net: SegNet, images: Tensor, mode: str = "train",
            skip_override: dict[int, Tensor] | None = None) -> SegNetOutput:
    """One pass producing the soft mask and the feature tensor ``F``.

    ``skip_override`` replaces encoder skip tensors by stage index; it exists
    for wiring checks and is not used in training.
    """
    cfg = net.config
    if images.ndim != 4 or images.shape[1] != cfg.in_channels:
        raise ConfigurationError(
            f"expected images of shape (B, {cfg.in_channels}, H, W), got {images.shape}")
    if images.shape[2] != cfg.input_size or images.shape[3] != cfg.input_size:
        raise ConfigurationError(
            f"expected {cfg.input_size}x{cfg.input_size} images, got "
            f"{images.shape[2]}x{images.shape[3]}")

    x = images
    skips = []
    for s in range(cfg.depth):
        x = _block(net, x, f"enc{s}.conv1", 1, mode)
        x = _block(net, x, f"enc{s}.conv2", 1, mode)
        skips.append(x)
        x = _block(net, x, f"down{s}", 2, mode)
    x = _block(net, x, "mid.conv1", 1, mode)
    x = _block(net, x, "mid.conv2", 1, mode)
    taps = [x]
    grid = cfg.grid_size
    for s in reversed(range(cfg.depth)):
        x = _block(net, x, f"up{s}", 2, mode, transpose=True)
        skip = skips[s] if not skip_override or s not in skip_override else skip_override[s]
        x = T.concat([x, skip], axis=1)
        x = _block(net, x, f"dec{s}.conv1", 1, mode)
        x = _block(net, x, f"dec{s}.conv2", 1, mode)
        taps.append(T.spatial_downsample(x, grid))
    logits = T.conv2d(x, net.params["out.weight"], net.params["out.bias"])
    return SegNetOutput(T.sigmoid(logits), T.concat(taps, axis=1))


def seg_loss(soft_mask: Tensor, gt_mask) -> Tensor:
    """Soft-IoU loss ``1 - sum(t*p) / (sum(t + p) - sum(t*p))``.

    Returns 0 when both masks are identically zero.
    """
    gt = gt_mask.data if isinstance(gt_mask, Tensor) else np.asarray(gt_mask, dtype=np.float64)
    if gt.shape != soft_mask.shape:
        raise ConfigurationError(f"seg_loss: shape mismatch {soft_mask.shape} vs {gt.shape}")
    target = Tensor(gt)
    inter = T.tensor_sum(T.mul(soft_mask, target))
    total = T.tensor_sum(soft_mask) + float(gt.sum())
    union = total - inter
    if union.data <= 0.0:
        import warnings

        warnings.warn("seg_loss: prediction and target are both empty; loss defined as 0",
                      RuntimeWarning, stacklevel=2)
        return T.mul(inter, 0.0)
    return 1.0 - T.div(inter, union)
