"""The joint network: segmentation trunk plus detection head on its feature tap."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import dethead, segnet
from .data import CLASS_NAMES, REFERENCE_SIDES, box_side
from .dethead import AnchorGrid, HeadParams, LossWeights
from .segnet import SegNet, SegNetConfig
from .tensor import Tensor, no_grad

__all__ = ["ModelConfig", "UOLOModel", "build_model", "default_priors_px"]


def default_priors_px(input_size: int) -> list[tuple[float, float]]:
    """The two fixed GT box shapes (FV, OD) at ``input_size``, smallest first."""
    sides = sorted(box_side(c, input_size) for c in REFERENCE_SIDES)
    return [(s, s) for s in sides]


@dataclass(frozen=True)
class ModelConfig:
    segnet: SegNetConfig = field(default_factory=SegNetConfig)
    n_classes: int = len(CLASS_NAMES)
    priors_px: tuple[tuple[float, float], ...] | None = None
    head_init_scale: float = 0.1
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def grid(self) -> AnchorGrid:
        priors = self.priors_px or tuple(default_priors_px(self.segnet.input_size))
        return AnchorGrid.from_pixel_priors(self.segnet.grid_size, self.n_classes, priors,
                                            self.segnet.input_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["priors_px"] = [list(p) for p in self.priors_px] if self.priors_px else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        priors = d.get("priors_px")
        return cls(
            segnet=SegNetConfig(**d["segnet"]),
            n_classes=int(d["n_classes"]),
            priors_px=tuple(tuple(float(v) for v in p) for p in priors) if priors else None,
            head_init_scale=float(d.get("head_init_scale", 0.1)),
            loss_weights=LossWeights(**d.get("loss_weights", {})),
        )


@dataclass
class UOLOModel:
    config: ModelConfig
    net: SegNet
    head: HeadParams
    grid: AnchorGrid

    def segnet_parameters(self) -> dict[str, Tensor]:
        return dict(self.net.params)

    def head_parameters(self) -> dict[str, Tensor]:
        return dict(self.head.named_parameters())

    def parameters(self) -> dict[str, Tensor]:
        return {**self.segnet_parameters(), **self.head_parameters()}

    def forward(self, images: Tensor, mode: str = "train"):
        """Soft mask, raw detection tensor ``[B, S, S, A, C+5]`` and the feature tap."""
        out = segnet.forward(self.net, images, mode)
        raw = dethead.head_forward(out.features, self.head, self.grid)
        return out.soft_mask, raw, out.features

    def predict_arrays(self, images: np.ndarray, batch_size: int = 8):
        """Inference-mode soft masks and raw predictions as numpy arrays."""
        masks, raws = [], []
        with no_grad():
            for start in range(0, len(images), batch_size):
                soft, raw, _ = self.forward(Tensor(images[start:start + batch_size]), "infer")
                masks.append(soft.data)
                raws.append(raw.data)
        return np.concatenate(masks), np.concatenate(raws)


def build_model(config: ModelConfig | None = None, rng_seed: int = 0) -> UOLOModel:
    config = config or ModelConfig()
    net = segnet.build(config.segnet, rng_seed)
    grid = config.grid()
    head = dethead.init_head(config.segnet.feature_channels, grid, rng_seed + 1,
                             config.head_init_scale)
    return UOLOModel(config, net, head, grid)
