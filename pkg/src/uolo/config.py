"""Run configuration: one JSON document with per-section defaults.

Sections mirror the library dataclasses::

    {"seed": 0,
     "segnet":  {...SegNetConfig fields},
     "anchors": {"n_classes": 2, "n_anchors": 2, "priors_px": null, "head_init_scale": 0.1},
     "loss":    {...LossWeights fields},
     "train":   {...TrainConfig fields except rng_seed},
     "scene":   {...SceneSpec fields except rng_seed},
     "dataset": {"n_samples": 8, "mask_fraction": 0.5, "preprocess": false}}

``seed`` drives scene generation, data order, augmentation and
initialization.  ``priors_px: null`` means anchor priors are clustered from
the training boxes at train time.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import dethead
from .data import SceneSpec
from .dethead import LossWeights
from .exceptions import ConfigurationError, DataError
from .model import ModelConfig
from .segnet import SegNetConfig
from .trainer import TrainConfig

__all__ = ["AnchorSettings", "DatasetSettings", "RunConfig", "load_config", "parse_override",
           "bundled_config_names"]


@dataclass(frozen=True)
class AnchorSettings:
    n_classes: int = 2
    n_anchors: int = 2
    priors_px: tuple[tuple[float, float], ...] | None = None
    head_init_scale: float = 0.1


@dataclass(frozen=True)
class DatasetSettings:
    n_samples: int = 8
    mask_fraction: float = 0.5
    preprocess: bool = False

    def n_masked(self, n: int | None = None) -> int:
        n = self.n_samples if n is None else n
        return int(round(self.mask_fraction * n))


_SECTIONS = {
    "segnet": SegNetConfig,
    "anchors": AnchorSettings,
    "loss": LossWeights,
    "train": TrainConfig,
    "scene": SceneSpec,
    "dataset": DatasetSettings,
}
_SEEDED = ("train", "scene")  # their rng_seed comes from the top-level seed


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def _coerce(cls, name: str, value):
    """Check a JSON value against the dataclass field's default type."""
    ref = getattr(cls(), name)
    if isinstance(ref, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{cls.__name__}.{name} must be true/false, got {value!r}")
        return value
    if isinstance(ref, int) and not isinstance(ref, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
            raise ConfigurationError(f"{cls.__name__}.{name} must be an integer, got {value!r}")
        return int(value)
    if isinstance(ref, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{cls.__name__}.{name} must be a number, got {value!r}")
        return float(value)
    if isinstance(ref, str):
        if not isinstance(value, str):
            raise ConfigurationError(f"{cls.__name__}.{name} must be a string, got {value!r}")
        return value
    return _tuplify(value)


def _section_dict(obj, drop_seed: bool) -> dict:
    d = asdict(obj)
    if drop_seed:
        d.pop("rng_seed", None)
    return {k: list(map(list, v)) if k == "priors_px" and v else
            (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    segnet: SegNetConfig = field(default_factory=SegNetConfig)
    anchors: AnchorSettings = field(default_factory=AnchorSettings)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    scene: SceneSpec = field(default_factory=SceneSpec)
    dataset: DatasetSettings = field(default_factory=DatasetSettings)

    # ---- construction -------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigurationError("config must be a JSON object")
        unknown = set(d) - {"seed", *_SECTIONS}
        if unknown:
            raise ConfigurationError(f"unknown config section(s): {', '.join(sorted(unknown))}")
        kwargs = {}
        for name, section_cls in _SECTIONS.items():
            given = d.get(name, {})
            if not isinstance(given, dict):
                raise ConfigurationError(f"config section {name!r} must be an object")
            allowed = {f.name for f in fields(section_cls)} - ({"rng_seed"} if name in _SEEDED else set())
            bad = set(given) - allowed
            if bad:
                raise ConfigurationError(f"unknown key(s) in {name!r}: {', '.join(sorted(bad))}")
            values = {k: (_coerce(section_cls, k, v) if v is not None else None)
                      for k, v in given.items()}
            kwargs[name] = section_cls(**values)
        seed = d.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
            raise ConfigurationError(f"seed must be a non-negative integer, got {seed!r}")
        return cls(seed=seed, **kwargs)

    def to_dict(self) -> dict:
        out = {"seed": self.seed}
        for name in _SECTIONS:
            out[name] = _section_dict(getattr(self, name), name in _SEEDED)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def with_overrides(self, overrides: dict[str, object]) -> "RunConfig":
        """Apply dotted-key overrides such as ``{"train.max_steps": 10}``."""
        d = self.to_dict()
        for key, value in overrides.items():
            if key == "seed":
                d["seed"] = value
                continue
            section, _, name = key.partition(".")
            if section not in _SECTIONS or not name:
                raise ConfigurationError(f"override key must be 'seed' or 'section.field', got {key!r}")
            d[section][name] = value
        return RunConfig.from_dict(d)

    def validate(self) -> "RunConfig":
        self.segnet.validate()
        self.train_config().validate()
        self.scene_spec().validate()
        if not 0.0 <= self.dataset.mask_fraction <= 1.0:
            raise ConfigurationError("dataset.mask_fraction must lie in [0, 1]")
        if self.dataset.n_samples < 1:
            raise ConfigurationError("dataset.n_samples must be >= 1")
        if self.anchors.n_anchors < 1 or self.anchors.n_classes < 1:
            raise ConfigurationError("anchors.n_anchors and anchors.n_classes must be >= 1")
        if self.anchors.priors_px is not None and len(self.anchors.priors_px) != self.anchors.n_anchors:
            raise ConfigurationError("anchors.priors_px must list exactly n_anchors (w, h) pairs")
        return self

    # ---- library objects ----------------------------------------------

    def train_config(self) -> TrainConfig:
        return replace(self.train, rng_seed=self.seed)

    def scene_spec(self) -> SceneSpec:
        return replace(self.scene, rng_seed=self.seed)

    def model_config(self, priors_px=None) -> ModelConfig:
        priors = priors_px if priors_px is not None else self.anchors.priors_px
        if priors is not None:
            priors = tuple((float(w), float(h)) for w, h in priors)
        return ModelConfig(segnet=self.segnet, n_classes=self.anchors.n_classes, priors_px=priors,
                           head_init_scale=self.anchors.head_init_scale, loss_weights=self.loss)

    def resolve_priors(self, samples) -> tuple[tuple[float, float], ...]:
        """Configured priors, or k-means over the training boxes when unset."""
        if self.anchors.priors_px is not None:
            return tuple((float(w), float(h)) for w, h in self.anchors.priors_px)
        shapes = [(b.side, b.side) for s in samples for b in s.boxes]
        if not shapes:
            raise DataError("no boxes to cluster anchor priors from")
        centers = dethead.kmeans_anchors(np.asarray(shapes), self.anchors.n_anchors, rng_seed=self.seed)
        return tuple((float(w), float(h)) for w, h in centers)


def parse_override(text: str) -> tuple[str, object]:
    """``key=value``; the value is read as JSON when possible, else kept as a string."""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigurationError(f"--set expects key=value, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def bundled_config_names() -> list[str]:
    root = resources.files("uolo") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_config(source: str | Path | None) -> RunConfig:
    """Load from a file path, a bundled config name, or defaults when ``None``."""
    if source is None:
        return RunConfig().validate()
    path = Path(source)
    if path.is_file():
        text = path.read_text()
    elif str(source) in bundled_config_names():
        text = (resources.files("uolo") / "configs" / f"{source}.json").read_text()
    else:
        raise ConfigurationError(
            f"config {source!s} is neither a file nor a bundled config ({', '.join(bundled_config_names())})")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {source!s}: invalid JSON ({exc})") from exc
    return RunConfig.from_dict(raw).validate()
