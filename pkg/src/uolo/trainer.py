"""Interleaved joint training.

Each training step first runs ``n_det`` detection batches through the whole
model, back-propagating the detection loss plus the segmentation loss of the
images in the batch that carry a mask, and then ``n_seg`` segmentation
batches through the segmentation network only.  The ledger keeps the
running segmentation and detection losses (phase means) and their sum.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import dethead, segnet
from . import tensor as T
from .checkpoint import read_checkpoint, write_checkpoint
from .data import CLASS_NAMES, Batch, BatchStream, Sample, streams
from .exceptions import ConfigurationError, NumericError
from .metrics import (EvalReport, SampleRecord, binarize, detection_metrics,
                      od_radius_from_mask, overlap_metrics)
from .model import ModelConfig, UOLOModel, build_model
from .tensor import RunningStats, Tensor

logger = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "LossLedger",
    "AdamState",
    "Adam",
    "adam_update",
    "batch_seg_loss",
    "train_step",
    "split_dataset",
    "evaluate",
    "fit",
    "FitResult",
    "save_checkpoint",
    "load_checkpoint",
    "LOG_COLUMNS",
]

TERMS = ("L_centers", "L_dimensions", "L_confidence", "L_classes")
METRIC_COLUMNS = ["val_iou", "val_dice"] + [
    f"val_{name}_{m}" for name in CLASS_NAMES for m in ("ed", "dbar", "s1r")]
LOG_COLUMNS = ["step", "det_batches", "seg_batches", "L_UOLO", "L_YOLO", "L_U-Net",
               *TERMS, *METRIC_COLUMNS]


@dataclass(frozen=True)
class TrainConfig:
    n_det: int = 8
    n_seg: int = 1
    batch_size: int = 8
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_steps: int = 2000
    validation_fraction: float = 0.0
    rng_seed: int = 0
    augment_flips: bool = False
    augment_shift: float = 0.0
    eval_every: int = 1
    checkpoint_every: int = 0

    def validate(self) -> None:
        if self.n_det < 0 or self.n_seg < 0 or self.n_det + self.n_seg == 0:
            raise ConfigurationError("n_det and n_seg must be >= 0 and not both zero")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigurationError("validation_fraction must lie in [0, 1)")
        if self.batch_size < 1 or self.max_steps < 0:
            raise ConfigurationError("batch_size must be >= 1 and max_steps >= 0")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")


@dataclass
class LossLedger:
    """Current L_U-Net, L_YOLO, L_UOLO plus a per-step history."""

    l_unet: float = 1.0
    l_yolo: float = 0.0
    l_uolo: float = 1.0
    step: int = 0
    det_batches: int = 0
    seg_batches: int = 0
    history: list[dict] = field(default_factory=list)

    def update_yolo(self, value: float) -> None:
        self.l_yolo = float(value)

    def update_unet(self, value: float) -> None:
        self.l_unet = float(value)

    def combine(self) -> float:
        self.l_uolo = self.l_yolo + self.l_unet
        return self.l_uolo

    def state(self) -> dict:
        return {k: getattr(self, k) for k in
                ("l_unet", "l_yolo", "l_uolo", "step", "det_batches", "seg_batches")}

    @classmethod
    def from_state(cls, state: dict) -> "LossLedger":
        return cls(**state)


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, a: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(a), np.zeros_like(a), 0)


def adam_update(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
                betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """In-place bias-corrected Adam step on ``param``; ``grad`` is zeroed afterwards."""
    b1, b2 = betas
    state.t += 1
    state.m *= b1
    state.m += (1.0 - b1) * grad
    state.v *= b2
    state.v += (1.0 - b2) * grad * grad
    m_hat = state.m / (1.0 - b1 ** state.t)
    v_hat = state.v / (1.0 - b2 ** state.t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)
    grad.fill(0.0)


class Adam:
    """One optimizer over the union of parameters; each step touches a subset."""

    def __init__(self, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.state: dict[str, AdamState] = {}

    def step(self, params: dict[str, Tensor]) -> None:
        for name, p in params.items():
            if not np.isfinite(p.grad).all():
                raise NumericError(f"non-finite gradient in parameter {name!r}")
        for name, p in params.items():
            st = self.state.get(name)
            if st is None:
                st = self.state[name] = AdamState.zeros_like(p.data)
            adam_update(p.data, p.grad, st, self.lr, self.betas, self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in sorted(self.state):
            st = self.state[name]
            out[f"{name}.m"] = st.m
            out[f"{name}.v"] = st.v
            out[f"{name}.t"] = np.asarray(float(st.t))
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.state = {}
        for key in arrays:
            if key.endswith(".t"):
                name = key[:-2]
                self.state[name] = AdamState(arrays[f"{name}.m"].copy(), arrays[f"{name}.v"].copy(),
                                             int(arrays[key]))


# --------------------------------------------------------------------------
# training step
# --------------------------------------------------------------------------


def batch_seg_loss(soft_mask: Tensor, masks: np.ndarray, has_mask: np.ndarray) -> Tensor:
    """Mean soft-IoU loss over the images that have a mask; 0 when none do."""
    idx = np.flatnonzero(has_mask)
    if idx.size == 0:
        return Tensor(0.0)
    losses = [segnet.seg_loss(soft_mask[int(i):int(i) + 1], masks[int(i):int(i) + 1]) for i in idx]
    total = losses[0]
    for extra in losses[1:]:
        total = total + extra
    return total * (1.0 / idx.size)


def _targets(model: UOLOModel, batch: Batch) -> dethead.DetectionTarget:
    size = model.config.segnet.input_size
    return dethead.stack_targets([
        dethead.assign_targets([b.as_xywh() for b in boxes], model.grid, size)
        for boxes in batch.boxes])


def _check_finite(value: float, what: str) -> None:
    if not math.isfinite(value):
        raise NumericError(f"{what} became non-finite")


def train_step(model: UOLOModel, det_stream: BatchStream, seg_stream: BatchStream | None,
               config: TrainConfig, ledger: LossLedger, optimizer: Adam) -> LossLedger:
    tape = T.get_tape()
    all_params = model.parameters()
    seg_params = model.segnet_parameters()
    yolo_vals: list[float] = []
    term_sums = dict.fromkeys(TERMS, 0.0)

    for _ in range(config.n_det):
        batch = next(det_stream)
        tape.clear()
        soft, raw, _ = model.forward(Tensor(batch.images), "train")
        l_yolo, terms = dethead.det_loss(raw, _targets(model, batch), model.config.loss_weights)
        l_unet = batch_seg_loss(soft, batch.masks, batch.has_mask)
        loss = l_yolo + l_unet
        _check_finite(float(loss.data), "L_UOLO")
        T.backward(loss)
        tape.clear()
        optimizer.step(all_params)
        yolo_vals.append(float(l_yolo.data))
        for k in TERMS:
            term_sums[k] += terms[k]
        ledger.det_batches += 1
    if config.n_det:
        ledger.update_yolo(float(np.mean(yolo_vals)))

    if config.n_seg:
        if seg_stream is None:
            raise ConfigurationError("n_seg > 0 but there is no segmentation stream")
        unet_vals = []
        for _ in range(config.n_seg):
            batch = next(seg_stream)
            tape.clear()
            out = segnet.forward(model.net, Tensor(batch.images), "train")
            loss = batch_seg_loss(out.soft_mask, batch.masks, batch.has_mask)
            _check_finite(float(loss.data), "L_U-Net")
            T.backward(loss)
            tape.clear()
            optimizer.step(seg_params)
            unet_vals.append(float(loss.data))
            ledger.seg_batches += 1
        ledger.update_unet(float(np.mean(unet_vals)))

    ledger.combine()
    ledger.step += 1
    n = max(config.n_det, 1)
    ledger.history.append({
        "step": ledger.step,
        "det_batches": ledger.det_batches,
        "seg_batches": ledger.seg_batches,
        "L_UOLO": ledger.l_uolo,
        "L_YOLO": ledger.l_yolo,
        "L_U-Net": ledger.l_unet,
        **{k: (term_sums[k] / n if config.n_det else None) for k in TERMS},
    })
    return ledger


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


def _od_radius(sample: Sample) -> float | None:
    if "od_radius" in sample.metadata:
        return float(sample.metadata["od_radius"])
    if sample.seg_mask is not None and sample.seg_mask.any():
        return od_radius_from_mask(sample.seg_mask)
    od = sample.box_for(0)
    return od.side / 2 if od is not None else None


def predict_samples(model: UOLOModel, samples: list[Sample], batch_size: int = 8):
    """Soft masks ``(n, H, W)`` and per-class best boxes for every sample."""
    images = np.stack([s.image.transpose(2, 0, 1) for s in samples]).astype(np.float64)
    soft, raw = model.predict_arrays(images, batch_size)
    decoded = dethead.decode(raw, model.grid)
    best = [dethead.select_best(boxes, model.grid.C) for boxes in decoded]
    return soft[:, 0], best


def evaluate(model: UOLOModel, samples: list[Sample], batch_size: int = 8) -> EvalReport:
    if not samples:
        raise ConfigurationError("cannot evaluate an empty dataset")
    soft, best = predict_samples(model, samples, batch_size)
    scale = model.config.segnet.input_size / model.grid.S
    names = CLASS_NAMES[:model.grid.C] if model.grid.C <= len(CLASS_NAMES) else tuple(
        f"class{c}" for c in range(model.grid.C))
    report = EvalReport(tuple(names))
    for s, mask, boxes in zip(samples, soft, best):
        rec = SampleRecord(s.id)
        if s.seg_mask is not None:
            pred = binarize(mask)
            rec.iou, rec.dice = overlap_metrics(pred, (s.seg_mask > 0).astype(np.uint8))
            rec.both_empty = not pred.any() and not s.seg_mask.any()
        radius = _od_radius(s)
        if radius:
            gt = {b.class_id: (b.cx, b.cy) for b in s.boxes}
            pred_c = {c: (b.b_x * scale, b.b_y * scale) for c, b in enumerate(boxes) if b is not None}
            rec.detections = detection_metrics(pred_c, gt, radius)
        report.records.append(rec)
    return report


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(path, model: UOLOModel, optimizer: Adam | None = None,
                    ledger: LossLedger | None = None, extra: dict | None = None):
    params = {name: p.data for name, p in model.parameters().items()}
    for name, st in model.net.stats.items():
        params[f"stats.{name}.mean"] = st.mean
        params[f"stats.{name}.var"] = st.var
        params[f"stats.{name}.count"] = np.asarray(float(st.count))
    header = {"model": model.config.to_dict(),
              "ledger": ledger.state() if ledger else LossLedger().state(),
              **(extra or {})}
    return write_checkpoint(path, header, params, optimizer.state_arrays() if optimizer else {})


def load_checkpoint(path, expect: ModelConfig | None = None):
    """Rebuild ``(model, optimizer_arrays, header)`` from a checkpoint.

    With ``expect`` the stored architecture must match it exactly.
    """
    header, params, optim = read_checkpoint(path)
    config = ModelConfig.from_dict(header["model"])
    if expect is not None and expect.to_dict() != config.to_dict():
        raise ConfigurationError(
            f"checkpoint {path} architecture is incompatible with the requested configuration")
    model = build_model(config)
    for name, p in model.parameters().items():
        if name not in params or params[name].shape != p.shape:
            raise ConfigurationError(f"checkpoint {path}: missing or misshapen parameter {name}")
        p.data[...] = params[name]
    for name, st in model.net.stats.items():
        model.net.stats[name] = RunningStats(params[f"stats.{name}.mean"].copy(),
                                             params[f"stats.{name}.var"].copy(),
                                             st.momentum, st.eps,
                                             int(params[f"stats.{name}.count"]))
    return model, optim, header


# --------------------------------------------------------------------------
# fit
# --------------------------------------------------------------------------


def split_dataset(samples: list[Sample], fraction: float, seed: int = 0):
    """Train/validation split stratified by annotation kind (mask vs boxes only)."""
    if fraction <= 0:
        return list(samples), []
    train, val = [], []
    for kind, group in enumerate(([s for s in samples if s.seg_mask is not None],
                                  [s for s in samples if s.seg_mask is None])):
        order = np.random.default_rng([seed, 7, kind]).permutation(len(group))
        n_val = int(round(fraction * len(group)))
        chosen = set(order[:n_val].tolist())
        for i, s in enumerate(group):
            (val if i in chosen else train).append(s)
    return train, val


@dataclass
class FitResult:
    model: UOLOModel
    ledger: LossLedger
    optimizer: Adam
    report: EvalReport | None
    checkpoints: list[Path] = field(default_factory=list)


def _metric_row(report: EvalReport | None) -> dict:
    if report is None:
        return dict.fromkeys(METRIC_COLUMNS)
    s = report.summary()
    row = {"val_iou": s["iou"], "val_dice": s["dice"]}
    for name in CLASS_NAMES:
        for m in ("ed", "dbar", "s1r"):
            row[f"val_{name}_{m}"] = s.get(f"{name}_{m}")
    return row


def _csv_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def fit(model: UOLOModel, samples: list[Sample], config: TrainConfig, out_dir=None,
        resume: str | Path | None = None, callback=None,
        checkpoint_extra: dict | None = None) -> FitResult:
    """Run training steps until ``config.max_steps``.

    With ``out_dir`` a CSV log (``train_log.csv``), periodic checkpoints and
    ``final.ckpt`` / ``best.ckpt`` are written.  ``resume`` restores model,
    optimizer, ledger counters and stream positions from a checkpoint.
    ``callback(step, model, ledger, report)`` runs after every step; a truthy
    return ends training early (used by the convergence harness).
    ``checkpoint_extra`` is merged into every checkpoint header.
    """
    config.validate()
    train, val = split_dataset(samples, config.validation_fraction, config.rng_seed)
    det_stream, seg_stream = streams(train, config.batch_size, config.rng_seed,
                                     need_seg=config.n_seg > 0,
                                     augment_flips=config.augment_flips,
                                     augment_shift=config.augment_shift)
    optimizer = Adam(config.learning_rate, (config.beta1, config.beta2), config.adam_eps)
    ledger = LossLedger()
    if resume is not None:
        model, optim_arrays, header = load_checkpoint(resume, expect=model.config)
        optimizer.load_state_arrays(optim_arrays)
        ledger = LossLedger.from_state(header["ledger"])
        det_stream.skip(ledger.det_batches)
        if seg_stream is not None:
            seg_stream.skip(ledger.seg_batches)

    out = Path(out_dir) if out_dir is not None else None
    checkpoints: list[Path] = []
    log_fh = writer = None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.csv"
        appending = resume is not None and log_path.exists()
        log_fh = open(log_path, "a" if appending else "w", newline="")
        writer = csv.writer(log_fh, lineterminator="\n")
        if not appending:
            writer.writerow(LOG_COLUMNS)

    report = None
    best_key = None
    try:
        if out is not None and ledger.step == 0 and config.max_steps == 0:
            checkpoints.append(save_checkpoint(out / "final.ckpt", model, optimizer, ledger,
                                               checkpoint_extra))
        while ledger.step < config.max_steps:
            train_step(model, det_stream, seg_stream, config, ledger, optimizer)
            report = None
            if val and config.eval_every and ledger.step % config.eval_every == 0:
                report = evaluate(model, val, config.batch_size)
            row = {**ledger.history[-1], **_metric_row(report)}
            ledger.history[-1] = row
            if writer is not None:
                writer.writerow([_csv_value(row.get(c)) for c in LOG_COLUMNS])
                log_fh.flush()
            if out is not None:
                if config.checkpoint_every and ledger.step % config.checkpoint_every == 0:
                    checkpoints.append(save_checkpoint(
                        out / "checkpoints" / f"step_{ledger.step:06d}.ckpt", model, optimizer,
                        ledger, checkpoint_extra))
                key = report.mean_iou() if report is not None and report.mean_iou() is not None \
                    else -ledger.l_uolo
                if best_key is None or key > best_key:
                    best_key = key
                    save_checkpoint(out / "best.ckpt", model, optimizer, ledger, checkpoint_extra)
            logger.info("step %d L_UOLO=%.5f L_YOLO=%.5f L_U-Net=%.5f", ledger.step,
                        ledger.l_uolo, ledger.l_yolo, ledger.l_unet)
            if callback is not None and callback(ledger.step, model, ledger, report):
                break
        if out is not None and (config.max_steps > 0 or ledger.step > 0):
            checkpoints.append(save_checkpoint(out / "final.ckpt", model, optimizer, ledger,
                                               checkpoint_extra))
            if not (out / "best.ckpt").exists():
                save_checkpoint(out / "best.ckpt", model, optimizer, ledger, checkpoint_extra)
    finally:
        if log_fh is not None:
            log_fh.close()
    if val and report is None:
        report = evaluate(model, val, config.batch_size)
    return FitResult(model, ledger, optimizer, report, checkpoints)


def config_fields(cls) -> list[str]:
    return [f.name for f in fields(cls)]


def train_config_dict(config: TrainConfig) -> dict:
    return asdict(config)
