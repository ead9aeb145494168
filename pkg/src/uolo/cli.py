"""Command-line entry point: ``uolo {gen-data,train,eval,predict}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import data, trainer
from .config import RunConfig, load_config, parse_override
from .data import CLASS_NAMES, Sample
from .exceptions import ConfigurationError, DataError, UOLOError
from .metrics import binarize
from .model import build_model

logger = logging.getLogger("uolo")

CONFIG_ECHO = "config.json"

# overlay colours (RGB, 0..255)
MASK_COLOUR = (0, 255, 0)
BOX_COLOURS = {0: (255, 64, 64), 1: (64, 160, 255)}


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _prepare_out(out: Path, force: bool, allow_existing: bool = False) -> Path:
    if out.exists() and not out.is_dir():
        raise ConfigurationError(f"{out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not (force or allow_existing):
        raise ConfigurationError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _effective_config(args) -> RunConfig:
    cfg = load_config(args.config)
    overrides = dict(parse_override(s) for s in (args.set or []))
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        overrides["train.max_steps"] = args.steps
    if getattr(args, "mask_fraction", None) is not None:
        overrides["dataset.mask_fraction"] = args.mask_fraction
    if getattr(args, "n", None) is not None:
        overrides["dataset.n_samples"] = args.n
    return cfg.with_overrides(overrides).validate() if overrides else cfg


def _echo(cfg: RunConfig, out: Path) -> None:
    text = cfg.to_json()
    (out / CONFIG_ECHO).write_text(text)
    logger.info("effective config written to %s", out / CONFIG_ECHO)


def _prepare_samples(samples: list[Sample], cfg: RunConfig) -> list[Sample]:
    size = cfg.segnet.input_size
    if cfg.dataset.preprocess:
        return [data.crop_and_resize(s, size) for s in samples]
    for s in samples:
        if s.image.shape[:2] != (size, size):
            raise DataError(f"sample {s.id} is {s.image.shape[1]}x{s.image.shape[0]}, "
                            f"expected {size}x{size} (set dataset.preprocess=true to crop and resize)")
        if s.image.shape[2] != cfg.segnet.in_channels:
            raise DataError(f"sample {s.id} has {s.image.shape[2]} channel(s), "
                            f"segnet.in_channels is {cfg.segnet.in_channels}")
    return samples


def _run_config_from_checkpoint(header: dict) -> RunConfig:
    if "run" not in header:
        raise ConfigurationError("checkpoint carries no run configuration; pass --config")
    return RunConfig.from_dict(header["run"])


def _check_compatible(cfg: RunConfig, model_config, path) -> None:
    stored = model_config.to_dict()
    expected = cfg.model_config(priors_px=model_config.priors_px).to_dict()
    if stored != expected:
        diff = sorted(k for k in stored if stored[k] != expected.get(k))
        raise ConfigurationError(
            f"checkpoint {path} is incompatible with the configuration (differs in: {', '.join(diff)})")


def _load(args):
    model, _, header = trainer.load_checkpoint(args.checkpoint)
    if args.config is not None or args.set:
        cfg = _effective_config(args)
        _check_compatible(cfg, model.config, args.checkpoint)
    else:
        cfg = _run_config_from_checkpoint(header)
    return model, cfg


def _summary_line(summary: dict) -> str:
    parts = []
    for k, v in summary.items():
        parts.append(f"{k}=" + ("n/a" if v is None else f"{v:.4f}"))
    return " ".join(parts)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _effective_config(args)
    out = _prepare_out(Path(args.out), args.force)
    n = cfg.dataset.n_samples
    samples = data.strip_masks(data.generate(cfg.scene_spec(), n), cfg.dataset.n_masked(n))
    data.write_dataset(out, samples)
    _echo(cfg, out)
    n_masks = sum(s.seg_mask is not None for s in samples)
    n_boxes = sum(1 for s in samples if s.boxes)
    print(f"wrote {len(samples)} samples to {out}: {n_boxes} box-annotated, "
          f"{n_masks} mask-annotated, {len(samples) - n_masks} boxes-only")
    return 0


def cmd_train(args) -> int:
    cfg = _effective_config(args)
    out = _prepare_out(Path(args.out), args.force, allow_existing=args.resume is not None)
    samples = _prepare_samples(data.read_dataset(args.data), cfg)
    if not samples:
        raise DataError(f"dataset {args.data} is empty")
    priors = cfg.resolve_priors(samples)
    logger.info("anchor priors (w, h) px: %s", priors)
    model = build_model(cfg.model_config(priors), cfg.seed)
    _echo(cfg, out)

    # every checkpoint carries the run configuration for eval/predict
    result = trainer.fit(model, samples, cfg.train_config(), out, resume=args.resume,
                         checkpoint_extra={"run": cfg.to_dict()})
    led = result.ledger
    print(f"trained {led.step} steps ({led.det_batches} detection / {led.seg_batches} segmentation "
          f"batches): L_UOLO={led.l_uolo:.5f} L_YOLO={led.l_yolo:.5f} L_U-Net={led.l_unet:.5f}")
    if result.report is not None:
        print("validation: " + _summary_line(result.report.summary()))
    print(f"checkpoints in {out}")
    return 0


def cmd_eval(args) -> int:
    model, cfg = _load(args)
    out = _prepare_out(Path(args.out), args.force)
    samples = _prepare_samples(data.read_dataset(args.data), cfg)
    if not samples:
        raise DataError(f"dataset {args.data} is empty")
    report = trainer.evaluate(model, samples, cfg.train.batch_size)
    (out / "eval.csv").write_text(report.to_csv())
    _echo(cfg, out)
    print(_summary_line(report.summary()))
    return 0


def _draw_rect(img: np.ndarray, x0: int, y0: int, x1: int, y1: int, colour) -> None:
    h, w = img.shape[:2]
    x0, x1 = max(0, min(x0, w - 1)), max(0, min(x1, w - 1))
    y0, y1 = max(0, min(y0, h - 1)), max(0, min(y1, h - 1))
    img[y0, x0:x1 + 1] = colour
    img[y1, x0:x1 + 1] = colour
    img[y0:y1 + 1, x0] = colour
    img[y0:y1 + 1, x1] = colour


def _contour(mask: np.ndarray) -> np.ndarray:
    m = mask.astype(bool)
    pad = np.pad(m, 1)
    interior = pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
    return m & ~interior


def cmd_predict(args) -> int:
    model, cfg = _load(args)
    path = Path(args.image)
    raw_img = data.read_pnm(path).astype(np.float64) / 255.0
    if raw_img.shape[2] != cfg.segnet.in_channels:
        raw_img = raw_img.mean(axis=2, keepdims=True) if cfg.segnet.in_channels == 1 \
            else np.repeat(raw_img, 3, axis=2)
    sample = Sample(raw_img, None, [], {"id": path.stem})
    size = cfg.segnet.input_size
    h, w = raw_img.shape[:2]
    if cfg.dataset.preprocess or (h, w) != (size, size):
        prepared = data.crop_and_resize(sample, size)
        r0, r1, c0, c1 = prepared.metadata["crop"]
    else:
        prepared, (r0, r1, c0, c1) = sample, (0, h, 0, w)
    sy, sx = (r1 - r0) / size, (c1 - c0) / size

    soft, best = trainer.predict_samples(model, [prepared])
    best = best[0]
    mask_small = binarize(soft[0])
    # map the mask back onto the input image grid
    mask = np.zeros((h, w), dtype=np.uint8)
    mask[r0:r1, c0:c1] = data._nearest(mask_small, r1 - r0, c1 - c0)
    out = _prepare_out(Path(args.out), args.force)

    overlay = np.clip(np.round(raw_img * 255), 0, 255).astype(np.uint8)
    overlay = np.repeat(overlay, 3, axis=2) if overlay.shape[2] == 1 else overlay.copy()
    overlay[_contour(mask)] = MASK_COLOUR
    scale = size / model.grid.S
    lines = [f"image\t{path}", f"size\t{w}\t{h}",
             f"mask_area_px\t{int(mask.sum())}"]
    if mask.any():
        lines.append(f"mask_radius_px\t{math.sqrt(mask.sum() / math.pi)!r}")
    lines.append("class\tname\tcx\tcy\tw\th\tx0\ty0\tx1\ty1\tconfidence\tscore")
    captions = []
    for c, box in enumerate(best):
        name = CLASS_NAMES[c] if c < len(CLASS_NAMES) else f"class{c}"
        cx, cy = c0 + box.b_x * scale * sx, r0 + box.b_y * scale * sy
        bw, bh = box.b_w * scale * sx, box.b_h * scale * sy
        x0, y0 = max(0.0, cx - bw / 2), max(0.0, cy - bh / 2)
        x1, y1 = min(float(w), cx + bw / 2), min(float(h), cy + bh / 2)
        lines.append("\t".join([str(c), name] + [repr(float(v)) for v in
                                                 (cx, cy, bw, bh, x0, y0, x1, y1)]
                               + [repr(box.confidence), repr(box.score(c))]))
        captions.append(f"{name} {box.confidence:.2f} at ({cx:.1f}, {cy:.1f})")
        _draw_rect(overlay, int(math.floor(x0)), int(math.floor(y0)),
                   int(math.ceil(x1)) - 1, int(math.ceil(y1)) - 1, BOX_COLOURS.get(c, (255, 255, 0)))
    data.write_pnm(out / "overlay.ppm", overlay)
    (out / "caption.txt").write_text("\n".join(captions) + "\n")
    (out / "prediction.tsv").write_text("\n".join(lines) + "\n")
    print("\n".join(captions))
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="JSON config file or bundled config name (e.g. 'overfit')")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config field, e.g. train.max_steps=10 (repeatable)")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--force", action="store_true", help="write into a non-empty output directory")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uolo",
                                     description="Joint optic disc / fovea detection and segmentation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("-n", type=int, help="number of samples (dataset.n_samples)")
    p.add_argument("--mask-fraction", type=float, help="fraction of samples keeping a mask")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on a dataset directory")
    _common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, help="train.max_steps")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict on one PGM/PPM image")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UOLOError as exc:
        print(f"uolo {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
