"""Command-line entry points: ``synth``, ``train``, ``eval`` and ``analyze``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric failure.
Every command checks its inputs before it creates any output.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import ConfigError, dump_yaml, from_mapping, load_yaml, to_mapping
from .data import DataError, ingest, read_class_names, split_videos, to_uint8, write_dataset
from .detector import ModelConfig, TrainConfig, build_model, fit, load_model, save_checkpoint
from .detector.checkpoint import CheckpointError, warm_start
from .detector.config import VARIANTS
from .detector.train import NumericError, eval_frames, frame_id, predict_frames
from .evaluation import emit_table, format_predictions, map_range
from .geometry import PixelBox, norm_to_pixel
from .synth import SynthConfig, synth_moving_blob

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("stdet")

# fixed per-class colours for overlays
PALETTE = (
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
    (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212),
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------


def _config_sections(path: str | None, allowed: tuple[str, ...]) -> dict:
    if path is None:
        return {}
    data = load_yaml(path)
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"{path}: unknown section(s) {', '.join(unknown)}; expected {', '.join(allowed)}")
    return data


def _fresh_out(path: str) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise UsageError(f"--out {out} exists and is not a directory")
    return out


def _ensure_writable(out: Path) -> None:
    probe = out
    while not probe.exists():
        probe = probe.parent
    if not probe.is_dir() or not _can_write(probe):
        raise DataError(f"cannot write to {out}")


def _can_write(p: Path) -> bool:
    return os.access(p, os.W_OK)


def _load_split(data_dir: str, split_seed: int, ratios):
    videos = ingest(data_dir)
    names = read_class_names(data_dir)
    sp = split_videos(videos, ratios, split_seed)
    by_id = {v.id: v for v in videos}
    parts = {k: [by_id[i] for i in getattr(sp, k)] for k in ("train", "val", "test")}
    return videos, names, sp, parts


def _write_text(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    sections = _config_sections(args.config, ("synth",))
    cfg = from_mapping(SynthConfig, sections.get("synth"), "synth", args.config)
    out = _fresh_out(args.out)
    _ensure_writable(out)
    if cfg.frames < 3:
        print(f"warning: {cfg.frames} frames per video is shorter than the default window of 3", file=sys.stderr)
    videos = synth_moving_blob(cfg, seed=args.seed)
    write_dataset(videos, out, cfg.classes)
    _write_text(out / "synth_config.yaml", dump_yaml({"seed": args.seed, "synth": to_mapping(cfg)}))
    print(f"wrote {len(videos)} videos, {sum(len(v) for v in videos)} frames to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitConfig:
    ratios: tuple = (0.7, 0.15, 0.15)
    seed: int = 0


def cmd_train(args) -> int:
    sections = _config_sections(args.config, ("model", "train", "split"))
    mdata = dict(sections.get("model") or {})
    if args.variant is not None:
        mdata["variant"] = args.variant
    variant = mdata.get("variant", "baseline")
    if variant not in VARIANTS:
        raise UsageError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    tdata = dict(sections.get("train") or {})
    tdata["seed"] = args.seed
    if args.init is not None:
        tdata["init_weights"] = args.init
    tbase = TrainConfig.for_variant(variant)
    tcfg = from_mapping(TrainConfig, {**to_mapping(tbase), **tdata}, "train", args.config)
    scfg = from_mapping(SplitConfig, sections.get("split"), "split", args.config)
    videos, names, sp, parts = _load_split(args.data, scfg.seed, scfg.ratios)
    if names:
        n_cfg = mdata.setdefault("num_classes", len(names))
        if n_cfg != len(names):
            raise DataError(f"model has {n_cfg} classes but {args.data} lists {len(names)}")
        mdata.setdefault("class_names", list(names))
    mcfg = from_mapping(ModelConfig, mdata, "model", args.config)
    if tcfg.init_weights and not Path(tcfg.init_weights).is_file():
        raise DataError(f"init checkpoint {tcfg.init_weights} not found")
    out = _fresh_out(args.out)
    _ensure_writable(out)

    model = build_model(mcfg, args.seed)
    if tcfg.init_weights:
        n = len(warm_start(model, tcfg.init_weights))
        print(f"transferred {n} of {len(model.params)} tensors from {tcfg.init_weights}")
        tcfg = replace(tcfg, init_weights=None)
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "config.yaml", dump_yaml({"model": to_mapping(mcfg), "train": to_mapping(tcfg),
                                                 "split": to_mapping(scfg)}))
    _write_text(out / "split.json", json.dumps(sp.as_dict(), indent=1) + "\n")
    res = fit(model, tcfg, parts["train"], parts["val"], out)
    print(f"best epoch {res.best_epoch}: val mAP50-95 {res.best_map:.4f}; checkpoints in {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    model = load_model(args.checkpoint)
    _, names, _, parts = _load_split(args.data, args.split_seed, SplitConfig().ratios)
    if names and model.cfg.num_classes != len(names):
        raise DataError(f"checkpoint has {model.cfg.num_classes} classes but {args.data} lists {len(names)}")
    videos = parts[args.split]
    if not videos:
        raise DataError(f"split {args.split!r} is empty")
    items = eval_frames(videos, model.cfg.window, args.stride)
    if not items:
        raise DataError(f"split {args.split!r} has no frame with a full window")
    out = _fresh_out(args.out)
    _ensure_writable(out)

    dets = predict_frames(model, items, conf_thr=args.conf, iou_thr=args.iou)
    d_map, g_map = {}, {}
    for (v, i), d in zip(items, dets):
        _, h, w = v.frame(i).shape
        d_map[frame_id(v.id, i)] = d
        g_map[frame_id(v.id, i)] = [norm_to_pixel(b, w, h) for b in v.labels[i]]
    result = map_range(d_map, g_map)
    table = emit_table(result, names or model.cfg.class_names)
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "metrics.csv", table.to_csv())
    _write_text(out / "metrics.json", table.to_json())
    _write_text(out / "metrics.txt", table.to_text())
    _write_text(out / "predictions.txt", format_predictions(d_map))
    print(table.to_text(), end="")
    print(f"{result.precision:.3f} {result.recall:.3f} {result.map50:.3f} {result.map50_95:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------


@dataclass
class FrameAnalysisRecord:
    frame_index: int
    detections: list = field(default_factory=list)  # (class_name, confidence, PixelBox)
    top_confidence: float | None = None

    def to_dict(self) -> dict:
        d = {
            "frame_index": self.frame_index,
            "detections": [
                {"class": c, "confidence": round(conf, 6), "box": [round(b.x1, 3), round(b.y1, 3), round(b.x2, 3), round(b.y2, 3)],
                 "class_id": b.class_id}
                for c, conf, b in self.detections
            ],
        }
        if self.top_confidence is not None:
            d["top_confidence"] = round(self.top_confidence, 6)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FrameAnalysisRecord":
        dets = [(x["class"], x["confidence"], PixelBox(*x["box"], x["class_id"], x["confidence"])) for x in d["detections"]]
        return cls(d["frame_index"], dets, d.get("top_confidence"))


def parse_range(text: str) -> tuple[int, int]:
    try:
        a, b = (int(x) for x in text.split("-"))
    except ValueError:
        raise UsageError(f"frame range must look like 'a-b', got {text!r}") from None
    if a > b or a < 0:
        raise UsageError(f"frame range {text!r} is empty or negative")
    return a, b


def render_overlay(frame: np.ndarray, dets) -> "Image.Image":
    from PIL import Image, ImageDraw

    img = Image.fromarray(np.transpose(to_uint8(frame), (1, 2, 0)), "RGB")
    draw = ImageDraw.Draw(img)
    for name, conf, b in dets:
        color = PALETTE[b.class_id % len(PALETTE)]
        draw.rectangle([b.x1, b.y1, b.x2, b.y2], outline=color, width=1)
        draw.text((b.x1 + 1, max(0.0, b.y1 - 10)), f"{name} {conf:.2f}", fill=color)
    return img


def analyze_frames(model, video, first: int, last: int, class_names, conf_thr=0.25, iou_thr=0.45):
    items = [(video, i) for i in range(first, last + 1)]
    dets = predict_frames(model, items, conf_thr=conf_thr, iou_thr=iou_thr)
    names = list(class_names)
    records = []
    for i, d in zip(range(first, last + 1), dets):
        named = [(names[b.class_id] if b.class_id < len(names) else f"class_{b.class_id}", b.confidence, b) for b in d]
        top = max((b.confidence for b in d), default=None)
        records.append(FrameAnalysisRecord(i, named, top))
    return records


def cmd_analyze(args) -> int:
    model = load_model(args.checkpoint)
    first, last = parse_range(args.frames)
    videos = {v.id: v for v in ingest(args.data)}
    if args.video not in videos:
        raise DataError(f"video {args.video!r} not found in {args.data}")
    video = videos[args.video]
    if last >= len(video):
        raise DataError(f"frame range {first}-{last} outside video {video.id} of {len(video)} frames")
    out = _fresh_out(args.out)
    _ensure_writable(out)

    names = read_class_names(args.data) or model.cfg.class_names
    records = analyze_frames(model, video, first, last, names, args.conf, args.iou)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    for r in records:
        render_overlay(video.frame(r.frame_index), r.detections).save(out / "frames" / f"img_{r.frame_index:05d}.png",
                                                                       optimize=False)
    payload = {"video": video.id, "checkpoint_variant": model.cfg.variant, "records": [r.to_dict() for r in records]}
    _write_text(out / "records.json", json.dumps(payload, indent=1) + "\n")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame_index", "top_confidence", "n_detections"])
    for r in records:
        w.writerow([r.frame_index, "" if r.top_confidence is None else f"{r.top_confidence:.6f}", len(r.detections)])
    _write_text(out / "confidence.csv", buf.getvalue())
    print(f"analyzed {len(records)} frames of {video.id} -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stdet", description="Temporal video object detection on a numpy autograd core.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic moving-blob dataset")
    s.add_argument("--config", help="YAML file with a 'synth' section")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a detector")
    t.add_argument("--config", help="YAML file with 'model', 'train' and 'split' sections")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--variant", help=f"one of {', '.join(VARIANTS)}")
    t.add_argument("--init", help="checkpoint to warm-start from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("val", "test"), default="test")
    e.add_argument("--split-seed", type=int, default=0)
    e.add_argument("--stride", type=int, default=1)
    e.add_argument("--conf", type=float, default=0.001)
    e.add_argument("--iou", type=float, default=0.6)
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int, default=0, help="accepted for symmetry; evaluation draws no random numbers")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="per-frame confidences and overlays for a frame range")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--video", required=True)
    a.add_argument("--frames", required=True, help="inclusive range 'a-b'")
    a.add_argument("--conf", type=float, default=0.25)
    a.add_argument("--iou", type=float, default=0.45)
    a.add_argument("--out", required=True)
    a.add_argument("--seed", type=int, default=0, help="accepted for symmetry; analysis draws no random numbers")
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError, NotADirectoryError, PermissionError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}; diagnostics: {json.dumps(e.dump, default=str)}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
