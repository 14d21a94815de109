"""Optimizers, batching, the training loop and video-level evaluation."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..augment import AugmentConfig, augment_sequence
from ..data import FrameSequence, VideoRecord, context_window, window_starts
from ..evaluation import EvalResult, map_range
from ..geometry import LetterboxTransform, PixelBox, letterbox, norm_to_pixel
from .checkpoint import save_checkpoint, warm_start
from .config import TrainConfig
from .head import assign_targets, decode
from .loss import LossTerms, detection_loss
from .model import Model, forward

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "box", "obj", "cls", "val_P", "val_R", "val_mAP50", "val_mAP50_95")


class NumericError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, msg: str, batch_id: str, dump: dict):
        super().__init__(msg)
        self.batch_id = batch_id
        self.dump = dump


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


class SGD:
    """SGD with Nesterov momentum and coupled L2 weight decay."""

    def __init__(self, params, lr: float, momentum: float = 0.937, weight_decay: float = 0.0, lr_scales=None):
        self.params = list(params)
        self.lr = lr
        self.lr_scales = list(lr_scales) if lr_scales is not None else [1.0] * len(self.params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buf = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for p, b, k in zip(self.params, self.buf, self.lr_scales):
            if p.grad is None:
                continue
            lr_p = lr * k
            g = p.grad + self.weight_decay * p.data if self.weight_decay and p.data.ndim > 1 else p.grad
            b *= self.momentum
            b += g
            p.data -= lr_p * (g + self.momentum * b)


class AdamW:
    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01,
                 lr_scales=None):
        self.params = list(params)
        self.lr = lr
        self.lr_scales = list(lr_scales) if lr_scales is not None else [1.0] * len(self.params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v, k in zip(self.params, self.m, self.v, self.lr_scales):
            if p.grad is None:
                continue
            lr_p = lr * k
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if self.weight_decay and p.data.ndim > 1:
                p.data *= 1.0 - lr_p * self.weight_decay
            p.data -= lr_p * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(model: Model, tcfg: TrainConfig):
    scales = [tcfg.temporal_lr_scale if n.startswith("temporal.") else 1.0 for n in model.params]
    if tcfg.optimizer == "adamw":
        return AdamW(model.parameters(), tcfg.lr, weight_decay=tcfg.weight_decay, lr_scales=scales)
    return SGD(model.parameters(), tcfg.lr, tcfg.momentum, tcfg.weight_decay, lr_scales=scales)


def clip_gradients(params, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))
    if max_norm and total > max_norm:
        s = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= s
    return total


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def prepare_window(seq: FrameSequence, image_size: int):
    """Letterbox every frame to the model canvas; returns ``(frames, target_labels, transform)``."""
    c, h, w = seq.frame_shape
    if (h, w) == (image_size, image_size):
        return np.stack(seq.frames), list(seq.target), LetterboxTransform(1.0, 0.0, 0.0, w, h, image_size)
    boxed = [letterbox(f, image_size) for f in seq.frames]
    tr = boxed[-1][1]
    return np.stack([b[0] for b in boxed]), [tr.apply_norm(b) for b in seq.target], tr


def collate(seqs, model: Model):
    """Stack windows into the model input; the baseline sees only the last frame."""
    arrs, labels, transforms = [], [], []
    for s in seqs:
        a, lab, tr = prepare_window(s, model.cfg.image_size)
        arrs.append(a if model.cfg.temporal else a[-1])
        labels.append(lab)
        transforms.append(tr)
    return np.stack(arrs).astype(model.dtype, copy=False), labels, transforms


class WindowIndex:
    """All ``(video, start)`` windows of length ``T`` over a list of videos."""

    def __init__(self, videos, T: int, stride: int = 1):
        self.videos = list(videos)
        self.T = T
        self.items = [(vi, s) for vi, v in enumerate(self.videos) for s in window_starts(len(v), T, stride)]

    def __len__(self) -> int:
        return len(self.items)

    def get(self, i: int) -> FrameSequence:
        vi, s = self.items[i]
        v = self.videos[vi]
        return FrameSequence(v.id, s, [v.frame(k) for k in range(s, s + self.T)], v.labels[s : s + self.T])


# ---------------------------------------------------------------------------
# evaluation over videos
# ---------------------------------------------------------------------------


def frame_id(video_id: str, index: int) -> str:
    return f"{video_id}/{index:05d}"


def eval_frames(videos, window: int, stride: int = 1):
    """Frames scored during evaluation: every ``stride``-th frame from ``window - 1`` on.

    Every variant is scored on the same frames, so a temporal model always has
    a full history.
    """
    return [(v, i) for v in videos for i in range(window - 1, len(v), stride)]


def predict_frames(model: Model, items, batch_size: int = 16, conf_thr: float = 0.25,
                   iou_thr: float = 0.45) -> list[list[PixelBox]]:
    """Detections in source-pixel coordinates for each ``(video, index)``."""
    out: list[list[PixelBox]] = []
    T = model.cfg.input_window
    for lo in range(0, len(items), batch_size):
        chunk = items[lo : lo + batch_size]
        seqs = [context_window(v, i, T) for v, i in chunk]
        x, _, transforms = collate(seqs, model)
        raw = forward(model, x)
        dets = decode(raw, model.cfg, conf_thr=conf_thr, iou_thr=iou_thr)
        for d, tr in zip(dets, transforms):
            out.append([tr.invert_pixel(b) for b in d] if tr.scale != 1.0 or tr.pad_x or tr.pad_y else d)
    return out


def evaluate_videos(model: Model, videos, stride: int = 1, conf_thr: float = 0.001, iou_thr: float = 0.6,
                    batch_size: int = 16) -> EvalResult:
    if not videos:
        raise ValueError("nothing to evaluate: empty video list")
    items = eval_frames(videos, model.cfg.window, stride)
    if not items:
        raise ValueError("no video is long enough to evaluate")
    dets = predict_frames(model, items, batch_size, conf_thr, iou_thr)
    d_map, g_map = {}, {}
    for (v, i), d in zip(items, dets):
        key = frame_id(v.id, i)
        _, h, w = v.frame(i).shape
        d_map[key] = d
        g_map[key] = [norm_to_pixel(b, w, h) for b in v.labels[i]]
    return map_range(d_map, g_map)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class FitResult:
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_map: float = -1.0
    best_state: dict | None = None
    steps: int = 0
    step_losses: list[float] = field(default_factory=list)
    transferred: int = 0
    seconds: float = 0.0


def _lr_at(step: int, tcfg: TrainConfig) -> float:
    if tcfg.warmup_steps and step < tcfg.warmup_steps:
        return tcfg.lr * (step + 1) / tcfg.warmup_steps
    return tcfg.lr


def _dump_batch(seqs, terms: LossTerms | None, model: Model) -> dict:
    return {
        "windows": [f"{s.video_id}@{s.start_index}" for s in seqs],
        "loss": None if terms is None else terms.__dict__,
        "nonfinite_params": [n for n, p in model.params.items() if not np.isfinite(p.data).all()],
    }


def train_step(model: Model, opt, seqs, tcfg: TrainConfig, lr: float, batch_id: str) -> LossTerms:
    x, labels, _ = collate(seqs, model)
    targets = assign_targets(labels, model.cfg)
    raw = forward(model, x)
    loss, terms = detection_loss(raw, targets, model.cfg, tcfg)
    if not math.isfinite(terms.total):
        dump = _dump_batch(seqs, terms, model)
        raise NumericError(f"non-finite loss at batch {batch_id}", batch_id, dump)
    model.zero_grad()
    loss.backward()
    norm = clip_gradients(model.parameters(), tcfg.grad_clip or 0.0)
    if not math.isfinite(norm):
        raise NumericError(f"non-finite gradient at batch {batch_id}", batch_id, _dump_batch(seqs, terms, model))
    opt.step(lr)
    return terms


def _write_log(path: Path, history) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for row in history:
            w.writerow([row["epoch"]] + [f"{row[k]:.6f}" for k in LOG_COLUMNS[1:]])


def fit(model: Model, tcfg: TrainConfig, train_videos, val_videos, out_dir: str | Path | None = None,
        on_epoch=None) -> FitResult:
    """Train ``model`` in place; keeps the best state by validation mAP50-95.

    With ``out_dir`` set, writes ``best.ckpt``, ``last.ckpt``, ``metrics.csv``
    and, on a numeric failure, ``failure.json``.
    """
    if not train_videos:
        raise ValueError("training split is empty")
    if not val_videos:
        raise ValueError("validation split is empty")
    res = FitResult()
    if tcfg.init_weights:
        res.transferred = len(warm_start(model, tcfg.init_weights))
        log.info("warm start: transferred %d tensors from %s", res.transferred, tcfg.init_weights)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    aug = AugmentConfig(**tcfg.augment) if tcfg.augment else AugmentConfig.disabled()
    index = WindowIndex(train_videos, model.cfg.input_window, tcfg.window_stride)
    if len(index) == 0:
        raise ValueError("no training window fits in the training videos")
    rng = np.random.default_rng(tcfg.seed)
    opt = make_optimizer(model, tcfg)
    steps = tcfg.steps_per_epoch or max(1, len(index) // tcfg.batch_size)
    t0 = time.perf_counter()

    def draw(r):
        return index.get(int(r.integers(len(index))))

    order = np.empty(0, dtype=np.int64)
    for epoch in range(1, tcfg.epochs + 1):
        sums = np.zeros(3)
        for s in range(steps):
            if len(order) < tcfg.batch_size:
                order = np.concatenate([order, rng.permutation(len(index))])
            pick, order = order[: tcfg.batch_size], order[tcfg.batch_size :]
            seqs = [augment_sequence(index.get(int(i)), rng, aug, draw)[0] for i in pick]
            batch_id = f"epoch{epoch}:step{s}"
            try:
                terms = train_step(model, opt, seqs, tcfg, _lr_at(res.steps, tcfg), batch_id)
            except NumericError as e:
                if out is not None:
                    (out / "failure.json").write_text(json.dumps({"batch": e.batch_id, **e.dump}, indent=1, default=str))
                raise
            res.steps += 1
            res.step_losses.append(terms.total)
            sums += (terms.box, terms.obj, terms.cls)
        ev = evaluate_videos(model, val_videos, tcfg.val_stride, tcfg.eval_conf_thr, tcfg.eval_iou_thr)
        row = dict(zip(LOG_COLUMNS, (epoch, *(float(x) for x in sums / steps), ev.precision, ev.recall, ev.map50, ev.map50_95)))
        res.history.append(row)
        if ev.map50_95 > res.best_map:
            res.best_map, res.best_epoch, res.best_state = ev.map50_95, epoch, model.state_dict()
            if out is not None:
                save_checkpoint(out / "best.ckpt", model, {"epoch": epoch, "val_mAP50_95": round(ev.map50_95, 6)})
        if out is not None:
            save_checkpoint(out / "last.ckpt", model, {"epoch": epoch})
            _write_log(out / "metrics.csv", res.history)
        if on_epoch is not None:
            on_epoch(row)
        log.info("epoch %d: %s", epoch, {k: round(v, 4) for k, v in row.items()})
    res.seconds = time.perf_counter() - t0
    return res
