"""Temporal augmentations with label propagation.

Every transform takes an explicit ``numpy.random.Generator``; nothing reads
global RNG state. Sequence-level transforms draw their geometric parameters
once and apply them to every frame of the window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import FrameSequence
from .geometry import NormBox

MOSAIC_FILL = 114 / 255
MIN_KEPT_AREA = 0.2


@dataclass(frozen=True)
class AugmentConfig:
    mosaic_p: float = 0.5
    mixup_p: float = 0.15
    erase_p: float = 0.3
    blur_p: float = 0.2
    noise_p: float = 0.2
    mixup_lambda_range: tuple = (0.3, 0.7)
    erase_area_range: tuple = (0.02, 0.20)
    erase_aspect_range: tuple = (0.3, 3.3)
    blur_sigma_range: tuple = (0.5, 2.0)
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        for name in ("mosaic_p", "mixup_p", "erase_p", "blur_p", "noise_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        for name in ("mixup_lambda_range", "erase_area_range", "erase_aspect_range", "blur_sigma_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must be ordered (lo <= hi), got {(lo, hi)}")
        lo, hi = self.mixup_lambda_range
        if not 0.0 < lo <= hi < 1.0:
            raise ValueError("mixup_lambda_range must lie inside (0, 1)")
        lo, hi = self.erase_area_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError("erase_area_range must lie inside [0, 1]")
        if self.blur_sigma_range[0] <= 0:
            raise ValueError("blur sigmas must be positive")
        if self.noise_sigma <= 0:
            raise ValueError("noise_sigma must be positive")

    @classmethod
    def disabled(cls, **kw) -> "AugmentConfig":
        return cls(mosaic_p=0.0, mixup_p=0.0, erase_p=0.0, blur_p=0.0, noise_p=0.0, **kw)


def worker_rng(seed: int, worker_id: int) -> np.random.Generator:
    """Independent stream for one data worker, derived from ``(seed, worker_id)``."""
    return np.random.default_rng(np.random.SeedSequence([seed, worker_id]))


# ---------------------------------------------------------------------------
# mosaic
# ---------------------------------------------------------------------------


def _mosaic_layout(w: int, h: int, xc: int, yc: int):
    """Canvas/source rectangles for the four quadrants (YOLO-style 2x canvas)."""
    out = []
    for q in range(4):
        if q == 0:
            a = (max(xc - w, 0), max(yc - h, 0), xc, yc)
            b = (w - (a[2] - a[0]), h - (a[3] - a[1]), w, h)
        elif q == 1:
            a = (xc, max(yc - h, 0), min(xc + w, 2 * w), yc)
            b = (0, h - (a[3] - a[1]), min(w, a[2] - a[0]), h)
        elif q == 2:
            a = (max(xc - w, 0), yc, xc, min(2 * h, yc + h))
            b = (w - (a[2] - a[0]), 0, w, min(a[3] - a[1], h))
        else:
            a = (xc, yc, min(xc + w, 2 * w), min(2 * h, yc + h))
            b = (0, 0, min(w, a[2] - a[0]), min(a[3] - a[1], h))
        out.append((a, b))
    return out


def _mosaic_boxes(boxes, w, h, a, b):
    dx, dy = a[0] - b[0], a[1] - b[1]
    kept = []
    for box in boxes:
        x1 = (box.cx - box.w / 2) * w + dx
        y1 = (box.cy - box.h / 2) * h + dy
        x2 = (box.cx + box.w / 2) * w + dx
        y2 = (box.cy + box.h / 2) * h + dy
        area = (x2 - x1) * (y2 - y1)
        cx1, cy1 = max(x1, a[0]), max(y1, a[1])
        cx2, cy2 = min(x2, a[2]), min(y2, a[3])
        if cx2 <= cx1 or cy2 <= cy1 or area <= 0:
            continue
        if (cx2 - cx1) * (cy2 - cy1) < MIN_KEPT_AREA * area:
            continue
        # canvas is 2w x 2h; shrink by 2 and normalise
        kept.append(NormBox((cx1 + cx2) / (4 * w), (cy1 + cy2) / (4 * h), (cx2 - cx1) / (2 * w),
                            (cy2 - cy1) / (2 * h), box.class_id))
    return kept


def temporal_mosaic(seqs, rng: np.random.Generator, center: tuple[int, int] | None = None) -> FrameSequence:
    """Tile four time-aligned sequences around one jittered centre.

    The 2x canvas is average-pooled back to the input size. Boxes keeping
    less than 20% of their area after cropping are dropped.
    """
    if len(seqs) != 4:
        raise ValueError(f"mosaic needs exactly 4 sequences, got {len(seqs)}")
    T = seqs[0].T
    shape = seqs[0].frame_shape
    for s in seqs[1:]:
        if s.T != T or s.frame_shape != shape:
            raise ValueError("mosaic inputs must share length and frame size")
    c, h, w = shape
    if center is None:
        xc = int(rng.integers(w // 2, w + w // 2 + 1))
        yc = int(rng.integers(h // 2, h + h // 2 + 1))
    else:
        xc, yc = center
    layout = _mosaic_layout(w, h, xc, yc)
    frames, labels = [], []
    for t in range(T):
        canvas = np.full((c, 2 * h, 2 * w), MOSAIC_FILL, dtype=seqs[0].frames[t].dtype)
        boxes = []
        for s, (a, b) in zip(seqs, layout):
            if a[2] > a[0] and a[3] > a[1]:
                canvas[:, a[1] : a[3], a[0] : a[2]] = s.frames[t][:, b[1] : b[3], b[0] : b[2]]
                boxes.extend(_mosaic_boxes(s.labels[t], w, h, a, b))
        frames.append(canvas.reshape(c, h, 2, w, 2).mean(axis=(2, 4)))
        labels.append(boxes)
    return FrameSequence(seqs[0].video_id, seqs[0].start_index, frames, labels)


# ---------------------------------------------------------------------------
# mixup
# ---------------------------------------------------------------------------


def temporal_mixup(a: FrameSequence, b: FrameSequence, lam: float) -> FrameSequence:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"mixup lambda must lie in [0, 1], got {lam}")
    if a.T != b.T or a.frame_shape != b.frame_shape:
        raise ValueError("mixup inputs must share length and frame size")
    frames = [lam * fa + (1.0 - lam) * fb for fa, fb in zip(a.frames, b.frames)]
    frames = [f.astype(a.frames[0].dtype) for f in frames]
    labels = [list(la) + list(lb) for la, lb in zip(a.labels, b.labels)]
    return FrameSequence(a.video_id, a.start_index, frames, labels)


# ---------------------------------------------------------------------------
# per-frame photometric / occlusion transforms
# ---------------------------------------------------------------------------


def sample_erase_rect(h: int, w: int, rng: np.random.Generator, area_range, aspect_range=(0.3, 3.3)):
    """Rectangle ``(x1, y1, x2, y2)`` in pixels with area fraction in ``area_range``."""
    frac = float(rng.uniform(*area_range))
    aspect = float(math.exp(rng.uniform(math.log(aspect_range[0]), math.log(aspect_range[1]))))
    area = frac * h * w
    rw = int(round(math.sqrt(area * aspect)))
    rh = int(round(math.sqrt(area / aspect)))
    rw, rh = min(max(rw, 0), w), min(max(rh, 0), h)
    if frac >= 1.0:
        rw, rh = w, h
    x1 = int(rng.integers(0, w - rw + 1))
    y1 = int(rng.integers(0, h - rh + 1))
    return x1, y1, x1 + rw, y1 + rh


def erase_rect(frame: np.ndarray, rect, rng: np.random.Generator) -> np.ndarray:
    out = frame.copy()
    x1, y1, x2, y2 = rect
    if x2 > x1 and y2 > y1:
        out[:, y1:y2, x1:x2] = rng.uniform(0.0, 1.0, (frame.shape[0], y2 - y1, x2 - x1))
    return out


def random_erase(frame: np.ndarray, boxes, rng: np.random.Generator, cfg: AugmentConfig, return_rect: bool = False):
    """Fill one random rectangle with uniform noise. Labels are left as they are."""
    _, h, w = frame.shape
    rect = sample_erase_rect(h, w, rng, cfg.erase_area_range, cfg.erase_aspect_range)
    out = erase_rect(frame, rect, rng)
    return (out, rect) if return_rect else out


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def random_blur(frame: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, kernel size ``2*ceil(3*sigma)+1``, reflect padding."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return frame.copy()
    k = gaussian_kernel1d(sigma)
    r = len(k) // 2
    x = frame.astype(np.float64)
    xp = np.pad(x, ((0, 0), (r, r), (0, 0)), mode="reflect")
    x = sum(k[i] * xp[:, i : i + x.shape[1], :] for i in range(len(k)))
    xp = np.pad(x, ((0, 0), (0, 0), (r, r)), mode="reflect")
    x = sum(k[i] * xp[:, :, i : i + x.shape[2]] for i in range(len(k)))
    return x.astype(frame.dtype)


def gaussian_noise(frame: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return frame.copy()
    return np.clip(frame + rng.normal(0.0, sigma, frame.shape), 0.0, 1.0).astype(frame.dtype)


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


def augment_sequence(seq: FrameSequence, rng: np.random.Generator, cfg: AugmentConfig, draw=None):
    """Apply the configured chain to one window.

    ``draw(rng)`` must return another window of the same length and frame
    size; it feeds mosaic and mixup. Returns ``(sequence, records)`` where
    ``records[t]`` lists the parameters used on frame ``t``.
    """
    records = [dict() for _ in range(seq.T)]

    def note(key, value):
        for r in records:
            r[key] = value

    if draw is not None and rng.random() < cfg.mosaic_p:
        _, h, w = seq.frame_shape
        center = (int(rng.integers(w // 2, w + w // 2 + 1)), int(rng.integers(h // 2, h + h // 2 + 1)))
        seq = temporal_mosaic([seq, draw(rng), draw(rng), draw(rng)], rng, center=center)
        note("mosaic_center", center)
    if draw is not None and rng.random() < cfg.mixup_p:
        lam = float(rng.uniform(*cfg.mixup_lambda_range))
        seq = temporal_mixup(seq, draw(rng), lam)
        note("mixup_lambda", lam)
    frames = list(seq.frames)
    if rng.random() < cfg.erase_p:
        _, h, w = seq.frame_shape
        rect = sample_erase_rect(h, w, rng, cfg.erase_area_range, cfg.erase_aspect_range)
        frames = [erase_rect(f, rect, rng) for f in frames]
        note("erase_rect", rect)
    if rng.random() < cfg.blur_p:
        sigma = float(rng.uniform(*cfg.blur_sigma_range))
        frames = [random_blur(f, sigma) for f in frames]
        note("blur_sigma", sigma)
    if rng.random() < cfg.noise_p:
        frames = [gaussian_noise(f, cfg.noise_sigma, rng) for f in frames]
        note("noise_sigma", cfg.noise_sigma)
    frames = [np.clip(f, 0.0, 1.0) for f in frames]
    return FrameSequence(seq.video_id, seq.start_index, frames, seq.labels), records
