"""Synthetic moving-blob videos: a desk-scale stand-in for underwater footage.

Each video shows one or two coloured Gaussian blobs drifting over a static
textured background. Every frame also gets fresh sensor noise, so a single
frame is noisier than a short window of frames. Optional occlusion episodes
draw an opaque bar over part of a blob while its label keeps following the
true blob.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import VideoRecord
from .geometry import NormBox, resize_bilinear

CLASS_COLORS = (
    (0.95, 0.55, 0.15),
    (0.80, 0.25, 0.70),
    (0.35, 0.85, 0.30),
    (0.95, 0.90, 0.25),
    (0.25, 0.60, 0.95),
)
OCCLUDER_COLOR = (0.12, 0.12, 0.10)


@dataclass(frozen=True)
class SynthConfig:
    n_videos: int = 20
    frames: int = 100
    size: int = 128
    classes: tuple = ("fish", "octopus", "turtle")
    occlusion_episodes: int = 2
    motion: str = "mixed"  # gradual | sudden | mixed
    max_objects: int = 2
    blob_sigma: tuple = (4.0, 8.0)
    noise_sigma: float = 0.12
    texture_amp: float = 0.12
    blob_alpha: float = 0.8
    occlusion_frames: tuple = (3, 8)
    occlusion_cover: tuple = (0.4, 0.7)
    sudden_prob: float = 0.12
    speed: tuple = (0.5, 2.5)
    sudden_speed: tuple = (3.0, 6.0)

    def __post_init__(self):
        if self.size < 32:
            raise ValueError(f"frame size must be >= 32, got {self.size}")
        if self.motion not in ("gradual", "sudden", "mixed"):
            raise ValueError(f"motion must be gradual, sudden or mixed, got {self.motion!r}")
        if not 1 <= len(self.classes) <= len(CLASS_COLORS):
            raise ValueError(f"between 1 and {len(CLASS_COLORS)} classes supported")
        if self.n_videos < 1 or self.frames < 1:
            raise ValueError("n_videos and frames must be >= 1")


def _background(rng, size, amp):
    base = np.array([0.10, 0.35, 0.45])[:, None, None] + rng.uniform(-0.05, 0.05, (3, 1, 1))
    coarse = rng.standard_normal((3, 6, 6))
    tex = resize_bilinear(coarse, size, size)
    fine = resize_bilinear(rng.standard_normal((3, 24, 24)), size, size)
    return base + amp * (0.7 * tex + 0.3 * fine)


def _gradual_track(rng, n, lo, hi):
    p0 = rng.uniform(lo, hi, 2)
    p1 = rng.uniform(lo, hi, 2)
    t = np.arange(n)[:, None] / max(n - 1, 1)
    return p0[None, :] + (p1 - p0)[None, :] * t


def _sudden_track(rng, n, lo, hi, cfg):
    pos = np.empty((n, 2))
    p = rng.uniform(lo, hi, 2)
    v = _velocity(rng, cfg.speed)
    for t in range(n):
        pos[t] = p
        if rng.random() < cfg.sudden_prob:
            v = _velocity(rng, cfg.sudden_speed)
        p = p + v
        for k in range(2):
            if p[k] < lo[k]:
                p[k] = 2 * lo[k] - p[k]
                v[k] = -v[k]
            elif p[k] > hi[k]:
                p[k] = 2 * hi[k] - p[k]
                v[k] = -v[k]
            p[k] = min(max(p[k], lo[k]), hi[k])
    return pos


def _velocity(rng, speed):
    ang = rng.uniform(0, 2 * np.pi)
    s = rng.uniform(*speed)
    return np.array([np.cos(ang), np.sin(ang)]) * s


def make_video(rng: np.random.Generator, cfg: SynthConfig, vid: str, motion: str) -> VideoRecord:
    size, n = cfg.size, cfg.frames
    bg = _background(rng, size, cfg.texture_amp)
    n_obj = int(rng.integers(1, cfg.max_objects + 1))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    objects = []
    for _ in range(n_obj):
        cls = int(rng.integers(len(cfg.classes)))
        # small frames cap the blob so its box still fits with room to move
        sx, sy = np.minimum(rng.uniform(*cfg.blob_sigma, 2), size / 8)
        half = np.array([2 * sx, 2 * sy])
        lo, hi = half + 1.0, size - half - 1.0
        track = _gradual_track(rng, n, lo, hi) if motion == "gradual" else _sudden_track(rng, n, lo, hi, cfg)
        color = np.clip(np.array(CLASS_COLORS[cls]) + rng.uniform(-0.05, 0.05, 3), 0, 1)
        objects.append({"cls": cls, "sigma": (sx, sy), "track": track, "color": color})

    # occlusion episodes: (object, first frame, last frame, side, coverage)
    episodes = []
    occluded: dict[int, list[int]] = {}
    for _ in range(cfg.occlusion_episodes):
        k = int(rng.integers(n_obj))
        dur = int(rng.integers(cfg.occlusion_frames[0], cfg.occlusion_frames[1] + 1))
        start = int(rng.integers(0, max(n - dur, 0) + 1))
        side = int(rng.integers(4))
        cover = float(rng.uniform(*cfg.occlusion_cover))
        episodes.append((k, start, min(start + dur, n) - 1, side, cover))
        for t in range(start, min(start + dur, n)):
            occluded.setdefault(t, [])
            if k not in occluded[t]:
                occluded[t].append(k)

    frames, labels = [], []
    for t in range(n):
        img = bg.copy()
        boxes = []
        for o in objects:
            cx, cy = o["track"][t]
            sx, sy = o["sigma"]
            a = cfg.blob_alpha * np.exp(-0.5 * (((xx - cx) / sx) ** 2 + ((yy - cy) / sy) ** 2))
            img = img * (1 - a) + o["color"][:, None, None] * a
            boxes.append(NormBox(cx / size, cy / size, 4 * sx / size, 4 * sy / size, o["cls"]))
        for k, s, e, side, cover in episodes:
            if not s <= t <= e:
                continue
            cx, cy = objects[k]["track"][t]
            sx, sy = objects[k]["sigma"]
            x1, y1, x2, y2 = cx - 2 * sx, cy - 2 * sy, cx + 2 * sx, cy + 2 * sy
            if side == 0:
                x2 = x1 + cover * (x2 - x1)
            elif side == 1:
                x1 = x2 - cover * (x2 - x1)
            elif side == 2:
                y2 = y1 + cover * (y2 - y1)
            else:
                y1 = y2 - cover * (y2 - y1)
            # the bar overhangs the box by a margin across the uncovered axis
            mx, my = (0, 3) if side in (0, 1) else (3, 0)
            r0, r1 = int(np.floor(max(y1 - my, 0))), int(np.ceil(min(y2 + my, size)))
            c0, c1 = int(np.floor(max(x1 - mx, 0))), int(np.ceil(min(x2 + mx, size)))
            img[:, r0:r1, c0:c1] = np.array(OCCLUDER_COLOR)[:, None, None]
        img = img + rng.normal(0.0, cfg.noise_sigma, img.shape)
        # quantise exactly as a PNG round trip would
        frames.append((np.clip(np.rint(img * 255.0), 0, 255) / 255.0).astype(np.float32))
        labels.append(boxes)

    meta = {
        "motion": motion,
        "occluded_frames": sorted(occluded),
        "occlusions": [
            {"object": k, "first": s, "last": e, "side": "lrtb"[side], "cover": round(cover, 4)}
            for k, s, e, side, cover in episodes
        ],
        "classes": [o["cls"] for o in objects],
    }
    name = cfg.classes[objects[0]["cls"]]
    return VideoRecord(vid, name, frames, labels, meta=meta)


def synth_moving_blob(cfg: SynthConfig | None = None, seed: int = 0) -> list[VideoRecord]:
    cfg = cfg or SynthConfig()
    root = np.random.SeedSequence(seed)
    videos = []
    for i, child in enumerate(root.spawn(cfg.n_videos)):
        rng = np.random.default_rng(child)
        if cfg.motion == "mixed":
            motion = "gradual" if i % 2 == 0 else "sudden"
        else:
            motion = cfg.motion
        videos.append(make_video(rng, cfg, f"video_{i:03d}", motion))
    return videos
