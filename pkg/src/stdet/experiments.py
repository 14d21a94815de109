"""Variant comparison on synthetic moving-blob video.

Every variant gets the same training recipe and the same number of
optimizer steps; only the architecture differs. ``run_seed`` reports test
mAP per variant plus the mean top confidence on occluded frames of a
separate, occlusion-heavy set of videos.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .data import split_videos
from .detector import ModelConfig, TrainConfig, build_model, evaluate_videos, fit
from .detector.train import predict_frames
from .geometry import iou, norm_to_pixel
from .synth import SynthConfig, synth_moving_blob

# keeps the occlusion-heavy videos disjoint from the training draw
HEAVY_SEED_OFFSET = 10_000


@dataclass(frozen=True)
class Protocol:
    synth: SynthConfig = SynthConfig(n_videos=20, frames=100, size=128, motion="mixed", occlusion_episodes=2)
    heavy: SynthConfig = SynthConfig(n_videos=4, frames=100, size=128, motion="mixed", occlusion_episodes=6)
    width: int = 8
    image_size: int = 128
    epochs: int = 6
    steps_per_epoch: int = 100
    batch_size: int = 8
    lr: float = 0.001
    optimizer: str = "adamw"
    weight_decay: float = 0.01
    val_stride: int = 4
    test_stride: int = 1

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, steps_per_epoch=self.steps_per_epoch, batch_size=self.batch_size,
                           lr=self.lr, optimizer=self.optimizer, weight_decay=self.weight_decay, seed=seed,
                           val_stride=self.val_stride)

    def model_config(self, variant: str) -> ModelConfig:
        names = tuple(self.synth.classes)
        return ModelConfig(variant=variant, width=self.width, num_classes=len(names),
                           image_size=self.image_size, class_names=names)


@dataclass(frozen=True)
class VariantResult:
    variant: str
    seed: int
    map50: float
    map50_95: float
    occluded_confidence: float
    steps: int
    seconds: float


def make_splits(seed: int, proto: Protocol):
    videos = synth_moving_blob(proto.synth, seed=seed)
    sp = split_videos(videos, seed=seed)
    by_id = {v.id: v for v in videos}
    return tuple([by_id[i] for i in ids] for ids in (sp.train, sp.val, sp.test))


def occluded_confidence(model, videos, conf_thr: float = 0.001, iou_thr: float = 0.6, match_iou: float = 0.5) -> float:
    """Mean confidence on occluded objects over all occluded (frame, object) pairs.

    For each pair the score is the highest confidence among same-class
    detections overlapping the hidden object's box by ``match_iou``, or 0
    when none does.
    """
    seen, pairs = set(), []
    for v in videos:
        for ep in v.meta.get("occlusions", []):
            for t in range(ep["first"], ep["last"] + 1):
                if (v.id, t, ep["object"]) not in seen:
                    seen.add((v.id, t, ep["object"]))
                    pairs.append((v, t, ep["object"]))
    if not pairs:
        raise ValueError("no occluded frames in the given videos")
    items = sorted({(v.id, t): (v, t) for v, t, _ in pairs}.items())
    dets = dict(zip((k for k, _ in items), predict_frames(model, [it for _, it in items], conf_thr=conf_thr,
                                                          iou_thr=iou_thr)))
    scores = []
    for v, t, k in pairs:
        _, h, w = v.frame(t).shape
        gt = norm_to_pixel(v.labels[t][k], w, h)
        hits = [d.confidence for d in dets[(v.id, t)] if d.class_id == gt.class_id and iou(d, gt) >= match_iou]
        scores.append(max(hits, default=0.0))
    return float(np.mean(scores))


def run_seed(seed: int, proto: Protocol = Protocol(), variants=("baseline", "temporal", "temporal_cbam"),
             log=None) -> dict[str, VariantResult]:
    train, val, test = make_splits(seed, proto)
    heavy = synth_moving_blob(proto.heavy, seed=seed + HEAVY_SEED_OFFSET)
    out = {}
    for variant in variants:
        t0 = time.perf_counter()
        model = build_model(proto.model_config(variant), seed)
        res = fit(model, proto.train_config(seed), train, val)
        model.load_state_dict(res.best_state)
        ev = evaluate_videos(model, test, stride=proto.test_stride)
        occ = occluded_confidence(model, heavy)
        out[variant] = VariantResult(variant, seed, ev.map50, ev.map50_95, occ, res.steps, time.perf_counter() - t0)
        if log is not None:
            log(out[variant])
    return out


def quick_protocol() -> Protocol:
    """A much smaller run for smoke checks of the pipeline itself."""
    return replace(Protocol(), synth=replace(Protocol().synth, n_videos=4, frames=12, size=64),
                   heavy=replace(Protocol().heavy, n_videos=1, frames=12, size=64), image_size=64,
                   epochs=1, steps_per_epoch=2, batch_size=2)
