"""Box encoding/decoding and target assignment for the anchor head.

Per cell ``(gx, gy)`` and anchor ``(aw, ah)`` at stride ``s``::

    bx = (2*sigmoid(tx) - 0.5 + gx) * s
    by = (2*sigmoid(ty) - 0.5 + gy) * s
    bw = aw * (2*sigmoid(tw))**2
    bh = ah * (2*sigmoid(th))**2
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..geometry import NMS_CONF_THR, NMS_IOU_THR, NormBox, PixelBox, nms_arrays
from ..numkit import Tensor, sigmoid_np
from .config import ModelConfig

log = logging.getLogger(__name__)

MIN_ANCHOR_IOU = 0.2
# sigmoid(tw) = sqrt(w/aw)/2 must stay below 1
MAX_ANCHOR_RATIO = 3.9


def _logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def wh_iou(wh: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Width-height IoU between (N,2) boxes and (A,2) anchors, both centred."""
    inter = np.minimum(wh[:, None, 0], anchors[None, :, 0]) * np.minimum(wh[:, None, 1], anchors[None, :, 1])
    union = wh[:, None, 0] * wh[:, None, 1] + anchors[None, :, 0] * anchors[None, :, 1] - inter
    return inter / union


@dataclass
class ScaleTargets:
    """Positives for one scale: indices plus the encoded target."""

    b: np.ndarray  # (n,) image index
    a: np.ndarray  # (n,) anchor index
    gy: np.ndarray
    gx: np.ndarray
    box: np.ndarray  # (n, 4) pixel (cx, cy, w, h)
    cls: np.ndarray  # (n,)
    t: np.ndarray  # (n, 4) encoded (tx, ty, tw, th)
    shape: tuple  # (B, A, H, W)

    @property
    def n(self) -> int:
        return len(self.b)

    def mask(self) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        m[self.b, self.a, self.gy, self.gx] = True
        return m


def encode_box(cx, cy, w, h, gx, gy, stride, aw, ah):
    """Inverse of the decode formulas for a box assigned to cell ``(gx, gy)``."""
    sx = (cx / stride - gx + 0.5) / 2.0
    sy = (cy / stride - gy + 0.5) / 2.0
    sw = np.sqrt(w / aw) / 2.0
    sh = np.sqrt(h / ah) / 2.0
    return np.stack([_logit(sx), _logit(sy), _logit(sw), _logit(sh)], axis=-1)


def decode_cells(t: np.ndarray, gx, gy, stride, aw, ah) -> np.ndarray:
    s = sigmoid_np(np.asarray(t, dtype=np.float64))
    cx = (2 * s[..., 0] - 0.5 + gx) * stride
    cy = (2 * s[..., 1] - 0.5 + gy) * stride
    w = aw * (2 * s[..., 2]) ** 2
    h = ah * (2 * s[..., 3]) ** 2
    return np.stack([cx, cy, w, h], axis=-1)


def assign_targets(labels, cfg: ModelConfig) -> list[ScaleTargets]:
    """Assign every box, at every scale, to its centre cell and best-fitting anchor.

    ``labels`` is one list of :class:`NormBox` per image. An assignment needs
    anchor width-height IoU >= 0.2 and side ratios below 3.9 (so the width
    encoding stays finite). Two boxes landing on the same cell and anchor:
    the later one wins.
    """
    S = cfg.image_size
    B = len(labels)
    out = []
    for si, stride in enumerate(cfg.strides):
        n_cells = S // stride
        anchors = np.asarray(cfg.anchors[si], dtype=np.float64)
        slots: dict[tuple, tuple] = {}
        for bi, boxes in enumerate(labels):
            for box in boxes:
                if box.w <= 0 or box.h <= 0:
                    log.warning("skipping degenerate box %s", box)
                    continue
                cx, cy, w, h = box.cx * S, box.cy * S, box.w * S, box.h * S
                ious = wh_iou(np.array([[w, h]]), anchors)[0]
                ratio = np.maximum(w / anchors[:, 0], h / anchors[:, 1])
                ok = (ious >= MIN_ANCHOR_IOU) & (ratio < MAX_ANCHOR_RATIO)
                if not ok.any():
                    continue
                a = int(np.argmax(np.where(ok, ious, -1.0)))
                gx = min(max(int(np.floor(cx / stride)), 0), n_cells - 1)
                gy = min(max(int(np.floor(cy / stride)), 0), n_cells - 1)
                slots[(bi, a, gy, gx)] = (cx, cy, w, h, box.class_id)
        keys = sorted(slots)
        b = np.array([k[0] for k in keys], dtype=np.int64)
        a = np.array([k[1] for k in keys], dtype=np.int64)
        gy = np.array([k[2] for k in keys], dtype=np.int64)
        gx = np.array([k[3] for k in keys], dtype=np.int64)
        vals = np.array([slots[k] for k in keys], dtype=np.float64).reshape(-1, 5)
        box = vals[:, :4]
        cls = vals[:, 4].astype(np.int64)
        aw, ah = anchors[a, 0], anchors[a, 1]
        t = encode_box(box[:, 0], box[:, 1], box[:, 2], box[:, 3], gx, gy, stride, aw, ah).reshape(-1, 4)
        out.append(ScaleTargets(b, a, gy, gx, box, cls, t, (B, 3, n_cells, n_cells)))
    return out


def _raw_arrays(raw) -> list[np.ndarray]:
    return [r.data if isinstance(r, Tensor) else np.asarray(r) for r in raw]


def decode(raw, cfg: ModelConfig, conf_thr: float = NMS_CONF_THR, iou_thr: float = NMS_IOU_THR,
           max_det: int = 300, apply_nms: bool = True) -> list[list[PixelBox]]:
    """Turn raw head maps into per-image detection lists."""
    maps = _raw_arrays(raw)
    B = maps[0].shape[0]
    no = cfg.num_outputs
    per_image = [[] for _ in range(B)]
    chunks = [[] for _ in range(B)]
    for si, (m, stride) in enumerate(zip(maps, cfg.strides)):
        _, _, H, W = m.shape
        if m.shape[1] != 3 * no or H != cfg.image_size // stride:
            raise ValueError(f"raw map {m.shape} does not match config at stride {stride}")
        p = m.reshape(B, 3, no, H, W).astype(np.float64)
        obj = sigmoid_np(p[:, :, 4])
        cls_p = sigmoid_np(p[:, :, 5:])
        best = cls_p.argmax(axis=2)
        conf = obj * np.take_along_axis(cls_p, best[:, :, None], axis=2)[:, :, 0]
        keep = conf >= conf_thr
        if not keep.any():
            continue
        bi, ai, gy, gx = np.nonzero(keep)
        anchors = np.asarray(cfg.anchors[si], dtype=np.float64)
        t = p[bi, ai, :4, gy, gx]
        box = decode_cells(t, gx, gy, stride, anchors[ai, 0], anchors[ai, 1])
        corners = np.stack([box[:, 0] - box[:, 2] / 2, box[:, 1] - box[:, 3] / 2,
                            box[:, 0] + box[:, 2] / 2, box[:, 1] + box[:, 3] / 2], axis=1)
        for b in np.unique(bi):
            sel = bi == b
            chunks[b].append((corners[sel], conf[bi[sel], ai[sel], gy[sel], gx[sel]], best[bi[sel], ai[sel], gy[sel], gx[sel]]))
    for b in range(B):
        if not chunks[b]:
            continue
        boxes = np.concatenate([c[0] for c in chunks[b]])
        scores = np.concatenate([c[1] for c in chunks[b]])
        classes = np.concatenate([c[2] for c in chunks[b]])
        if apply_nms:
            idx = nms_arrays(boxes, scores, classes, iou_thr)
        else:
            idx = np.argsort(-scores, kind="stable")
        idx = idx[:max_det]
        per_image[b] = [
            PixelBox(float(boxes[i, 0]), float(boxes[i, 1]), float(boxes[i, 2]), float(boxes[i, 3]),
                     int(classes[i]), float(scores[i]))
            for i in idx
        ]
    return per_image


def kmeans_anchors(labels, image_size: int, k: int = 9, iters: int = 100, seed: int = 0) -> tuple:
    """Anchors from k-means over training box sizes with ``1 - IoU`` distance."""
    wh = np.array([[b.w * image_size, b.h * image_size] for boxes in labels for b in boxes], dtype=np.float64)
    if len(wh) < k:
        raise ValueError(f"need at least {k} boxes for k-means anchors, got {len(wh)}")
    rng = np.random.default_rng(seed)
    centers = wh[rng.choice(len(wh), k, replace=False)].copy()
    for _ in range(iters):
        assign = wh_iou(wh, centers).argmax(axis=1)
        new = np.array([wh[assign == j].mean(axis=0) if (assign == j).any() else centers[j] for j in range(k)])
        if np.allclose(new, centers):
            break
        centers = new
    centers = centers[np.argsort(centers.prod(axis=1))]
    return tuple(tuple((float(w), float(h)) for w, h in centers[i * 3 : i * 3 + 3]) for i in range(3))
