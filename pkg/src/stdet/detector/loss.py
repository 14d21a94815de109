"""Detection loss as one fused op with a hand-written backward.

* box: mean over positives of ``1 - IoU`` (or ``1 - CIoU``) between the
  decoded prediction and the target box;
* obj: BCE over every cell/anchor (positives 1, the rest 0), averaged per
  scale and then across scales;
* cls: BCE over the class logits of positives only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..numkit import Tensor, _make, sigmoid_np
from .config import ModelConfig, TrainConfig
from .head import ScaleTargets

EPS = 1e-9


@dataclass(frozen=True)
class LossTerms:
    box: float
    obj: float
    cls: float
    total: float
    n_pos: int


def bce_with_logits(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))


def box_loss_and_grad(pred: np.ndarray, tgt: np.ndarray, kind: str = "iou"):
    """Per-box ``1 - IoU`` (or CIoU) and its gradient w.r.t. predicted (cx, cy, w, h)."""
    cx, cy, w, h = pred.T
    tcx, tcy, tw, th = tgt.T
    px1, px2, py1, py2 = cx - w / 2, cx + w / 2, cy - h / 2, cy + h / 2
    tx1, tx2, ty1, ty2 = tcx - tw / 2, tcx + tw / 2, tcy - th / 2, tcy + th / 2
    iw = np.minimum(px2, tx2) - np.maximum(px1, tx1)
    ih = np.minimum(py2, ty2) - np.maximum(py1, ty1)
    ov = ((iw > 0) & (ih > 0)).astype(np.float64)
    inter = iw * ih * ov
    union = w * h + tw * th - inter + EPS
    iou = inter / union

    # d(inter) w.r.t. prediction corners, then centre/size
    d_x1 = -ih * (px1 > tx1) * ov
    d_x2 = ih * (px2 < tx2) * ov
    d_y1 = -iw * (py1 > ty1) * ov
    d_y2 = iw * (py2 < ty2) * ov
    di = np.stack([d_x1 + d_x2, d_y1 + d_y2, (d_x2 - d_x1) / 2, (d_y2 - d_y1) / 2], axis=1)
    darea = np.stack([np.zeros_like(w), np.zeros_like(w), h, w], axis=1)
    g_iou = (di * (union + inter)[:, None] - inter[:, None] * darea) / (union**2)[:, None]
    if kind == "iou":
        return 1.0 - iou, -g_iou

    # complete IoU: centre distance over enclosing diagonal plus aspect term
    cw = np.maximum(px2, tx2) - np.minimum(px1, tx1)
    chh = np.maximum(py2, ty2) - np.minimum(py1, ty1)
    c2 = cw**2 + chh**2 + EPS
    rho2 = (cx - tcx) ** 2 + (cy - tcy) ** 2
    drho = np.stack([2 * (cx - tcx), 2 * (cy - tcy), np.zeros_like(w), np.zeros_like(w)], axis=1)
    e_x1 = -2 * cw * (px1 <= tx1)
    e_x2 = 2 * cw * (px2 >= tx2)
    e_y1 = -2 * chh * (py1 <= ty1)
    e_y2 = 2 * chh * (py2 >= ty2)
    dc2 = np.stack([e_x1 + e_x2, e_y1 + e_y2, (e_x2 - e_x1) / 2, (e_y2 - e_y1) / 2], axis=1)
    g_dist = (drho * c2[:, None] - rho2[:, None] * dc2) / (c2**2)[:, None]
    k = 4.0 / math.pi**2
    delta = np.arctan(tw / th) - np.arctan(w / h)
    v = k * delta**2
    denom = 1.0 - iou + v + EPS
    alpha = v / denom
    r2 = w**2 + h**2
    dv = np.stack([np.zeros_like(w), np.zeros_like(w), -2 * k * delta * h / r2, 2 * k * delta * w / r2], axis=1)
    dalpha = (dv * denom[:, None] - v[:, None] * (dv - g_iou)) / (denom**2)[:, None]
    ciou = iou - rho2 / c2 - alpha * v
    g = g_iou - g_dist - (alpha[:, None] * dv + v[:, None] * dalpha)
    return 1.0 - ciou, -g


def detection_loss(raw: list[Tensor], targets: list[ScaleTargets], cfg: ModelConfig,
                   tcfg: TrainConfig | None = None):
    """Returns ``(total_tensor, LossTerms)``; backward flows into every raw map."""
    tcfg = tcfg or TrainConfig()
    no = cfg.num_outputs
    nc = cfg.num_classes
    n_scales = len(raw)
    grads = []
    obj_sum = 0.0
    preds, tgts, chains, cls_logits, cls_onehot, locs = [], [], [], [], [], []
    for si, (r, tg, stride) in enumerate(zip(raw, targets, cfg.strides)):
        B, _, H, W = r.shape
        p = r.data.reshape(B, 3, no, H, W).astype(np.float64)
        g = np.zeros_like(p)
        ytarget = np.zeros((B, 3, H, W))
        ytarget[tg.b, tg.a, tg.gy, tg.gx] = 1.0
        z = p[:, :, 4]
        n_cells = z.size
        obj_sum += bce_with_logits(z, ytarget).sum() / n_cells
        g[:, :, 4] = (sigmoid_np(z) - ytarget) / n_cells * (tcfg.obj_weight / n_scales)
        grads.append(g)
        if tg.n:
            anchors = np.asarray(cfg.anchors[si], dtype=np.float64)
            aw, ah = anchors[tg.a, 0], anchors[tg.a, 1]
            t = p[tg.b, tg.a, :4, tg.gy, tg.gx]
            s = sigmoid_np(t)
            pred = np.stack([(2 * s[:, 0] - 0.5 + tg.gx) * stride, (2 * s[:, 1] - 0.5 + tg.gy) * stride,
                             aw * (2 * s[:, 2]) ** 2, ah * (2 * s[:, 3]) ** 2], axis=1)
            ds = s * (1 - s)
            chain = np.stack([2 * stride * ds[:, 0], 2 * stride * ds[:, 1],
                              8 * aw * s[:, 2] * ds[:, 2], 8 * ah * s[:, 3] * ds[:, 3]], axis=1)
            preds.append(pred)
            tgts.append(tg.box)
            chains.append(chain)
            cls_logits.append(p[tg.b, tg.a, 5:, tg.gy, tg.gx])
            onehot = np.zeros((tg.n, nc))
            onehot[np.arange(tg.n), tg.cls] = 1.0
            cls_onehot.append(onehot)
            locs.append((si, tg))
    obj = obj_sum / n_scales
    n_pos = sum(len(x) for x in preds)
    box = cls = 0.0
    if n_pos:
        pred = np.concatenate(preds)
        tgt = np.concatenate(tgts)
        chain = np.concatenate(chains)
        per_box, gbox = box_loss_and_grad(pred, tgt, tcfg.box_loss)
        box = per_box.mean()
        gt_raw = gbox * chain / n_pos * tcfg.box_weight
        zc = np.concatenate(cls_logits)
        yc = np.concatenate(cls_onehot)
        cls = bce_with_logits(zc, yc).mean()
        gc = (sigmoid_np(zc) - yc) / zc.size * tcfg.cls_weight
        lo = 0
        for si, tg in locs:
            hi = lo + tg.n
            # positives are unique per (b, a, gy, gx) by construction
            grads[si][tg.b, tg.a, :4, tg.gy, tg.gx] += gt_raw[lo:hi]
            grads[si][tg.b, tg.a, 5:, tg.gy, tg.gx] += gc[lo:hi]
            lo = hi
    total = tcfg.box_weight * box + tcfg.obj_weight * obj + tcfg.cls_weight * cls
    terms = LossTerms(float(box), float(obj), float(cls), float(total), int(n_pos))
    dtype = raw[0].dtype
    shaped = [g.reshape(r.shape).astype(dtype) for g, r in zip(grads, raw)]

    def backward(gout):
        scale = float(np.asarray(gout).reshape(()))
        for r, g in zip(raw, shaped):
            if r.requires_grad:
                r._accumulate(g * scale)

    out = _make(np.asarray(total, dtype=dtype).reshape(()), raw, backward)
    return out, terms
