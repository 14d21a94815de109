"""Hot inner loops, in two interchangeable flavours.

Every kernel exists as ``<name>_numpy`` (vectorised numpy) and ``<name>_numba``
(``@njit`` loops). The public ``<name>`` alias points at the numba version
unless numba is missing or ``STDET_DISABLE_NUMBA=1`` is set in the
environment before import.

Layout conventions shared by both flavours:

* ``im2col`` takes an already padded ``(B, C, Hp, Wp)`` array and returns a
  ``(B*Ho*Wo, C*kh*kw)`` matrix, rows ordered ``(b, i, j)`` and columns
  ordered ``(c, di, dj)``.
* ``col2im`` is its exact adjoint.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda fn: fn


def _flag_set(name: str) -> bool:
    return os.environ.get(name, "").strip().lower() in {"1", "true", "yes", "on"}


USE_NUMBA = HAVE_NUMBA and not _flag_set("STDET_DISABLE_NUMBA")
BACKEND = "numba" if USE_NUMBA else "numpy"


def out_size(n: int, k: int, stride: int) -> int:
    return (n - k) // stride + 1


# ---------------------------------------------------------------------------
# im2col / col2im
# ---------------------------------------------------------------------------


def im2col_numpy(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    b, c, hp, wp = xp.shape
    ho, wo = out_size(hp, kh, stride), out_size(wp, kw, stride)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (B, C, Ho, Wo, kh, kw) -> (B, Ho, Wo, C, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * ho * wo, c * kh * kw)


def col2im_numpy(cols: np.ndarray, shape: tuple, kh: int, kw: int, stride: int) -> np.ndarray:
    b, c, hp, wp = shape
    ho, wo = out_size(hp, kh, stride), out_size(wp, kw, stride)
    cols6 = cols.reshape(b, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros(shape, dtype=cols.dtype)
    for di in range(kh):
        for dj in range(kw):
            out[:, :, di : di + (ho - 1) * stride + 1 : stride, dj : dj + (wo - 1) * stride + 1 : stride] += cols6[
                :, :, di, dj
            ]
    return out


@njit(cache=True)
def im2col_numba(xp, kh, kw, stride):
    b, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = np.empty((b * ho * wo, c * kh * kw), dtype=xp.dtype)
    for n in range(b):
        for i in range(ho):
            for j in range(wo):
                row = (n * ho + i) * wo + j
                col = 0
                for ch in range(c):
                    for di in range(kh):
                        y = i * stride + di
                        for dj in range(kw):
                            cols[row, col] = xp[n, ch, y, j * stride + dj]
                            col += 1
    return cols


@njit(cache=True)
def _col2im_numba(cols, out, kh, kw, stride):
    b, c, hp, wp = out.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    for n in range(b):
        for i in range(ho):
            for j in range(wo):
                row = (n * ho + i) * wo + j
                col = 0
                for ch in range(c):
                    for di in range(kh):
                        y = i * stride + di
                        for dj in range(kw):
                            out[n, ch, y, j * stride + dj] += cols[row, col]
                            col += 1
    return out


def col2im_numba(cols: np.ndarray, shape: tuple, kh: int, kw: int, stride: int) -> np.ndarray:
    out = np.zeros(shape, dtype=cols.dtype)
    return _col2im_numba(np.ascontiguousarray(cols), out, kh, kw, stride)


# ---------------------------------------------------------------------------
# max pooling (first-occurrence argmax in row-major window order)
# ---------------------------------------------------------------------------


def maxpool_forward_numpy(x: np.ndarray, k: int, stride: int):
    b, c, h, w = x.shape
    ho, wo = out_size(h, k, stride), out_size(w, k, stride)
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    flat = win.reshape(b, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg.astype(np.int64)


def maxpool_backward_numpy(grad: np.ndarray, arg: np.ndarray, shape: tuple, k: int, stride: int) -> np.ndarray:
    b, c, h, w = shape
    ho, wo = grad.shape[2], grad.shape[3]
    out = np.zeros(shape, dtype=grad.dtype)
    rows = (np.arange(ho) * stride)[None, None, :, None] + arg // k
    cols = (np.arange(wo) * stride)[None, None, None, :] + arg % k
    bi = np.arange(b)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    np.add.at(out, (np.broadcast_to(bi, arg.shape), np.broadcast_to(ci, arg.shape), rows, cols), grad)
    return out


@njit(cache=True)
def maxpool_forward_numba(x, k, stride):
    b, c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    out = np.empty((b, c, ho, wo), dtype=x.dtype)
    arg = np.empty((b, c, ho, wo), dtype=np.int64)
    for n in range(b):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    best = x[n, ch, i * stride, j * stride]
                    besti = 0
                    for di in range(k):
                        for dj in range(k):
                            v = x[n, ch, i * stride + di, j * stride + dj]
                            if v > best:
                                best = v
                                besti = di * k + dj
                    out[n, ch, i, j] = best
                    arg[n, ch, i, j] = besti
    return out, arg


@njit(cache=True)
def _maxpool_backward_numba(grad, arg, out, k, stride):
    b, c, ho, wo = grad.shape
    for n in range(b):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    a = arg[n, ch, i, j]
                    out[n, ch, i * stride + a // k, j * stride + a % k] += grad[n, ch, i, j]
    return out


def maxpool_backward_numba(grad: np.ndarray, arg: np.ndarray, shape: tuple, k: int, stride: int) -> np.ndarray:
    out = np.zeros(shape, dtype=grad.dtype)
    return _maxpool_backward_numba(np.ascontiguousarray(grad), arg, out, k, stride)


# ---------------------------------------------------------------------------
# greedy suppression and greedy matching
# ---------------------------------------------------------------------------


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix between corner boxes ``a`` (N,4) and ``b`` (M,4)."""
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


def nms_keep_numpy(boxes: np.ndarray, classes: np.ndarray, iou_thr: float) -> np.ndarray:
    """Keep mask for boxes already sorted by descending confidence."""
    n = len(boxes)
    keep = np.ones(n, dtype=np.bool_)
    if n == 0:
        return keep
    ious = pairwise_iou(boxes, boxes)
    same = classes[:, None] == classes[None, :]
    for i in range(n):
        if not keep[i]:
            continue
        sup = same[i, i + 1 :] & (ious[i, i + 1 :] > iou_thr)
        keep[i + 1 :] &= ~sup
    return keep


@njit(cache=True)
def _iou1(a0, a1, a2, a3, b0, b1, b2, b3):
    iw = min(a2, b2) - max(a0, b0)
    ih = min(a3, b3) - max(a1, b1)
    if iw <= 0.0 or ih <= 0.0:
        inter = 0.0
    else:
        inter = iw * ih
    union = (a2 - a0) * (a3 - a1) + (b2 - b0) * (b3 - b1) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


@njit(cache=True)
def nms_keep_numba(boxes, classes, iou_thr):
    n = boxes.shape[0]
    keep = np.ones(n, dtype=np.bool_)
    for i in range(n):
        if not keep[i]:
            continue
        for j in range(i + 1, n):
            if keep[j] and classes[j] == classes[i]:
                v = _iou1(boxes[i, 0], boxes[i, 1], boxes[i, 2], boxes[i, 3],
                          boxes[j, 0], boxes[j, 1], boxes[j, 2], boxes[j, 3])
                if v > iou_thr:
                    keep[j] = False
    return keep


def greedy_match_numpy(dets: np.ndarray, gts: np.ndarray, iou_thr: float) -> np.ndarray:
    """Index of the matched ground truth per detection (-1 when unmatched).

    ``dets`` must already be in descending-confidence order. Each detection
    takes the highest-IoU ground truth still free; ties go to the lower index.
    """
    n = len(dets)
    out = np.full(n, -1, dtype=np.int64)
    if n == 0 or len(gts) == 0:
        return out
    ious = pairwise_iou(dets, gts)
    taken = np.zeros(len(gts), dtype=np.bool_)
    for i in range(n):
        row = np.where(taken, -1.0, ious[i])
        j = int(row.argmax())
        if row[j] >= iou_thr:
            out[i] = j
            taken[j] = True
    return out


@njit(cache=True)
def greedy_match_numba(dets, gts, iou_thr):
    n = dets.shape[0]
    m = gts.shape[0]
    out = np.full(n, -1, dtype=np.int64)
    taken = np.zeros(m, dtype=np.bool_)
    for i in range(n):
        best = -1.0
        bestj = -1
        for j in range(m):
            if taken[j]:
                continue
            v = _iou1(dets[i, 0], dets[i, 1], dets[i, 2], dets[i, 3],
                      gts[j, 0], gts[j, 1], gts[j, 2], gts[j, 3])
            if v > best:
                best = v
                bestj = j
        if bestj >= 0 and best >= iou_thr:
            out[i] = bestj
            taken[bestj] = True
    return out


if USE_NUMBA:
    im2col = im2col_numba
    col2im = col2im_numba
    maxpool_forward = maxpool_forward_numba
    maxpool_backward = maxpool_backward_numba
    nms_keep = nms_keep_numba
    greedy_match = greedy_match_numba
else:
    im2col = im2col_numpy
    col2im = col2im_numpy
    maxpool_forward = maxpool_forward_numpy
    maxpool_backward = maxpool_backward_numpy
    nms_keep = nms_keep_numpy
    greedy_match = greedy_match_numpy

KERNELS = ("im2col", "col2im", "maxpool_forward", "maxpool_backward", "nms_keep", "greedy_match")
