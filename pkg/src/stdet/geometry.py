"""Box conventions, letterboxing, IoU and class-aware NMS.

Two box conventions are used throughout:

* :class:`NormBox` - YOLO label convention, normalised ``(cx, cy, w, h)``.
* :class:`PixelBox` - pixel corners ``(x1, y1, x2, y2)`` plus a confidence.

Coordinates are continuous reals; area is ``(x2 - x1) * (y2 - y1)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K

NMS_IOU_THR = 0.45
NMS_CONF_THR = 0.25


@dataclass(frozen=True)
class NormBox:
    cx: float
    cy: float
    w: float
    h: float
    class_id: int = 0

    def is_valid(self) -> bool:
        return (
            0.0 <= self.cx <= 1.0
            and 0.0 <= self.cy <= 1.0
            and 0.0 < self.w <= 1.0
            and 0.0 < self.h <= 1.0
        )

    def to_line(self) -> str:
        return f"{self.class_id} {self.cx:.6f} {self.cy:.6f} {self.w:.6f} {self.h:.6f}"


@dataclass(frozen=True)
class PixelBox:
    x1: float
    y1: float
    x2: float
    y2: float
    class_id: int = 0
    confidence: float = 1.0

    @property
    def area(self) -> float:
        return max(0.0, self.x2 - self.x1) * max(0.0, self.y2 - self.y1)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


class LabelFormatError(ValueError):
    pass


def parse_label_line(line: str, source: str = "<string>", lineno: int = 0) -> NormBox:
    parts = line.split()
    if len(parts) != 5:
        raise LabelFormatError(f"{source}:{lineno}: expected 5 fields 'class cx cy w h', got {len(parts)}")
    try:
        cls = int(parts[0])
        cx, cy, w, h = (float(p) for p in parts[1:])
    except ValueError as exc:
        raise LabelFormatError(f"{source}:{lineno}: {exc}") from None
    if cls < 0:
        raise LabelFormatError(f"{source}:{lineno}: negative class id {cls}")
    return NormBox(cx, cy, w, h, cls)


def parse_label_text(text: str, source: str = "<string>") -> list[NormBox]:
    boxes = []
    for i, line in enumerate(text.splitlines(), start=1):
        if line.strip():
            boxes.append(parse_label_line(line, source, i))
    return boxes


def format_labels(boxes) -> str:
    return "".join(b.to_line() + "\n" for b in boxes)


# ---------------------------------------------------------------------------
# conversions
# ---------------------------------------------------------------------------


def norm_to_pixel(box: NormBox, img_w: int, img_h: int, clamp: bool = False):
    """Corner box in pixels. With ``clamp=True`` returns ``(box, was_clamped)``."""
    if img_w < 1 or img_h < 1:
        raise ValueError("image extents must be >= 1")
    x1 = (box.cx - box.w / 2) * img_w
    y1 = (box.cy - box.h / 2) * img_h
    x2 = (box.cx + box.w / 2) * img_w
    y2 = (box.cy + box.h / 2) * img_h
    if not clamp:
        return PixelBox(x1, y1, x2, y2, box.class_id, 1.0)
    cx1, cy1 = min(max(x1, 0.0), img_w), min(max(y1, 0.0), img_h)
    cx2, cy2 = min(max(x2, 0.0), img_w), min(max(y2, 0.0), img_h)
    clamped = (cx1, cy1, cx2, cy2) != (x1, y1, x2, y2)
    return PixelBox(cx1, cy1, cx2, cy2, box.class_id, 1.0), clamped


def pixel_to_norm(box: PixelBox, img_w: int, img_h: int) -> NormBox:
    if img_w < 1 or img_h < 1:
        raise ValueError("image extents must be >= 1")
    return NormBox(
        (box.x1 + box.x2) / 2 / img_w,
        (box.y1 + box.y2) / 2 / img_h,
        (box.x2 - box.x1) / img_w,
        (box.y2 - box.y1) / img_h,
        box.class_id,
    )


def clip_norm(box: NormBox) -> NormBox | None:
    """Clip a normalised box to the unit square; ``None`` if nothing is left."""
    x1 = min(max(box.cx - box.w / 2, 0.0), 1.0)
    y1 = min(max(box.cy - box.h / 2, 0.0), 1.0)
    x2 = min(max(box.cx + box.w / 2, 0.0), 1.0)
    y2 = min(max(box.cy + box.h / 2, 0.0), 1.0)
    if x2 <= x1 or y2 <= y1:
        return None
    return NormBox((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1, box.class_id)


def boxes_to_array(boxes) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4))
    return np.array([[b.x1, b.y1, b.x2, b.y2] for b in boxes], dtype=np.float64)


# ---------------------------------------------------------------------------
# letterbox
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LetterboxTransform:
    scale: float
    pad_x: float
    pad_y: float
    src_w: int
    src_h: int
    dst: int

    def apply(self, x: float, y: float) -> tuple[float, float]:
        return x * self.scale + self.pad_x, y * self.scale + self.pad_y

    def invert(self, x: float, y: float) -> tuple[float, float]:
        return (x - self.pad_x) / self.scale, (y - self.pad_y) / self.scale

    def apply_norm(self, box: NormBox) -> NormBox:
        cx, cy = self.apply(box.cx * self.src_w, box.cy * self.src_h)
        return NormBox(
            cx / self.dst,
            cy / self.dst,
            box.w * self.src_w * self.scale / self.dst,
            box.h * self.src_h * self.scale / self.dst,
            box.class_id,
        )

    def invert_pixel(self, box: PixelBox) -> PixelBox:
        x1, y1 = self.invert(box.x1, box.y1)
        x2, y2 = self.invert(box.x2, box.y2)
        return PixelBox(x1, y1, x2, y2, box.class_id, box.confidence)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a ``(C, H, W)`` array with half-pixel centres."""
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (pos - lo).astype(img.dtype)

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return top * (1 - fy)[None, :, None] + bot * fy[None, :, None]


def letterbox(image: np.ndarray, dst: int = 640, fill: float = 114 / 255):
    """Aspect-preserving resize into a ``dst`` square, padding the short axis evenly."""
    c, h, w = image.shape
    if h < 1 or w < 1:
        raise ValueError("image must be non-empty")
    scale = dst / max(h, w)
    new_w, new_h = int(round(w * scale)), int(round(h * scale))
    pad_x = (dst - new_w) // 2
    pad_y = (dst - new_h) // 2
    out = np.full((c, dst, dst), fill, dtype=image.dtype)
    out[:, pad_y : pad_y + new_h, pad_x : pad_x + new_w] = resize_bilinear(image, new_h, new_w)
    return out, LetterboxTransform(scale, float(pad_x), float(pad_y), w, h, dst)


# ---------------------------------------------------------------------------
# IoU / NMS
# ---------------------------------------------------------------------------


def iou(a: PixelBox, b: PixelBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = iw * ih if iw > 0 and ih > 0 else 0.0
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def nms(dets, iou_thr: float = NMS_IOU_THR, conf_thr: float = NMS_CONF_THR, max_det: int | None = None):
    """Class-aware greedy suppression.

    Survivors come back in descending confidence; equal confidences keep
    their input order.
    """
    cand = [(i, d) for i, d in enumerate(dets) if d.confidence >= conf_thr]
    if not cand:
        return []
    cand.sort(key=lambda t: (-t[1].confidence, t[0]))
    ordered = [d for _, d in cand]
    arr = boxes_to_array(ordered)
    classes = np.array([d.class_id for d in ordered], dtype=np.int64)
    keep = K.nms_keep(arr, classes, float(iou_thr))
    out = [d for d, k in zip(ordered, keep) if k]
    return out[:max_det] if max_det is not None else out


def nms_arrays(boxes: np.ndarray, scores: np.ndarray, classes: np.ndarray, iou_thr: float = NMS_IOU_THR):
    """Array flavour of :func:`nms` (no confidence filtering). Returns kept indices."""
    order = np.argsort(-scores, kind="stable")
    keep = K.nms_keep(np.ascontiguousarray(boxes[order], dtype=np.float64), classes[order].astype(np.int64), float(iou_thr))
    return order[keep]
