"""Precision/recall, AP, mAP@50 and mAP@50-95, and per-class tables.

AP defaults to the COCO 101-point interpolation. Detections with equal
confidence are ordered by image id, then by insertion order. Classes with no
ground-truth instance are left out of every mean.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .geometry import PixelBox, boxes_to_array

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
PR_CONF_THR = 0.25
COLUMNS = ("Class", "Instances", "P", "R", "mAP50", "mAP50-95")


@dataclass(frozen=True)
class MatchRecord:
    confidence: float
    matched: bool
    class_id: int
    image_id: str


def _sorted_dets(dets):
    return [d for _, d in sorted(enumerate(dets), key=lambda t: (-t[1].confidence, t[0]))]


def match_detections(dets, gts, iou_thr: float, image_id: str = "0") -> list[MatchRecord]:
    """Greedy per-class matching for one image.

    Detections are visited by descending confidence; each takes the
    highest-IoU ground truth of its class that is still free, if that IoU
    reaches ``iou_thr``.
    """
    out = []
    dets = _sorted_dets(dets)
    for c in sorted({d.class_id for d in dets}):
        dc = [d for d in dets if d.class_id == c]
        gc = [g for g in gts if g.class_id == c]
        matched = K.greedy_match(boxes_to_array(dc), boxes_to_array(gc), float(iou_thr))
        out.extend(MatchRecord(d.confidence, bool(m >= 0), c, image_id) for d, m in zip(dc, matched))
    return out


def _ordered(records):
    return sorted(enumerate(records), key=lambda t: (-t[1].confidence, t[1].image_id, t[0]))


def average_precision(records, n_gt: int, method: str = "coco101") -> float:
    """AP from match records of one class; 0.0 when ``n_gt`` is 0."""
    if n_gt <= 0:
        return 0.0
    if not records:
        return 0.0
    tp = np.array([r.matched for _, r in _ordered(records)], dtype=np.float64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    env = np.maximum.accumulate(precision[::-1])[::-1]
    if method == "coco101":
        # i / 100 is correctly rounded, unlike linspace, so exact-rational ties compare right
        rs = np.arange(101) / 100.0
        idx = np.searchsorted(recall, rs, side="left")
        q = np.where(idx < len(env), env[np.minimum(idx, len(env) - 1)], 0.0)
        return float(q.mean())
    if method == "all":
        r = np.concatenate([[0.0], recall])
        p = np.concatenate([[env[0]], env])
        return float(np.sum((r[1:] - r[:-1]) * p[1:]))
    raise ValueError(f"unknown AP method {method!r}")


@dataclass
class ClassMetrics:
    class_id: int
    instances: int
    precision: float
    recall: float
    ap: tuple  # one per IoU threshold

    @property
    def map50(self) -> float:
        return self.ap[0]

    @property
    def map50_95(self) -> float:
        return float(np.mean(self.ap))


@dataclass
class EvalResult:
    map50: float
    map50_95: float
    precision: float
    recall: float
    per_class: dict[int, ClassMetrics] = field(default_factory=dict)
    thresholds: tuple = IOU_THRESHOLDS

    @property
    def instances(self) -> int:
        return sum(c.instances for c in self.per_class.values())


def _check_thresholds(thresholds) -> tuple:
    th = tuple(float(t) for t in thresholds)
    if any(b <= a for a, b in zip(th, th[1:])):
        raise ValueError("IoU thresholds must be strictly increasing")
    if th and (th[0] < 0.5 - 1e-12 or th[-1] > 0.95 + 1e-12):
        raise ValueError("IoU thresholds must lie in [0.5, 0.95]")
    return th


def map_range(dets: dict, gts: dict, thresholds=IOU_THRESHOLDS, pr_conf: float = PR_CONF_THR,
              method: str = "coco101") -> EvalResult:
    """Evaluate detections against ground truth.

    ``dets`` and ``gts`` map image id -> list of :class:`PixelBox`.
    Precision and recall are reported at IoU 0.5 for detections with
    confidence >= ``pr_conf``.
    """
    th = _check_thresholds(thresholds)
    images = sorted(set(gts) | set(dets))
    n_gt: dict[int, int] = {}
    for img in images:
        for g in gts.get(img, []):
            n_gt[g.class_id] = n_gt.get(g.class_id, 0) + 1
    per_thr = []
    for t in th:
        recs: dict[int, list[MatchRecord]] = {}
        for img in images:
            for r in match_detections(dets.get(img, []), gts.get(img, []), t, img):
                recs.setdefault(r.class_id, []).append(r)
        per_thr.append(recs)
    per_class = {}
    for c in sorted(n_gt):
        aps = tuple(average_precision(recs.get(c, []), n_gt[c], method) for recs in per_thr)
        base = per_thr[0].get(c, []) if per_thr else []
        kept = [r for r in base if r.confidence >= pr_conf]
        tp = sum(r.matched for r in kept)
        p = tp / len(kept) if kept else 0.0
        r = tp / n_gt[c]
        per_class[c] = ClassMetrics(c, n_gt[c], p, r, aps)
    if not per_class:
        return EvalResult(0.0, 0.0, 0.0, 0.0, {}, th)
    rows = list(per_class.values())
    return EvalResult(
        map50=float(np.mean([m.map50 for m in rows])),
        map50_95=float(np.mean([m.map50_95 for m in rows])),
        precision=float(np.mean([m.precision for m in rows])),
        recall=float(np.mean([m.recall for m in rows])),
        per_class=per_class,
        thresholds=th,
    )


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricsRow:
    name: str
    instances: int
    p: float
    r: float
    map50: float
    map50_95: float

    def values(self) -> tuple:
        return (self.name, self.instances, self.p, self.r, self.map50, self.map50_95)


@dataclass
class MetricsTable:
    rows: list[MetricsRow]

    @property
    def all_row(self) -> MetricsRow | None:
        return self.rows[0] if self.rows and self.rows[0].name == "all" else None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for row in self.rows:
            w.writerow([row.name, row.instances] + [f"{v:.6f}" for v in row.values()[2:]])
        return buf.getvalue()

    def to_json(self) -> str:
        rows = [dict(zip(COLUMNS, (r.name, r.instances) + tuple(round(v, 6) for v in r.values()[2:])))
                for r in self.rows]
        return json.dumps({"columns": list(COLUMNS), "rows": rows}, indent=1) + "\n"

    def to_text(self) -> str:
        width = max([len(COLUMNS[0])] + [len(r.name) for r in self.rows])
        lines = [f"{COLUMNS[0]:<{width}} {COLUMNS[1]:>9} {COLUMNS[2]:>6} {COLUMNS[3]:>6} {COLUMNS[4]:>6} {COLUMNS[5]:>8}"]
        for r in self.rows:
            lines.append(f"{r.name:<{width}} {r.instances:>9d} {r.p:>6.3f} {r.r:>6.3f} {r.map50:>6.3f} {r.map50_95:>8.3f}")
        return "\n".join(lines) + "\n"


def parse_table_csv(text: str) -> MetricsTable:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(header) != COLUMNS:
        raise ValueError(f"unexpected columns {header}")
    return MetricsTable([MetricsRow(r[0], int(r[1]), *(float(v) for v in r[2:])) for r in reader])


def emit_table(result: EvalResult | dict, class_names=None) -> MetricsTable:
    """Per-class rows sorted by name, preceded by an aggregate ``all`` row.

    Accepts an :class:`EvalResult` or a mapping ``name -> (instances, P, R,
    mAP50, mAP50-95)``.
    """
    if isinstance(result, EvalResult):
        names = list(class_names or [])
        per = {
            (names[c] if c < len(names) else f"class_{c}"): (m.instances, m.precision, m.recall, m.map50, m.map50_95)
            for c, m in result.per_class.items()
        }
    else:
        per = dict(result)
    rows = [MetricsRow(n, int(v[0]), *(float(x) for x in v[1:])) for n, v in sorted(per.items())]
    rows = [r for r in rows if r.instances > 0]
    if not rows:
        return MetricsTable([])
    agg = MetricsRow(
        "all",
        sum(r.instances for r in rows),
        float(np.mean([r.p for r in rows])),
        float(np.mean([r.r for r in rows])),
        float(np.mean([r.map50 for r in rows])),
        float(np.mean([r.map50_95 for r in rows])),
    )
    return MetricsTable([agg] + rows)


# ---------------------------------------------------------------------------
# prediction interchange: "image_id class_id conf x1 y1 x2 y2"
# ---------------------------------------------------------------------------


def format_predictions(dets: dict) -> str:
    lines = []
    for img in sorted(dets):
        for d in dets[img]:
            lines.append(f"{img} {d.class_id} {d.confidence:.6f} {d.x1:.3f} {d.y1:.3f} {d.x2:.3f} {d.y2:.3f}")
    return "".join(ln + "\n" for ln in lines)


def parse_predictions(text: str) -> dict:
    out: dict[str, list[PixelBox]] = {}
    for i, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 7:
            raise ValueError(f"line {i}: expected 7 fields, got {len(parts)}")
        img, cls, conf, x1, y1, x2, y2 = parts
        out.setdefault(img, []).append(PixelBox(float(x1), float(y1), float(x2), float(y2), int(cls), float(conf)))
    return out
