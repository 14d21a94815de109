"""Dataset ingestion, frame standardisation, video splits and window sampling.

On-disk layout::

    <root>/classes.txt                  one class name per line, line i = id i
    <root>/<video>/img_00000.png        frames, numbered from 0
    <root>/<video>/labels/img_00000.txt YOLO lines "class cx cy w h" (may be empty)
    <root>/<video>/meta.json            optional per-video metadata
"""

from __future__ import annotations

import dataclasses
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import LabelFormatError, NormBox, parse_label_text

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp")
_FRAME_RE = re.compile(r"^img_(\d+)$")


class DataError(ValueError):
    """Malformed or missing dataset content."""


def load_image(path: str | Path) -> np.ndarray:
    """Read an image as float32 ``(3, H, W)`` in ``[0, 1]``."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None
    return (arr.transpose(2, 0, 1).astype(np.float32) / 255.0)


def to_uint8(frame: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)


def save_image(frame: np.ndarray, path: str | Path) -> None:
    Image.fromarray(to_uint8(frame).transpose(1, 2, 0)).save(path, format="PNG")


@dataclass
class VideoRecord:
    id: str
    class_name: str
    frames: list  # file paths or in-memory (3, H, W) arrays
    labels: list[list[NormBox]]
    short: bool = False
    meta: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if len(self.frames) != len(self.labels):
            raise DataError(f"video {self.id}: {len(self.frames)} frames but {len(self.labels)} label sets")

    def __len__(self) -> int:
        return len(self.frames)

    def frame(self, i: int) -> np.ndarray:
        ref = self.frames[i]
        if isinstance(ref, np.ndarray):
            return ref
        if i not in self._cache:
            self._cache[i] = load_image(ref)
        return self._cache[i]


@dataclass
class FrameSequence:
    video_id: str
    start_index: int
    frames: list[np.ndarray]
    labels: list[list[NormBox]]

    def __post_init__(self):
        if len(self.frames) != len(self.labels):
            raise DataError("frame and label counts differ")
        shapes = {f.shape for f in self.frames}
        if len(shapes) > 1:
            raise DataError(f"frames of one sequence differ in shape: {sorted(shapes)}")

    @property
    def T(self) -> int:
        return len(self.frames)

    @property
    def target(self) -> list[NormBox]:
        """Supervised labels: those of the final frame."""
        return self.labels[-1]

    @property
    def frame_shape(self) -> tuple[int, ...]:
        return self.frames[0].shape


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]
    seed: int

    def as_dict(self) -> dict:
        return {"train": list(self.train), "val": list(self.val), "test": list(self.test), "seed": self.seed}


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------


def read_class_names(root: str | Path) -> list[str]:
    path = Path(root) / "classes.txt"
    if not path.exists():
        return []
    return [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]


def _frame_index(p: Path) -> int | None:
    m = _FRAME_RE.match(p.stem)
    return int(m.group(1)) if m else None


def _majority_class(labels, names) -> str:
    counts = Counter(b.class_id for boxes in labels for b in boxes)
    if not counts:
        return "unknown"
    cid = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]
    return names[cid] if cid < len(names) else f"class_{cid}"


def ingest(root: str | Path) -> list[VideoRecord]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    names = read_class_names(root)
    videos = []
    for vdir in sorted(p for p in root.iterdir() if p.is_dir()):
        frames = sorted(
            (p for p in vdir.iterdir() if p.suffix.lower() in IMAGE_EXTS and _frame_index(p) is not None),
            key=_frame_index,
        )
        if not frames:
            continue
        labels = []
        for fp in frames:
            lp = vdir / "labels" / (fp.stem + ".txt")
            if not lp.exists():
                raise DataError(f"missing label file for frame {fp}")
            try:
                boxes = parse_label_text(lp.read_text(), str(lp))
            except LabelFormatError as exc:
                raise DataError(str(exc)) from None
            if names:
                bad = [b.class_id for b in boxes if b.class_id >= len(names)]
                if bad:
                    raise DataError(f"{lp}: class id {bad[0]} not in classes.txt ({len(names)} classes)")
            labels.append(boxes)
        meta = {}
        mp = vdir / "meta.json"
        if mp.exists():
            meta = json.loads(mp.read_text())
        videos.append(VideoRecord(vdir.name, _majority_class(labels, names), list(frames), labels, meta=meta))
    if not videos:
        raise DataError(f"no videos found under {root}")
    return videos


def standardize_frames(v: VideoRecord, n: int = 100) -> VideoRecord:
    """Keep at most the first ``n`` frames; flag videos shorter than ``n``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(v) > n:
        cache = {i: a for i, a in v._cache.items() if i < n}
        return dataclasses.replace(v, frames=v.frames[:n], labels=v.labels[:n], short=False, _cache=cache)
    return dataclasses.replace(v, short=len(v) < n, _cache=v._cache)


def split_videos(videos, ratios=(0.7, 0.15, 0.15), seed: int = 0) -> DatasetSplit:
    """Whole-video shuffle split. Sizes are floored; the remainder goes to train."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError(f"split ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {sum(ratios)}")
    ids = sorted(v.id if isinstance(v, VideoRecord) else str(v) for v in videos)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate video ids")
    n = len(ids)
    if n < 3:
        raise ValueError(f"need at least 3 videos for a train/val/test split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    n_val, n_test = (int(np.floor(n * r + 1e-9)) for r in ratios[1:])
    n_val, n_test = max(n_val, 1), max(n_test, 1)
    n_train = n - n_val - n_test
    if n_train < 1:
        raise ValueError(f"{n} videos cannot fill all three splits with ratios {ratios}")
    return DatasetSplit(
        tuple(shuffled[:n_train]),
        tuple(shuffled[n_train : n_train + n_val]),
        tuple(shuffled[n_train + n_val :]),
        seed,
    )


def window_starts(length: int, T: int = 3, stride: int = 1) -> list[int]:
    if T < 1 or stride < 1:
        raise ValueError("T and stride must be >= 1")
    if length < T:
        return []
    return list(range(0, length - T + 1, stride))


def window_sampler(v: VideoRecord, T: int = 3, stride: int = 1) -> list[FrameSequence]:
    return [
        FrameSequence(v.id, s, [v.frame(i) for i in range(s, s + T)], v.labels[s : s + T])
        for s in window_starts(len(v), T, stride)
    ]


def context_window(v: VideoRecord, index: int, T: int) -> FrameSequence:
    """Window ending at ``index``; zero frames pad before the video start."""
    if not 0 <= index < len(v):
        raise IndexError(f"frame {index} outside video {v.id} of length {len(v)}")
    ref = v.frame(index)
    frames, labels = [], []
    for i in range(index - T + 1, index + 1):
        if i < 0:
            frames.append(np.zeros_like(ref))
            labels.append([])
        else:
            frames.append(v.frame(i))
            labels.append(v.labels[i])
    return FrameSequence(v.id, index - T + 1, frames, labels)


def write_dataset(videos, root: str | Path, class_names) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "classes.txt").write_text("".join(f"{n}\n" for n in class_names))
    for v in videos:
        vdir = root / v.id
        (vdir / "labels").mkdir(parents=True, exist_ok=True)
        for i in range(len(v)):
            save_image(v.frame(i), vdir / f"img_{i:05d}.png")
            (vdir / "labels" / f"img_{i:05d}.txt").write_text("".join(b.to_line() + "\n" for b in v.labels[i]))
        if v.meta:
            (vdir / "meta.json").write_text(json.dumps(v.meta, sort_keys=True, indent=1))
