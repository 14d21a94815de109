from __future__ import annotations

from dataclasses import dataclass, field, replace

VARIANTS = ("baseline", "temporal", "temporal_cbam")
STRIDES = (8, 16, 32)

# YOLOv5 P3-P5 anchors in pixels at 640; rescaled to the configured image size
ANCHORS_640 = (
    ((10, 13), (16, 30), (33, 23)),
    ((30, 61), (62, 45), (59, 119)),
    ((116, 90), (156, 198), (373, 326)),
)


def scaled_anchors(image_size: int) -> tuple:
    f = image_size / 640.0
    return tuple(tuple((w * f, h * f) for w, h in scale) for scale in ANCHORS_640)


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "baseline"
    width: int = 16
    num_classes: int = 1
    image_size: int = 640
    anchors: tuple | None = None
    strides: tuple = STRIDES
    cbam_after_neck: bool | None = None
    cbam_in_backbone: bool = False
    cbam_reduction: int = 16
    cbam_kernel: int = 7
    convlstm_per_scale: tuple | None = None
    convlstm_kernel: int = 3
    convlstm_passthrough: float = 0.0  # gate bias for pass-through init; 0 keeps plain init
    convlstm_residual: bool = True  # head sees current features + ConvLSTM output
    neck_norm_groups: int = 4  # group norm on the three neck outputs; 0 disables
    window: int = 3
    class_names: tuple = ()

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {', '.join(VARIANTS)}; got {self.variant!r}")
        if self.image_size % 32 != 0 or self.image_size < 32:
            raise ValueError(f"image_size must be a positive multiple of 32, got {self.image_size}")
        if self.width < 1 or self.num_classes < 1:
            raise ValueError("width and num_classes must be >= 1")
        if tuple(self.strides) != STRIDES:
            raise ValueError(f"strides are fixed at {STRIDES}")
        temporal = self.variant != "baseline"
        attn = self.variant == "temporal_cbam"
        if self.anchors is None:
            object.__setattr__(self, "anchors", scaled_anchors(self.image_size))
        if self.cbam_after_neck is None:
            object.__setattr__(self, "cbam_after_neck", attn)
        if self.convlstm_per_scale is None:
            object.__setattr__(self, "convlstm_per_scale", (temporal,) * 3)
        if len(self.anchors) != 3 or any(len(s) != 3 for s in self.anchors):
            raise ValueError("anchors must be 3 scales x 3 (w, h) pairs")
        if any(w <= 0 or h <= 0 for s in self.anchors for w, h in s):
            raise ValueError("anchors must be positive")
        if len(self.convlstm_per_scale) != 3:
            raise ValueError("convlstm_per_scale needs one flag per scale")
        if not temporal and (self.cbam_after_neck or self.cbam_in_backbone or any(self.convlstm_per_scale)):
            raise ValueError("baseline variant carries no attention or temporal layers")
        if self.variant == "temporal" and (self.cbam_after_neck or self.cbam_in_backbone):
            raise ValueError("temporal variant carries no attention layers")
        if temporal and not any(self.convlstm_per_scale):
            raise ValueError(f"{self.variant} variant needs ConvLSTM on at least one scale")
        if self.neck_norm_groups < 0 or (self.neck_norm_groups and (4 * self.width) % self.neck_norm_groups):
            raise ValueError(f"neck_norm_groups must be 0 or divide {4 * self.width} (4 x width)")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.class_names and len(self.class_names) != self.num_classes:
            raise ValueError("class_names length must equal num_classes")

    @property
    def temporal(self) -> bool:
        return self.variant != "baseline"

    @property
    def input_window(self) -> int:
        return self.window if self.temporal else 1

    @property
    def num_outputs(self) -> int:
        return 5 + self.num_classes

    def with_variant(self, variant: str) -> "ModelConfig":
        return replace(self, variant=variant, cbam_after_neck=None, convlstm_per_scale=None, cbam_in_backbone=False)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 0.01
    optimizer: str = "sgd_momentum"  # sgd_momentum | adamw
    momentum: float = 0.937
    weight_decay: float = 5e-4
    batch_size: int = 8
    box_weight: float = 0.05
    obj_weight: float = 1.0
    cls_weight: float = 0.5
    box_loss: str = "iou"  # iou | ciou
    init_weights: str | None = None
    seed: int = 0
    steps_per_epoch: int | None = None
    warmup_steps: int = 0
    grad_clip: float | None = 10.0
    temporal_lr_scale: float = 1.0  # lr multiplier for ConvLSTM parameters
    window_stride: int = 1
    val_stride: int = 1
    eval_conf_thr: float = 0.001
    eval_iou_thr: float = 0.6
    augment: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.optimizer not in ("sgd_momentum", "adamw"):
            raise ValueError(f"optimizer must be sgd_momentum or adamw, got {self.optimizer!r}")
        if self.box_loss not in ("iou", "ciou"):
            raise ValueError(f"box_loss must be iou or ciou, got {self.box_loss!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.temporal_lr_scale < 0:
            raise ValueError("temporal_lr_scale must be >= 0")

    @classmethod
    def for_variant(cls, variant: str, **kw) -> "TrainConfig":
        """Per-variant defaults: SGD at 0.01 for the baseline, AdamW at 0.001 otherwise."""
        if variant == "baseline":
            base = dict(lr=0.01, optimizer="sgd_momentum")
        else:
            base = dict(lr=0.001, optimizer="adamw", weight_decay=0.01)
        base.update(kw)
        return cls(**base)
