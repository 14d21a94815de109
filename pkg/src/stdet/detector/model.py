"""Mini single-stage detector: conv backbone, PANet neck, optional CBAM and ConvLSTM, anchor head."""

from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from .. import numkit as nk
from ..attention import CbamParams, cbam, init_cbam
from ..numkit import Parameter, Tensor
from ..temporal import ConvLstmParams, convlstm_rollout, init_convlstm
from .config import ModelConfig

SCALES = ("p3", "p4", "p5")
# 1 / E[silu(z)^2] for z ~ N(0, 1); keeps activation variance flat with depth
SILU_GAIN = 2.8144


class Model:
    """Parameters plus static graph for one :class:`ModelConfig`."""

    def __init__(self, cfg: ModelConfig, dtype=None):
        self.cfg = cfg
        self.dtype = dtype or nk.DEFAULT_DTYPE
        self.params: "OrderedDict[str, Parameter]" = OrderedDict()
        self.convs: dict[str, tuple[str, int, int]] = {}  # name -> (activation, stride, padding)
        self.cbams: dict[str, CbamParams] = {}
        self.lstms: dict[str, ConvLstmParams] = {}

    # -- construction helpers ------------------------------------------------

    def _register(self, p: Parameter) -> Parameter:
        if p.name in self.params:
            raise KeyError(f"duplicate parameter {p.name}")
        self.params[p.name] = p
        return p

    def _conv(self, rng, name, cin, cout, k=3, stride=1, act="silu"):
        fan_in = cin * k * k
        gain = SILU_GAIN if act == "silu" else 1.0
        w = rng.standard_normal((cout, cin, k, k)) * math.sqrt(gain / fan_in)
        self._register(Parameter(w.astype(self.dtype), f"{name}.w"))
        self._register(Parameter(np.zeros(cout, dtype=self.dtype), f"{name}.b"))
        self.convs[name] = (act, stride, (k - 1) // 2)

    def conv(self, name: str, x: Tensor) -> Tensor:
        act, stride, pad = self.convs[name]
        y = nk.conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"], stride, pad)
        return y if act == "none" else nk.activation(y, act)

    # -- introspection -------------------------------------------------------

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def num_parameters(self, prefix: str = "") -> int:
        return int(sum(p.data.size for n, p in self.params.items() if n.startswith(prefix)))

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.params.items())

    def load_state_dict(self, state, strict: bool = True) -> list[str]:
        """Copy matching tensors in; returns the names transferred."""
        loaded = []
        for name, arr in state.items():
            p = self.params.get(name)
            if p is None or p.data.shape != tuple(arr.shape):
                if strict:
                    raise KeyError(f"cannot load {name}: missing or shape mismatch")
                continue
            p.data[...] = arr
            loaded.append(name)
        if strict and len(loaded) != len(self.params):
            missing = sorted(set(self.params) - set(loaded))
            raise KeyError(f"state is missing {len(missing)} tensors, e.g. {missing[:3]}")
        return loaded

    def zero_grad(self) -> None:
        nk.zero_grad(self.params.values())

    # -- graph ---------------------------------------------------------------

    def features(self, x: Tensor) -> list[Tensor]:
        """Backbone + neck (+ CBAM) for one frame batch; returns P3, P4, P5 maps."""
        x = self.conv("backbone.stem", x)
        x = self.conv("backbone.b1.1", self.conv("backbone.b1.0", x))
        c3 = self.conv("backbone.b2.1", self.conv("backbone.b2.0", x))
        c4 = self.conv("backbone.b3.1", self.conv("backbone.b3.0", c3))
        c5 = self.conv("backbone.b4.1", self.conv("backbone.b4.0", c4))
        if self.cfg.cbam_in_backbone:
            c3, c4, c5 = (cbam(c, self.cbams[f"backbone.cbam.{s}"]) for c, s in zip((c3, c4, c5), SCALES))
        # top-down
        p5 = self.conv("neck.lat5", c5)
        n4 = self.conv("neck.td4", nk.concat_channels(nk.upsample_nearest2(p5), c4))
        n4l = self.conv("neck.lat4", n4)
        o3 = self.conv("neck.td3", nk.concat_channels(nk.upsample_nearest2(n4l), c3))
        # bottom-up
        o4 = self.conv("neck.bu4", nk.concat_channels(self.conv("neck.down3", o3), n4l))
        o5 = self.conv("neck.bu5", nk.concat_channels(self.conv("neck.down4", o4), p5))
        outs = [o3, o4, o5]
        if self.cfg.neck_norm_groups:
            g = self.cfg.neck_norm_groups
            outs = [nk.group_norm(o, self.params[f"neck.norm.{s}.w"], self.params[f"neck.norm.{s}.b"], g)
                    for o, s in zip(outs, SCALES)]
        if self.cfg.cbam_after_neck:
            outs = [cbam(o, self.cbams[f"cbam.{s}"]) for o, s in zip(outs, SCALES)]
        return outs

    def head(self, feats: list[Tensor]) -> list[Tensor]:
        return [self.conv(f"head.{s}", f) for f, s in zip(feats, SCALES)]

    def __call__(self, x) -> list[Tensor]:
        return forward(self, x)


def _channels(w: int):
    return {"c3": 4 * w, "c4": 8 * w, "c5": 16 * w, "o3": 4 * w, "o4": 8 * w, "o5": 16 * w}


def build_model(cfg: ModelConfig, rng: np.random.Generator | int = 0, dtype=None) -> Model:
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    m = Model(cfg, dtype)
    w = cfg.width
    ch = _channels(w)
    m._conv(rng, "backbone.stem", 3, w, 3, 2)
    m._conv(rng, "backbone.b1.0", w, 2 * w, 3, 2)
    m._conv(rng, "backbone.b1.1", 2 * w, 2 * w, 3, 1)
    m._conv(rng, "backbone.b2.0", 2 * w, 4 * w, 3, 2)
    m._conv(rng, "backbone.b2.1", 4 * w, 4 * w, 3, 1)
    m._conv(rng, "backbone.b3.0", 4 * w, 8 * w, 3, 2)
    m._conv(rng, "backbone.b3.1", 8 * w, 8 * w, 3, 1)
    m._conv(rng, "backbone.b4.0", 8 * w, 16 * w, 3, 2)
    m._conv(rng, "backbone.b4.1", 16 * w, 16 * w, 3, 1)
    m._conv(rng, "neck.lat5", 16 * w, 8 * w, 1)
    m._conv(rng, "neck.td4", 16 * w, 8 * w, 3)
    m._conv(rng, "neck.lat4", 8 * w, 4 * w, 1)
    m._conv(rng, "neck.td3", 8 * w, 4 * w, 3)
    m._conv(rng, "neck.down3", 4 * w, 4 * w, 3, 2)
    m._conv(rng, "neck.bu4", 8 * w, 8 * w, 3)
    m._conv(rng, "neck.down4", 8 * w, 8 * w, 3, 2)
    m._conv(rng, "neck.bu5", 16 * w, 16 * w, 3)
    outs = (ch["o3"], ch["o4"], ch["o5"])
    if cfg.neck_norm_groups:
        # without it, features grow unchecked and drive the ConvLSTM gates into saturation
        for s, c in zip(SCALES, outs):
            m._register(Parameter(np.ones(c, dtype=m.dtype), f"neck.norm.{s}.w"))
            m._register(Parameter(np.zeros(c, dtype=m.dtype), f"neck.norm.{s}.b"))
    if cfg.cbam_in_backbone:
        for s, c in zip(SCALES, (ch["c3"], ch["c4"], ch["c5"])):
            p = init_cbam(c, rng, cfg.cbam_reduction, cfg.cbam_kernel, f"backbone.cbam.{s}", m.dtype)
            m.cbams[f"backbone.cbam.{s}"] = p
            for q in p.parameters():
                m._register(q)
    if cfg.cbam_after_neck:
        for s, c in zip(SCALES, outs):
            p = init_cbam(c, rng, cfg.cbam_reduction, cfg.cbam_kernel, f"cbam.{s}", m.dtype)
            m.cbams[f"cbam.{s}"] = p
            for q in p.parameters():
                m._register(q)
    for s, c, on in zip(SCALES, outs, cfg.convlstm_per_scale):
        if on:
            p = init_convlstm(c, c, rng, cfg.convlstm_kernel, f"temporal.{s}", dtype=m.dtype,
                               passthrough=cfg.convlstm_passthrough)
            m.lstms[s] = p
            for q in p.parameters():
                m._register(q)
    na = 3 * cfg.num_outputs
    for s, c, stride in zip(SCALES, outs, cfg.strides):
        m._conv(rng, f"head.{s}", c, na, 1, 1, act="none")
        # small head weights plus a low objectness prior keep early losses tame
        m.params[f"head.{s}.w"].data *= 0.1
        b = m.params[f"head.{s}.b"].data.reshape(3, cfg.num_outputs)
        b[:, 4] = math.log(8.0 / (cfg.image_size / stride) ** 2)
        b[:, 5:] = math.log(0.6 / (cfg.num_classes - 0.99)) if cfg.num_classes > 1 else 0.0
    return m


def forward(model: Model, x) -> list[Tensor]:
    """Raw head maps ``(B, 3*(5+nc), H/s, W/s)`` for strides 8, 16, 32.

    Baseline takes ``(B, 3, H, W)``; temporal variants take ``(B, T, 3, H, W)``
    and emit predictions for the last frame of each window.
    """
    cfg = model.cfg
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if cfg.temporal:
        if arr.ndim != 5:
            raise ValueError(f"{cfg.variant} model expects (B, T, 3, H, W) windows, got shape {arr.shape}")
    else:
        if arr.ndim == 5 and arr.shape[1] == 1:
            arr = arr[:, 0]
        if arr.ndim != 4:
            raise ValueError(f"baseline model expects (B, 3, H, W) frames, got shape {arr.shape}")
    if arr.shape[-1] != cfg.image_size or arr.shape[-2] != cfg.image_size or arr.shape[-3] != 3:
        raise ValueError(f"expected 3x{cfg.image_size}x{cfg.image_size} frames, got {arr.shape[-3:]}")
    arr = arr.astype(model.dtype, copy=False)
    if not cfg.temporal:
        return model.head(model.features(Tensor(arr)))
    b, T = arr.shape[:2]
    # one backbone pass over all frames of all windows
    feats = model.features(Tensor(np.ascontiguousarray(arr.reshape(b * T, *arr.shape[2:]))))
    fused = []
    for s, f in zip(SCALES, feats):
        c, h, w = f.shape[1:]
        f5 = nk.reshape(f, (b, T, c, h, w))
        if s in model.lstms:
            seq = _unstack_time(f5, T)
            h = convlstm_rollout(seq, model.lstms[s])[-1].h
            # the residual keeps the unbounded current-frame features next to the tanh-bounded memory
            fused.append(nk.add(seq[-1], h) if cfg.convlstm_residual else h)
        else:
            fused.append(_unstack_time(f5, T)[-1])
    return model.head(fused)


def _unstack_time(f5: Tensor, T: int) -> list[Tensor]:
    b, _, c, h, w = f5.shape
    flat = nk.reshape(f5, (b, T * c, h, w))
    return nk.split(flat, [c] * T, axis=1)


def param_census(model: Model) -> dict[str, int]:
    groups = ("backbone", "neck", "cbam", "temporal", "head")
    return {g: model.num_parameters(g + ".") for g in groups}
