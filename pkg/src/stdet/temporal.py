"""ConvLSTM cell and left-to-right roll-out over a frame window."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .numkit import Parameter, Tensor

GATES = ("i", "f", "o", "c")


@dataclass
class ConvLstmParams:
    wx: dict[str, Parameter]  # gate -> (Ch, Cin, k, k)
    wh: dict[str, Parameter]  # gate -> (Ch, Ch, k, k)
    b: dict[str, Parameter]  # gate -> (Ch,)

    @property
    def hidden(self) -> int:
        return self.wx["i"].shape[0]

    @property
    def in_channels(self) -> int:
        return self.wx["i"].shape[1]

    @property
    def kernel_size(self) -> int:
        return self.wx["i"].shape[-1]

    def parameters(self) -> list[Parameter]:
        return [d[g] for d in (self.wx, self.wh, self.b) for g in GATES]


@dataclass
class ConvLstmState:
    h: Tensor
    c: Tensor


def init_convlstm(in_channels: int, hidden: int, rng: np.random.Generator, kernel_size: int = 3,
                  prefix: str = "convlstm", forget_bias: float = 1.0, dtype=None,
                  passthrough: float = 0.0) -> ConvLstmParams:
    """Xavier-style gate kernels; forget bias defaults to 1.

    ``passthrough > 0`` starts the cell close to forwarding its current
    input: random kernels shrink tenfold, the candidate kernel gets an
    identity centre tap, input and output gates open with bias
    ``passthrough`` and the forget gate closes with ``-passthrough``.
    Needs ``in_channels == hidden``.
    """
    if kernel_size % 2 != 1:
        raise ValueError(f"ConvLSTM kernel size must be odd, got {kernel_size}")
    if passthrough and in_channels != hidden:
        raise ValueError("pass-through init needs in_channels == hidden")
    dtype = dtype or nk.DEFAULT_DTYPE
    k2 = kernel_size * kernel_size
    std = np.sqrt(1.0 / ((in_channels + hidden) * k2))
    wx, wh, b = {}, {}, {}
    for g in GATES:
        wx[g] = Parameter((rng.standard_normal((hidden, in_channels, kernel_size, kernel_size)) * std).astype(dtype),
                          f"{prefix}.wx_{g}")
        wh[g] = Parameter((rng.standard_normal((hidden, hidden, kernel_size, kernel_size)) * std).astype(dtype),
                          f"{prefix}.wh_{g}")
        b[g] = Parameter(np.full(hidden, forget_bias if g == "f" else 0.0, dtype=dtype), f"{prefix}.b_{g}")
    if passthrough:
        mid = kernel_size // 2
        for g in GATES:
            wx[g].data *= 0.1
            wh[g].data *= 0.1
        wx["c"].data[np.arange(hidden), np.arange(hidden), mid, mid] += 1.0
        b["i"].data[:] = passthrough
        b["o"].data[:] = passthrough
        b["f"].data[:] = -passthrough
    return ConvLstmParams(wx, wh, b)


def zero_state(x: Tensor, p: ConvLstmParams) -> ConvLstmState:
    b, _, h, w = x.shape
    z = np.zeros((b, p.hidden, h, w), dtype=x.dtype)
    return ConvLstmState(Tensor(z), Tensor(z.copy()))


def convlstm_cell(x: Tensor, state: ConvLstmState, p: ConvLstmParams) -> ConvLstmState:
    if x.ndim != 4 or x.shape[1] != p.in_channels:
        raise nk.ShapeError(f"ConvLSTM expects {p.in_channels} input channels, got {x.shape}")
    if state.h.shape != state.c.shape:
        raise nk.ShapeError(f"state h {state.h.shape} and c {state.c.shape} differ")
    if state.h.shape != (x.shape[0], p.hidden) + x.shape[2:]:
        raise nk.ShapeError(f"state {state.h.shape} does not match input {x.shape} / hidden {p.hidden}")
    pad = (p.kernel_size - 1) // 2
    ch = p.hidden
    # one convolution per operand with all four gate kernels stacked
    wx = nk.concat([p.wx[g] for g in GATES], axis=0)
    wh = nk.concat([p.wh[g] for g in GATES], axis=0)
    bias = nk.concat([p.b[g] for g in GATES], axis=0)
    z = nk.add(nk.conv2d(x, wx, bias, 1, pad), nk.conv2d(state.h, wh, None, 1, pad))
    zi, zf, zo, zc = nk.split(z, [ch] * 4, axis=1)
    i, f, o = nk.sigmoid(zi), nk.sigmoid(zf), nk.sigmoid(zo)
    g = nk.tanh(zc)
    c = nk.add(nk.mul(f, state.c), nk.mul(i, g))
    h = nk.mul(o, nk.tanh(c))
    return ConvLstmState(h, c)


def convlstm_rollout(seq, p: ConvLstmParams, init: ConvLstmState | None = None, cell=convlstm_cell):
    """Fold the cell over ``seq``; returns every intermediate state."""
    if len(seq) == 0:
        raise ValueError("ConvLSTM roll-out needs at least one frame")
    shape = seq[0].shape
    for x in seq[1:]:
        if x.shape != shape:
            raise nk.ShapeError(f"frames differ in shape: {shape} vs {x.shape}")
    state = init if init is not None else zero_state(seq[0], p)
    states = []
    for x in seq:
        state = cell(x, state, p)
        states.append(state)
    return states
