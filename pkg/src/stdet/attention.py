"""CBAM: channel attention followed by spatial attention."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .numkit import Parameter, Tensor


@dataclass
class CbamParams:
    mlp_w1: Parameter  # (C/r, C)
    mlp_w2: Parameter  # (C, C/r)
    spatial_kernel: Parameter  # (1, 2, k, k)
    reduction: int = 16
    hidden_act: str = "relu"

    @property
    def channels(self) -> int:
        return self.mlp_w1.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.spatial_kernel.shape[-1]

    def parameters(self) -> list[Parameter]:
        return [self.mlp_w1, self.mlp_w2, self.spatial_kernel]


def hidden_width(channels: int, reduction: int) -> int:
    return max(1, channels // max(1, reduction))


def init_cbam(channels: int, rng: np.random.Generator, reduction: int = 16, kernel_size: int = 7,
              prefix: str = "cbam", dtype=None) -> CbamParams:
    if kernel_size % 2 != 1:
        raise ValueError(f"spatial kernel size must be odd, got {kernel_size}")
    dtype = dtype or nk.DEFAULT_DTYPE
    hid = hidden_width(channels, reduction)

    def he(shape, fan_in):
        return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)

    return CbamParams(
        mlp_w1=Parameter(he((hid, channels), channels), f"{prefix}.mlp_w1"),
        mlp_w2=Parameter(he((channels, hid), hid), f"{prefix}.mlp_w2"),
        spatial_kernel=Parameter(he((1, 2, kernel_size, kernel_size), 2 * kernel_size**2) * 0.5,
                                 f"{prefix}.spatial_kernel"),
        reduction=reduction,
    )


def _check(F: Tensor, p: CbamParams) -> None:
    if F.ndim != 4:
        raise nk.ShapeError(f"CBAM expects NCHW features, got {F.shape}")
    if F.shape[1] != p.channels:
        raise nk.ShapeError(f"CBAM built for {p.channels} channels, got {F.shape[1]}")


def _mlp(v: Tensor, p: CbamParams) -> Tensor:
    return nk.linear(nk.activation(nk.linear(v, p.mlp_w1), p.hidden_act), p.mlp_w2)


def channel_attention(F: Tensor, p: CbamParams) -> Tensor:
    """Per-channel gate ``(B, C, 1, 1)`` from avg- and max-pooled descriptors."""
    _check(F, p)
    b, c = F.shape[:2]
    avg = nk.reshape(nk.global_pool(F, "avg"), (b, c))
    mx = nk.reshape(nk.global_pool(F, "max"), (b, c))
    logits = nk.add(_mlp(avg, p), _mlp(mx, p))
    return nk.reshape(nk.sigmoid(logits), (b, c, 1, 1))


def spatial_attention(F: Tensor, p: CbamParams) -> Tensor:
    """Per-location gate ``(B, 1, H, W)`` from channel-pooled maps."""
    _check(F, p)
    pooled = nk.concat_channels(nk.channel_reduce(F, "avg"), nk.channel_reduce(F, "max"))
    k = p.kernel_size
    return nk.sigmoid(nk.conv2d(pooled, p.spatial_kernel, None, stride=1, padding=(k - 1) // 2))


def cbam(F: Tensor, p: CbamParams) -> Tensor:
    refined = nk.mul(F, channel_attention(F, p))
    return nk.mul(refined, spatial_attention(refined, p))
