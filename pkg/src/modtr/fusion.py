"""Non-parametric fusion of the translator output with the raw input image.

All operators work on ``(..., C, H, W)`` tensors elementwise; there is no
spatial coupling. The translator output ``t`` always has three channels,
the raw input ``x`` may have one channel and is lifted by replication.
"""

from __future__ import annotations

import enum

import torch
from torch import Tensor


class FusionKind(str, enum.Enum):
    ADD = "add"
    HADAMARD = "hadamard"
    SOFTMAX = "softmax"

    @classmethod
    def parse(cls, value: "str | FusionKind") -> "FusionKind":
        if isinstance(value, FusionKind):
            return value
        aliases = {
            "add": cls.ADD,
            "sum": cls.ADD,
            "+": cls.ADD,
            "hadamard": cls.HADAMARD,
            "product": cls.HADAMARD,
            "mul": cls.HADAMARD,
            "softmax": cls.SOFTMAX,
            "softmax_weighted": cls.SOFTMAX,
            "attention": cls.SOFTMAX,
        }
        try:
            return aliases[str(value).lower()]
        except KeyError:
            raise ValueError(
                f"unknown fusion kind {value!r}; expected one of add, hadamard, softmax"
            ) from None


def broadcast_channels(x: Tensor) -> Tensor:
    """Lift a 1-channel image to 3 channels by replication.

    3-channel inputs are returned as-is (same object). The channel axis is
    the third from last, so both ``(C, H, W)`` and ``(B, C, H, W)`` work.
    """
    if x.dim() < 3:
        raise ValueError(f"expected (..., C, H, W) tensor, got shape {tuple(x.shape)}")
    channels = x.shape[-3]
    if channels == 3:
        return x
    if channels == 1:
        return x.expand(*x.shape[:-3], 3, *x.shape[-2:])
    raise ValueError(f"unsupported channel count {channels}; expected 1 or 3")


def _check_pair(t: Tensor, x: Tensor) -> None:
    if t.shape != x.shape:
        raise ValueError(f"shape mismatch: {tuple(t.shape)} vs {tuple(x.shape)}")


def fuse_add(t: Tensor, x: Tensor, clamp: bool = True) -> Tensor:
    """Residual sum, hard-clamped to the unit range unless ``clamp=False``."""
    _check_pair(t, x)
    out = t + x
    return out.clamp(0.0, 1.0) if clamp else out


def fuse_hadamard(t: Tensor, x: Tensor) -> Tensor:
    """Use ``t`` as a pixelwise gate on ``x``."""
    _check_pair(t, x)
    return t * x


def fuse_softmax_weighted(t: Tensor, x: Tensor) -> Tensor:
    """Average of ``t`` and ``x`` weighted by a two-way softmax of their values.

    Computes ``(t e^t + x e^x) / (e^t + e^x)``. Inputs are unit-range, so the
    exponentials are evaluated directly.
    """
    _check_pair(t, x)
    et = torch.exp(t)
    ex = torch.exp(x)
    return (t * et + x * ex) / (et + ex)


_OPS = {
    FusionKind.ADD: fuse_add,
    FusionKind.HADAMARD: fuse_hadamard,
    FusionKind.SOFTMAX: fuse_softmax_weighted,
}


def fuse(kind: "FusionKind | str", t: Tensor, x: Tensor) -> Tensor:
    """Broadcast ``x`` to three channels and apply the fusion named by ``kind``."""
    kind = FusionKind.parse(kind)
    if t.shape[-3] != 3:
        raise ValueError(f"translator output must have 3 channels, got {t.shape[-3]}")
    return _OPS[kind](t, broadcast_channels(x))
