"""Two-dimensional rotary position embedding over (N, C, H, W) feature maps.

Channels are paired as (2j, 2j+1) and each pair at position (h, w) is
rotated by ``theta_j * h + theta_j * w`` with ``theta_j = 10000 ** (-2j / C)``.
Note that this angle depends on position only through ``h + w``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ShapeError

BASE = 10000.0


@dataclass(frozen=True)
class RopeTable:
    angles: np.ndarray  # (H, W, C // 2) radians

    @property
    def height(self) -> int:
        return self.angles.shape[0]

    @property
    def width(self) -> int:
        return self.angles.shape[1]

    @property
    def channels(self) -> int:
        return 2 * self.angles.shape[2]


def frequencies(channels: int) -> np.ndarray:
    j = np.arange(channels // 2)
    return 1.0 / BASE ** (2.0 * j / channels)


def build_rope_table(height: int, width: int, channels: int) -> RopeTable:
    if channels < 2 or channels % 2:
        raise ValueError(f"channel pairing requires even C >= 2, got C={channels}")
    if height < 1 or width < 1:
        raise ValueError("extents must be positive")
    theta = frequencies(channels)
    h = np.arange(height)[:, None, None]
    w = np.arange(width)[None, :, None]
    angles = theta * h + theta * w
    angles.setflags(write=False)
    return RopeTable(angles)


def _rotate(x: np.ndarray, table: RopeTable, sign: float) -> np.ndarray:
    if x.ndim != 4:
        raise ShapeError(f"apply_rope expects (N, C, H, W), got rank {x.ndim}")
    n, c, h, w = x.shape
    if (c, h, w) != (table.channels, table.height, table.width):
        raise ShapeError(
            f"tensor (C,H,W)=({c},{h},{w}) does not match table "
            f"({table.channels},{table.height},{table.width})"
        )
    ang = table.angles.transpose(2, 0, 1)  # (C/2, H, W)
    cos, sin = np.cos(ang), sign * np.sin(ang)
    even, odd = x[:, 0::2], x[:, 1::2]
    out = np.empty_like(x)
    out[:, 0::2] = cos * even - sin * odd
    out[:, 1::2] = sin * even + cos * odd
    return out


def apply_rope(x: np.ndarray, table: RopeTable) -> np.ndarray:
    return _rotate(np.asarray(x, dtype=np.float64), table, 1.0)


def apply_rope_backward(dout: np.ndarray, table: RopeTable) -> np.ndarray:
    """Rotation is orthogonal, so the gradient is the inverse rotation."""
    return _rotate(dout, table, -1.0)
