"""Dense float64 array primitives with hand-written reverse-mode gradients.

Tensors are plain ``numpy.ndarray`` objects in (batch, channel, height, width)
layout.  Every differentiable primitive comes as a ``*_forward`` returning
``(out, cache)`` and a matching ``*_backward`` consuming the upstream gradient
and the cache.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.special import expit
from numpy.lib.stride_tricks import sliding_window_view

log = logging.getLogger(__name__)

DTYPE = np.float64


class ShapeError(ValueError):
    """Input rejected because of an incompatible shape."""


class NumericalError(FloatingPointError):
    """A computation produced a NaN or an infinity."""


def as_tensor(x) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=DTYPE)
    if arr.ndim > 4:
        raise ShapeError(f"tensors have rank <= 4, got rank {arr.ndim}")
    return arr


def check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values in {what}")
    return x


@dataclass
class Parameter:
    """A learnable array together with its accumulated gradient."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = as_tensor(self.value)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.value.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter {self.name} shape {self.value.shape}")
        self.grad += g


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1

    def __post_init__(self):
        if self.kernel not in (1, 3):
            raise ValueError(f"kernel must be 1 or 3, got {self.kernel}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")

    @property
    def padding(self) -> int:
        return self.kernel // 2

    def output_extent(self, n: int) -> int:
        return (n + 2 * self.padding - self.kernel) // self.stride + 1

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.kernel * self.kernel


def init_conv(name: str, spec: ConvSpec, rng: np.random.Generator) -> tuple[Parameter, Parameter]:
    """Fan-in scaled uniform weights, zero bias."""
    bound = np.sqrt(1.0 / spec.fan_in)
    w = rng.uniform(-bound, bound, size=(spec.out_channels, spec.in_channels, spec.kernel, spec.kernel))
    return Parameter(f"{name}.w", w), Parameter(f"{name}.b", np.zeros(spec.out_channels))


# ---------------------------------------------------------------- convolution

def _check_conv_input(x: np.ndarray, w: np.ndarray, spec: ConvSpec) -> None:
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects a rank-4 input, got rank {x.ndim}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"channel axis: input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    expected = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
    if w.shape != expected:
        raise ShapeError(f"weight axis: kernel shape {w.shape} != {expected}")


def _correlate(xp: np.ndarray, wmat: np.ndarray, k: int, s: int, ho: int, wo: int):
    """Valid cross-correlation of a padded input; returns (NCHW output, im2col matrix)."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    out = (cols @ wmat.T).reshape(n, ho, wo, wmat.shape[0]).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def _pad(x: np.ndarray, before: int, after: int) -> np.ndarray:
    if not before and not after:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + before + after, w + before + after))
    out[:, :, before:before + h, before:before + w] = x
    return out


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, spec: ConvSpec):
    _check_conv_input(x, w, spec)
    n, c, h, wd = x.shape
    k, s, p = spec.kernel, spec.stride, spec.padding
    ho, wo = spec.output_extent(h), spec.output_extent(wd)
    if k == 1 and s == 1:
        out = np.matmul(w[:, :, 0, 0], x.reshape(n, c, h * wd)) + b[:, None]
        return out.reshape(n, spec.out_channels, h, wd), (x, w, spec, None)
    out, cols = _correlate(_pad(x, p, p), w.reshape(spec.out_channels, -1), k, s, ho, wo)
    out += b[None, :, None, None]
    return out, (x, w, spec, cols)


def conv2d_backward(dout: np.ndarray, cache):
    x, w, spec, cols = cache
    n, c, h, wd = x.shape
    k, s, p = spec.kernel, spec.stride, spec.padding
    if cols is None:
        w2 = w[:, :, 0, 0]
        d3 = dout.reshape(n, spec.out_channels, h * wd)
        dx = np.matmul(w2.T, d3).reshape(x.shape)
        dw = np.matmul(d3, x.reshape(n, c, h * wd).transpose(0, 2, 1)).sum(axis=0)[:, :, None, None]
        return dx, dw, d3.sum(axis=(0, 2))
    ho, wo = dout.shape[2], dout.shape[3]
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, spec.out_channels)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    if s == 1:
        # dx is the correlation of the padded gradient with the flipped kernel
        wflip = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
        dx, _ = _correlate(_pad(dout, k - 1 - p, k - 1 - p), wflip, k, 1, h, wd)
        return dx, dw, db
    dcols = (d2 @ w.reshape(spec.out_channels, -1)).reshape(n, ho, wo, c, k, k)
    dxp = np.zeros((n, c, h + 2 * p, wd + 2 * p))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = np.ascontiguousarray(dxp[:, :, p:p + h, p:p + wd]) if p else dxp
    return dx, dw, db


def conv2d(x: np.ndarray, w: Parameter, b: Parameter, spec: ConvSpec) -> np.ndarray:
    """Cross-correlation with bias (forward only)."""
    return conv2d_forward(as_tensor(x), w.value, b.value, spec)[0]


# ---------------------------------------------------------------- activations

def sigmoid(x: np.ndarray) -> np.ndarray:
    # expit is overflow-safe for large |x|
    return expit(np.asarray(x, dtype=DTYPE))


def srelu(x: np.ndarray) -> np.ndarray:
    r = np.maximum(x, 0.0)
    return r * r


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "srelu":
        return srelu(np.asarray(x, dtype=DTYPE))
    if kind == "sigmoid":
        return sigmoid(np.asarray(x, dtype=DTYPE))
    raise ValueError(f"unknown activation {kind!r}")


def srelu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dout * 2.0 * np.maximum(x, 0.0)


def sigmoid_backward(dout: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient given the sigmoid *output* ``y``."""
    return dout * y * (1.0 - y)


# ---------------------------------------------------------------- resampling

def _upsample_matrix(n: int, factor: int) -> np.ndarray:
    """Row i holds the interpolation weights of output i (half-pixel centres)."""
    m = np.zeros((n * factor, n))
    src = (np.arange(n * factor) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    lam = src - i0
    rows = np.arange(n * factor)
    np.add.at(m, (rows, i0), 1.0 - lam)
    np.add.at(m, (rows, i1), lam)
    return m


def bilinear_upsample_forward(x: np.ndarray, factor: int):
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ValueError(f"upsample factor must be a positive integer, got {factor!r}")
    if x.ndim != 4:
        raise ShapeError(f"bilinear_upsample expects a rank-4 input, got rank {x.ndim}")
    if factor == 1:
        return x.copy(), (None, None)
    mh = _upsample_matrix(x.shape[2], factor)
    mw = _upsample_matrix(x.shape[3], factor)
    out = mh @ x @ mw.T
    return out, (mh, mw)


def bilinear_upsample_backward(dout: np.ndarray, cache) -> np.ndarray:
    mh, mw = cache
    if mh is None:
        return dout.copy()
    return mh.T @ dout @ mw


def bilinear_upsample(x: np.ndarray, factor: int) -> np.ndarray:
    return bilinear_upsample_forward(as_tensor(x), factor)[0]


def maxpool2_forward(x: np.ndarray):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max-pool 2x2 needs even extents, got {h}x{w}")
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def maxpool2_backward(dout: np.ndarray, cache) -> np.ndarray:
    shape, idx = cache
    n, c, h, w = shape
    blocks = np.zeros((n, c, h // 2, w // 2, 4))
    np.put_along_axis(blocks, idx[..., None], dout[..., None], axis=-1)
    return blocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(shape)


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    loss: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.worst < tol


def grad_check(
    loss_and_grads: Callable[[], float],
    params: Mapping[str, Parameter],
    eps: float = 1e-4,
    samples: int = 32,
    seed: int = 0,
    loss_only: Callable[[], float] | None = None,
) -> GradCheckReport:
    """Compare hand-written gradients with central finite differences.

    ``loss_and_grads`` must zero the gradients, run forward and backward and
    return the scalar loss, leaving analytic gradients in ``params``.  The
    optional ``loss_only`` is a cheaper forward-only evaluation used for the
    perturbed points.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    evaluate = loss_only or loss_and_grads
    loss = float(loss_and_grads())
    if not np.isfinite(loss):
        raise NumericalError("non-finite loss at the unperturbed point")
    analytic = {name: p.grad.copy() for name, p in params.items()}
    rng = np.random.default_rng(seed)
    report: dict[str, float] = {}
    for name, p in params.items():
        flat = p.value.reshape(-1)
        count = min(samples, flat.size)
        picks = rng.choice(flat.size, size=count, replace=False)
        worst = 0.0
        for idx in picks:
            orig = flat[idx]
            flat[idx] = orig + eps
            fp = float(evaluate())
            flat[idx] = orig - eps
            fm = float(evaluate())
            flat[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericalError(f"non-finite loss perturbing {name}[{idx}] by +-{eps}")
            numeric = (fp - fm) / (2 * eps)
            a = analytic[name].reshape(-1)[idx]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
        report[name] = worst
    for name, p in params.items():
        p.grad = analytic[name]
    return GradCheckReport(report, loss)
