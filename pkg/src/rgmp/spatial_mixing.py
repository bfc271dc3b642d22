"""Spatial mixing block: adaptive decay, K/V/R projection and the WKV scan.

The scan walks the P x P patches of a feature map in row-major order over the
patch grid and keeps two decayed memories per patch element::

    n_i = n_{i-1} * exp(-w_i) + k_i * v_i
    d_i = d_{i-1} * exp(-w_i) + k_i
    wkv_i = (n_i + e^u * k_i * v_i) / (d_i + e^u * k_i)

with ``n_0 = d_0 = k_0``.

Inside the block the scan receives ``exp(K)`` rather than the raw key map
(``key_map="exp"``): positive keys keep every denominator positive, whereas
signed keys let it pass arbitrarily close to zero.  ``key_map="identity"``
feeds the raw keys.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ConvSpec, NumericalError, Parameter, ShapeError
from .rope import RopeTable, apply_rope, apply_rope_backward

DEN_FLOOR = 1e-8
DECAY_MODES = ("per_patch", "shared")
INIT_MODES = ("k", "kv")
KEY_MAPS = ("exp", "identity")


@dataclass
class SpatialBlockParams:
    channels: int
    adm_conv3: tuple[Parameter, Parameter]
    adm_conv1: tuple[Parameter, Parameter]
    k_proj: tuple[Parameter, Parameter]
    v_proj: tuple[Parameter, Parameter]
    r_proj: tuple[Parameter, Parameter]
    gate_conv1: tuple[Parameter, Parameter]
    u_raw: Parameter

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator, prefix: str = "smb") -> "SpatialBlockParams":
        c3 = ConvSpec(channels, channels, 3)
        c1 = ConvSpec(channels, channels, 1)
        return cls(
            channels=channels,
            adm_conv3=nx.init_conv(f"{prefix}.adm_conv3", c3, rng),
            adm_conv1=nx.init_conv(f"{prefix}.adm_conv1", c1, rng),
            k_proj=nx.init_conv(f"{prefix}.k_proj", c1, rng),
            v_proj=nx.init_conv(f"{prefix}.v_proj", c1, rng),
            r_proj=nx.init_conv(f"{prefix}.r_proj", c1, rng),
            gate_conv1=nx.init_conv(f"{prefix}.gate_conv1", c1, rng),
            u_raw=Parameter(f"{prefix}.u_raw", np.zeros(channels)),
        )

    @classmethod
    def zeros(cls, channels: int, prefix: str = "smb") -> "SpatialBlockParams":
        p = cls.init(channels, np.random.default_rng(0), prefix)
        for param in p.parameters():
            param.value[...] = 0.0
        return p

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        for pair in (self.adm_conv3, self.adm_conv1, self.k_proj, self.v_proj, self.r_proj, self.gate_conv1):
            out.extend(pair)
        out.append(self.u_raw)
        return out

    @property
    def u(self) -> np.ndarray:
        """Effective position compensation, squashed into (0, 1)."""
        return nx.sigmoid(self.u_raw.value)

    @property
    def spec3(self) -> ConvSpec:
        return ConvSpec(self.channels, self.channels, 3)

    @property
    def spec1(self) -> ConvSpec:
        return ConvSpec(self.channels, self.channels, 1)


def _check_block_input(f0: np.ndarray, p: SpatialBlockParams) -> None:
    if f0.ndim != 4:
        raise ShapeError(f"expected (N, C, H, W), got rank {f0.ndim}")
    if f0.shape[1] != p.channels:
        raise ShapeError(f"channel axis: input has {f0.shape[1]} channels, block has {p.channels}")


def _conv(x, pair, spec):
    return nx.conv2d_forward(x, pair[0].value, pair[1].value, spec)


def _conv_back(dout, cache, pair):
    dx, dw, db = nx.conv2d_backward(dout, cache)
    pair[0].accumulate(dw)
    pair[1].accumulate(db)
    return dx


# ---------------------------------------------------------------- decay map

def adm_decay_forward(f0: np.ndarray, p: SpatialBlockParams):
    _check_block_input(f0, p)
    a, c3 = _conv(f0, p.adm_conv3, p.spec3)
    s = nx.srelu(a)
    z, c1 = _conv(s, p.adm_conv1, p.spec1)
    w = nx.sigmoid(z)
    return w, (a, c3, c1, w)


def adm_decay_backward(dw: np.ndarray, cache, p: SpatialBlockParams) -> np.ndarray:
    a, c3, c1, w = cache
    dz = nx.sigmoid_backward(dw, w)
    ds = _conv_back(dz, c1, p.adm_conv1)
    da = nx.srelu_backward(ds, a)
    return _conv_back(da, c3, p.adm_conv3)


def adm_decay(f0: np.ndarray, p: SpatialBlockParams) -> np.ndarray:
    """Content-adaptive decay map in (0, 1), same shape as ``f0``."""
    return adm_decay_forward(nx.as_tensor(f0), p)[0]


# ---------------------------------------------------------------- projections

def project_kvr_forward(f0: np.ndarray, p: SpatialBlockParams):
    _check_block_input(f0, p)
    k, ck = _conv(f0, p.k_proj, p.spec1)
    v, cv = _conv(f0, p.v_proj, p.spec1)
    r, cr = _conv(f0, p.r_proj, p.spec1)
    return (k, v, r), (ck, cv, cr)


def project_kvr_backward(dk, dv, dr, cache, p: SpatialBlockParams) -> np.ndarray:
    ck, cv, cr = cache
    dx = _conv_back(dk, ck, p.k_proj)
    dx += _conv_back(dv, cv, p.v_proj)
    dx += _conv_back(dr, cr, p.r_proj)
    return dx


def project_kvr(f0: np.ndarray, p: SpatialBlockParams):
    return project_kvr_forward(nx.as_tensor(f0), p)[0]


# ---------------------------------------------------------------- patches

def to_patches(x: np.ndarray, patch: int) -> np.ndarray:
    """(N, C, H, W) -> (N, L, C, P, P), patches in row-major grid order."""
    n, c, h, w = x.shape
    if patch < 1 or h % patch or w % patch:
        raise ShapeError(f"spatial extents {h}x{w} must be divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    t = x.reshape(n, c, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(t.reshape(n, gh * gw, c, patch, patch))


def from_patches(seq: np.ndarray, height: int, width: int) -> np.ndarray:
    n, length, c, patch, _ = seq.shape
    gh, gw = height // patch, width // patch
    if gh * gw != length:
        raise ShapeError(f"{length} patches cannot tile {height}x{width} with patch {patch}")
    t = seq.reshape(n, gh, gw, c, patch, patch).transpose(0, 3, 1, 4, 2, 5)
    return np.ascontiguousarray(t.reshape(n, c, height, width))


# ---------------------------------------------------------------- scan

def _floor(den: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    small = np.abs(den) < DEN_FLOOR
    out = np.where(small, np.where(den < 0, -DEN_FLOOR, DEN_FLOOR), den)
    return out, small


def wkv_scan_forward(k: np.ndarray, v: np.ndarray, w: np.ndarray, u: np.ndarray, init: str = "k"):
    """Scan over axis 1 of ``(N, L, C, P, P)`` sequences.

    ``w`` is broadcast against ``k``; ``u`` is per channel.
    """
    if k.shape != v.shape:
        raise ShapeError(f"k {k.shape} and v {v.shape} differ")
    if k.ndim != 5:
        raise ShapeError(f"expected (N, L, C, P, P) sequences, got rank {k.ndim}")
    if w.ndim != 5 or w.shape[1] not in (1, k.shape[1]):
        raise ShapeError(f"decay patch count {w.shape[1] if w.ndim == 5 else '?'} != {k.shape[1]}")
    if init not in INIT_MODES:
        raise ValueError(f"init must be one of {INIT_MODES}")
    w = np.broadcast_to(w, k.shape)
    length = k.shape[1]
    eu = np.exp(np.asarray(u, dtype=np.float64)).reshape(-1, 1, 1)
    decay = np.exp(-w)
    kv = k * v
    n_mem = np.empty_like(k)
    d_mem = np.empty_like(k)
    n_mem[:, 0] = kv[:, 0] if init == "kv" else k[:, 0]
    d_mem[:, 0] = k[:, 0]
    for i in range(1, length):
        n_mem[:, i] = n_mem[:, i - 1] * decay[:, i] + kv[:, i]
        d_mem[:, i] = d_mem[:, i - 1] * decay[:, i] + k[:, i]
    num = n_mem + eu * kv
    den, clamped = _floor(d_mem + eu * k)
    out = num / den
    if not np.all(np.isfinite(out)):
        bad = int(np.argwhere(~np.isfinite(out))[0][1])
        raise NumericalError(f"non-finite WKV value at scan step {bad}")
    return out, (k, v, decay, eu, n_mem, d_mem, num, den, clamped, init)


def wkv_scan_backward(dout: np.ndarray, cache):
    """Returns gradients w.r.t. (k, v, w, u)."""
    k, v, decay, eu, n_mem, d_mem, num, den, clamped, init = cache
    length = k.shape[1]
    dnum = dout / den
    dden = np.where(clamped, 0.0, -dout * num / (den * den))
    dk = dnum * eu * v + dden * eu
    dv = dnum * eu * k
    deu = (dnum * k * v + dden * k).sum(axis=(0, 1, 3, 4))
    dw = np.zeros_like(k)
    gn = np.zeros_like(k[:, 0])
    gd = np.zeros_like(k[:, 0])
    for i in range(length - 1, 0, -1):
        gn = dnum[:, i] + gn
        gd = dden[:, i] + gd
        dk[:, i] += gn * v[:, i] + gd
        dv[:, i] += gn * k[:, i]
        ddecay = gn * n_mem[:, i - 1] + gd * d_mem[:, i - 1]
        dw[:, i] = -ddecay * decay[:, i]
        gn = gn * decay[:, i]
        gd = gd * decay[:, i]
    gn = dnum[:, 0] + gn
    gd = dden[:, 0] + gd
    if init == "kv":
        dk[:, 0] += gn * v[:, 0] + gd
        dv[:, 0] += gn * k[:, 0]
    else:
        dk[:, 0] += gn + gd
    du = deu * eu.reshape(-1)
    return dk, dv, dw, du


def wkv_scan(k: np.ndarray, v: np.ndarray, w: np.ndarray, u: np.ndarray, init: str = "k") -> np.ndarray:
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if w.shape[:2] != k.shape[:2] and not (w.ndim == 5 and w.shape[1] == 1):
        raise ShapeError(f"patch counts differ: k has {k.shape[1]}, decay has {w.shape[1]}")
    return wkv_scan_forward(k, v, w, u, init)[0]


def wkv_unrolled(k: np.ndarray, v: np.ndarray, w: np.ndarray, u: np.ndarray, init: str = "k") -> np.ndarray:
    """Closed-form WKV: every memory written as an explicit decayed sum.

    ``n_i = sum_{j<=i} exp(-(S_i - S_j)) * c_j`` with ``S_i = w_1 + ... + w_i``
    and ``c_0`` the initial memory.  No recursion, so it serves as an oracle
    for :func:`wkv_scan`.
    """
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    w = np.broadcast_to(np.asarray(w, dtype=np.float64), k.shape).copy()
    w[:, 0] = 0.0
    s_cum = np.cumsum(w, axis=1)
    length = k.shape[1]
    # lag[i, j] = S_i - S_j for j <= i
    lag = s_cum[:, :, None] - s_cum[:, None, :]
    mask = np.tril(np.ones((length, length), dtype=bool)).reshape(1, length, length, 1, 1, 1)
    weights = np.where(mask, np.exp(-np.where(mask, lag, 0.0)), 0.0)
    kv = k * v
    n_src = kv.copy()
    if init == "k":
        n_src[:, 0] = k[:, 0]
    n = np.einsum("nij...,nj...->ni...", weights, n_src)
    d = np.einsum("nij...,nj...->ni...", weights, k)
    eu = np.exp(np.asarray(u, dtype=np.float64)).reshape(-1, 1, 1)
    den, _ = _floor(d + eu * k)
    return (n + eu * kv) / den


# ---------------------------------------------------------------- block

def spatial_block_forward_cached(
    f0: np.ndarray,
    p: SpatialBlockParams,
    table: RopeTable,
    patch: int,
    decay: str = "per_patch",
    init: str = "k",
    key_map: str = "exp",
):
    _check_block_input(f0, p)
    n, c, h, w = f0.shape
    if h % patch or w % patch:
        raise ShapeError(f"spatial extents {h}x{w} must be divisible by patch size {patch}")
    if decay not in DECAY_MODES:
        raise ValueError(f"decay must be one of {DECAY_MODES}")
    if key_map not in KEY_MAPS:
        raise ValueError(f"key_map must be one of {KEY_MAPS}")
    wmap, c_adm = adm_decay_forward(f0, p)
    (k, v, r), c_kvr = project_kvr_forward(f0, p)
    kr = apply_rope(k, table)
    if key_map == "exp":
        kr = np.exp(kr)
    vr = apply_rope(v, table)
    kp, vp = to_patches(kr, patch), to_patches(vr, patch)
    if decay == "shared":
        wp = wmap.mean(axis=(2, 3))[:, None, :, None, None]
    else:
        wp = to_patches(wmap, patch)
    u = p.u
    scan, c_scan = wkv_scan_forward(kp, vp, wp, u, init)
    wkv = from_patches(scan, h, w)
    gz, c_gate = _conv(r, p.gate_conv1, p.spec1)
    gate = nx.sigmoid(gz)
    out = f0 + gate * wkv
    cache = (c_adm, c_kvr, c_scan, c_gate, gate, wkv, table, patch, decay, u, (h, w), kr if key_map == "exp" else None)
    return out, cache


def spatial_block_backward(dout: np.ndarray, cache, p: SpatialBlockParams) -> np.ndarray:
    c_adm, c_kvr, c_scan, c_gate, gate, wkv, table, patch, decay, u, (h, w), k_pos = cache
    df0 = dout.copy()
    dgate = dout * wkv
    dwkv = dout * gate
    dgz = nx.sigmoid_backward(dgate, gate)
    dr = _conv_back(dgz, c_gate, p.gate_conv1)
    dkp, dvp, dwp, du = wkv_scan_backward(to_patches(dwkv, patch), c_scan)
    p.u_raw.accumulate(du * u * (1.0 - u))
    if decay == "shared":
        dwmap = np.broadcast_to(dwp.sum(axis=(1, 3, 4))[:, :, None, None] / (h * w), (dout.shape)).copy()
    else:
        dwmap = from_patches(dwp, h, w)
    dk = from_patches(dkp, h, w)
    if k_pos is not None:
        dk = dk * k_pos
    dk = apply_rope_backward(dk, table)
    dv = apply_rope_backward(from_patches(dvp, h, w), table)
    df0 += project_kvr_backward(dk, dv, dr, c_kvr, p)
    df0 += adm_decay_backward(dwmap, c_adm, p)
    return df0


def spatial_block_forward(
    f0: np.ndarray,
    p: SpatialBlockParams,
    table: RopeTable,
    patch: int = 16,
    decay: str = "per_patch",
    init: str = "k",
    key_map: str = "exp",
) -> np.ndarray:
    """``F0 + sigmoid(gate(R)) * WKV``; output has the shape of ``f0``."""
    return spatial_block_forward_cached(nx.as_tensor(f0), p, table, patch, decay, init, key_map)[0]
