"""ARGN policy network: stem, three mixing stages, multi-scale fusion and head.

Shapes for an H x W input with widths (C1, C2, C3)::

    stem          -> F0 (C1, H/4,  W/4)
    stage 1 + ds  -> F1 (C2, H/8,  W/8)
    stage 2 + ds  -> F2 (C3, H/16, W/16)
    stage 3 + ds  -> F3 (C1, H/32, W/32)
    fusion        -> Ff (C1, H/8,  W/8)
    head          -> 6 joint angles

The last downsample maps back to C1 so that F3 can enter the fusion sum
without its own projection.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import numerics as nx
from .numerics import ConvSpec, NumericalError, Parameter, ShapeError
from .rope import RopeTable, build_rope_table
from .spatial_mixing import (
    DECAY_MODES,
    INIT_MODES,
    KEY_MAPS,
    SpatialBlockParams,
    spatial_block_backward,
    spatial_block_forward_cached,
)

log = logging.getLogger(__name__)

N_JOINTS = 6
OPTIMIZERS = ("sgd", "adam")
HEAD_MODES = ("pool", "flatten")
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
BLOCKS_PER_STAGE = 2


@dataclass(frozen=True)
class ArchConfig:
    widths: tuple[int, int, int] = (32, 64, 128)
    patch: int = 8
    decay: str = "per_patch"
    init: str = "k"
    key_map: str = "exp"
    head: str = "flatten"
    image_size: tuple[int, int] = (128, 128)
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        if len(self.widths) != 3 or any(w < 2 or w % 2 for w in self.widths):
            raise ValueError(f"widths must be three even integers >= 2, got {self.widths}")
        if self.patch < 1:
            raise ValueError("patch size must be positive")
        if self.decay not in DECAY_MODES:
            raise ValueError(f"decay must be one of {DECAY_MODES}")
        if self.init not in INIT_MODES:
            raise ValueError(f"init must be one of {INIT_MODES}")
        if self.key_map not in KEY_MAPS:
            raise ValueError(f"key_map must be one of {KEY_MAPS}")
        if self.head not in HEAD_MODES:
            raise ValueError(f"head must be one of {HEAD_MODES}")
        if len(self.image_size) != 2 or any(v < 32 or v % 32 for v in self.image_size):
            raise ValueError(f"image_size must be two multiples of 32, got {self.image_size}")

    @property
    def head_features(self) -> int:
        """Input width of the final linear layer."""
        if self.head == "pool":
            return self.widths[0]
        h, w = self.image_size
        return self.widths[0] * (h // 8) * (w // 8)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    lr: float = 2e-4
    batch_size: int = 4
    seed: int = 0
    momentum: float = 0.0
    optimizer: str = "adam"
    arch: ArchConfig = field(default_factory=ArchConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")


class DivergenceError(NumericalError):
    def __init__(self, epoch: int, last_finite: float | None):
        super().__init__(f"training diverged at epoch {epoch}; last finite loss {last_finite}")
        self.epoch = epoch
        self.last_finite = last_finite


# ---------------------------------------------------------------- parameter groups

@dataclass
class StemParams:
    conv: tuple[Parameter, Parameter]
    scale: Parameter
    shift: Parameter

    def parameters(self) -> list[Parameter]:
        return [*self.conv, self.scale, self.shift]


@dataclass
class ChannelMixParams:
    channels: int
    cm_conv3: tuple[Parameter, Parameter]
    cm_conv1: tuple[Parameter, Parameter]

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator, prefix: str = "cmb") -> "ChannelMixParams":
        return cls(
            channels,
            nx.init_conv(f"{prefix}.cm_conv3", ConvSpec(channels, channels, 3), rng),
            nx.init_conv(f"{prefix}.cm_conv1", ConvSpec(channels, channels, 1), rng),
        )

    def parameters(self) -> list[Parameter]:
        return [*self.cm_conv3, *self.cm_conv1]


@dataclass
class FusionParams:
    conv1: tuple[Parameter, Parameter]
    conv2: tuple[Parameter, Parameter]
    alpha: Parameter

    def parameters(self) -> list[Parameter]:
        return [*self.conv1, *self.conv2, self.alpha]


@dataclass
class HeadParams:
    conv: tuple[Parameter, Parameter]
    linear_w: Parameter
    linear_b: Parameter

    def parameters(self) -> list[Parameter]:
        return [*self.conv, self.linear_w, self.linear_b]


# ---------------------------------------------------------------- operations

def _conv_back(dout, cache, pair):
    dx, dw, db = nx.conv2d_backward(dout, cache)
    pair[0].accumulate(dw)
    pair[1].accumulate(db)
    return dx


def stem_forward(image: np.ndarray, p: StemParams, width: int):
    if image.ndim != 4:
        raise ShapeError(f"expected (N, 3, H, W) images, got rank {image.ndim}")
    h, w = image.shape[2:]
    if h % 4 or w % 4:
        raise ShapeError(f"image extents {h}x{w} must be divisible by 4")
    spec = ConvSpec(image.shape[1], width, 3, stride=2)
    a, c_conv = nx.conv2d_forward(image, p.conv[0].value, p.conv[1].value, spec)
    z = a * p.scale.value[None, :, None, None] + p.shift.value[None, :, None, None]
    s = nx.srelu(z)
    out, c_pool = nx.maxpool2_forward(s)
    return out, (c_conv, a, z, c_pool)


def stem_backward(dout, cache, p: StemParams) -> np.ndarray:
    c_conv, a, z, c_pool = cache
    ds = nx.maxpool2_backward(dout, c_pool)
    dz = nx.srelu_backward(ds, z)
    p.scale.accumulate((dz * a).sum(axis=(0, 2, 3)))
    p.shift.accumulate(dz.sum(axis=(0, 2, 3)))
    da = dz * p.scale.value[None, :, None, None]
    return _conv_back(da, c_conv, p.conv)


def channel_mixing_forward(f_res: np.ndarray, p: ChannelMixParams):
    if f_res.ndim != 4 or f_res.shape[1] != p.channels:
        raise ShapeError(f"channel axis: expected {p.channels} channels, got shape {f_res.shape}")
    gz, c1 = nx.conv2d_forward(f_res, p.cm_conv1[0].value, p.cm_conv1[1].value, ConvSpec(p.channels, p.channels, 1))
    gate = nx.sigmoid(gz)
    a, c3 = nx.conv2d_forward(f_res, p.cm_conv3[0].value, p.cm_conv3[1].value, ConvSpec(p.channels, p.channels, 3))
    act = nx.srelu(a)
    return gate * act, (c1, gate, c3, a, act)


def channel_mixing_backward(dout, cache, p: ChannelMixParams) -> np.ndarray:
    c1, gate, c3, a, act = cache
    dgz = nx.sigmoid_backward(dout * act, gate)
    da = nx.srelu_backward(dout * gate, a)
    return _conv_back(dgz, c1, p.cm_conv1) + _conv_back(da, c3, p.cm_conv3)


def channel_mixing(f_res: np.ndarray, p: ChannelMixParams) -> np.ndarray:
    """``sigmoid(conv1x1(F)) * srelu(conv3x3(F))``."""
    return channel_mixing_forward(nx.as_tensor(f_res), p)[0]


def fuse_multiscale_forward(f1, f2, f3, p: FusionParams):
    h, w = f1.shape[2:]
    if f2.shape[2:] != (h // 2, w // 2) or f3.shape[2:] != (h // 4, w // 4) or h % 4 or w % 4:
        raise ShapeError(f"extents {f1.shape[2:]}, {f2.shape[2:]}, {f3.shape[2:]} are not in 1:1/2:1/4 ratio")
    width = p.conv1[0].shape[0]
    if f3.shape[1] != width:
        raise ShapeError(f"F3 has {f3.shape[1]} channels, fusion width is {width}")
    b1, c1 = nx.conv2d_forward(f1, p.conv1[0].value, p.conv1[1].value, ConvSpec(f1.shape[1], width, 1))
    u2, cu2 = nx.bilinear_upsample_forward(f2, 2)
    b2, c2 = nx.conv2d_forward(u2, p.conv2[0].value, p.conv2[1].value, ConvSpec(f2.shape[1], width, 1))
    b3, cu3 = nx.bilinear_upsample_forward(f3, 4)
    a1, a2, a3 = p.alpha.value
    out = a1 * b1 + a2 * b2 + a3 * b3
    return out, (c1, cu2, c2, cu3, b1, b2, b3)


def fuse_multiscale_backward(dout, cache, p: FusionParams):
    c1, cu2, c2, cu3, b1, b2, b3 = cache
    a1, a2, a3 = p.alpha.value
    p.alpha.accumulate(np.array([(dout * b1).sum(), (dout * b2).sum(), (dout * b3).sum()]))
    df1 = _conv_back(a1 * dout, c1, p.conv1)
    df2 = nx.bilinear_upsample_backward(_conv_back(a2 * dout, c2, p.conv2), cu2)
    df3 = nx.bilinear_upsample_backward(a3 * dout, cu3)
    return df1, df2, df3


def fuse_multiscale(f1, f2, f3, p: FusionParams) -> np.ndarray:
    return fuse_multiscale_forward(nx.as_tensor(f1), nx.as_tensor(f2), nx.as_tensor(f3), p)[0]


def action_head_forward(f_f: np.ndarray, p: HeadParams, mode: str = "pool"):
    """``linear(reduce(conv3x3(F_f)))``; ``mode`` picks the spatial reduction.

    ``pool`` averages over positions; ``flatten`` keeps every position.
    """
    if f_f.size == 0:
        raise ShapeError("empty fused feature map")
    if mode not in HEAD_MODES:
        raise ValueError(f"head mode must be one of {HEAD_MODES}")
    c = f_f.shape[1]
    a, cc = nx.conv2d_forward(f_f, p.conv[0].value, p.conv[1].value, ConvSpec(c, p.conv[0].shape[0], 3))
    reduced = a.mean(axis=(2, 3)) if mode == "pool" else a.reshape(len(a), -1)
    if reduced.shape[1] != p.linear_w.shape[1]:
        raise ShapeError(f"head expects {p.linear_w.shape[1]} features, got {reduced.shape[1]}")
    out = reduced @ p.linear_w.value.T + p.linear_b.value
    return out, (cc, a.shape, reduced, mode)


def action_head_backward(dout, cache, p: HeadParams) -> np.ndarray:
    cc, shape, reduced, mode = cache
    p.linear_w.accumulate(dout.T @ reduced)
    p.linear_b.accumulate(dout.sum(axis=0))
    dred = dout @ p.linear_w.value
    if mode == "pool":
        da = np.broadcast_to(dred[:, :, None, None] / (shape[2] * shape[3]), shape)
    else:
        da = dred.reshape(shape)
    return _conv_back(np.ascontiguousarray(da), cc, p.conv)


def action_head(f_f: np.ndarray, p: HeadParams, mode: str = "pool") -> np.ndarray:
    return action_head_forward(nx.as_tensor(f_f), p, mode)[0]


def mse_loss(a_in, a_ground) -> float:
    a_in = np.asarray(a_in, dtype=np.float64)
    a_ground = np.asarray(a_ground, dtype=np.float64)
    if a_in.shape != a_ground.shape or a_in.shape[-1] != N_JOINTS:
        raise ShapeError(f"action shapes {a_in.shape} and {a_ground.shape} must match with {N_JOINTS} joints")
    return float(np.mean((a_in - a_ground) ** 2))


# ---------------------------------------------------------------- model

class PolicyModel:
    """All learnables of one skill policy plus the forward/backward passes."""

    def __init__(self, arch: ArchConfig | None = None, seed: int = 0):
        self.arch = arch or ArchConfig()
        rng = np.random.default_rng(seed)
        c1, c2, c3 = self.arch.widths
        self.stem = StemParams(
            nx.init_conv("stem.conv", ConvSpec(self.arch.in_channels, c1, 3, stride=2), rng),
            Parameter("stem.scale", np.ones(c1)),
            Parameter("stem.shift", np.zeros(c1)),
        )
        self.blocks: list[list[tuple[SpatialBlockParams, ChannelMixParams]]] = []
        self.downsample: list[tuple[Parameter, Parameter]] = []
        outs = (c2, c3, c1)
        for s, width in enumerate(self.arch.widths):
            stage = []
            for b in range(BLOCKS_PER_STAGE):
                prefix = f"stage{s + 1}.block{b + 1}"
                stage.append((
                    SpatialBlockParams.init(width, rng, f"{prefix}.smb"),
                    ChannelMixParams.init(width, rng, f"{prefix}.cmb"),
                ))
            self.blocks.append(stage)
            self.downsample.append(nx.init_conv(f"stage{s + 1}.down", ConvSpec(width, outs[s], 3, stride=2), rng))
        self.fusion = FusionParams(
            nx.init_conv("fusion.conv1", ConvSpec(c2, c1, 1), rng),
            nx.init_conv("fusion.conv2", ConvSpec(c3, c1, 1), rng),
            Parameter("fusion.alpha", np.full(3, 1.0 / 3.0)),
        )
        fan_in = self.arch.head_features
        bound = np.sqrt(1.0 / fan_in)
        self.head = HeadParams(
            nx.init_conv("head.conv", ConvSpec(c1, c1, 3), rng),
            Parameter("head.linear.w", rng.uniform(-bound, bound, size=(N_JOINTS, fan_in))),
            Parameter("head.linear.b", np.zeros(N_JOINTS)),
        )
        self._tables: dict[tuple[int, int, int], RopeTable] = {}

    # ---- bookkeeping

    def parameters(self) -> dict[str, Parameter]:
        params: list[Parameter] = list(self.stem.parameters())
        for s, stage in enumerate(self.blocks):
            for smb, cmb in stage:
                params += smb.parameters() + cmb.parameters()
            params += list(self.downsample[s])
        params += self.fusion.parameters() + self.head.parameters()
        return {p.name: p for p in params}

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ShapeError(f"state mismatch: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {name}: stored shape {arr.shape} != architecture shape {p.shape}")
            p.value = arr.copy()
            p.zero_grad()

    def _table(self, h: int, w: int, c: int) -> RopeTable:
        key = (h, w, c)
        if key not in self._tables:
            self._tables[key] = build_rope_table(h, w, c)
        return self._tables[key]

    def stage_patch(self, extent_h: int, extent_w: int) -> int:
        patch = min(self.arch.patch, extent_h, extent_w)
        if extent_h % patch or extent_w % patch:
            raise ShapeError(f"stage extents {extent_h}x{extent_w} are not divisible by patch size {patch}")
        return patch

    def check_input(self, images: np.ndarray) -> None:
        if images.ndim != 4 or images.shape[1] != self.arch.in_channels:
            raise ShapeError(f"expected (N, {self.arch.in_channels}, H, W) images, got {images.shape}")
        h, w = images.shape[2:]
        if h % 32 or w % 32:
            raise ShapeError(f"image extents {h}x{w} must be divisible by 32 (three stride-2 stages after the stem)")
        if self.arch.head == "flatten" and (h, w) != self.arch.image_size:
            raise ShapeError(f"flatten head was built for {self.arch.image_size} images, got {h}x{w}")

    # ---- passes

    def forward(self, images: np.ndarray):
        images = nx.as_tensor(images)
        self.check_input(images)
        caches = {}
        x, caches["stem"] = stem_forward(images, self.stem, self.arch.widths[0])
        feats = []
        for s, stage in enumerate(self.blocks):
            h, w = x.shape[2:]
            patch = self.stage_patch(h, w)
            table = self._table(h, w, x.shape[1])
            for b, (smb, cmb) in enumerate(stage):
                f_res, c_s = spatial_block_forward_cached(x, smb, table, patch, self.arch.decay, self.arch.init, self.arch.key_map)
                f_c, c_c = channel_mixing_forward(f_res, cmb)
                x = f_res + f_c
                caches[(s, b)] = (c_s, c_c)
            dw, db = self.downsample[s]
            x, caches[("down", s)] = nx.conv2d_forward(x, dw.value, db.value, ConvSpec(dw.shape[1], dw.shape[0], 3, 2))
            feats.append(x)
        f_f, caches["fusion"] = fuse_multiscale_forward(*feats, self.fusion)
        out, caches["head"] = action_head_forward(f_f, self.head, self.arch.head)
        return out, caches

    def backward(self, dout: np.ndarray, caches) -> None:
        df_f = action_head_backward(dout, caches["head"], self.head)
        dfeats = list(fuse_multiscale_backward(df_f, caches["fusion"], self.fusion))
        dx = None
        for s in range(len(self.blocks) - 1, -1, -1):
            g = dfeats[s] if dx is None else dfeats[s] + dx
            dx = _conv_back(g, caches[("down", s)], self.downsample[s])
            for b in range(BLOCKS_PER_STAGE - 1, -1, -1):
                smb, cmb = self.blocks[s][b]
                c_s, c_c = caches[(s, b)]
                df_res = dx + channel_mixing_backward(dx, c_c, cmb)
                dx = spatial_block_backward(df_res, c_s, smb)
        stem_backward(dx, caches["stem"], self.stem)

    def loss_and_grads(self, images: np.ndarray, labels: np.ndarray) -> float:
        """Batch-mean MSE; gradients are reset then accumulated."""
        self.zero_grad()
        pred, caches = self.forward(images)
        labels = np.asarray(labels, dtype=np.float64).reshape(pred.shape)
        diff = pred - labels
        loss = float(np.mean(diff ** 2))
        self.backward(2.0 * diff / diff.size, caches)
        return loss

    def loss(self, images: np.ndarray, labels: np.ndarray) -> float:
        pred, _ = self.forward(images)
        return float(np.mean((pred - np.asarray(labels, dtype=np.float64).reshape(pred.shape)) ** 2))

    def features(self, images: np.ndarray) -> dict[str, np.ndarray]:
        """Intermediate maps F0..F3 and Ff, for inspection."""
        images = nx.as_tensor(images)
        self.check_input(images)
        out = {}
        x, _ = stem_forward(images, self.stem, self.arch.widths[0])
        out["F0"] = x
        feats = []
        for s, stage in enumerate(self.blocks):
            h, w = x.shape[2:]
            patch = self.stage_patch(h, w)
            table = self._table(h, w, x.shape[1])
            for smb, cmb in stage:
                f_res, _ = spatial_block_forward_cached(x, smb, table, patch, self.arch.decay, self.arch.init, self.arch.key_map)
                x = f_res + channel_mixing_forward(f_res, cmb)[0]
            dw, db = self.downsample[s]
            x = nx.conv2d_forward(x, dw.value, db.value, ConvSpec(dw.shape[1], dw.shape[0], 3, 2))[0]
            feats.append(x)
            out[f"F{s + 1}"] = x
        out["Ff"] = fuse_multiscale_forward(*feats, self.fusion)[0]
        return out


def to_batch(images) -> np.ndarray:
    """Accept one HxWx3 image or a stack of them; return (N, 3, H, W)."""
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ShapeError(f"expected HxWx3 image(s), got shape {arr.shape}")
    return np.ascontiguousarray(arr.transpose(0, 3, 1, 2))


def predict(model: PolicyModel, image) -> np.ndarray:
    """Initial action for one HxWx3 image (or a stack)."""
    batch = to_batch(image)
    out, _ = model.forward(batch)
    nx.check_finite(out, "predicted action")
    return out[0] if np.ndim(image) == 3 else out


@dataclass
class TrainResult:
    model: PolicyModel
    losses: list[float]
    config: TrainConfig


def train_policy(images, labels, cfg: TrainConfig, callback=None) -> TrainResult:
    """Mini-batch Adam (or plain / momentum SGD) on the action MSE.

    ``losses[e]`` is the training-set loss measured after epoch ``e``.
    """
    x = to_batch(images)
    y = np.asarray(labels, dtype=np.float64).reshape(len(x), N_JOINTS)
    if len(x) == 0:
        raise ValueError("empty training set")
    model = PolicyModel(cfg.arch, seed=cfg.seed)
    params = model.parameters()
    velocity = {name: np.zeros_like(p.value) for name, p in params.items()}
    second = {name: np.zeros_like(p.value) for name, p in params.items()}
    step = 0
    order_rng = np.random.default_rng(cfg.seed + 1)
    losses: list[float] = []
    last = None
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(len(x))
        for start in range(0, len(x), cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            loss = model.loss_and_grads(x[idx], y[idx])
            if not np.isfinite(loss):
                raise DivergenceError(epoch, last)
            step += 1
            for name, p in params.items():
                if cfg.optimizer == "adam":
                    b1, b2 = ADAM_BETAS
                    velocity[name] = b1 * velocity[name] + (1 - b1) * p.grad
                    second[name] = b2 * second[name] + (1 - b2) * p.grad ** 2
                    m_hat = velocity[name] / (1 - b1 ** step)
                    v_hat = second[name] / (1 - b2 ** step)
                    p.value -= cfg.lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
                elif cfg.momentum:
                    velocity[name] = cfg.momentum * velocity[name] + p.grad
                    p.value -= cfg.lr * velocity[name]
                else:
                    p.value -= cfg.lr * p.grad
        epoch_loss = evaluate_loss(model, x, y)
        if not np.isfinite(epoch_loss):
            raise DivergenceError(epoch, last)
        losses.append(epoch_loss)
        last = epoch_loss
        log.info("epoch %d loss %.6g", epoch, epoch_loss)
        if callback is not None:
            callback(epoch, epoch_loss, model)
    return TrainResult(model, losses, cfg)


def evaluate_loss(model: PolicyModel, batch: np.ndarray, labels: np.ndarray, chunk: int = 16) -> float:
    total = 0.0
    for start in range(0, len(batch), chunk):
        pred, _ = model.forward(batch[start:start + chunk])
        total += float(np.sum((pred - labels[start:start + chunk]) ** 2))
    return total / labels.size


def arch_to_dict(arch: ArchConfig) -> dict:
    d = asdict(arch)
    d["widths"] = list(arch.widths)
    d["image_size"] = list(arch.image_size)
    return d


def arch_from_dict(d: dict) -> ArchConfig:
    d = dict(d)
    d["widths"] = tuple(d["widths"])
    if "image_size" in d:
        d["image_size"] = tuple(d["image_size"])
    return replace(ArchConfig(), **d)
