"""Synthetic demonstrations, dataset persistence and policy evaluation.

A scene is a filled disk on a noisy textured background.  Its joint label
comes from a fixed analytic map of the disk centre (normalised x, y)::

    j1 = pi   * (x - 0.5)
    j2 = pi/4 * (y - 0.5)
    j3 = pi/6 * x * y
    j4 = pi/8 * (x - y)
    j5 = pi/3 * y
    j6 = 0
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from PIL import Image

from . import numerics as nx
from .argn import N_JOINTS, ArchConfig, PolicyModel, predict, to_batch
from .gmm import GmmParams, refine
from .gss import Skill
from .spatial_mixing import INIT_MODES, wkv_scan, wkv_unrolled

# Fixed table-top placement slots as normalised (x, y).  Shared by every
# dataset so that train and test scenes come from the same workspace.
SLOTS = ((0.25, 0.3), (0.5, 0.3), (0.75, 0.3), (0.25, 0.7), (0.5, 0.7), (0.75, 0.7))

SKILL_COLORS = {
    Skill.SIDE_GRASP: (0.85, 0.35, 0.1),
    Skill.LIFT_UP: (0.15, 0.7, 0.25),
    Skill.TOP_PINCH: (0.2, 0.3, 0.9),
}


def kinematic_map(center: Sequence[float], dims: Sequence[int]) -> np.ndarray:
    """Joint angles (radians) for a target centred at pixel ``center`` in a ``(W, H)`` image."""
    cx, cy = float(center[0]), float(center[1])
    width, height = dims
    if not (0 <= cx <= width and 0 <= cy <= height):
        raise ValueError(f"center ({cx}, {cy}) lies outside the {width}x{height} image")
    x, y = cx / width, cy / height
    return np.array([
        math.pi * (x - 0.5),
        math.pi / 4 * (y - 0.5),
        math.pi / 6 * (x * y),
        math.pi / 8 * (x - y),
        math.pi / 3 * y,
        0.0,
    ])


@dataclass(frozen=True)
class SceneSpec:
    """How synthetic scenes are drawn.

    ``layout="slots"`` places each target at one of the fixed ``SLOTS`` chosen
    uniformly at random, displaced by up to ``jitter`` pixels per axis;
    ``layout="uniform"`` draws the centre uniformly inside the margin.
    """

    width: int = 128
    height: int = 128
    radius_range: tuple[float, float] = (6.0, 12.0)
    noise: float = 0.08
    seed: int = 0
    layout: str = "slots"
    jitter: float = 0.0

    def __post_init__(self):
        lo, hi = self.radius_range
        if not 0 < lo <= hi or 2 * hi >= min(self.width, self.height):
            raise ValueError(f"radius range {self.radius_range} does not fit a {self.width}x{self.height} image")
        if self.layout not in ("slots", "uniform"):
            raise ValueError(f"unknown layout {self.layout!r}")
        if self.noise < 0 or self.jitter < 0:
            raise ValueError("noise and jitter must be non-negative")


@dataclass
class Demonstration:
    joints: np.ndarray
    image: np.ndarray  # H x W x 3 in [0, 1]
    center: tuple[float, float]


@dataclass
class Dataset:
    demos: list[Demonstration]
    skill: Skill = Skill.SIDE_GRASP
    seed: int = 0
    capacity: int | None = None

    def __post_init__(self):
        if self.capacity is None:
            self.capacity = len(self.demos)
        if len(self.demos) > self.capacity:
            raise ValueError(f"{len(self.demos)} demonstrations exceed capacity {self.capacity}")
        shapes = {d.image.shape for d in self.demos}
        if len(shapes) > 1:
            raise ValueError(f"images have mixed extents {shapes}")

    def __len__(self) -> int:
        return len(self.demos)

    @property
    def images(self) -> np.ndarray:
        return np.stack([d.image for d in self.demos])

    @property
    def labels(self) -> np.ndarray:
        return np.stack([d.joints for d in self.demos])


def _render(spec: SceneSpec, center, radius, color, rng) -> np.ndarray:
    h, w = spec.height, spec.width
    # low-frequency texture plus per-pixel noise
    coarse = rng.uniform(-1, 1, size=(h // 16 + 1, w // 16 + 1, 3))
    texture = np.kron(coarse, np.ones((16, 16, 1)))[:h, :w]
    img = 0.45 + 0.5 * spec.noise * texture + spec.noise * rng.uniform(-1, 1, size=(h, w, 3))
    yy, xx = np.mgrid[0:h, 0:w]
    inside = (xx + 0.5 - center[0]) ** 2 + (yy + 0.5 - center[1]) ** 2 <= radius ** 2
    img[inside] = color
    # quantise to 8 bits so PNG storage is lossless
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def _draw_center(spec: SceneSpec, rng: np.random.Generator) -> tuple[float, float]:
    margin = spec.radius_range[1]
    if spec.layout == "uniform":
        return (float(rng.uniform(margin, spec.width - margin)), float(rng.uniform(margin, spec.height - margin)))
    sx, sy = SLOTS[int(rng.integers(len(SLOTS)))]
    dx, dy = rng.uniform(-spec.jitter, spec.jitter, size=2) if spec.jitter else (0.0, 0.0)
    cx = min(max(sx * spec.width + dx, margin), spec.width - margin)
    cy = min(max(sy * spec.height + dy, margin), spec.height - margin)
    return (float(cx), float(cy))


def generate_dataset(n: int, spec: SceneSpec | None = None, skill: Skill = Skill.SIDE_GRASP) -> Dataset:
    spec = spec or SceneSpec()
    if n < 1:
        raise ValueError(f"need at least one demonstration, got n={n}")
    color = SKILL_COLORS[Skill(skill)]
    demos = []
    for child in np.random.SeedSequence(spec.seed).spawn(n):
        rng = np.random.default_rng(child)
        center = _draw_center(spec, rng)
        radius = float(rng.uniform(*spec.radius_range))
        image = _render(spec, center, radius, color, rng)
        demos.append(Demonstration(kinematic_map(center, (spec.width, spec.height)), image, center))
    return Dataset(demos, Skill(skill), spec.seed, n)


# ---------------------------------------------------------------- persistence

def save_dataset(ds: Dataset, directory: str | Path) -> Path:
    """Write ``manifest.jsonl`` plus one PNG per sample."""
    out = Path(directory)
    (out / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, d in enumerate(ds.demos):
        rel = f"images/{i:05d}.png"
        pixels = np.round(d.image * 255.0).astype(np.uint8)
        Image.fromarray(pixels, mode="RGB").save(out / rel, optimize=False)
        lines.append(json.dumps({
            "image": rel,
            "joints": [float(j) for j in d.joints],
            "center": [float(c) for c in d.center],
            "skill": ds.skill.value,
        }))
    meta = {"seed": ds.seed, "capacity": ds.capacity, "skill": ds.skill.value, "count": len(ds)}
    (out / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    (out / "dataset.json").write_text(json.dumps(meta, indent=2) + "\n")
    return out


def load_dataset(directory: str | Path) -> Dataset:
    root = Path(directory)
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.jsonl in {root}")
    meta_path = root / "dataset.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    demos = []
    skill = Skill(meta.get("skill", Skill.SIDE_GRASP.value))
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        with Image.open(root / rec["image"]) as im:
            pixels = np.asarray(im.convert("RGB"), dtype=np.float64)
        demos.append(Demonstration(np.array(rec["joints"], dtype=np.float64), pixels / 255.0, tuple(rec["center"])))
        skill = Skill(rec.get("skill", skill.value))
    return Dataset(demos, skill, int(meta.get("seed", 0)), meta.get("capacity"))


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


# ---------------------------------------------------------------- evaluation

@dataclass
class Metrics:
    acc_s: float
    acc_t: float
    acc: float
    joint_mae: list[float] = field(default_factory=list)
    tol: float = 0.05
    mode: str = "nearest"
    count: int = 0

    def to_dict(self) -> dict:
        return {
            "acc_s": self.acc_s,
            "acc_t": self.acc_t,
            "acc": self.acc,
            "joint_mae": self.joint_mae,
            "tol": self.tol,
            "mode": self.mode,
            "count": self.count,
        }


Predictor = Callable[[np.ndarray], np.ndarray]


def evaluate_policy(
    model: PolicyModel | Predictor,
    gmm: GmmParams | None,
    test: Dataset | Iterable[Demonstration],
    mode: str = "nearest",
    tol: float = 0.05,
    acc_s: float = 1.0,
) -> Metrics:
    """Refined-action success rate on held-out scenes.

    ``model`` may be a trained policy or any callable image -> action.  A
    sample succeeds when every joint of the refined action is within ``tol``
    of the label.  With ``gmm=None`` the raw prediction is scored.
    """
    demos = list(test.demos if isinstance(test, Dataset) else test)
    if not demos:
        raise ValueError("empty test set")
    if not 0.0 <= acc_s <= 1.0:
        raise ValueError("acc_s must lie in [0, 1]")
    if isinstance(model, PolicyModel):
        raw = predict(model, np.stack([d.image for d in demos]))
    else:
        raw = np.stack([np.asarray(model(d.image), dtype=np.float64) for d in demos])
    labels = np.stack([d.joints for d in demos])
    refined = raw if gmm is None else np.stack([refine(a, gmm, mode) for a in raw])
    err = np.abs(refined - labels)
    success = err.max(axis=1) < tol
    acc_t = float(np.count_nonzero(success)) / len(demos)
    return Metrics(
        acc_s=float(acc_s),
        acc_t=acc_t,
        acc=float(acc_s) * acc_t,
        joint_mae=[float(v) for v in err.mean(axis=0)],
        tol=tol,
        mode=mode,
        count=len(demos),
    )


# ---------------------------------------------------------------- self checks

WKV_PATCH_COUNTS = (1, 2, 4, 16, 64)


def wkv_check(seed: int, patches: int, channels: int = 4, patch: int = 2, batch: int = 2) -> float:
    """Worst relative gap between the recursive scan and the unrolled sum.

    Keys are positive and decays lie in (0, 1), the ranges the block feeds
    the scan.  Both initialisations are exercised.
    """
    if patches < 1:
        raise ValueError("patch count must be positive")
    rng = np.random.default_rng(seed)
    shape = (batch, patches, channels, patch, patch)
    k = np.exp(rng.normal(size=shape))
    v = rng.normal(size=shape)
    w = rng.uniform(0.0, 1.0, size=shape)
    u = rng.uniform(0.0, 1.0, size=channels)
    worst = 0.0
    for init in INIT_MODES:
        got = wkv_scan(k, v, w, u, init)
        ref = wkv_unrolled(k, v, w, u, init)
        rel = np.abs(got - ref) / np.maximum(np.abs(ref), 1e-12)
        worst = max(worst, float(rel.max()))
    return worst


GRAD_CHECK_ARCH = ArchConfig(widths=(4, 8, 8), patch=2, image_size=(32, 32))


def network_grad_check(seed: int, size: int = 32, arch: ArchConfig = GRAD_CHECK_ARCH, eps: float = 1e-4) -> nx.GradCheckReport:
    """Finite-difference check of every parameter on a one-sample MSE loss.

    ``seed`` picks both the scene and the initial weights.
    """
    arch = replace(arch, image_size=(size, size))
    radius = max(1.0, size / 16)
    ds = generate_dataset(1, SceneSpec(width=size, height=size, radius_range=(radius, 2 * radius), seed=seed))
    x, y = to_batch(ds.images), ds.labels
    model = PolicyModel(arch, seed=seed)
    return nx.grad_check(
        lambda: model.loss_and_grads(x, y),
        model.parameters(),
        eps=eps,
        seed=seed,
        loss_only=lambda: model.loss(x, y),
    )


__all__ = [
    "N_JOINTS",
    "SLOTS",
    "SceneSpec",
    "Demonstration",
    "Dataset",
    "Metrics",
    "kinematic_map",
    "generate_dataset",
    "save_dataset",
    "load_dataset",
    "load_image",
    "evaluate_policy",
    "WKV_PATCH_COUNTS",
    "wkv_check",
    "network_grad_check",
]
