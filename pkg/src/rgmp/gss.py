"""Geometric-prior skill selection.

Pipeline: a vision-language client localises the instructed target, a shape
heuristic classifies the crop, and a prioritised rule catalog maps
(shape, bounding box, scene occupancy) to one of three grasp skills.
"""

from __future__ import annotations

import base64
import io
import json
import logging
import os
import re
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

log = logging.getLogger(__name__)

SIDE_MARGIN_PX = 10
SMALL_AREA_FRACTION = 0.02


class Skill(str, Enum):
    SIDE_GRASP = "SideGrasp"
    LIFT_UP = "LiftUp"
    TOP_PINCH = "TopPinch"


class ShapeCategory(str, Enum):
    CYLINDRICAL = "cylindrical"
    SQUASHED = "squashed"
    THIN_SMALL = "thin_small"
    OTHER = "other"


class GssError(RuntimeError):
    pass


class TargetNotFoundError(GssError):
    pass


class ClientError(GssError):
    """Transient client failure; the caller may retry."""


class NoApplicableSkillError(GssError):
    pass


# ---------------------------------------------------------------- value types

@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float
    clipped: bool = field(default=False, compare=False)

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2 and self.x1 >= 0 and self.y1 >= 0):
            raise ValueError(f"degenerate bounding box {self.as_list()}")

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def within(self, width: int, height: int) -> bool:
        return self.x2 <= width and self.y2 <= height

    def intersects(self, other: "BoundingBox | tuple") -> bool:
        ox1, oy1, ox2, oy2 = other.as_list() if isinstance(other, BoundingBox) else other
        return self.x1 < ox2 and ox1 < self.x2 and self.y1 < oy2 and oy1 < self.y2


@dataclass(frozen=True)
class Instruction:
    text: str

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("instruction text must be non-empty")


@dataclass
class Observation:
    """Camera frame (H x W x 3 in [0, 1]) or just its extents."""

    width: int = 640
    height: int = 480
    image: np.ndarray | None = None
    shape_label: str | None = None
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.image is not None:
            self.height, self.width = self.image.shape[:2]
        if self.width <= 0 or self.height <= 0:
            raise ValueError("observation extents must be positive")

    def png_bytes(self) -> bytes:
        from PIL import Image

        if self.image is None:
            pixels = np.zeros((self.height, self.width, 3), dtype=np.uint8)
        else:
            pixels = np.round(np.clip(self.image, 0, 1) * 255).astype(np.uint8)
        buf = io.BytesIO()
        Image.fromarray(pixels, mode="RGB").save(buf, format="PNG")
        return buf.getvalue()


@dataclass(frozen=True)
class ContextExample:
    instruction: str
    shape: ShapeCategory
    skill: Skill


def _asset(name: str) -> str:
    return resources.files("rgmp").joinpath("assets", name).read_text(encoding="utf-8")


DEFAULT_EXAMPLES = (
    ContextExample("I want Fanta", ShapeCategory.CYLINDRICAL, Skill.SIDE_GRASP),
    ContextExample("Pass me the crushed cola can", ShapeCategory.SQUASHED, Skill.LIFT_UP),
    ContextExample("Pass me the tissue", ShapeCategory.THIN_SMALL, Skill.TOP_PINCH),
)


@dataclass
class PlanningContext:
    locate_template: str = field(default_factory=lambda: _asset("prompts/locate.txt").strip())
    skill_template: str = field(default_factory=lambda: _asset("prompts/skill.txt").strip())
    examples: tuple[ContextExample, ...] = DEFAULT_EXAMPLES

    def __post_init__(self):
        if not self.locate_template.strip() or not self.skill_template.strip():
            raise ValueError("prompt templates must be non-empty")

    def _example_lines(self) -> list[str]:
        return [f"Example: \"{e.instruction}\" -> shape {e.shape.value} -> skill {e.skill.value}" for e in self.examples]

    def locate_prompt(self, instruction: Instruction) -> str:
        return "\n".join([self.locate_template, *self._example_lines(), f"User request: {instruction.text}"])

    def skill_prompt(self, instruction: Instruction, obs: Observation, box: BoundingBox, shape: ShapeCategory) -> str:
        head = self.skill_template.replace("640x480", f"{obs.width}x{obs.height}")
        coords = ", ".join(f"{v:g}" for v in box.as_list())
        return "\n".join([
            head, *self._example_lines(),
            f"User request: {instruction.text}",
            f"Bounding box: [{coords}]",
            f"Shape: {shape.value}",
        ])


@dataclass(frozen=True)
class SessionConfig:
    max_rounds: int = 3
    client: str = "mock"

    def __post_init__(self):
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if self.client not in ("mock", "remote"):
            raise ValueError(f"client must be 'mock' or 'remote', got {self.client!r}")


@dataclass(frozen=True)
class SceneOccupancy:
    side_clear: bool = True
    top_clear: bool = True
    small: bool = False
    at_border: bool = False


@dataclass(frozen=True)
class SkillDecision:
    skill: Skill
    box: BoundingBox
    confidence: float
    rationale: str
    rule: str = ""

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "skill": self.skill.value,
            "box": self.box.as_list(),
            "confidence": self.confidence,
            "rationale": self.rationale,
            "rule": self.rule,
        }


# ---------------------------------------------------------------- wire format

_BOX_RE = re.compile(r"\[\s*(-?\d+(?:\.\d+)?)\s*,\s*(-?\d+(?:\.\d+)?)\s*,\s*(-?\d+(?:\.\d+)?)\s*,\s*(-?\d+(?:\.\d+)?)\s*\]")
_SKILL_KEYS = {"sidegrasp": Skill.SIDE_GRASP, "liftup": Skill.LIFT_UP, "toppinch": Skill.TOP_PINCH}


def parse_box(text: str, width: int, height: int) -> BoundingBox:
    """First ``[x1, y1, x2, y2]`` in ``text``, clipped to the image."""
    m = _BOX_RE.search(text)
    if m is None:
        raise ClientError(f"no bounding box in reply: {text[:80]!r}")
    x1, y1, x2, y2 = (float(g) for g in m.groups())
    cx1, cx2 = sorted((min(max(x1, 0.0), width), min(max(x2, 0.0), width)))
    cy1, cy2 = sorted((min(max(y1, 0.0), height), min(max(y2, 0.0), height)))
    clipped = (cx1, cy1, cx2, cy2) != (x1, y1, x2, y2)
    if not (cx1 < cx2 and cy1 < cy2):
        raise ClientError(f"box {[x1, y1, x2, y2]} is empty inside a {width}x{height} image")
    return BoundingBox(cx1, cy1, cx2, cy2, clipped=clipped)


def parse_skill(text: str) -> Skill | None:
    """Earliest skill name in ``text`` (case, spaces and underscores ignored)."""
    squashed = re.sub(r"[^a-z]", "", text.lower())
    hits = [(squashed.find(key), skill) for key, skill in _SKILL_KEYS.items() if key in squashed]
    return min(hits, key=lambda h: h[0])[1] if hits else None


# ---------------------------------------------------------------- clients

class VlmClient(Protocol):
    def complete(self, prompt: str, image_png: bytes) -> str: ...


@dataclass
class SceneObject:
    name: str
    box: BoundingBox
    shape: ShapeCategory | None = None


@dataclass
class SceneManifest:
    width: int
    height: int
    objects: list[SceneObject]

    @classmethod
    def from_dict(cls, data: dict) -> "SceneManifest":
        image = data.get("image", {})
        objs = [
            SceneObject(
                o["name"],
                BoundingBox(*map(float, o["box"])),
                ShapeCategory(o["shape"]) if o.get("shape") else None,
            )
            for o in data.get("objects", [])
        ]
        return cls(int(image.get("width", 640)), int(image.get("height", 480)), objs)

    @classmethod
    def load(cls, path: str | Path) -> "SceneManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def find(self, instruction_text: str) -> SceneObject:
        text = instruction_text.lower()
        hits = [o for o in self.objects if o.name.lower() in text]
        if not hits:
            raise TargetNotFoundError(f"target not found: no scene object named in {instruction_text!r}")
        return max(hits, key=lambda o: len(o.name))


class MockVlmClient:
    """Answers localisation prompts from a scene manifest."""

    def __init__(self, scene: SceneManifest):
        self.scene = scene

    def complete(self, prompt: str, image_png: bytes = b"") -> str:
        request = next((ln.split(":", 1)[1] for ln in prompt.splitlines() if ln.startswith("User request:")), None)
        if request is None:
            raise ClientError("mock client only understands prompts with a 'User request:' line")
        obj = self.scene.find(request)
        x1, y1, x2, y2 = obj.box.as_list()
        return f"The {obj.name} is at [{x1:g}, {y1:g}, {x2:g}, {y2:g}]"


class RemoteVlmClient:
    """JSON-over-HTTP client: POST {"prompt", "image_b64"} -> {"text"}."""

    def __init__(self, url: str | None = None, token: str | None = None, timeout: float = 30.0):
        self.url = url or os.environ.get("RGMP_VLM_URL")
        self.token = token if token is not None else os.environ.get("RGMP_VLM_TOKEN")
        self.timeout = timeout
        if not self.url:
            raise GssError("remote client needs a URL (RGMP_VLM_URL)")

    def complete(self, prompt: str, image_png: bytes) -> str:
        body = json.dumps({"prompt": prompt, "image_b64": base64.b64encode(image_png).decode("ascii")}).encode("utf-8")
        req = urllib.request.Request(self.url, data=body, method="POST", headers={"Content-Type": "application/json"})
        if self.token:
            req.add_header("Authorization", f"Bearer {self.token}")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, TimeoutError, json.JSONDecodeError) as exc:
            raise ClientError(f"VLM request failed: {exc}") from exc
        if not isinstance(payload, dict) or not isinstance(payload.get("text"), str):
            raise ClientError("VLM response lacks a 'text' field")
        return payload["text"]


# ---------------------------------------------------------------- stages

def locate_target(
    instruction: Instruction,
    obs: Observation,
    context: PlanningContext,
    client: VlmClient,
    max_rounds: int = 3,
) -> BoundingBox:
    prompt = context.locate_prompt(instruction)
    image = obs.png_bytes() if isinstance(client, RemoteVlmClient) else b""
    last: Exception | None = None
    for attempt in range(max_rounds):
        try:
            return parse_box(client.complete(prompt, image), obs.width, obs.height)
        except ClientError as exc:
            log.warning("localisation attempt %d/%d failed: %s", attempt + 1, max_rounds, exc)
            last = exc
    raise ClientError(f"localisation failed after {max_rounds} attempts: {last}")


def _foreground_mask(obs: Observation, box: BoundingBox) -> np.ndarray:
    x1, y1 = int(np.floor(box.x1)), int(np.floor(box.y1))
    x2, y2 = int(np.ceil(box.x2)), int(np.ceil(box.y2))
    if obs.mask is not None:
        return np.asarray(obs.mask, dtype=bool)[y1:y2, x1:x2]
    if obs.image is None:
        raise ValueError("shape classification needs an image, a mask or a provided label")
    img = np.asarray(obs.image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    background = np.median(img.reshape(-1, img.shape[-1]), axis=0)
    crop = img[y1:y2, x1:x2]
    return np.abs(crop - background).max(axis=-1) > 0.15


def classify_shape(obs: Observation, box: BoundingBox) -> ShapeCategory:
    """Provided label if any; otherwise aspect/fill/area thresholds on the crop mask."""
    if obs.shape_label:
        return ShapeCategory(obs.shape_label)
    mask = _foreground_mask(obs, box)
    if mask.size == 0 or not mask.any():
        raise ValueError(f"empty crop for box {box.as_list()}")
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    h = rows[-1] - rows[0] + 1
    w = cols[-1] - cols[0] + 1
    area = int(mask.sum())
    aspect = h / w
    fill = area / (h * w)
    if aspect >= 1.4 and fill >= 0.6:
        return ShapeCategory.CYLINDRICAL
    if aspect <= 0.7:
        return ShapeCategory.SQUASHED
    if area < SMALL_AREA_FRACTION * obs.width * obs.height:
        return ShapeCategory.THIN_SMALL
    return ShapeCategory.OTHER


def scene_occupancy(
    box: BoundingBox,
    others: Sequence[BoundingBox],
    width: int,
    height: int,
    margin: float = SIDE_MARGIN_PX,
) -> SceneOccupancy:
    """Side approach: box widened by ``margin`` left and right.  Top approach: box raised by ``margin``."""
    side = (box.x1 - margin, box.y1, box.x2 + margin, box.y2)
    top = (box.x1, box.y1 - margin, box.x2, box.y2)
    return SceneOccupancy(
        side_clear=not any(o.intersects(side) for o in others),
        top_clear=not any(o.intersects(top) for o in others),
        small=box.area < SMALL_AREA_FRACTION * width * height,
        at_border=box.x1 <= 0 or box.y1 <= 0 or box.x2 >= width or box.y2 >= height,
    )


# ---------------------------------------------------------------- rules

@dataclass(frozen=True)
class Rule:
    priority: int
    name: str
    when: dict
    skill: Skill
    confidence: float
    rationale: str

    def matches(self, shape: ShapeCategory, occ: SceneOccupancy) -> bool:
        for key, want in self.when.items():
            if key == "shape":
                if shape.value not in want:
                    return False
            elif getattr(occ, key) != want:
                return False
        return True


def load_rules(path: str | Path | None = None) -> list[Rule]:
    raw = json.loads(Path(path).read_text() if path else _asset("rules.json"))
    rules = [
        Rule(int(r["priority"]), r["name"], dict(r.get("when", {})), Skill(r["skill"]), float(r["confidence"]), r["rationale"])
        for r in raw
    ]
    priorities = [r.priority for r in rules]
    if len(set(priorities)) != len(priorities):
        raise ValueError("rule priorities must be unique")
    known = {"shape", "side_clear", "top_clear", "small", "at_border"}
    for r in rules:
        if set(r.when) - known:
            raise ValueError(f"rule {r.name} uses unknown conditions {set(r.when) - known}")
    return sorted(rules, key=lambda r: r.priority)


def select_skill(
    box: BoundingBox,
    shape: ShapeCategory,
    scene: SceneOccupancy,
    rules: Sequence[Rule] | None = None,
) -> SkillDecision:
    rules = load_rules() if rules is None else sorted(rules, key=lambda r: r.priority)
    if not rules:
        raise ValueError("rule set is empty")
    for rule in rules:
        if rule.matches(ShapeCategory(shape), scene):
            return SkillDecision(rule.skill, box, rule.confidence, f"rule {rule.priority} ({rule.name}): {rule.rationale}", rule.name)
    raise NoApplicableSkillError(f"no applicable skill for shape={shape} scene={scene}")


def compute_accuracy(acc_s: float, acc_t: float) -> float:
    """Overall success rate: skill-selection rate times execution rate."""
    for name, v in (("acc_s", acc_s), ("acc_t", acc_t)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name}={v} outside [0, 1]")
    return acc_s * acc_t


# ---------------------------------------------------------------- end to end

def _decide(
    instruction: Instruction,
    obs: Observation,
    context: PlanningContext,
    client: VlmClient,
    box: BoundingBox,
    others: Sequence[BoundingBox],
    rules: Sequence[Rule] | None,
) -> SkillDecision:
    shape = classify_shape(obs, box)
    occ = scene_occupancy(box, [o for o in others if o != box], obs.width, obs.height)
    decision = select_skill(box, shape, occ, rules)
    notes = []
    if box.clipped:
        notes.append("bounding box clipped to the image")
    if isinstance(client, RemoteVlmClient):
        try:
            reply = client.complete(context.skill_prompt(instruction, obs, box, shape), obs.png_bytes())
            suggested = parse_skill(reply)
            if suggested is not None:
                notes.append(f"VLM suggested {suggested.value}")
        except ClientError as exc:
            notes.append(f"skill query failed: {exc}")
    if not notes:
        return decision
    return SkillDecision(decision.skill, box, decision.confidence, decision.rationale + "; " + "; ".join(notes), decision.rule)


def plan(
    instruction: Instruction,
    obs: Observation,
    context: PlanningContext,
    client: VlmClient,
    others: Sequence[BoundingBox] = (),
    rules: Sequence[Rule] | None = None,
    session: SessionConfig | None = None,
) -> SkillDecision:
    """Localise, classify and dispatch; returns the skill decision."""
    session = session or SessionConfig()
    box = locate_target(instruction, obs, context, client, session.max_rounds)
    return _decide(instruction, obs, context, client, box, others, rules)


def simulate_scene(
    manifest: SceneManifest,
    text: str,
    client: VlmClient | None = None,
    session: SessionConfig | None = None,
    rules: Sequence[Rule] | None = None,
) -> SkillDecision:
    """Run the selector on a manifest scene.

    The manifest shape label of the located object stands in for the
    segmentation model.
    """
    instruction = Instruction(text)
    client = client or MockVlmClient(manifest)
    session = session or SessionConfig()
    context = PlanningContext()
    obs = Observation(manifest.width, manifest.height)
    box = locate_target(instruction, obs, context, client, session.max_rounds)
    match = min(manifest.objects, key=lambda o: float(np.abs(np.subtract(o.box.as_list(), box.as_list())).sum()), default=None)
    label = match.shape if match is not None and match.shape else ShapeCategory.OTHER
    obs.shape_label = label.value
    others = [o.box for o in manifest.objects if match is None or o is not match]
    return _decide(instruction, obs, context, client, box, others, rules)
