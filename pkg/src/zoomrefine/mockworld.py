"""Synthetic high-resolution scenes with ground truth, plus an oracle model
whose perception degrades with presented resolution.

A scene hides one digit glyph inside a highlighted box on a structured
background. The oracle answers correctly iff the glyph's height, at the
scale the image is presented, reaches a legibility threshold; this is the
desk-scale instrument for verifying that zooming into the localized region
actually fixes answers the downsampled view gets wrong.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from .backend import ModelReply, approx_tokens
from .bench import BenchmarkRecord
from .imaging import Image, PixelRect, decode, encode, round_half_away, with_meta
from .protocol import Conversation, parse_choice

__all__ = [
    "SceneSpec",
    "OracleConfig",
    "OracleBackend",
    "ParamError",
    "UnknownScene",
    "gen_scene",
    "gen_dataset",
    "oracle_reply",
    "load_registry",
    "SCENE_ID_KEY",
]

SCENE_ID_KEY = "scene-id"

GLYPH_ALPHABET = "0123456789"

QUESTION = "Which digit is printed inside the highlighted white box?"

# 5x7 bitmap font, one row per scanline, 5 bits per row.
_FONT = {
    "0": (0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110),
    "1": (0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110),
    "2": (0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111),
    "3": (0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110),
    "4": (0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010),
    "5": (0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110),
    "6": (0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110),
    "7": (0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000),
    "8": (0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110),
    "9": (0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100),
}

_SUBTASK_CYCLE = ("OCR", "DT", "MO", "AD")


class ParamError(Exception):
    """Scene parameters outside the supported range."""


class UnknownScene(Exception):
    """Conversation references a scene id not in the registry."""


@dataclass(frozen=True)
class SceneSpec:
    scene_id: str
    seed: int
    canvas_side: int
    target_glyph: str
    target_size_px: int
    target_rect: tuple[int, int, int, int]
    target_bbox: tuple[float, float, float, float]
    distractor_count: int
    question: str
    options: tuple[tuple[str, str], ...]
    answer: str

    def to_dict(self) -> dict:
        d = asdict(self)
        d["options"] = {label: text for label, text in self.options}
        return d

    @staticmethod
    def from_dict(d: dict) -> "SceneSpec":
        d = dict(d)
        d["target_rect"] = tuple(d["target_rect"])
        d["target_bbox"] = tuple(d["target_bbox"])
        d["options"] = tuple(sorted(d["options"].items()))
        return SceneSpec(**d)


@dataclass(frozen=True)
class OracleConfig:
    """τ is the presented glyph height (pixels) at which it becomes readable."""

    legibility_threshold_px: float = 12.0
    bbox_noise: float = 0.0
    no_bbox_probability: float = 0.0
    wrong_answer_policy: str = "fixed_offset"
    seed: int = 0

    def __post_init__(self):
        if self.legibility_threshold_px < 1:
            raise ValueError("legibility_threshold_px must be >= 1")
        if not (0.0 <= self.no_bbox_probability <= 1.0 and 0.0 <= self.bbox_noise <= 1.0):
            raise ValueError("probabilities/noise must be within [0, 1]")
        if self.wrong_answer_policy not in ("fixed_offset", "seeded_random"):
            raise ValueError(f"unknown wrong_answer_policy {self.wrong_answer_policy!r}")


def _glyph_mask(glyph: str, height: int) -> np.ndarray:
    """Nearest-neighbor scale of the 5x7 bitmap to exactly ``height`` rows."""
    rows = _FONT[glyph]
    bitmap = np.array(
        [[(r >> (4 - c)) & 1 for c in range(5)] for r in rows], dtype=bool
    )
    width = max(1, round_half_away(height * 5 / 7))
    ri = np.arange(height) * 7 // height
    ci = np.arange(width) * 5 // width
    return bitmap[ri][:, ci]


def _overlaps(a: tuple[int, int, int, int], b: tuple[int, int, int, int]) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def gen_scene(
    scene_id: str,
    seed: int,
    canvas_side: int = 4096,
    target_size_px: int = 24,
    target_glyph: str | None = None,
    distractor_count: int = 12,
    subtask: str = "OCR",
) -> tuple[Image, BenchmarkRecord, SceneSpec]:
    """Render one scene. Deterministic given the arguments."""
    if canvas_side < 64:
        raise ParamError("canvas_side must be >= 64")
    if target_size_px < 8:
        raise ParamError("target_size_px must be >= 8")
    rng = np.random.default_rng(seed)
    side = canvas_side

    # Structured background: two-axis gradient plus muted blocks.
    base = rng.integers(90, 150)
    gy = np.linspace(-25, 25, side)[:, None]
    gx = np.linspace(-25, 25, side)[None, :]
    canvas = np.clip(base + gy + gx, 0, 255).astype(np.uint8)
    canvas = np.stack([canvas] * 3, axis=-1)
    canvas = np.ascontiguousarray(canvas)
    for _ in range(6):
        bw = int(rng.integers(side // 8, side // 3))
        bh = int(rng.integers(side // 8, side // 3))
        bx = int(rng.integers(0, side - bw))
        by = int(rng.integers(0, side - bh))
        color = rng.integers(60, 200, size=3)
        canvas[by : by + bh, bx : bx + bw] = (
            0.7 * canvas[by : by + bh, bx : bx + bw] + 0.3 * color
        ).astype(np.uint8)

    if target_glyph is None:
        target_glyph = GLYPH_ALPHABET[int(rng.integers(0, len(GLYPH_ALPHABET)))]
    mask = _glyph_mask(target_glyph, target_size_px)
    gh, gw = mask.shape
    pad = max(2, target_size_px // 4)
    box_w, box_h = gw + 2 * pad, gh + 2 * pad
    margin = 4
    bx = int(rng.integers(margin, side - box_w - margin))
    by = int(rng.integers(margin, side - box_h - margin))
    target_rect = (bx, by, bx + box_w, by + box_h)

    # Distractor shapes, kept clear of the target box.
    placed = 0
    for _ in range(distractor_count * 10):
        if placed >= distractor_count:
            break
        dw = int(rng.integers(8, max(9, side // 16)))
        dh = int(rng.integers(8, max(9, side // 16)))
        dx = int(rng.integers(0, side - dw))
        dy = int(rng.integers(0, side - dh))
        if _overlaps((dx, dy, dx + dw, dy + dh), target_rect):
            continue
        color = rng.integers(0, 255, size=3).astype(np.uint8)
        canvas[dy : dy + dh, dx : dx + dw] = color
        placed += 1

    # Highlighted box with the glyph, the only white box in the scene.
    canvas[by : by + box_h, bx : bx + box_w] = 255
    border = max(1, pad // 3)
    canvas[by : by + border, bx : bx + box_w] = 0
    canvas[by + box_h - border : by + box_h, bx : bx + box_w] = 0
    canvas[by : by + box_h, bx : bx + border] = 0
    canvas[by : by + box_h, bx + box_w - border : bx + box_w] = 0
    gy0, gx0 = by + pad, bx + pad
    region = canvas[gy0 : gy0 + gh, gx0 : gx0 + gw]
    region[mask] = 0

    bbox = (bx / side, by / side, (bx + box_w) / side, (by + box_h) / side)

    # Exactly one option encodes the target glyph.
    others = [g for g in GLYPH_ALPHABET if g != target_glyph]
    others = [others[j] for j in rng.permutation(len(others))]
    choices = [target_glyph] + others[:3]
    choices = [choices[j] for j in rng.permutation(len(choices))]
    labels = "ABCD"
    options = tuple((labels[i], choices[i]) for i in range(4))
    answer = labels[choices.index(target_glyph)]

    spec = SceneSpec(
        scene_id=scene_id,
        seed=seed,
        canvas_side=side,
        target_glyph=target_glyph,
        target_size_px=target_size_px,
        target_rect=target_rect,
        target_bbox=bbox,
        distractor_count=distractor_count,
        question=QUESTION,
        options=options,
        answer=answer,
    )
    img = Image(pixels=canvas)
    img = with_meta(img, **{SCENE_ID_KEY: scene_id})
    record = BenchmarkRecord(
        id=scene_id,
        image_path=f"images/{scene_id}.png",
        question=QUESTION,
        options=options,
        answer=answer,
        task="perception",
        subtask=subtask,
    )
    return img, record, spec


def gen_dataset(
    out_dir: str | Path,
    count: int,
    canvas_side: int = 4096,
    small_size_px: int = 16,
    large_size_px: int = 64,
    small_fraction: float = 0.5,
    distractor_count: int = 12,
    seed: int = 0,
) -> tuple[list[BenchmarkRecord], list[SceneSpec]]:
    """Generate ``count`` scenes; a ``small_fraction`` share carries the small
    glyph size, the rest the large one. Writes images/, dataset.jsonl, and
    scenes.jsonl under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    n_small = round(count * small_fraction)
    flags = [i < n_small for i in range(count)]
    random.Random(seed).shuffle(flags)
    records, specs = [], []
    for i in range(count):
        scene_id = f"scene-{i:04d}"
        size = small_size_px if flags[i] else large_size_px
        img, record, spec = gen_scene(
            scene_id,
            seed=seed * 1_000_003 + i,
            canvas_side=canvas_side,
            target_size_px=size,
            distractor_count=distractor_count,
            subtask=_SUBTASK_CYCLE[i % len(_SUBTASK_CYCLE)],
        )
        (out / "images" / f"{scene_id}.png").write_bytes(encode(img, "png"))
        records.append(record)
        specs.append(spec)
    with open(out / "dataset.jsonl", "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
    with open(out / "scenes.jsonl", "w", encoding="utf-8") as f:
        for s in specs:
            f.write(json.dumps(s.to_dict(), sort_keys=True) + "\n")
    return records, specs


def load_registry(scenes_path: str | Path) -> dict[str, SceneSpec]:
    registry = {}
    with open(scenes_path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                spec = SceneSpec.from_dict(json.loads(line))
                registry[spec.scene_id] = spec
    return registry


def _scene_rng(scene_id: str, seed: int, purpose: str) -> random.Random:
    digest = hashlib.sha256(f"{scene_id}|{purpose}|{seed}".encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def _wrong_label(spec: SceneSpec, ocfg: OracleConfig) -> str:
    labels = [label for label, _ in spec.options]
    idx = labels.index(spec.answer)
    if ocfg.wrong_answer_policy == "fixed_offset":
        return labels[(idx + 1) % len(labels)]
    rng = _scene_rng(spec.scene_id, ocfg.seed, "wrong")
    return rng.choice([l for l in labels if l != spec.answer])


def _presented_glyph_height(spec: SceneSpec, img: Image) -> float:
    o_left, o_top, o_right, o_bottom = img.origin_rect
    scale = img.height / (o_bottom - o_top)
    return spec.target_size_px * scale


def _crop_contains_target(spec: SceneSpec, img: Image) -> bool:
    o = PixelRect(*img.origin_rect)
    return o.contains_rect(PixelRect(*spec.target_rect))


def _reply(text: str, conv: Conversation) -> ModelReply:
    return ModelReply(
        text=text,
        prompt_tokens=approx_tokens(conv.all_text()),
        completion_tokens=approx_tokens(text),
        latency_ms=0.0,
        attempt_count=1,
    )


def oracle_reply(
    conv: Conversation,
    registry: dict[str, SceneSpec],
    ocfg: OracleConfig,
) -> ModelReply:
    """Deterministic model stand-in. Correctness depends only on whether the
    target glyph, at presented scale, clears the legibility threshold.

    Stage is detected by the number of image-bearing turns: one image means
    the initial view, two means the refinement view (the second image is the
    crop). All randomness derives from per-scene hashes, so replies are
    independent of call ordering and wall clock.
    """
    image_turns = conv.image_turns()
    if not image_turns:
        raise UnknownScene("conversation carries no images")
    presented = decode(image_turns[-1].images[0][0])
    scene_id = presented.meta.get(SCENE_ID_KEY)
    if scene_id is None or scene_id not in registry:
        raise UnknownScene(f"scene id {scene_id!r} not in registry")
    spec = registry[scene_id]
    tau = ocfg.legibility_threshold_px
    legible = _presented_glyph_height(spec, presented) >= tau

    if len(image_turns) == 1:
        label = spec.answer if legible else _wrong_label(spec, ocfg)
        text = f"The answer is ({label})."
        wants_bbox = "[x1, y1, x2, y2]" in conv.last_turn.text
        if wants_bbox:
            rng = _scene_rng(scene_id, ocfg.seed, "bbox")
            if rng.random() < ocfg.no_bbox_probability:
                text += "\nI cannot confidently locate a relevant region."
            else:
                x1, y1, x2, y2 = spec.target_bbox
                if ocfg.bbox_noise > 0:
                    jitter = [rng.uniform(-ocfg.bbox_noise, ocfg.bbox_noise) for _ in range(4)]
                    x1 = min(max(x1 + jitter[0], 0.0), 1.0)
                    y1 = min(max(y1 + jitter[1], 0.0), 1.0)
                    x2 = min(max(x2 + jitter[2], 0.0), 1.0)
                    y2 = min(max(y2 + jitter[3], 0.0), 1.0)
                text += f"\nRelevant region: [{x1:.6f}, {y1:.6f}, {x2:.6f}, {y2:.6f}]"
        return _reply(text, conv)

    # Refinement stage: trust the crop only when it shows the target legibly;
    # otherwise reaffirm whatever was said before.
    if legible and _crop_contains_target(spec, presented):
        text = (
            "The crop clearly shows the digit inside the highlighted box. "
            f"The answer is ({spec.answer})."
        )
        return _reply(text, conv)
    assistant_turns = [t for t in conv.turns if t.role == "assistant"]
    prior = parse_choice(assistant_turns[-1].text, list(spec.options)) if assistant_turns else None
    if prior is None:
        prior = _wrong_label(spec, ocfg)
    text = (
        "The crop does not reveal anything new, so I keep my earlier assessment. "
        f"The answer is ({prior})."
    )
    return _reply(text, conv)


@dataclass(frozen=True)
class OracleBackend:
    """In-process backend implementing the model boundary over the oracle."""

    registry: dict[str, SceneSpec]
    ocfg: OracleConfig = field(default_factory=OracleConfig)

    def complete(self, conv: Conversation) -> ModelReply:
        return oracle_reply(conv, self.registry, self.ocfg)
