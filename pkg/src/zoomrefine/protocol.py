"""Prompt templating, conversation assembly, and model-reply parsing."""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .imaging import Image, NormBBox, encode

__all__ = [
    "Turn",
    "Conversation",
    "PromptTemplates",
    "ParsedZoomReply",
    "TemplateError",
    "render_zoom_request",
    "render_baseline_request",
    "parse_zoom_reply",
    "parse_choice",
    "build_refine_conversation",
    "format_options",
    "load_templates",
    "default_templates",
]


class TemplateError(Exception):
    """Raised for malformed templates or template files."""


@dataclass(frozen=True)
class Turn:
    """One chat turn. ``images`` holds (encoded bytes, media type) pairs."""

    role: str
    text: str
    images: tuple[tuple[bytes, str], ...] = ()

    def __post_init__(self):
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"unknown role {self.role!r}")
        if self.role in ("system", "assistant") and self.images:
            raise ValueError(f"{self.role} turns carry no images")


@dataclass(frozen=True)
class Conversation:
    turns: tuple[Turn, ...]

    def __post_init__(self):
        roles = [t.role for t in self.turns]
        if roles.count("system") > 1:
            raise ValueError("at most one system turn")
        if "system" in roles and roles[0] != "system":
            raise ValueError("system turn must come first")
        body = [r for r in roles if r != "system"]
        for i, r in enumerate(body):
            expect = "user" if i % 2 == 0 else "assistant"
            if r != expect:
                raise ValueError("turns after system must alternate user/assistant")

    @property
    def last_turn(self) -> Turn:
        return self.turns[-1]

    def image_turns(self) -> list[Turn]:
        return [t for t in self.turns if t.images]

    def all_text(self) -> str:
        return "\n".join(t.text for t in self.turns)


@dataclass(frozen=True)
class PromptTemplates:
    """Template texts with {question}/{options} placeholders.

    ``localized_zoom`` asks for a preliminary answer plus a normalized
    bounding box; ``self_refine`` asks the model to compare crop details with
    its earlier reasoning and explicitly reaffirm or revise.
    """

    system: str
    localized_zoom: str
    self_refine: str
    baseline: str

    def __post_init__(self):
        for name in ("localized_zoom", "baseline"):
            if "{question}" not in getattr(self, name):
                raise TemplateError(f"{name} template missing {{question}} placeholder")


@dataclass(frozen=True)
class ParsedZoomReply:
    raw_text: str
    preliminary_answer: str | None
    bbox: NormBBox | None = None
    bbox_repaired: bool = False


_SECTION_RE = re.compile(r"^\[([a-z_]+)\]\s*$", re.MULTILINE)


def parse_templates_text(text: str) -> PromptTemplates:
    """Parse the template-file grammar: ``[section]`` headers, free text bodies."""
    parts = _SECTION_RE.split(text)
    if len(parts) < 3:
        raise TemplateError("no [section] headers found")
    sections = {}
    for name, body in zip(parts[1::2], parts[2::2]):
        sections[name] = body.strip()
    required = {"system", "localized_zoom", "self_refine", "baseline"}
    missing = required - sections.keys()
    if missing:
        raise TemplateError(f"missing template sections: {sorted(missing)}")
    unknown = sections.keys() - required
    if unknown:
        raise TemplateError(f"unknown template sections: {sorted(unknown)}")
    return PromptTemplates(**sections)


def load_templates(path: str | Path) -> PromptTemplates:
    return parse_templates_text(Path(path).read_text(encoding="utf-8"))


def default_templates() -> PromptTemplates:
    text = resources.files("zoomrefine").joinpath("templates/default.txt").read_text("utf-8")
    return parse_templates_text(text)


def format_options(options: list[tuple[str, str]]) -> str:
    return "\n".join(f"({label}) {text}" for label, text in options)


def _fill(template: str, question: str, options: list[tuple[str, str]]) -> str:
    class _Strict(dict):
        def __missing__(self, key):
            raise TemplateError(f"unknown placeholder {{{key}}}")

    try:
        return template.format_map(
            _Strict(question=question, options=format_options(options))
        )
    except (IndexError, ValueError) as e:
        raise TemplateError(str(e)) from e


def render_zoom_request(
    img_ds: Image,
    question: str,
    options: list[tuple[str, str]],
    t: PromptTemplates,
) -> Conversation:
    """Stage-1 request: downsampled image plus the localization prompt."""
    if not question.strip():
        raise ValueError("question must be nonempty")
    user = Turn(
        role="user",
        text=_fill(t.localized_zoom, question, options),
        images=((encode(img_ds, "png"), "image/png"),),
    )
    return Conversation((Turn("system", t.system), user))


def render_baseline_request(
    img_ds: Image,
    question: str,
    options: list[tuple[str, str]],
    t: PromptTemplates,
) -> Conversation:
    """Single-pass request: downsampled image plus the plain answer prompt."""
    if not question.strip():
        raise ValueError("question must be nonempty")
    user = Turn(
        role="user",
        text=_fill(t.baseline, question, options),
        images=((encode(img_ds, "png"), "image/png"),),
    )
    return Conversation((Turn("system", t.system), user))


_NUM = r"([+-]?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)"
_BBOX_RE = re.compile(r"\[\s*" + r"\s*,\s*".join([_NUM] * 4) + r"\s*\]")


def parse_zoom_reply(text: str, options: list[tuple[str, str]]) -> ParsedZoomReply:
    """Extract the preliminary answer and the last bracketed 4-number box.

    Never raises on arbitrary input; an unusable box yields ``bbox=None``.
    Coordinates all within [0, 1] are taken as fractions; all within
    [0, 100] with any value above 1 are taken as percentages.
    """
    label = parse_choice(text, options)
    bbox = None
    repaired = False
    matches = list(_BBOX_RE.finditer(text))
    if matches:
        try:
            vals = [float(g) for g in matches[-1].groups()]
        except ValueError:
            vals = []
        if vals and all(0.0 <= v <= 100.0 for v in vals):
            if any(v > 1.0 for v in vals):
                vals = [v / 100.0 for v in vals]
            bbox, repaired = NormBBox.repair(*vals)
    return ParsedZoomReply(
        raw_text=text, preliminary_answer=label, bbox=bbox, bbox_repaired=repaired
    )


_ANSWER_IS_RE = re.compile(
    r"(?:answer\s+is|answer\s*:|answer\s*=)\s*[\"'(\[*]*([A-Za-z])(?![A-Za-z])", re.IGNORECASE
)


def parse_choice(text: str, options: list[tuple[str, str]]) -> str | None:
    """Resolve a reply to one option label, or None when ambiguous.

    Precedence: (1) an explicit "answer is (X)" / "Answer: X" phrase,
    (2) a standalone option letter on its own line,
    (3) unique case-insensitive containment of exactly one option's full text.
    """
    if not options:
        raise ValueError("options must be nonempty")
    labels = [label for label, _ in options]
    if len(set(labels)) != len(labels):
        raise ValueError("option labels must be distinct")
    label_set = {l.upper() for l in labels}

    hits = [m.group(1).upper() for m in _ANSWER_IS_RE.finditer(text)]
    hits = [h for h in hits if h in label_set]
    if hits:
        return hits[-1]

    standalone = []
    for line in text.splitlines():
        m = re.fullmatch(r"\s*[\[(]?([A-Za-z])[\])]?[.:]?\s*", line)
        if m and m.group(1).upper() in label_set:
            standalone.append(m.group(1).upper())
    if len(set(standalone)) == 1:
        return standalone[0]

    lowered = text.lower()
    contained = [
        label.upper()
        for label, opt_text in options
        if opt_text and opt_text.lower() in lowered
    ]
    if len(contained) == 1:
        return contained[0]
    return None


def build_refine_conversation(
    stage1: Conversation,
    reply1: str,
    crop_img: Image,
    question: str,
    t: PromptTemplates,
) -> Conversation:
    """Stage-2 request: stage-1 history, its reply, the crop, and the refine prompt."""
    if stage1.last_turn.role != "user":
        raise ValueError("stage-1 conversation must end with a user turn")
    if not reply1:
        raise ValueError("stage-1 reply must be nonempty")
    refine = Turn(
        role="user",
        text=_fill(t.self_refine, question, []),
        images=((encode(crop_img, "png"), "image/png"),),
    )
    return Conversation(stage1.turns + (Turn("assistant", reply1), refine))
