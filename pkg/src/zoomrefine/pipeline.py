"""Two-stage zoom-and-refine inference with full tracing.

Stage 1 answers on the downsampled view and localizes the relevant region;
stage 2 re-reads a full-resolution crop of that region and reaffirms or
revises. Every failure mode falls back to the stage-1 answer rather than
aborting a record.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable

from .backend import Backend, BackendConfig, HttpBackend, ModelReply
from .imaging import (
    CropPolicy,
    Image,
    crop,
    denormalize,
    downsample,
    expand_and_clamp,
)
from .protocol import (
    PromptTemplates,
    build_refine_conversation,
    parse_choice,
    parse_zoom_reply,
    render_baseline_request,
    render_zoom_request,
)

__all__ = [
    "PipelineConfig",
    "PipelineTrace",
    "StageError",
    "run_baseline",
    "run_zoom_refine",
    "run_record",
    "config_hash",
    "write_traces",
    "read_traces",
    "TRACE_SCHEMA_VERSION",
]

TRACE_SCHEMA_VERSION = 1

MODE_BASELINE = "baseline"
MODE_ZOOM_REFINE = "zoom_refine"


class StageError(Exception):
    """Backend failure tagged with the pipeline stage it occurred in."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class PipelineConfig:
    downsample_max_side: int = 1024
    crop_policy: CropPolicy = field(default_factory=CropPolicy)
    templates: PromptTemplates | None = None
    backend: BackendConfig = field(default_factory=BackendConfig)
    mode: str = MODE_ZOOM_REFINE

    def __post_init__(self):
        if self.mode not in (MODE_BASELINE, MODE_ZOOM_REFINE):
            raise ValueError(f"unknown mode {self.mode!r}")

    def resolved_templates(self) -> PromptTemplates:
        if self.templates is not None:
            return self.templates
        from .protocol import default_templates

        return default_templates()


def config_hash(cfg: PipelineConfig) -> str:
    """Stable digest over everything that affects a pipeline answer."""
    t = cfg.resolved_templates()
    payload = {
        "schema": TRACE_SCHEMA_VERSION,
        "mode": cfg.mode,
        "downsample_max_side": cfg.downsample_max_side,
        "crop_policy": asdict(cfg.crop_policy),
        "templates": [t.system, t.localized_zoom, t.self_refine, t.baseline],
        "model_name": cfg.backend.model_name,
        "temperature": cfg.backend.temperature,
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


@dataclass
class PipelineTrace:
    """Full record of one pipeline run over a single question."""

    question_id: str
    mode: str
    config_hash: str
    initial_raw: str = ""
    initial_label: str | None = None
    bbox: tuple[float, float, float, float] | None = None
    bbox_repaired: bool = False
    pixel_rect: tuple[int, int, int, int] | None = None
    crop_size: tuple[int, int] | None = None
    fallback_reason: str | None = None
    final_raw: str = ""
    final_label: str | None = None
    revised: bool = False
    stage_latency_ms: dict = field(default_factory=dict)
    stage_tokens: dict = field(default_factory=dict)
    error: str | None = None
    schema_version: int = TRACE_SCHEMA_VERSION

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "PipelineTrace":
        d = dict(d)
        for key in ("bbox", "pixel_rect", "crop_size"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return PipelineTrace(**d)


def _account(trace: PipelineTrace, stage: str, reply: ModelReply) -> None:
    trace.stage_latency_ms[stage] = reply.latency_ms
    trace.stage_tokens[stage] = {
        "prompt": reply.prompt_tokens,
        "completion": reply.completion_tokens,
    }


def _call(backend: Backend, conv, stage: str) -> ModelReply:
    try:
        return backend.complete(conv)
    except Exception as e:
        raise StageError(stage, e) from e


def run_baseline(
    img: Image,
    question: str,
    options: list[tuple[str, str]],
    cfg: PipelineConfig,
    backend: Backend | None = None,
    question_id: str = "",
) -> PipelineTrace:
    """Single-pass inference on the downsampled image."""
    backend = backend or HttpBackend(cfg.backend)
    templates = cfg.resolved_templates()
    trace = PipelineTrace(question_id=question_id, mode=MODE_BASELINE, config_hash=config_hash(cfg))
    img_ds = downsample(img, cfg.downsample_max_side)
    conv = render_baseline_request(img_ds, question, options, templates)
    reply = _call(backend, conv, "baseline")
    _account(trace, "baseline", reply)
    label = parse_choice(reply.text, options)
    trace.initial_raw = reply.text
    trace.initial_label = label
    trace.final_raw = reply.text
    trace.final_label = label
    return trace


def run_zoom_refine(
    img: Image,
    question: str,
    options: list[tuple[str, str]],
    cfg: PipelineConfig,
    backend: Backend | None = None,
    question_id: str = "",
) -> PipelineTrace:
    """Two-stage inference: localize on the downsampled view, refine on the crop."""
    backend = backend or HttpBackend(cfg.backend)
    templates = cfg.resolved_templates()
    trace = PipelineTrace(
        question_id=question_id, mode=MODE_ZOOM_REFINE, config_hash=config_hash(cfg)
    )

    img_ds = downsample(img, cfg.downsample_max_side)
    stage1 = render_zoom_request(img_ds, question, options, templates)
    reply1 = _call(backend, stage1, "localized_zoom")
    _account(trace, "localized_zoom", reply1)
    parsed = parse_zoom_reply(reply1.text, options)
    trace.initial_raw = reply1.text
    trace.initial_label = parsed.preliminary_answer
    trace.bbox_repaired = parsed.bbox_repaired

    def fall_back(reason: str) -> PipelineTrace:
        trace.fallback_reason = reason
        trace.final_raw = reply1.text
        trace.final_label = parsed.preliminary_answer
        trace.revised = False
        return trace

    if parsed.bbox is None:
        return fall_back("no_bbox")
    trace.bbox = parsed.bbox.as_tuple()

    try:
        # Localization is realized on the original full-resolution frame,
        # never on the downsampled view.
        rect = denormalize(parsed.bbox, img)
        rect = expand_and_clamp(rect, cfg.crop_policy, img)
        trace.pixel_rect = rect.as_tuple()
        crop_img = crop(img, rect)
        if max(crop_img.width, crop_img.height) > cfg.crop_policy.max_side_px:
            crop_img = downsample(crop_img, cfg.crop_policy.max_side_px)
        trace.crop_size = (crop_img.width, crop_img.height)
    except Exception:
        return fall_back("crop_failed")

    stage2 = build_refine_conversation(stage1, reply1.text, crop_img, question, templates)
    reply2 = _call(backend, stage2, "self_refine")
    _account(trace, "self_refine", reply2)
    final_label = parse_choice(reply2.text, options)
    if final_label is None:
        trace.fallback_reason = "stage2_unparsed"
        trace.final_raw = reply2.text
        trace.final_label = parsed.preliminary_answer
        trace.revised = False
        return trace

    trace.final_raw = reply2.text
    trace.final_label = final_label
    trace.revised = final_label != parsed.preliminary_answer
    return trace


def run_record(
    img: Image,
    question: str,
    options: list[tuple[str, str]],
    cfg: PipelineConfig,
    backend: Backend | None = None,
    question_id: str = "",
) -> PipelineTrace:
    """Dispatch on the configured mode."""
    runner = run_baseline if cfg.mode == MODE_BASELINE else run_zoom_refine
    return runner(img, question, options, cfg, backend=backend, question_id=question_id)


def write_traces(traces: Iterable[PipelineTrace], path: str | Path) -> None:
    """One JSON object per line."""
    with open(path, "w", encoding="utf-8") as f:
        for t in traces:
            f.write(json.dumps(t.to_dict(), sort_keys=True) + "\n")


def read_traces(path: str | Path) -> list[PipelineTrace]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(PipelineTrace.from_dict(json.loads(line)))
    return out
