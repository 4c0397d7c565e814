"""Dataset ingestion, bounded-concurrency evaluation with a resumable
cache, and accuracy/cost metrics (weighted Avg and unweighted Avg-C)."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path

from .backend import Backend, HttpBackend
from .imaging import load_image
from .pipeline import PipelineConfig, PipelineTrace, config_hash, run_record

__all__ = [
    "BenchmarkRecord",
    "EvalSummary",
    "SchemaError",
    "UnmatchedTrace",
    "load_dataset",
    "evaluate",
    "score",
    "report",
    "compare_summaries",
    "cache_key",
    "SUBTASK_ORDER",
]

# Canonical row order for reports; unknown subtasks follow alphabetically.
SUBTASK_ORDER = ["OCR", "RS", "DT", "MO", "AD", "FSP", "FCP"]

_LABELS = "ABCDE"


class SchemaError(Exception):
    """Dataset file violates the documented JSONL schema."""


class UnmatchedTrace(Exception):
    """A trace's question_id has no corresponding record."""


@dataclass(frozen=True)
class BenchmarkRecord:
    id: str
    image_path: str
    question: str
    options: tuple[tuple[str, str], ...]
    answer: str
    task: str = "perception"
    subtask: str = "default"

    def __post_init__(self):
        labels = [label for label, _ in self.options]
        if self.answer not in labels:
            raise ValueError(f"record {self.id}: answer {self.answer!r} not among options")
        if len(set(labels)) != len(labels):
            raise ValueError(f"record {self.id}: duplicate option labels")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "image_path": self.image_path,
            "question": self.question,
            "options": {label: text for label, text in self.options},
            "answer": self.answer,
            "task": self.task,
            "subtask": self.subtask,
        }


def load_dataset(path: str | Path, image_root: str | Path | None = None) -> list[BenchmarkRecord]:
    """Read and validate a JSONL dataset.

    Each line: {id, image_path, question, options: {label: text}, answer,
    task, subtask}. Image paths resolve relative to ``image_root`` (default:
    the dataset file's directory).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    root = Path(image_root) if image_root is not None else path.parent
    records: list[BenchmarkRecord] = []
    seen: set[str] = set()
    missing: list[str] = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(f"{path}:{lineno}: invalid JSON: {e}") from e
            try:
                rid = str(d["id"])
                opts = d["options"]
                if isinstance(opts, dict):
                    options = tuple(sorted(opts.items()))
                else:
                    options = tuple((o["label"], o["text"]) for o in opts)
                img_path = str(root / d["image_path"])
                rec = BenchmarkRecord(
                    id=rid,
                    image_path=img_path,
                    question=str(d["question"]),
                    options=options,
                    answer=str(d["answer"]),
                    task=str(d.get("task", "perception")),
                    subtask=str(d.get("subtask", "default")),
                )
            except (KeyError, TypeError, ValueError) as e:
                raise SchemaError(f"{path}:{lineno}: {e}") from e
            if rec.id in seen:
                raise SchemaError(f"{path}:{lineno}: duplicate id {rec.id!r}")
            seen.add(rec.id)
            if not Path(rec.image_path).exists():
                missing.append(rec.id)
            records.append(rec)
    if missing:
        raise SchemaError(f"{path}: missing image files for records {missing}")
    return records


@dataclass
class EvalSummary:
    per_subtask: dict = field(default_factory=dict)
    avg: float = 0.0
    avg_c: float = 0.0
    fallback_rate: float = 0.0
    revision_rate: float = 0.0
    unparsed_rate: float = 0.0
    error_count: int = 0
    total: int = 0
    correct: int = 0
    total_tokens: dict = field(default_factory=lambda: {"prompt": 0, "completion": 0})
    total_wall_time_s: float = 0.0
    mode: str = ""
    config_hash: str = ""

    def to_dict(self, include_timing: bool = True) -> dict:
        d = {
            "per_subtask": self.per_subtask,
            "avg": self.avg,
            "avg_c": self.avg_c,
            "fallback_rate": self.fallback_rate,
            "revision_rate": self.revision_rate,
            "unparsed_rate": self.unparsed_rate,
            "error_count": self.error_count,
            "total": self.total,
            "correct": self.correct,
            "total_tokens": self.total_tokens,
            "mode": self.mode,
            "config_hash": self.config_hash,
        }
        if include_timing:
            d["total_wall_time_s"] = self.total_wall_time_s
        return d

    @staticmethod
    def from_dict(d: dict) -> "EvalSummary":
        known = {f for f in EvalSummary.__dataclass_fields__}
        return EvalSummary(**{k: v for k, v in d.items() if k in known})


def cache_key(record_id: str, cfg_hash: str) -> str:
    return hashlib.sha256(f"{record_id}|{cfg_hash}".encode("utf-8")).hexdigest()


def _cache_path(cache_dir: Path, record_id: str, cfg_hash: str) -> Path:
    return cache_dir / f"{cache_key(record_id, cfg_hash)}.json"


def _write_atomic(path: Path, payload: dict) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump(payload, f, sort_keys=True)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _run_one(record: BenchmarkRecord, cfg: PipelineConfig, backend: Backend) -> PipelineTrace:
    cfg_hash = config_hash(cfg)
    try:
        img = load_image(record.image_path)
        return run_record(
            img,
            record.question,
            list(record.options),
            cfg,
            backend=backend,
            question_id=record.id,
        )
    except Exception as e:
        return PipelineTrace(
            question_id=record.id,
            mode=cfg.mode,
            config_hash=cfg_hash,
            error=f"{type(e).__name__}: {e}",
        )


def evaluate(
    records: list[BenchmarkRecord],
    cfg: PipelineConfig,
    parallelism: int = 1,
    cache_dir: str | Path | None = None,
    backend: Backend | None = None,
) -> tuple[list[PipelineTrace], EvalSummary]:
    """Run the pipeline over a dataset with at most ``parallelism`` records in
    flight. Completed traces are persisted immediately (atomic write-then-
    rename); a rerun with the same cache keys skips completed records.

    On KeyboardInterrupt, pending records are cancelled and in-flight ones
    drain so the cache stays consistent.
    """
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    backend = backend or HttpBackend(cfg.backend)
    cfg_hash = config_hash(cfg)
    cache = Path(cache_dir) if cache_dir is not None else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)

    start = time.perf_counter()
    results: dict[str, PipelineTrace] = {}
    todo: list[BenchmarkRecord] = []
    for rec in records:
        if cache is not None:
            p = _cache_path(cache, rec.id, cfg_hash)
            if p.exists():
                d = json.loads(p.read_text(encoding="utf-8"))
                trace = PipelineTrace.from_dict(d)
                if trace.question_id == rec.id and trace.config_hash == cfg_hash:
                    results[rec.id] = trace
                    continue
        todo.append(rec)

    if todo:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            futures = {pool.submit(_run_one, rec, cfg, backend): rec for rec in todo}
            pending = set(futures)
            try:
                while pending:
                    done, pending = wait(pending, return_when=FIRST_COMPLETED)
                    for fut in done:
                        rec = futures[fut]
                        trace = fut.result()
                        results[rec.id] = trace
                        if cache is not None:
                            _write_atomic(
                                _cache_path(cache, rec.id, cfg_hash), trace.to_dict()
                            )
            except KeyboardInterrupt:
                for fut in pending:
                    fut.cancel()
                raise

    traces = [results[rec.id] for rec in records if rec.id in results]
    summary = score(traces, records)
    summary.total_wall_time_s = time.perf_counter() - start
    summary.mode = cfg.mode
    summary.config_hash = cfg_hash
    return traces, summary


def score(traces: list[PipelineTrace], records: list[BenchmarkRecord]) -> EvalSummary:
    """Per-subtask tallies plus weighted (avg) and unweighted (avg_c) accuracy.

    A record is correct iff the parsed final label equals ground truth; an
    unparsed final answer counts as incorrect.
    """
    by_id = {r.id: r for r in records}
    tallies: dict[str, list[int]] = {}
    fallbacks = revisions = unparsed = errors = correct_total = 0
    tokens = {"prompt": 0, "completion": 0}
    for trace in traces:
        rec = by_id.get(trace.question_id)
        if rec is None:
            raise UnmatchedTrace(f"no record for trace {trace.question_id!r}")
        t = tallies.setdefault(rec.subtask, [0, 0])
        ok = trace.final_label == rec.answer
        t[0] += int(ok)
        t[1] += 1
        correct_total += int(ok)
        fallbacks += int(trace.fallback_reason is not None)
        revisions += int(trace.revised)
        unparsed += int(trace.final_label is None)
        errors += int(trace.error is not None)
        for stage in trace.stage_tokens.values():
            tokens["prompt"] += stage.get("prompt", 0)
            tokens["completion"] += stage.get("completion", 0)

    n = len(traces)
    per_subtask = {
        name: {"correct": c, "total": t, "accuracy": c / t}
        for name, (c, t) in tallies.items()
    }
    accs = [v["accuracy"] for v in per_subtask.values()]
    return EvalSummary(
        per_subtask=per_subtask,
        avg=(correct_total / n) if n else 0.0,
        avg_c=(sum(accs) / len(accs)) if accs else 0.0,
        fallback_rate=(fallbacks / n) if n else 0.0,
        revision_rate=(revisions / n) if n else 0.0,
        unparsed_rate=(unparsed / n) if n else 0.0,
        error_count=errors,
        total=n,
        correct=correct_total,
        total_tokens=tokens,
    )


def _ordered_subtasks(names) -> list[str]:
    known = [s for s in SUBTASK_ORDER if s in names]
    rest = sorted(n for n in names if n not in SUBTASK_ORDER)
    return known + rest


def report(summary: EvalSummary, format: str = "markdown") -> str:
    """Deterministic rendering of a summary as text, json, or markdown."""
    if format == "json":
        return json.dumps(summary.to_dict(), sort_keys=True, indent=2)
    rows = []
    for name in _ordered_subtasks(summary.per_subtask):
        v = summary.per_subtask[name]
        rows.append((name, v["correct"], v["total"], v["accuracy"]))
    if format == "markdown":
        lines = [
            "| Subtask | Correct | Total | Accuracy |",
            "| --- | --- | --- | --- |",
        ]
        for name, c, t, a in rows:
            lines.append(f"| {name} | {c} | {t} | {a:.3f} |")
        lines.append(f"| Avg | {summary.correct} | {summary.total} | {summary.avg:.3f} |")
        lines.append(f"| Avg-C |  |  | {summary.avg_c:.3f} |")
        lines.append("")
        lines.append(
            f"fallback_rate {summary.fallback_rate:.3f}, "
            f"revision_rate {summary.revision_rate:.3f}, "
            f"unparsed_rate {summary.unparsed_rate:.3f}, "
            f"errors {summary.error_count}"
        )
        lines.append(
            f"wall time {summary.total_wall_time_s:.1f}s, "
            f"tokens prompt={summary.total_tokens['prompt']} "
            f"completion={summary.total_tokens['completion']}"
        )
        return "\n".join(lines)
    if format == "text":
        lines = [f"{name}: {c}/{t} = {a:.3f}" for name, c, t, a in rows]
        lines.append(f"avg {summary.avg:.3f}  avg_c {summary.avg_c:.3f}")
        return "\n".join(lines)
    raise ValueError(f"unknown format {format!r}")


def compare_summaries(ours: EvalSummary, baseline: EvalSummary) -> str:
    """Markdown delta table (ours minus baseline), per subtask and aggregate."""
    names = _ordered_subtasks(set(ours.per_subtask) | set(baseline.per_subtask))
    lines = [
        "| Subtask | Ours | Baseline | Delta |",
        "| --- | --- | --- | --- |",
    ]

    def acc(s: EvalSummary, name: str) -> float:
        return s.per_subtask.get(name, {}).get("accuracy", 0.0)

    for name in names:
        a, b = acc(ours, name), acc(baseline, name)
        lines.append(f"| {name} | {a:.3f} | {b:.3f} | {a - b:+.3f} |")
    lines.append(f"| Avg | {ours.avg:.3f} | {baseline.avg:.3f} | {ours.avg - baseline.avg:+.3f} |")
    lines.append(
        f"| Avg-C | {ours.avg_c:.3f} | {baseline.avg_c:.3f} | {ours.avg_c - baseline.avg_c:+.3f} |"
    )
    return "\n".join(lines)
