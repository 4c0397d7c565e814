import json

import pytest

from conftest import CountingBackend
from zoomrefine.bench import (
    BenchmarkRecord,
    EvalSummary,
    SchemaError,
    UnmatchedTrace,
    compare_summaries,
    evaluate,
    load_dataset,
    report,
    score,
)
from zoomrefine.imaging import CropPolicy
from zoomrefine.mockworld import OracleBackend, OracleConfig
from zoomrefine.pipeline import PipelineConfig, PipelineTrace


def small_cfg(mode="zoom_refine"):
    return PipelineConfig(
        downsample_max_side=128,
        crop_policy=CropPolicy(1.2, 64, 512),
        mode=mode,
    )


def write_dataset(tmp_path, lines):
    path = tmp_path / "ds.jsonl"
    path.write_text("\n".join(json.dumps(l) for l in lines) + "\n", encoding="utf-8")
    return path


def record_line(rid, image="img.png", answer="A"):
    return {
        "id": rid,
        "image_path": image,
        "question": "q?",
        "options": {"A": "1", "B": "2"},
        "answer": answer,
        "task": "perception",
        "subtask": "OCR",
    }


class TestLoadDataset:
    def test_valid_file(self, tmp_path):
        (tmp_path / "img.png").write_bytes(b"")
        path = write_dataset(tmp_path, [record_line(f"r{i}") for i in range(3)])
        assert len(load_dataset(path)) == 3

    def test_duplicate_id(self, tmp_path):
        (tmp_path / "img.png").write_bytes(b"")
        path = write_dataset(tmp_path, [record_line("r1"), record_line("r1")])
        with pytest.raises(SchemaError, match="r1"):
            load_dataset(path)

    def test_answer_not_among_options(self, tmp_path):
        (tmp_path / "img.png").write_bytes(b"")
        path = write_dataset(tmp_path, [record_line("r1", answer="Z")])
        with pytest.raises(SchemaError):
            load_dataset(path)

    def test_missing_image_listed(self, tmp_path):
        path = write_dataset(tmp_path, [record_line("r1", image="gone.png")])
        with pytest.raises(SchemaError, match="r1"):
            load_dataset(path)

    def test_bad_json_names_line(self, tmp_path):
        path = tmp_path / "ds.jsonl"
        path.write_text('{"id": "r1"\nnot json\n', encoding="utf-8")
        with pytest.raises(SchemaError, match=":1"):
            load_dataset(path)


def trace_for(rec, label, cfg_hash="h", fallback=None, revised=False):
    return PipelineTrace(
        question_id=rec.id,
        mode="zoom_refine",
        config_hash=cfg_hash,
        final_label=label,
        fallback_reason=fallback,
        revised=revised,
    )


def make_records(spec):
    # spec: list of (subtask, answer)
    return [
        BenchmarkRecord(
            id=f"r{i}",
            image_path="x.png",
            question="q?",
            options=(("A", "1"), ("B", "2")),
            answer=ans,
            subtask=sub,
        )
        for i, (sub, ans) in enumerate(spec)
    ]


class TestScore:
    def test_weighted_vs_unweighted(self):
        records = make_records(
            [("X", "A"), ("X", "A"), ("Y", "A"), ("Y", "A"), ("Y", "A")]
        )
        labels = ["A", "B", "A", "A", "A"]  # X: 1/2, Y: 3/3
        traces = [trace_for(r, l) for r, l in zip(records, labels)]
        s = score(traces, records)
        assert s.avg == pytest.approx(0.8)
        assert s.avg_c == pytest.approx(0.75)

    def test_all_correct(self):
        records = make_records([("X", "A"), ("Y", "A")])
        s = score([trace_for(r, "A") for r in records], records)
        assert s.avg == s.avg_c == 1.0

    def test_single_subtask_equality(self):
        records = make_records([("X", "A"), ("X", "B"), ("X", "A")])
        s = score([trace_for(r, "A") for r in records], records)
        assert s.avg == pytest.approx(s.avg_c)

    def test_unparsed_counts_incorrect(self):
        records = make_records([("X", "A")])
        s = score([trace_for(records[0], None)], records)
        assert s.avg == 0.0 and s.unparsed_rate == 1.0

    def test_unmatched_trace(self):
        records = make_records([("X", "A")])
        stray = trace_for(records[0], "A")
        stray.question_id = "ghost"
        with pytest.raises(UnmatchedTrace):
            score([stray], records)


class TestReport:
    def summary(self):
        records = make_records(
            [("X", "A"), ("X", "A"), ("Y", "A"), ("Y", "A"), ("Y", "A")]
        )
        labels = ["A", "B", "A", "A", "A"]
        return score([trace_for(r, l) for r, l in zip(records, labels)], records)

    def test_markdown_contains_avg_row(self):
        md = report(self.summary(), "markdown")
        assert "| Avg | 4 | 5 | 0.800 |" in md

    def test_json_roundtrip(self):
        s = self.summary()
        back = EvalSummary.from_dict(json.loads(report(s, "json")))
        assert back.to_dict() == s.to_dict()

    def test_comparison_deltas(self):
        s = self.summary()
        md = compare_summaries(s, s)
        assert "+0.000" in md
        records = make_records([("X", "A")])
        worse = score([trace_for(records[0], "B")], records)
        md = compare_summaries(s, worse)
        assert f"| Avg | 0.800 | 0.000 | +0.800 |" in md

    def test_unknown_format(self):
        with pytest.raises(ValueError):
            report(self.summary(), "xml")


class TestEvaluate:
    def test_cached_rerun_zero_calls(self, small_world, tmp_path):
        out, records, registry = small_world
        subset = records[:8]
        cfg = small_cfg()
        backend = CountingBackend(OracleBackend(registry, OracleConfig()))
        traces1, sum1 = evaluate(subset, cfg, parallelism=2, cache_dir=tmp_path, backend=backend)
        first_calls = backend.calls
        assert first_calls > 0
        traces2, sum2 = evaluate(subset, cfg, parallelism=2, cache_dir=tmp_path, backend=backend)
        assert backend.calls == first_calls
        assert sum2.to_dict(include_timing=False) == sum1.to_dict(include_timing=False)
        assert [t.to_dict() for t in traces2] == [t.to_dict() for t in traces1]

    def test_cache_keyed_by_config(self, small_world, tmp_path):
        out, records, registry = small_world
        subset = records[:4]
        backend = CountingBackend(OracleBackend(registry, OracleConfig()))
        evaluate(subset, small_cfg(), parallelism=1, cache_dir=tmp_path, backend=backend)
        calls = backend.calls
        evaluate(subset, small_cfg("baseline"), parallelism=1, cache_dir=tmp_path, backend=backend)
        assert backend.calls > calls

    def test_per_record_errors_do_not_abort(self, small_world, tmp_path):
        out, records, registry = small_world
        import dataclasses

        broken = dataclasses.replace(records[0], image_path=str(out / "missing.png"))
        subset = [broken] + list(records[1:4])
        backend = OracleBackend(registry, OracleConfig())
        traces, summary = evaluate(subset, small_cfg(), parallelism=2, backend=backend)
        assert summary.error_count == 1
        assert len(traces) == 4
