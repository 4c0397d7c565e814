"""Command-line entry points: run, eval, report, config show, mock gen/serve.

Exit codes: 0 ok, 2 usage, 3 config, 4 dataset, 5 backend-fatal.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import yaml

from . import bench
from .backend import AuthError, BackendUnavailable
from .config import ConfigError, load_run_config
from .imaging import DecodeError, load_image
from .mockworld import OracleConfig, gen_dataset, load_registry
from .pipeline import StageError, config_hash, run_record, write_traces

EXIT_CONFIG = 3
EXIT_DATASET = 4
EXIT_BACKEND = 5


def _fail(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_config(path: str | None):
    try:
        return load_run_config(path)
    except ConfigError as e:
        _fail(EXIT_CONFIG, str(e))


@click.group()
def main():
    """Zoom-refine inference pipeline and benchmark harness."""


@main.command("run")
@click.argument("image_path", type=click.Path())
@click.argument("question")
@click.option("--option", "-o", "option_args", multiple=True, required=True,
              help="Answer option as LABEL=TEXT, repeatable (e.g. -o A=42 -o B=17).")
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="YAML run config file.")
@click.option("--mode", type=click.Choice(["baseline", "zoom_refine"]), default=None,
              help="Override the configured mode.")
def cmd_run(image_path, question, option_args, config_path, mode):
    """Answer one question about one image and print the full trace."""
    cfg_file = _load_config(config_path)
    options = []
    for arg in option_args:
        if "=" not in arg:
            raise click.UsageError(f"option {arg!r} must look like LABEL=TEXT")
        label, _, text = arg.partition("=")
        options.append((label.strip(), text.strip()))
    if not Path(image_path).exists():
        raise click.UsageError(f"image not found: {image_path}")
    try:
        pcfg = cfg_file.pipeline_config(mode)
    except ConfigError as e:
        _fail(EXIT_CONFIG, str(e))
    click.echo(f"config hash: {config_hash(pcfg)}")
    try:
        img = load_image(image_path)
        trace = run_record(img, question, options, pcfg, question_id=image_path)
    except DecodeError as e:
        _fail(EXIT_DATASET, str(e))
    except (AuthError, BackendUnavailable, StageError) as e:
        _fail(EXIT_BACKEND, str(e))
    click.echo(f"mode: {trace.mode}")
    click.echo(f"initial answer: {trace.initial_label} ({trace.initial_raw!r})")
    if trace.mode == "zoom_refine":
        click.echo(f"bbox: {trace.bbox} (repaired: {trace.bbox_repaired})")
        click.echo(f"crop rect: {trace.pixel_rect} crop size: {trace.crop_size}")
        click.echo(f"fallback: {trace.fallback_reason}")
    click.echo(f"final answer: {trace.final_label} (revised: {trace.revised})")


@main.command("eval")
@click.argument("dataset_path", type=click.Path())
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--mode", type=click.Choice(["baseline", "zoom_refine"]), default=None)
@click.option("--parallelism", type=int, default=None)
@click.option("--resume/--no-resume", default=True,
              help="Reuse cached per-record traces (default on).")
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="Output directory for traces/summary/report.")
def cmd_eval(dataset_path, config_path, mode, parallelism, resume, out_dir):
    """Evaluate a JSONL dataset; write traces, summary JSON, markdown report."""
    cfg_file = _load_config(config_path)
    try:
        pcfg = cfg_file.pipeline_config(mode)
    except ConfigError as e:
        _fail(EXIT_CONFIG, str(e))
    try:
        records = bench.load_dataset(dataset_path, cfg_file.image_root)
    except (FileNotFoundError, bench.SchemaError) as e:
        _fail(EXIT_DATASET, str(e))
    out = Path(out_dir or cfg_file.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache_dir = None
    if resume:
        cache_dir = cfg_file.cache_dir or str(out / "cache")
    par = parallelism if parallelism is not None else cfg_file.parallelism
    click.echo(f"config hash: {config_hash(pcfg)}")
    try:
        traces, summary = bench.evaluate(
            records, pcfg, parallelism=par, cache_dir=cache_dir
        )
    except (AuthError, BackendUnavailable) as e:
        _fail(EXIT_BACKEND, str(e))
    write_traces(traces, out / f"traces_{pcfg.mode}.jsonl")
    (out / f"summary_{pcfg.mode}.json").write_text(
        json.dumps(summary.to_dict(), sort_keys=True, indent=2), encoding="utf-8"
    )
    (out / f"report_{pcfg.mode}.md").write_text(
        bench.report(summary, "markdown"), encoding="utf-8"
    )
    click.echo(bench.report(summary, "text"))
    if summary.error_count:
        click.echo(f"completed with {summary.error_count} per-record errors", err=True)


@main.command("report")
@click.argument("ours_summary", type=click.Path(exists=True))
@click.argument("baseline_summary", type=click.Path(exists=True))
def cmd_report(ours_summary, baseline_summary):
    """Print a per-subtask delta table between two summary JSON files."""
    try:
        ours = bench.EvalSummary.from_dict(json.loads(Path(ours_summary).read_text()))
        base = bench.EvalSummary.from_dict(json.loads(Path(baseline_summary).read_text()))
    except (json.JSONDecodeError, TypeError) as e:
        _fail(EXIT_DATASET, f"summary schema mismatch: {e}")
    click.echo(bench.compare_summaries(ours, base))


@main.group("config")
def cmd_config():
    """Configuration helpers."""


@cmd_config.command("show")
@click.option("--config", "config_path", type=click.Path(), default=None)
def config_show(config_path):
    """Print the effective configuration (defaults merged with the file)."""
    cfg = _load_config(config_path)
    click.echo(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


@main.group("mock")
def cmd_mock():
    """Synthetic scene generation and the oracle server."""


@cmd_mock.command("gen")
@click.argument("out_dir", type=click.Path())
@click.option("--count", type=int, default=20)
@click.option("--canvas-side", type=int, default=2048)
@click.option("--small-size", type=int, default=16, help="Glyph height legible only when cropped.")
@click.option("--large-size", type=int, default=64, help="Glyph height legible when downsampled.")
@click.option("--small-fraction", type=float, default=0.5)
@click.option("--distractors", type=int, default=12)
@click.option("--seed", type=int, default=0)
def mock_gen(out_dir, count, canvas_side, small_size, large_size, small_fraction,
             distractors, seed):
    """Generate a scene directory: images/, dataset.jsonl, scenes.jsonl."""
    try:
        records, _ = gen_dataset(
            out_dir,
            count=count,
            canvas_side=canvas_side,
            small_size_px=small_size,
            large_size_px=large_size,
            small_fraction=small_fraction,
            distractor_count=distractors,
            seed=seed,
        )
    except ValueError as e:
        _fail(EXIT_CONFIG, str(e))
    click.echo(f"wrote {len(records)} scenes to {out_dir}")


@cmd_mock.command("serve")
@click.argument("scenes_path", type=click.Path(exists=True))
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8000)
@click.option("--threshold", type=float, default=12.0, help="Legibility threshold in pixels.")
@click.option("--bbox-noise", type=float, default=0.0)
@click.option("--no-bbox-probability", type=float, default=0.0)
@click.option("--wrong-answer-policy", type=click.Choice(["fixed_offset", "seeded_random"]),
              default="fixed_offset")
@click.option("--seed", type=int, default=0)
def mock_serve(scenes_path, host, port, threshold, bbox_noise, no_bbox_probability,
               wrong_answer_policy, seed):
    """Serve the oracle behind the OpenAI-compatible chat-completions contract."""
    import uvicorn

    from .server import create_app

    registry = load_registry(scenes_path)
    ocfg = OracleConfig(
        legibility_threshold_px=threshold,
        bbox_noise=bbox_noise,
        no_bbox_probability=no_bbox_probability,
        wrong_answer_policy=wrong_answer_policy,
        seed=seed,
    )
    click.echo(f"serving {len(registry)} scenes on http://{host}:{port}")
    uvicorn.run(create_app(registry, ocfg), host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
