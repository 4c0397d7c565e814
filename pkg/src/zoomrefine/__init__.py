"""Two-stage zoom-and-refine inference for high-resolution visual question
answering, with a benchmark harness and a deterministic synthetic oracle."""

from .backend import BackendConfig, HttpBackend, MockBackend, ModelReply
from .bench import BenchmarkRecord, EvalSummary, evaluate, load_dataset, report, score
from .imaging import CropPolicy, Image, NormBBox, PixelRect
from .mockworld import OracleBackend, OracleConfig, gen_dataset, gen_scene
from .pipeline import PipelineConfig, PipelineTrace, run_baseline, run_zoom_refine
from .protocol import Conversation, PromptTemplates, Turn, default_templates

__version__ = "0.1.0"

__all__ = [
    "BackendConfig",
    "HttpBackend",
    "MockBackend",
    "ModelReply",
    "BenchmarkRecord",
    "EvalSummary",
    "evaluate",
    "load_dataset",
    "report",
    "score",
    "CropPolicy",
    "Image",
    "NormBBox",
    "PixelRect",
    "OracleBackend",
    "OracleConfig",
    "gen_dataset",
    "gen_scene",
    "PipelineConfig",
    "PipelineTrace",
    "run_baseline",
    "run_zoom_refine",
    "Conversation",
    "PromptTemplates",
    "Turn",
    "default_templates",
]
