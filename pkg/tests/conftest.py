import threading

import pytest

from zoomrefine.bench import load_dataset
from zoomrefine.mockworld import gen_dataset


class CountingBackend:
    """Wraps a backend and counts completed calls (thread-safe)."""

    def __init__(self, inner):
        self.inner = inner
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, conv):
        with self._lock:
            self.calls += 1
        return self.inner.complete(conv)


@pytest.fixture(scope="session")
def small_world(tmp_path_factory):
    """40 scenes on a 512px canvas: half readable only after cropping."""
    out = tmp_path_factory.mktemp("smallworld")
    _, specs = gen_dataset(
        out,
        count=40,
        canvas_side=512,
        small_size_px=16,
        large_size_px=64,
        small_fraction=0.5,
        distractor_count=6,
        seed=5,
    )
    records = load_dataset(out / "dataset.jsonl")
    return out, records, {s.scene_id: s for s in specs}


@pytest.fixture(scope="session")
def oracle_server(small_world):
    """Oracle served over HTTP on a random local port; yields the endpoint URL."""
    import socket
    import time

    import uvicorn

    from zoomrefine.mockworld import OracleConfig
    from zoomrefine.server import create_app

    _, _, registry = small_world
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    app = create_app(registry, OracleConfig())
    server = uvicorn.Server(
        uvicorn.Config(app, host="127.0.0.1", port=port, log_level="error")
    )
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.time() + 10
    while not server.started:
        if time.time() > deadline:
            raise RuntimeError("oracle server failed to start")
        time.sleep(0.02)
    yield f"http://127.0.0.1:{port}/v1/chat/completions"
    server.should_exit = True
    thread.join(timeout=5)
