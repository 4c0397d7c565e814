import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from zoomrefine.backend import (
    AuthError,
    BackendConfig,
    BackendUnavailable,
    HttpBackend,
    MalformedResponse,
    MockBackend,
    MockRule,
    MockScript,
    ScriptError,
    conversation_to_messages,
    mock_complete,
)
from zoomrefine.protocol import Conversation, Turn


def conv(text="hello"):
    return Conversation((Turn("system", "sys"), Turn("user", text)))


class _StubHandler(BaseHTTPRequestHandler):
    # per-server script of (status, body) responses, consumed in order
    script = []
    requests_seen = 0

    def do_POST(self):
        self.rfile.read(int(self.headers.get("Content-Length", 0)))
        type(self).requests_seen += 1
        status, body = self.script[min(type(self).requests_seen - 1, len(self.script) - 1)]
        payload = json.dumps(body).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture()
def stub_server():
    servers = []

    def start(script):
        handler = type("H", (_StubHandler,), {"script": script, "requests_seen": 0})
        srv = HTTPServer(("127.0.0.1", 0), handler)
        t = threading.Thread(target=srv.serve_forever, daemon=True)
        t.start()
        servers.append((srv, t))
        url = f"http://127.0.0.1:{srv.server_address[1]}/v1/chat/completions"
        return url, handler

    yield start
    for srv, t in servers:
        srv.shutdown()
        t.join()


def ok_body(text="fine"):
    return {
        "choices": [{"message": {"role": "assistant", "content": text}}],
        "usage": {"prompt_tokens": 7, "completion_tokens": 3},
    }


def cfg(url, retries=3):
    return BackendConfig(
        endpoint_url=url, max_retries=retries, retry_backoff_base=0.01, request_timeout=5
    )


def test_success_first_attempt(stub_server):
    url, handler = stub_server([(200, ok_body("hi"))])
    reply = HttpBackend(cfg(url)).complete(conv())
    assert reply.text == "hi"
    assert reply.attempt_count == 1
    assert (reply.prompt_tokens, reply.completion_tokens) == (7, 3)


def test_retries_on_429_then_succeeds(stub_server):
    url, handler = stub_server([(429, {}), (429, {}), (200, ok_body())])
    reply = HttpBackend(cfg(url)).complete(conv())
    assert reply.attempt_count == 3
    assert handler.requests_seen == 3


def test_auth_error_no_retry(stub_server):
    url, handler = stub_server([(401, {})])
    with pytest.raises(AuthError):
        HttpBackend(cfg(url)).complete(conv())
    assert handler.requests_seen == 1


def test_other_4xx_not_retried(stub_server):
    url, handler = stub_server([(404, {})])
    with pytest.raises(BackendUnavailable):
        HttpBackend(cfg(url)).complete(conv())
    assert handler.requests_seen == 1


def test_5xx_exhausts_retries(stub_server):
    url, handler = stub_server([(500, {})])
    with pytest.raises(BackendUnavailable):
        HttpBackend(cfg(url, retries=2)).complete(conv())
    assert handler.requests_seen == 3


def test_malformed_response(stub_server):
    url, _ = stub_server([(200, {"nope": True})])
    with pytest.raises(MalformedResponse):
        HttpBackend(cfg(url)).complete(conv())


def test_requires_trailing_user_turn():
    c = Conversation((Turn("user", "q"), Turn("assistant", "a")))
    with pytest.raises(ValueError):
        HttpBackend(cfg("http://x")).complete(c)


def test_wire_shape_with_images():
    c = Conversation(
        (
            Turn("system", "sys"),
            Turn("user", "look", images=((b"\x89PNG", "image/png"),)),
        )
    )
    messages = conversation_to_messages(c)
    assert messages[0] == {"role": "system", "content": "sys"}
    parts = messages[1]["content"]
    assert parts[0] == {"type": "text", "text": "look"}
    assert parts[1]["image_url"]["url"].startswith("data:image/png;base64,")


class TestMock:
    script = MockScript(
        rules=(
            MockRule(reply="(A) ... [0.4,0.4,0.6,0.6]", stage=1),
            MockRule(reply="The answer is (B).", stage=2),
        )
    )

    def img_conv(self, n_images):
        turns = [Turn("system", "s")]
        for i in range(n_images):
            turns.append(Turn("user", f"u{i}", images=((b"x", "image/png"),)))
            if i < n_images - 1:
                turns.append(Turn("assistant", f"a{i}"))
        return Conversation(tuple(turns))

    def test_stage_dispatch(self):
        assert "0.4" in mock_complete(self.img_conv(1), self.script).text
        assert mock_complete(self.img_conv(2), self.script).text == "The answer is (B)."

    def test_deterministic(self):
        a = mock_complete(self.img_conv(1), self.script)
        b = mock_complete(self.img_conv(1), self.script)
        assert a == b

    def test_no_rule_matches(self):
        with pytest.raises(ScriptError):
            mock_complete(self.img_conv(1), MockScript(rules=(MockRule("x", stage=2),)))

    def test_backend_wrapper(self):
        assert MockBackend(self.script).complete(self.img_conv(2)).text.endswith("(B).")
