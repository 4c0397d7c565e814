"""FastAPI app serving the mockworld oracle behind the same OpenAI-compatible
chat-completions wire contract the HTTP backend speaks. Used for integration
tests and as the target of ``mock serve``."""

from __future__ import annotations

import base64

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from .mockworld import OracleConfig, SceneSpec, UnknownScene, oracle_reply
from .protocol import Conversation, Turn

__all__ = ["create_app", "ChatRequest", "ChatResponse"]


class ImageURL(BaseModel):
    url: str


class ContentPart(BaseModel):
    type: str
    text: str | None = None
    image_url: ImageURL | None = None


class ChatMessage(BaseModel):
    role: str
    content: str | list[ContentPart]


class ChatRequest(BaseModel):
    model: str
    messages: list[ChatMessage]
    temperature: float = 0.0
    max_tokens: int | None = None


class Choice(BaseModel):
    index: int
    message: dict
    finish_reason: str = "stop"


class Usage(BaseModel):
    prompt_tokens: int
    completion_tokens: int
    total_tokens: int


class ChatResponse(BaseModel):
    id: str
    object: str = "chat.completion"
    created: int = 0
    model: str
    choices: list[Choice]
    usage: Usage


def _decode_data_url(url: str) -> tuple[bytes, str]:
    if not url.startswith("data:"):
        raise HTTPException(status_code=400, detail="only data URLs are supported")
    header, _, b64 = url.partition(",")
    media_type = header[len("data:") :].split(";")[0] or "application/octet-stream"
    try:
        return base64.b64decode(b64), media_type
    except ValueError as e:
        raise HTTPException(status_code=400, detail=f"bad data URL: {e}") from e


def _to_conversation(messages: list[ChatMessage]) -> Conversation:
    turns = []
    for msg in messages:
        if isinstance(msg.content, str):
            turns.append(Turn(role=msg.role, text=msg.content))
            continue
        texts, images = [], []
        for part in msg.content:
            if part.type == "text" and part.text is not None:
                texts.append(part.text)
            elif part.type == "image_url" and part.image_url is not None:
                images.append(_decode_data_url(part.image_url.url))
            else:
                raise HTTPException(status_code=400, detail=f"bad content part {part.type!r}")
        try:
            turns.append(Turn(role=msg.role, text="\n".join(texts), images=tuple(images)))
        except ValueError as e:
            raise HTTPException(status_code=400, detail=str(e)) from e
    try:
        return Conversation(tuple(turns))
    except ValueError as e:
        raise HTTPException(status_code=400, detail=str(e)) from e


def create_app(registry: dict[str, SceneSpec], ocfg: OracleConfig | None = None) -> FastAPI:
    ocfg = ocfg or OracleConfig()
    app = FastAPI(title="zoomrefine mock oracle")
    counter = {"n": 0}

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "scenes": len(registry)}

    @app.post("/v1/chat/completions", response_model=ChatResponse)
    def chat_completions(req: ChatRequest) -> ChatResponse:
        conv = _to_conversation(req.messages)
        try:
            reply = oracle_reply(conv, registry, ocfg)
        except UnknownScene as e:
            raise HTTPException(status_code=400, detail=str(e)) from e
        counter["n"] += 1
        return ChatResponse(
            id=f"mock-{counter['n']}",
            model=req.model,
            choices=[
                Choice(index=0, message={"role": "assistant", "content": reply.text})
            ],
            usage=Usage(
                prompt_tokens=reply.prompt_tokens,
                completion_tokens=reply.completion_tokens,
                total_tokens=reply.prompt_tokens + reply.completion_tokens,
            ),
        )

    return app
