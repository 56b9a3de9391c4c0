"""Session-oriented HTTP chat service.

Endpoints: POST /sessions, POST /sessions/{id}/messages, GET /sessions/{id},
POST /sessions/{id}/ratings, GET /healthz. All errors use the envelope
{"error": {"code": str, "message": str}}. Turns within one session are
strictly serialized; an overlapping turn request gets 409 instead of waiting.

Sessions persist as append-only JSONL event logs (one file per session) so a
restart restores open sessions from disk.
"""

from __future__ import annotations

import json
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .checkpoint import checkpoint_hash
from .evalsuite import RATING_METRICS
from .runtime import ChatContext, DecodeParams, ModelBundle, chat_turn

DEFAULT_EPSILON = 0.61
DEFAULT_K = 5
DEFAULT_IDLE_TIMEOUT = 24 * 3600.0


@dataclass(frozen=True)
class ServiceConfig:
    epsilon: float = DEFAULT_EPSILON
    k: int = DEFAULT_K
    max_response_len: int = 16
    log_dir: str | None = None
    idle_timeout: float = DEFAULT_IDLE_TIMEOUT
    cors_origins: tuple[str, ...] = ("*",)
    include_candidates: bool = True
    checkpoint_dirs: dict | None = None  # name -> path, reported by /healthz


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str) -> None:
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


@dataclass
class TurnEntry:
    user_text: str
    response: str
    switched: bool
    beta: float
    degenerate: bool
    candidates: list[dict]

    def as_payload(self, include_candidates: bool) -> dict:
        payload = {
            "user_text": self.user_text,
            "response": self.response,
            "switched": self.switched,
            "beta": self.beta,
            "degenerate": self.degenerate,
        }
        if include_candidates:
            payload["candidates"] = self.candidates
        return payload


@dataclass
class Session:
    id: str
    epsilon: float
    k: int
    created_at: float
    ctx: ChatContext = field(default_factory=ChatContext)
    transcript: list[TurnEntry] = field(default_factory=list)
    rating: dict | None = None
    last_active: float = 0.0
    turn_lock: threading.Lock = field(default_factory=threading.Lock)


class SessionStore:
    """In-memory session map mirrored to per-session JSONL event logs."""

    def __init__(self, log_dir: str | None = None,
                 idle_timeout: float = DEFAULT_IDLE_TIMEOUT) -> None:
        self._sessions: dict[str, Session] = {}
        self._map_lock = threading.Lock()
        self.idle_timeout = idle_timeout
        self.log_dir = Path(log_dir) if log_dir else None
        if self.log_dir is not None:
            self.log_dir.mkdir(parents=True, exist_ok=True)
            self._restore()

    # -- persistence --

    def _log_path(self, session_id: str) -> Path | None:
        if self.log_dir is None:
            return None
        return self.log_dir / f"{session_id}.jsonl"

    def _append_event(self, session_id: str, event: dict) -> None:
        path = self._log_path(session_id)
        if path is None:
            return
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(event, ensure_ascii=False) + "\n")

    def _restore(self) -> None:
        for path in sorted(self.log_dir.glob("*.jsonl")):
            session = self._replay(path)
            if session is not None:
                self._sessions[session.id] = session

    @staticmethod
    def _replay(path: Path) -> Session | None:
        session = None
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                event = json.loads(line)
                kind = event.get("event")
                if kind == "created":
                    session = Session(
                        id=event["id"], epsilon=event["epsilon"],
                        k=event["k"], created_at=event["created_at"],
                        last_active=event["created_at"])
                elif session is None:
                    return None  # corrupt log: events before creation
                elif kind == "turn":
                    session.transcript.append(TurnEntry(
                        user_text=event["user_text"],
                        response=event["response"],
                        switched=event["switched"],
                        beta=event["beta"],
                        degenerate=event["degenerate"],
                        candidates=event["candidates"]))
                    session.ctx = ChatContext(
                        turns=[tuple(t) for t in event["ctx_turns"]],
                        turn_counter=event["turn_counter"],
                        topic_segments=event["topic_segments"])
                    session.last_active = event.get("at", session.last_active)
                elif kind == "rating":
                    session.rating = {m: event[m] for m in RATING_METRICS}
        return session

    # -- session operations --

    def create(self, epsilon: float, k: int) -> Session:
        now = time.time()
        session = Session(id=uuid.uuid4().hex, epsilon=epsilon, k=k,
                          created_at=now, last_active=now)
        with self._map_lock:
            self._sessions[session.id] = session
        self._append_event(session.id, {
            "event": "created", "id": session.id, "epsilon": epsilon,
            "k": k, "created_at": now})
        return session

    def get(self, session_id: str) -> Session:
        with self._map_lock:
            session = self._sessions.get(session_id)
        if session is None:
            raise ApiError(404, "not_found", f"unknown session {session_id!r}")
        return session

    def count(self) -> int:
        with self._map_lock:
            return len(self._sessions)

    def record_turn(self, session: Session, entry: TurnEntry) -> None:
        session.transcript.append(entry)
        session.last_active = time.time()
        self._append_event(session.id, {
            "event": "turn", "at": session.last_active,
            **entry.as_payload(include_candidates=True),
            "ctx_turns": [list(t) for t in session.ctx.turns],
            "turn_counter": session.ctx.turn_counter,
            "topic_segments": session.ctx.topic_segments})

    def record_rating(self, session: Session, rating: dict) -> None:
        session.rating = rating
        session.last_active = time.time()
        self._append_event(session.id, {
            "event": "rating", "at": session.last_active, **rating})

    def purge_idle(self) -> int:
        cutoff = time.time() - self.idle_timeout
        with self._map_lock:
            stale = [sid for sid, s in self._sessions.items()
                     if s.last_active < cutoff]
            for sid in stale:
                del self._sessions[sid]
        return len(stale)

    def ratings_rows(self) -> list[dict]:
        with self._map_lock:
            sessions = list(self._sessions.values())
        return [{"session_id": s.id, **s.rating}
                for s in sessions if s.rating is not None]


# --- request bodies ---------------------------------------------------------------


class CreateSessionBody(BaseModel):
    epsilon: float | None = Field(default=None, ge=0.0, le=1.0)
    k: int | None = Field(default=None, ge=1)


class MessageBody(BaseModel):
    text: str


class RatingBody(BaseModel):
    coherence: int = Field(ge=0, le=2)
    informativeness: int = Field(ge=0, le=2)
    engagingness: int = Field(ge=0, le=2)
    humanness: int = Field(ge=0, le=2)


# --- app factory ------------------------------------------------------------------


def _session_payload(session: Session, include_candidates: bool) -> dict:
    return {
        "id": session.id,
        "created_at": session.created_at,
        "epsilon": session.epsilon,
        "k": session.k,
        "topic_segments": session.ctx.topic_segments,
        "turns": [t.as_payload(include_candidates) for t in session.transcript],
        "rating": session.rating,
    }


def create_app(
    models: ModelBundle | None,
    config: ServiceConfig = ServiceConfig(),
    turn_hook: Callable[[str], None] | None = None,
) -> FastAPI:
    """Build the service; `turn_hook` runs inside the turn lock (test seam)."""
    app = FastAPI(title="topicchat", docs_url=None, redoc_url=None)
    store = SessionStore(config.log_dir, config.idle_timeout)
    app.state.store = store
    app.state.models = models
    app.state.config = config

    checkpoint_hashes = {}
    for name, path in (config.checkpoint_dirs or {}).items():
        checkpoint_hashes[name] = checkpoint_hash(path)

    if config.cors_origins:
        app.add_middleware(
            CORSMiddleware, allow_origins=list(config.cors_origins),
            allow_methods=["*"], allow_headers=["*"])

    @app.exception_handler(ApiError)
    async def api_error_handler(request: Request, exc: ApiError):
        return JSONResponse(
            status_code=exc.status,
            content={"error": {"code": exc.code, "message": exc.message}})

    @app.exception_handler(RequestValidationError)
    async def validation_handler(request: Request, exc: RequestValidationError):
        return JSONResponse(
            status_code=422,
            content={"error": {"code": "validation", "message": str(exc.errors())}})

    def require_models() -> ModelBundle:
        if models is None:
            raise ApiError(503, "not_ready", "models are not loaded")
        return models

    @app.post("/sessions", status_code=201)
    def create_session(body: CreateSessionBody | None = None) -> dict:
        require_models()
        store.purge_idle()
        body = body or CreateSessionBody()
        session = store.create(
            epsilon=body.epsilon if body.epsilon is not None else config.epsilon,
            k=body.k if body.k is not None else config.k)
        return {"id": session.id}

    @app.post("/sessions/{session_id}/messages")
    def post_message(session_id: str, body: MessageBody) -> dict:
        bundle = require_models()
        session = store.get(session_id)
        if not body.text.strip():
            raise ApiError(422, "empty_text", "message text must be non-empty")
        if not session.turn_lock.acquire(blocking=False):
            raise ApiError(409, "turn_in_flight",
                           "another turn is already running for this session")
        try:
            if turn_hook is not None:
                turn_hook(session_id)
            result = chat_turn(
                bundle, session.ctx, body.text,
                epsilon=session.epsilon, K=session.k,
                decode_params=DecodeParams(max_response_len=config.max_response_len))
            decision = result.decision
            entry = TurnEntry(
                user_text=body.text,
                response=result.response,
                switched=decision.switched,
                beta=decision.beta,
                degenerate=decision.degenerate,
                candidates=[{"z": c.z, "text": c.text,
                             "score": c.coherence_score}
                            for c in result.candidates])
            session.ctx = result.ctx
            store.record_turn(session, entry)
        finally:
            session.turn_lock.release()
        payload = {"response": entry.response, "switched": entry.switched,
                   "beta": entry.beta}
        if config.include_candidates:
            payload["candidates"] = entry.candidates
        return payload

    @app.get("/sessions/{session_id}")
    def get_transcript(session_id: str) -> dict:
        session = store.get(session_id)
        return _session_payload(session, config.include_candidates)

    @app.post("/sessions/{session_id}/ratings", status_code=201)
    def post_rating(session_id: str, body: RatingBody) -> dict:
        session = store.get(session_id)
        if session.rating is not None:
            raise ApiError(409, "already_rated",
                           "this session already has a rating")
        rating = {m: getattr(body, m) for m in RATING_METRICS}
        store.record_rating(session, rating)
        return {"rating": rating}

    @app.get("/healthz")
    def healthz() -> dict:
        return {
            "status": "ok" if models is not None else "not_ready",
            "sessions": store.count(),
            "epsilon": config.epsilon,
            "k": config.k,
            "checkpoints": checkpoint_hashes,
        }

    return app
