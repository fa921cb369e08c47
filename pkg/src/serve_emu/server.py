"""Wall-clock HTTP endpoint: streaming completions over a single engine.

Requests carry token counts instead of text (the emulator never tokenizes;
content cannot affect timing). Each generated token becomes one server-sent
event, timestamped when the engine applies the step result, not when the
socket write happens. The same client works against a ground-truth-backed or
an oracle-backed server; only the launch configuration differs.
"""
from __future__ import annotations

import json
from contextlib import asynccontextmanager
from dataclasses import dataclass, field
from pathlib import Path

import uvicorn
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, StreamingResponse

from .engine import (
    AdmissionError,
    EmulatorEngine,
    EngineAbortedError,
    EngineConfig,
    GroundTruthBackend,
    GroundTruthParams,
)
from .oracle import LatencyOracle, OracleConfig
from .profile import load_pack_file

BACKEND_GROUND_TRUTH = "groundtruth"
BACKEND_ORACLE = "oracle"


@dataclass
class ServerConfig:
    engine: EngineConfig
    backend: str = BACKEND_GROUND_TRUTH
    profile_pack: str | None = None
    ground_truth: GroundTruthParams = field(default_factory=GroundTruthParams)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    seed: int = 0
    trace_path: str | None = None
    host: str = "127.0.0.1"
    port: int = 8100

    def validate(self) -> None:
        self.engine.validate()
        if self.backend not in (BACKEND_GROUND_TRUTH, BACKEND_ORACLE):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.backend == BACKEND_ORACLE:
            if not self.profile_pack:
                raise ValueError("oracle backend requires a profile pack path")
            if not Path(self.profile_pack).is_file():
                raise ValueError(f"profile pack not readable: {self.profile_pack}")


def build_backend(cfg: ServerConfig):
    if cfg.backend == BACKEND_ORACLE:
        pack = load_pack_file(cfg.profile_pack)
        oracle_cfg = OracleConfig(
            reliability_floor=cfg.oracle.reliability_floor,
            shepard_power=cfg.oracle.shepard_power,
            epsilon_distance=cfg.oracle.epsilon_distance,
            rng_seed=cfg.seed,
        )
        return LatencyOracle(pack, oracle_cfg)
    return GroundTruthBackend(cfg.ground_truth, seed=cfg.seed)


def _error(status: int, kind: str, message: str) -> JSONResponse:
    return JSONResponse({"error": {"type": kind, "message": message}}, status_code=status)


def _sse(payload: dict) -> str:
    return f"data: {json.dumps(payload, separators=(',', ':'))}\n\n"


def create_app(cfg: ServerConfig) -> FastAPI:
    cfg.validate()

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        backend = build_backend(cfg)
        engine = EmulatorEngine(cfg.engine, backend, trace_path=cfg.trace_path)
        app.state.engine = engine
        await engine.start()
        try:
            yield
        finally:
            await engine.stop()

    app = FastAPI(lifespan=lifespan)

    @app.post("/v1/completions")
    async def completions(request: Request):
        engine: EmulatorEngine = app.state.engine
        try:
            body = await request.json()
        except Exception:
            return _error(400, "validation", "request body must be a JSON object")
        if not isinstance(body, dict):
            return _error(400, "validation", "request body must be a JSON object")

        prompt_tokens = body.get("prompt_tokens")
        max_tokens = body.get("max_tokens")
        stream = body.get("stream", True)
        ignore_eos = body.get("ignore_eos", False)
        for name, value in (("prompt_tokens", prompt_tokens), ("max_tokens", max_tokens)):
            if not isinstance(value, int) or isinstance(value, bool):
                return _error(400, "validation", f"{name} must be an integer")
        if stream is not True:
            return _error(400, "validation", "stream must be true (streaming-only server)")
        if not isinstance(ignore_eos, bool):
            return _error(400, "validation", "ignore_eos must be a boolean")
        # ignore_eos is accepted for interface parity only: generation always
        # runs to max_tokens, which is exactly the ignore-eos behavior.

        try:
            handle = engine.admit(prompt_tokens, max_tokens)
        except AdmissionError as exc:
            return _error(400, "validation", str(exc))
        except EngineAbortedError as exc:
            return _error(500, "engine_aborted", str(exc))

        async def event_stream():
            while True:
                kind, payload = await handle.events.get()
                yield _sse(payload)
                if kind != "token":
                    return

        return StreamingResponse(event_stream(), media_type="text/event-stream")

    @app.get("/stats")
    async def stats():
        return JSONResponse(app.state.engine.stats())

    @app.get("/health")
    async def health():
        engine: EmulatorEngine = app.state.engine
        if engine.alive:
            return JSONResponse({"status": "ok"})
        return _error(503, "engine_down", engine.abort_message or "engine loop not running")

    @app.post("/trace/rotate")
    async def trace_rotate(request: Request):
        # Control surface for profile capture: close the current trace file
        # and start a new one (or stop tracing with path=null). The path is
        # interpreted on the server host.
        try:
            body = await request.json()
        except Exception:
            return _error(400, "validation", "request body must be a JSON object")
        path = body.get("path") if isinstance(body, dict) else None
        if path is not None and not isinstance(path, str):
            return _error(400, "validation", "path must be a string or null")
        app.state.engine.tracer.rotate(path)
        return JSONResponse({"path": path})

    return app


def run_server(cfg: ServerConfig) -> None:
    """Run the server until interrupted (blocking)."""
    app = create_app(cfg)
    uvicorn.run(app, host=cfg.host, port=cfg.port, log_level="warning", access_log=False)
