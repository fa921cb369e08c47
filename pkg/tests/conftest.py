from __future__ import annotations

import asyncio
import contextlib
import json
import os
import signal
import socket
import subprocess
import sys
import time
import urllib.request

import pytest
import uvicorn

from serve_emu.server import ServerConfig, create_app


def run_async(coro):
    """Run a coroutine on a fresh event loop (tests stay sync-looking)."""
    return asyncio.run(coro)


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@contextlib.asynccontextmanager
async def running_app(cfg: ServerConfig):
    """In-process uvicorn server bound to cfg.port; yields the base URL."""
    app = create_app(cfg)
    config = uvicorn.Config(
        app, host=cfg.host, port=cfg.port, log_level="error", access_log=False
    )
    server = uvicorn.Server(config)
    task = asyncio.get_running_loop().create_task(server.serve())
    try:
        while not server.started:
            if task.done():
                task.result()
                raise RuntimeError("server exited before startup")
            await asyncio.sleep(0.005)
        yield f"http://{cfg.host}:{cfg.port}", app
    finally:
        server.should_exit = True
        await task


def wait_for_health(url: str, timeout_s: float = 20.0) -> None:
    deadline = time.monotonic() + timeout_s
    last_err = None
    while time.monotonic() < deadline:
        try:
            with urllib.request.urlopen(f"{url}/health", timeout=2) as resp:
                if resp.status == 200:
                    return
        except Exception as exc:  # noqa: BLE001
            last_err = exc
        time.sleep(0.1)
    raise TimeoutError(f"server at {url} did not become healthy: {last_err}")


@contextlib.contextmanager
def server_subprocess(args: list[str], port: int):
    """`python -m serve_emu serve ...` as a child process; yields base URL."""
    cmd = [sys.executable, "-m", "serve_emu", "serve", "--port", str(port), *args]
    proc = subprocess.Popen(
        cmd, stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True
    )
    url = f"http://127.0.0.1:{port}"
    try:
        wait_for_health(url)
        yield url
    finally:
        proc.send_signal(signal.SIGINT)
        try:
            proc.wait(timeout=15)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()


def get_json(url: str) -> dict:
    with urllib.request.urlopen(url, timeout=5) as resp:
        return json.loads(resp.read())
