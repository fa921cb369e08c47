"""Serving engine: admission, continuous batching, KV-block accounting, and
timer-resolved step execution.

The engine owns all scheduling state from a single asyncio task. HTTP
handlers (or tests) call `admit` on the same event loop; admitted requests
cross into the scheduler through the arrival-ordered waiting list, and step
results flow back to each request's handle as ordered events. Model execution
is replaced by a pluggable backend that maps a step's shape
(total tokens, concurrency, phase) to a latency; the step's synthetic result
is delivered only after that latency has elapsed on the wall clock.

Scheduling follows chunked-prefill continuous batching: every decoding
request gets one token first, then the remaining token budget goes to
prefills in arrival order, admitting new requests only while their first
chunk's block demand fits. Block-allocation failures for running requests
preempt the most recently arrived running request (recompute-style: blocks
freed, prefill restarts), never to admit new work.
"""
from __future__ import annotations

import asyncio
import bisect
import itertools
import math
import random
import time
from dataclasses import dataclass, field
from enum import Enum, auto
from typing import Callable

from .profile import StepPhase, StepTraceRecord, trace_record_to_line

_now = time.monotonic

# asyncio timers fire late by up to ~1 ms; stop sleeping this early and spin
# out the remainder so a step is never delivered before its sampled latency.
_SPIN_SLACK_S = 0.0015


async def _sleep_until(deadline: float) -> None:
    yielded = False
    while True:
        remaining = deadline - _now()
        if remaining <= _SPIN_SLACK_S:
            break
        await asyncio.sleep(remaining - _SPIN_SLACK_S)
        yielded = True
    if not yielded:
        # Even steps shorter than the slack must let other tasks run.
        await asyncio.sleep(0)
    while _now() < deadline:
        pass


class AdmissionError(ValueError):
    """Request rejected at admission (length or capacity limits)."""


class EngineAbortedError(RuntimeError):
    """The engine stopped after a backend failure."""


class EngineInvariantError(RuntimeError):
    """Internal accounting corruption; aborts the run."""


def blocks_needed(total_tokens: int, block_size: int) -> int:
    return math.ceil(total_tokens / block_size)


# ---------------------------------------------------------------------------
# Configuration and backends
# ---------------------------------------------------------------------------


@dataclass
class EngineConfig:
    num_gpu_blocks: int
    block_size: int = 16
    max_model_len: int = 4096
    max_num_batched_tokens: int = 512
    max_num_seqs: int = 64
    async_scheduling: bool = True

    def validate(self) -> None:
        if self.block_size < 1:
            raise ValueError(f"block_size must be >= 1, got {self.block_size}")
        if self.num_gpu_blocks < 1:
            raise ValueError(f"num_gpu_blocks must be >= 1, got {self.num_gpu_blocks}")
        if self.max_model_len < 1:
            raise ValueError(f"max_model_len must be >= 1, got {self.max_model_len}")
        if self.max_num_batched_tokens < self.block_size:
            raise ValueError(
                f"max_num_batched_tokens {self.max_num_batched_tokens} must be >= "
                f"block_size {self.block_size}"
            )
        if self.max_num_seqs < 1:
            raise ValueError(f"max_num_seqs must be >= 1, got {self.max_num_seqs}")
        if self.max_num_batched_tokens < self.max_num_seqs:
            # Otherwise decoding requests beyond the budget would starve.
            raise ValueError(
                f"max_num_batched_tokens {self.max_num_batched_tokens} must be >= "
                f"max_num_seqs {self.max_num_seqs}"
            )


@dataclass
class GroundTruthParams:
    """Synthetic per-step latency model standing in for GPU execution."""

    base_s: float = 0.003
    per_token_s: float = 4e-5
    per_seq_s: float = 1.2e-4
    prefill_multiplier: float = 1.25
    noise_cv: float = 0.0

    def validate(self) -> None:
        if not self.base_s > 0:
            raise ValueError(f"base_s must be > 0, got {self.base_s}")
        if self.per_token_s < 0 or self.per_seq_s < 0:
            raise ValueError("per_token_s and per_seq_s must be >= 0")
        if self.prefill_multiplier < 1.0:
            raise ValueError(f"prefill_multiplier must be >= 1, got {self.prefill_multiplier}")
        if self.noise_cv < 0:
            raise ValueError(f"noise_cv must be >= 0, got {self.noise_cv}")


def ground_truth_latency(
    tt: int,
    conc: int,
    phase: StepPhase,
    params: GroundTruthParams,
    rng: random.Random,
) -> float:
    """m * (base + per_token*tt + per_seq*conc) * (1 + g), g ~ N(0, cv).

    The noise factor is redrawn if it would make the result nonpositive.
    With noise_cv = 0 no randomness is consumed at all.
    """
    mult = params.prefill_multiplier if phase is StepPhase.PREFILL_OR_MIXED else 1.0
    latency = mult * (params.base_s + params.per_token_s * tt + params.per_seq_s * conc)
    if params.noise_cv == 0:
        return latency
    while True:
        factor = 1.0 + rng.gauss(0.0, params.noise_cv)
        if factor > 0:
            return latency * factor


class GroundTruthBackend:
    """Engine backend wrapping the synthetic latency model with its own rng."""

    def __init__(self, params: GroundTruthParams | None = None, seed: int = 0):
        self.params = params or GroundTruthParams()
        self.params.validate()
        self._rng = random.Random(seed)

    def __call__(self, tt: int, conc: int, phase: StepPhase) -> float:
        return ground_truth_latency(tt, conc, phase, self.params, self._rng)


# ---------------------------------------------------------------------------
# Request and step state
# ---------------------------------------------------------------------------


class RequestPhase(Enum):
    WAITING = auto()
    PREFILLING = auto()
    DECODING = auto()
    PREEMPTED = auto()
    FINISHED = auto()


@dataclass
class RequestHandle:
    """Client-facing view of one admitted request: an ordered event stream.

    Events are ("token", payload), ("final", payload) or ("error", payload)
    tuples; `done` is set when the final or error event has been queued.
    """

    id: int
    prompt_len: int
    target_output_len: int
    events: asyncio.Queue = field(default_factory=asyncio.Queue)
    done: asyncio.Event = field(default_factory=asyncio.Event)


@dataclass
class RequestState:
    id: int
    prompt_len: int
    target_output_len: int
    handle: RequestHandle
    arrival_s: float
    phase: RequestPhase = RequestPhase.WAITING
    prefill_progress: int = 0
    generated: int = 0
    allocated_blocks: int = 0
    first_scheduled_s: float | None = None
    finish_s: float | None = None
    token_times_s: list[float] = field(default_factory=list)


@dataclass(eq=False)
class _Entry:
    req: RequestState
    chunk: int
    is_prefill: bool


@dataclass(eq=False)
class _PreparedStep:
    index: int
    entries: list[_Entry]
    total_tokens: int
    concurrency: int
    phase: StepPhase
    prepared_at: float


@dataclass(eq=False)
class _Outcome:
    step: _PreparedStep
    emissions: list[tuple[RequestState, int]]  # (request, token index)
    finished: list[RequestState]


@dataclass(frozen=True)
class StepRecord:
    """Per-step execution record for hooks and tests (richer than the trace)."""

    step_index: int
    total_tokens: int
    concurrency: int
    phase: StepPhase
    sampled_s: float
    realized_s: float
    prepared_at: float
    started_at: float
    applied_at: float


class StepTracer:
    """JSON-lines writer for StepTraceRecords, rotatable between runs."""

    def __init__(self, path: str | None = None):
        self._file = open(path, "w", encoding="utf-8") if path else None
        self.path = path
        self.records_written = 0

    def write(self, rec: StepTraceRecord) -> None:
        if self._file is not None:
            self._file.write(trace_record_to_line(rec) + "\n")
            self.records_written += 1

    def rotate(self, path: str | None) -> None:
        self.close()
        self._file = open(path, "w", encoding="utf-8") if path else None
        self.path = path

    def close(self) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None


# ---------------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------------


class EmulatorEngine:
    """Single-owner scheduling context with a wall-clock step loop.

    `backend` maps (tt, conc, phase) to a latency in seconds. In async
    scheduling mode the next step is composed while the current step's timer
    is pending (outcomes are synthetic, so the lookahead is exact); in
    blocking mode the loop schedules strictly after each delivery.
    """

    def __init__(
        self,
        config: EngineConfig,
        backend: Callable[[int, int, StepPhase], float],
        *,
        trace_path: str | None = None,
        on_step: Callable[[StepRecord], None] | None = None,
    ):
        config.validate()
        self.config = config
        self._backend = backend
        self._on_step = on_step
        self.tracer = StepTracer(trace_path)

        self._ids = itertools.count()
        self._waiting: list[RequestState] = []  # arrival order (ids ascending)
        self._running: list[RequestState] = []  # arrival order
        self._free_blocks = config.num_gpu_blocks
        self._step_seq = 0
        self._steps_executed = 0
        self._finished_count = 0
        self._preemptions = 0
        self._overshoot_sum = 0.0
        self._overshoot_max = 0.0
        self._created_at = _now()
        self._wake = asyncio.Event()
        self._task: asyncio.Task | None = None
        self._abort_message: str | None = None

    # -- admission ----------------------------------------------------------

    def admit(self, prompt_len: int, target_output_len: int) -> RequestHandle:
        if self._abort_message is not None:
            raise EngineAbortedError(self._abort_message)
        if prompt_len < 1:
            raise AdmissionError(f"prompt_tokens must be >= 1, got {prompt_len}")
        if target_output_len < 1:
            raise AdmissionError(f"max_tokens must be >= 1, got {target_output_len}")
        total = prompt_len + target_output_len
        if total > self.config.max_model_len:
            raise AdmissionError(
                f"prompt_tokens + max_tokens = {total} exceeds max_model_len "
                f"{self.config.max_model_len}"
            )
        full_blocks = blocks_needed(total, self.config.block_size)
        if full_blocks > self.config.num_gpu_blocks:
            raise AdmissionError(
                f"request needs {full_blocks} KV blocks but the engine has only "
                f"{self.config.num_gpu_blocks}"
            )
        rid = next(self._ids)
        handle = RequestHandle(rid, prompt_len, target_output_len)
        req = RequestState(rid, prompt_len, target_output_len, handle, arrival_s=_now())
        self._waiting.append(req)
        self._wake.set()
        return handle

    # -- block accounting ----------------------------------------------------

    def release_blocks(self, req: RequestState) -> int:
        """Return a finished or preempted request's blocks to the free pool."""
        if req.phase not in (RequestPhase.FINISHED, RequestPhase.PREEMPTED):
            raise EngineInvariantError(
                f"cannot free blocks of request {req.id} in phase {req.phase.name}"
            )
        if req.allocated_blocks == 0:
            raise EngineInvariantError(f"double free for request {req.id}")
        self._free_blocks += req.allocated_blocks
        req.allocated_blocks = 0
        return self._free_blocks

    @property
    def free_block_count(self) -> int:
        return self._free_blocks

    # -- scheduling ----------------------------------------------------------

    def _schedule_step(self) -> _PreparedStep | None:
        cfg = self.config
        budget = cfg.max_num_batched_tokens
        entries: list[_Entry] = []
        by_req: dict[int, _Entry] = {}

        def preempt_newest() -> RequestState:
            nonlocal budget
            victim = self._running.pop()
            victim.phase = RequestPhase.PREEMPTED
            self.release_blocks(victim)
            victim.prefill_progress = 0
            bisect.insort(self._waiting, victim, key=lambda r: r.id)
            self._preemptions += 1
            dropped = by_req.pop(victim.id, None)
            if dropped is not None:
                entries.remove(dropped)
                budget += dropped.chunk
            return victim

        def make_room(demand: int, requester: RequestState) -> bool:
            while self._free_blocks < demand:
                if preempt_newest() is requester:
                    return False
            return True

        # Decoding requests first: each advances by exactly one token.
        for req in list(self._running):
            if req.phase is not RequestPhase.DECODING:
                continue
            if budget < 1 or len(entries) >= cfg.max_num_seqs:
                break
            demand = (
                blocks_needed(req.prefill_progress + req.generated + 1, cfg.block_size)
                - req.allocated_blocks
            )
            if demand > 0:
                if not make_room(demand, req):
                    continue  # the request itself was preempted
                self._free_blocks -= demand
                req.allocated_blocks += demand
            entry = _Entry(req, 1, False)
            entries.append(entry)
            by_req[req.id] = entry
            budget -= 1

        # Remaining budget goes to prefills in arrival order: running partial
        # prefills (always older than anything waiting), then the waiting queue.
        candidates = [r for r in self._running if r.phase is RequestPhase.PREFILLING]
        candidates.extend(self._waiting)
        for req in candidates:
            if budget < 1 or len(entries) >= cfg.max_num_seqs:
                break
            if req.phase not in (
                RequestPhase.PREFILLING,
                RequestPhase.WAITING,
                RequestPhase.PREEMPTED,
            ):
                continue  # preempted out from under us during this pass
            chunk = min(req.prompt_len - req.prefill_progress, budget)
            completing = req.prefill_progress + chunk == req.prompt_len
            # The step completing a prefill also appends the first output
            # token, so reserve space for it in the same step.
            new_total = req.prefill_progress + chunk + req.generated + (1 if completing else 0)
            demand = blocks_needed(new_total, cfg.block_size) - req.allocated_blocks
            if req.phase is RequestPhase.PREFILLING:
                if demand > 0 and not make_room(demand, req):
                    continue
            else:
                # New admissions never preempt; stop at the first one that
                # does not fit so admission stays strictly FIFO.
                if demand > self._free_blocks:
                    break
                self._waiting.remove(req)
                self._running.append(req)
                req.phase = RequestPhase.PREFILLING
                if req.first_scheduled_s is None:
                    req.first_scheduled_s = _now()
            if demand > 0:
                self._free_blocks -= demand
                req.allocated_blocks += demand
            entry = _Entry(req, chunk, True)
            entries.append(entry)
            by_req[req.id] = entry
            budget -= chunk

        if not entries:
            return None
        phase = (
            StepPhase.DECODE_ONLY
            if all(not e.is_prefill for e in entries)
            else StepPhase.PREFILL_OR_MIXED
        )
        step = _PreparedStep(
            index=self._step_seq,
            entries=entries,
            total_tokens=sum(e.chunk for e in entries),
            concurrency=len(entries),
            phase=phase,
            prepared_at=_now(),
        )
        self._step_seq += 1
        return step

    def _apply_outcome(self, step: _PreparedStep) -> _Outcome:
        emissions: list[tuple[RequestState, int]] = []
        finished: list[RequestState] = []
        for e in step.entries:
            req = e.req
            if e.is_prefill:
                req.prefill_progress += e.chunk
                if req.prefill_progress == req.prompt_len:
                    req.phase = RequestPhase.DECODING
                    req.generated += 1
                    emissions.append((req, req.generated - 1))
            else:
                req.generated += 1
                emissions.append((req, req.generated - 1))
            if req.phase is RequestPhase.DECODING and req.generated >= req.target_output_len:
                req.phase = RequestPhase.FINISHED
                self.release_blocks(req)
                self._running.remove(req)
                finished.append(req)
        return _Outcome(step, emissions, finished)

    # -- delivery ------------------------------------------------------------

    def _deliver(self, outcome: _Outcome, started_at: float, sampled_s: float) -> None:
        applied_at = _now()
        realized = applied_at - started_at
        emitted_ns = time.monotonic_ns()
        for req, token_index in outcome.emissions:
            req.token_times_s.append(applied_at)
            req.handle.events.put_nowait(
                (
                    "token",
                    {
                        "request_id": req.id,
                        "token_index": token_index,
                        "emitted_at_ns": emitted_ns,
                    },
                )
            )
        for req in outcome.finished:
            req.finish_s = applied_at
            self._finished_count += 1
            req.handle.events.put_nowait(
                (
                    "final",
                    {
                        "request_id": req.id,
                        "finish_reason": "length",
                        "prompt_tokens": req.prompt_len,
                        "completion_tokens": req.generated,
                    },
                )
            )
            req.handle.done.set()

        step = outcome.step
        self._steps_executed += 1
        overshoot = realized - sampled_s
        self._overshoot_sum += overshoot
        self._overshoot_max = max(self._overshoot_max, overshoot)
        self.tracer.write(
            StepTraceRecord(step.index, step.total_tokens, step.concurrency, step.phase, realized)
        )
        if self._on_step is not None:
            self._on_step(
                StepRecord(
                    step_index=step.index,
                    total_tokens=step.total_tokens,
                    concurrency=step.concurrency,
                    phase=step.phase,
                    sampled_s=sampled_s,
                    realized_s=realized,
                    prepared_at=step.prepared_at,
                    started_at=started_at,
                    applied_at=applied_at,
                )
            )

    # -- the step loop -------------------------------------------------------

    async def _run(self) -> None:
        prepared: _PreparedStep | None = None
        while True:
            if prepared is None:
                prepared = self._schedule_step()
            if prepared is None:
                self._wake.clear()
                await self._wake.wait()
                continue
            started = _now()
            try:
                sampled = self._backend(
                    prepared.total_tokens, prepared.concurrency, prepared.phase
                )
                if not sampled > 0:
                    raise ValueError(f"backend returned nonpositive latency {sampled}")
            except Exception as exc:  # noqa: BLE001 - any backend failure aborts
                self._abort(prepared, exc)
                return
            outcome = self._apply_outcome(prepared)
            next_prepared = self._schedule_step() if self.config.async_scheduling else None
            await _sleep_until(started + sampled)
            self._deliver(outcome, started, sampled)
            prepared = next_prepared

    def _abort(self, step: _PreparedStep, exc: Exception) -> None:
        self._abort_message = (
            f"backend failed for step query (tt={step.total_tokens}, "
            f"conc={step.concurrency}, phase={step.phase.value}): {exc}"
        )
        for req in self._running + self._waiting:
            req.handle.events.put_nowait(
                ("error", {"request_id": req.id, "error": self._abort_message})
            )
            req.handle.done.set()

    async def start(self) -> None:
        if self._task is None:
            self._task = asyncio.get_running_loop().create_task(self._run())

    async def stop(self) -> None:
        if self._task is not None:
            self._task.cancel()
            try:
                await self._task
            except asyncio.CancelledError:
                pass
            self._task = None
        self.tracer.close()

    @property
    def alive(self) -> bool:
        return self._task is not None and not self._task.done() and self._abort_message is None

    @property
    def abort_message(self) -> str | None:
        return self._abort_message

    # -- introspection -------------------------------------------------------

    def stats(self) -> dict:
        return {
            "running": len(self._running),
            "waiting": len(self._waiting),
            "finished": self._finished_count,
            "free_blocks": self._free_blocks,
            "steps_executed": self._steps_executed,
            "preemptions": self._preemptions,
            "uptime_s": _now() - self._created_at,
            "mean_overshoot_ms": (
                1e3 * self._overshoot_sum / self._steps_executed if self._steps_executed else 0.0
            ),
            "max_overshoot_ms": 1e3 * self._overshoot_max,
            "aborted": self._abort_message,
        }

    def live_requests(self) -> list[RequestState]:
        return list(self._running) + list(self._waiting)
