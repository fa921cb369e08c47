"""Benchmark harness: open-loop load generation, serving metrics, and
matched-run comparison.

The client replays a workload of (prompt_tokens, output_tokens) entries
against a server with Poisson or gamma-bursty arrivals. Send offsets depend
only on the spec and seed, never on responses. Per-token receive timestamps
feed the five serving metrics (TTFT, TPOT, ITL, E2E, TPS); two runs over the
same workload and seed can then be compared metric by metric as signed
relative error (emu - real) / real.
"""
from __future__ import annotations

import asyncio
import hashlib
import json
import math
import random
import time
from dataclasses import dataclass
from pathlib import Path

import httpx
import numpy as np

_now = time.monotonic

PRIMARY_METRICS = ("ttft_mean", "tpot_mean", "itl_mean", "e2e_mean", "tps")


class BenchmarkError(RuntimeError):
    """A benchmark run could not produce valid results."""


class ReportMismatchError(ValueError):
    """Two reports do not come from matched runs."""


# ---------------------------------------------------------------------------
# Workloads and arrivals
# ---------------------------------------------------------------------------


@dataclass
class WorkloadSpec:
    """What to send: length entries plus the arrival process parameters.

    burstiness is the gamma shape; 1.0 gives Poisson arrivals, smaller values
    give burstier traffic at the same mean rate.
    """

    entries: list[tuple[int, int]]
    request_rate: float
    burstiness: float = 1.0
    seed: int = 0
    num_prompts: int | None = None

    def __post_init__(self):
        if self.num_prompts is None:
            self.num_prompts = len(self.entries)

    def validate(self) -> None:
        if not self.entries:
            raise ValueError("workload entries must be nonempty")
        if not self.request_rate > 0:
            raise ValueError(f"request_rate must be > 0, got {self.request_rate}")
        if not self.burstiness > 0:
            raise ValueError(f"burstiness must be > 0, got {self.burstiness}")
        if self.num_prompts < 1 or self.num_prompts > len(self.entries):
            raise ValueError(
                f"num_prompts {self.num_prompts} out of range for {len(self.entries)} entries"
            )

    def selected_entries(self) -> list[tuple[int, int]]:
        return self.entries[: self.num_prompts]


def generate_arrivals(spec: WorkloadSpec, rng: random.Random | None = None) -> list[float]:
    """Send offsets in seconds. Gaps are i.i.d. Gamma(shape=burstiness,
    scale=1/(rate*burstiness)), so the mean gap is 1/rate for any burstiness
    and burstiness=1 reduces to the exponential (Poisson process)."""
    spec.validate()
    if rng is None:
        rng = random.Random(spec.seed)
    shape = spec.burstiness
    scale = 1.0 / (spec.request_rate * shape)
    offsets = [0.0]
    for _ in range(spec.num_prompts - 1):
        offsets.append(offsets[-1] + rng.gammavariate(shape, scale))
    return offsets


def generate_workload(
    num: int,
    prompt_median: int,
    output_median: int,
    seed: int = 0,
    prompt_sigma: float = 0.6,
    output_sigma: float = 0.7,
    min_prompt: int = 4,
    max_prompt: int = 2048,
    min_output: int = 2,
    max_output: int = 512,
) -> list[tuple[int, int]]:
    """Dataset-free stand-in for chat-shaped length distributions:
    log-normal prompt and output lengths around the given medians."""
    rng = random.Random(seed)

    def draw(median: int, sigma: float, lo: int, hi: int) -> int:
        value = int(round(rng.lognormvariate(math.log(median), sigma)))
        return max(lo, min(hi, value))

    return [
        (draw(prompt_median, prompt_sigma, min_prompt, max_prompt),
         draw(output_median, output_sigma, min_output, max_output))
        for _ in range(num)
    ]


def write_workload(path: str | Path, entries: list[tuple[int, int]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for prompt, output in entries:
            f.write(json.dumps({"prompt_tokens": prompt, "output_tokens": output}) + "\n")


def read_workload(path: str | Path) -> list[tuple[int, int]]:
    entries = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            entries.append((int(obj["prompt_tokens"]), int(obj["output_tokens"])))
    return entries


def workload_hash(spec: WorkloadSpec) -> str:
    """Content hash binding a report to its exact workload, arrivals and seed."""
    payload = {
        "entries": spec.selected_entries(),
        "request_rate": spec.request_rate,
        "burstiness": spec.burstiness,
        "seed": spec.seed,
        "num_prompts": spec.num_prompts,
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# Records and metrics
# ---------------------------------------------------------------------------


@dataclass
class RequestRecord:
    """Client-observed timing of one streamed request."""

    send_time: float
    first_token_time: float
    token_times: list[float]
    finish_time: float
    prompt_tokens: int
    output_tokens: int

    def validate(self) -> None:
        if len(self.token_times) != self.output_tokens:
            raise BenchmarkError(
                f"record has {len(self.token_times)} token times but "
                f"{self.output_tokens} output tokens"
            )
        if not self.token_times:
            raise BenchmarkError("record has no token times")
        if self.first_token_time != self.token_times[0]:
            raise BenchmarkError("first_token_time does not match token_times[0]")
        if self.send_time > self.first_token_time:
            raise BenchmarkError("send_time after first token")
        for a, b in zip(self.token_times, self.token_times[1:]):
            if b < a:
                raise BenchmarkError("token_times must be nondecreasing")
        if self.token_times[-1] > self.finish_time:
            raise BenchmarkError("finish_time before last token")


@dataclass
class RunMetrics:
    """Per-request metric values plus run-level throughput.

    Aggregates are always recomputed from the stored per-request values, so a
    persisted report can be re-aggregated bit for bit.
    """

    ttft_s: list[float]
    tpot_s: list[float]  # only requests with >= 2 output tokens
    itl_s: list[list[float]]  # per-request inter-token gaps
    e2e_s: list[float]
    total_output_tokens: int
    duration_s: float
    tps: float

    def aggregates(self) -> dict:
        def agg(values: list[float]) -> dict:
            arr = np.asarray(values, dtype=np.float64)
            if arr.size == 0:
                return {"mean": None, "median": None, "p99": None}
            return {
                "mean": float(arr.mean()),
                "median": float(np.median(arr)),
                "p99": float(np.percentile(arr, 99)),
            }

        pooled_itl = [gap for gaps in self.itl_s for gap in gaps]
        return {
            "ttft": agg(self.ttft_s),
            "tpot": agg(self.tpot_s),
            "itl": agg(pooled_itl),
            "e2e": agg(self.e2e_s),
            "tps": self.tps,
            "duration_s": self.duration_s,
            "total_output_tokens": self.total_output_tokens,
        }


def compute_metrics(records: list[RequestRecord]) -> RunMetrics:
    """TTFT = first token - send; E2E = finish - send; ITL = gaps between
    consecutive token times; TPOT = (E2E - TTFT) / (n - 1) for n >= 2.
    TPS = total generated tokens / (last finish - first send)."""
    if not records:
        raise BenchmarkError("no records to compute metrics from")
    ttft, tpot, itl, e2e = [], [], [], []
    for rec in records:
        rec.validate()
        ttft.append(rec.first_token_time - rec.send_time)
        e2e.append(rec.finish_time - rec.send_time)
        gaps = [b - a for a, b in zip(rec.token_times, rec.token_times[1:])]
        itl.append(gaps)
        if rec.output_tokens >= 2:
            tpot.append((e2e[-1] - ttft[-1]) / (rec.output_tokens - 1))
    duration = max(r.finish_time for r in records) - min(r.send_time for r in records)
    total_tokens = sum(r.output_tokens for r in records)
    tps = total_tokens / duration if duration > 0 else float("nan")
    return RunMetrics(ttft, tpot, itl, e2e, total_tokens, duration, tps)


def compare_runs(real: RunMetrics, emu: RunMetrics) -> dict:
    """Signed relative error per metric aggregate. A zero real value makes
    the error undefined (reported as null, never infinity)."""
    real_agg, emu_agg = real.aggregates(), emu.aggregates()

    def entry(r, e):
        if r is None or e is None or r == 0:
            return {"real": r, "emu": e, "rel_err": None}
        return {"real": r, "emu": e, "rel_err": (e - r) / r}

    metrics = {}
    for name in ("ttft", "tpot", "itl", "e2e"):
        metrics[f"{name}_mean"] = entry(real_agg[name]["mean"], emu_agg[name]["mean"])
    metrics["tps"] = entry(real_agg["tps"], emu_agg["tps"])
    extra = {}
    for name in ("ttft", "tpot", "itl", "e2e"):
        for stat in ("median", "p99"):
            extra[f"{name}_{stat}"] = entry(real_agg[name][stat], emu_agg[name][stat])
    return {"metrics": metrics, "extra": extra}


def format_rel_err(rel_err: float | None) -> str:
    return "undefined" if rel_err is None else f"{rel_err * 100:+.2f}%"


def render_compare_table(columns: list[tuple[str, dict]]) -> str:
    """Text table in the relative-error-per-rate shape: one row per metric,
    one column per compared pair (typically one per request rate)."""
    labels = [label for label, _ in columns]
    width = max(10, *(len(label) + 2 for label in labels)) if labels else 10
    lines = ["Relative error (emu - real) / real"]
    header = f"{'metric':<12}" + "".join(f"{label:>{width}}" for label in labels)
    lines.append(header)
    lines.append("-" * len(header))
    for key, row_name in (
        ("ttft_mean", "TTFT"),
        ("tpot_mean", "TPOT"),
        ("itl_mean", "ITL"),
        ("e2e_mean", "E2E"),
        ("tps", "TPS"),
    ):
        cells = "".join(
            f"{format_rel_err(report['metrics'][key]['rel_err']):>{width}}"
            for _, report in columns
        )
        lines.append(f"{row_name:<12}" + cells)
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def write_report(path: str | Path, spec: WorkloadSpec, records: list[RequestRecord]) -> dict:
    metrics = compute_metrics(records)
    report = {
        "workload_hash": workload_hash(spec),
        "request_rate": spec.request_rate,
        "burstiness": spec.burstiness,
        "seed": spec.seed,
        "num_prompts": spec.num_prompts,
        "records": [
            {
                "send_time": r.send_time,
                "first_token_time": r.first_token_time,
                "token_times": r.token_times,
                "finish_time": r.finish_time,
                "prompt_tokens": r.prompt_tokens,
                "output_tokens": r.output_tokens,
            }
            for r in records
        ],
        "metrics": metrics.aggregates(),
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f)
    return report


def load_report(path: str | Path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def report_records(report: dict) -> list[RequestRecord]:
    return [
        RequestRecord(
            send_time=r["send_time"],
            first_token_time=r["first_token_time"],
            token_times=list(r["token_times"]),
            finish_time=r["finish_time"],
            prompt_tokens=r["prompt_tokens"],
            output_tokens=r["output_tokens"],
        )
        for r in report["records"]
    ]


def compare_reports(real_report: dict, emu_report: dict) -> dict:
    """Matched-run comparison; refuses reports with different workload hashes."""
    if real_report["workload_hash"] != emu_report["workload_hash"]:
        raise ReportMismatchError(
            "reports come from different workloads or seeds: "
            f"{real_report['workload_hash'][:12]} != {emu_report['workload_hash'][:12]}"
        )
    real = compute_metrics(report_records(real_report))
    emu = compute_metrics(report_records(emu_report))
    return compare_runs(real, emu)


# ---------------------------------------------------------------------------
# The open-loop client
# ---------------------------------------------------------------------------

_CLIENT_LIMITS = httpx.Limits(max_connections=None, max_keepalive_connections=20)
_CLIENT_TIMEOUT = httpx.Timeout(connect=30.0, read=300.0, write=30.0, pool=None)


async def _stream_one(
    client: httpx.AsyncClient,
    target: str,
    prompt_tokens: int,
    output_tokens: int,
    send_at: float,
) -> RequestRecord:
    delay = send_at - _now()
    if delay > 0:
        await asyncio.sleep(delay)
    body = {
        "prompt_tokens": prompt_tokens,
        "max_tokens": output_tokens,
        "stream": True,
        "ignore_eos": True,
    }
    send_time = _now()
    token_times: list[float] = []
    final: dict | None = None
    async with client.stream("POST", f"{target}/v1/completions", json=body) as resp:
        if resp.status_code == 400:
            detail = (await resp.aread()).decode(errors="replace")
            raise BenchmarkError(f"workload/config mismatch (HTTP 400): {detail}")
        if resp.status_code != 200:
            detail = (await resp.aread()).decode(errors="replace")
            raise BenchmarkError(f"HTTP {resp.status_code}: {detail}")
        async for line in resp.aiter_lines():
            if not line.startswith("data:"):
                continue
            ts = _now()
            payload = json.loads(line[len("data:"):].strip())
            if "error" in payload:
                raise BenchmarkError(f"server aborted mid-stream: {payload['error']}")
            if "finish_reason" in payload:
                final = payload
                final_ts = ts
                break
            token_times.append(ts)
    if final is None:
        raise BenchmarkError("stream ended without a final event")
    return RequestRecord(
        send_time=send_time,
        first_token_time=token_times[0] if token_times else final_ts,
        token_times=token_times,
        finish_time=final_ts,
        prompt_tokens=final["prompt_tokens"],
        output_tokens=final["completion_tokens"],
    )


async def run_benchmark(target: str, spec: WorkloadSpec) -> list[RequestRecord]:
    """Open-loop replay: every request is sent at its precomputed offset,
    regardless of earlier responses. Any failed request aborts the run."""
    spec.validate()
    offsets = generate_arrivals(spec)
    entries = spec.selected_entries()
    target = target.rstrip("/")
    async with httpx.AsyncClient(limits=_CLIENT_LIMITS, timeout=_CLIENT_TIMEOUT) as client:
        start = _now() + 0.05  # small lead so offset 0 is not already in the past
        tasks = [
            asyncio.ensure_future(
                _stream_one(client, target, prompt, output, start + offset)
            )
            for (prompt, output), offset in zip(entries, offsets)
        ]
        try:
            return list(await asyncio.gather(*tasks))
        except BaseException:
            for t in tasks:
                t.cancel()
            await asyncio.gather(*tasks, return_exceptions=True)
            raise


# ---------------------------------------------------------------------------
# Profile capture sweep
# ---------------------------------------------------------------------------


async def _rotate_trace(client: httpx.AsyncClient, target: str, path: str | None) -> None:
    resp = await client.post(f"{target}/trace/rotate", json={"path": path})
    if resp.status_code != 200:
        raise BenchmarkError(f"trace rotation failed: HTTP {resp.status_code} {resp.text}")


async def capture_profile(
    target: str,
    rates: list[float],
    prompts_per_rate: list[int],
    entries: list[tuple[int, int]],
    seed: int,
    trace_dir: str | Path,
    rounds: int = 1,
) -> list[Path]:
    """Rate sweep against a tracing server; one trace file per (round, rate).

    Each round uses arrival seed `seed + round`, so repeated rounds add
    independent samples over the same prompts. prompts_per_rate may give
    higher counts at higher rates for denser sampling where batch composition
    is most volatile.
    """
    if len(prompts_per_rate) != len(rates):
        raise ValueError("prompts_per_rate must match rates")
    trace_dir = Path(trace_dir)
    trace_dir.mkdir(parents=True, exist_ok=True)
    target = target.rstrip("/")
    files = []
    async with httpx.AsyncClient(timeout=_CLIENT_TIMEOUT) as client:
        try:
            for rnd in range(rounds):
                for rate, num in zip(rates, prompts_per_rate):
                    if num > len(entries):
                        raise ValueError(
                            f"capture needs {num} entries but workload has {len(entries)}"
                        )
                    path = (trace_dir / f"trace_rate{rate:g}_round{rnd}.jsonl").resolve()
                    await _rotate_trace(client, target, str(path))
                    spec = WorkloadSpec(
                        entries=entries,
                        request_rate=rate,
                        burstiness=1.0,
                        seed=seed + rnd,
                        num_prompts=num,
                    )
                    await run_benchmark(target, spec)
                    files.append(path)
        finally:
            async with httpx.AsyncClient(timeout=_CLIENT_TIMEOUT) as closer:
                await _rotate_trace(closer, target, None)
    return files
