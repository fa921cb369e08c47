"""Profile packs: per-step latency samples bucketed by batch shape.

A pack holds three tables of (tt, conc) buckets: decode-only steps,
prefill-or-mixed steps, and a combined table that receives every sample and
serves as a sparse-data fallback. Buckets keep the raw list of observed
latencies so downstream sampling can reproduce the observed variance instead
of a summary statistic.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator

SCHEMA_VERSION = 1


class StepPhase(Enum):
    """Classification of one scheduler step."""

    DECODE_ONLY = "decode"
    PREFILL_OR_MIXED = "mixed"


class TableKind(Enum):
    """Which of the three pack tables a bucket set belongs to."""

    DECODE = "decode"
    MIXED = "mixed"
    COMBINED = "combined"


class PackFormatError(ValueError):
    """Pack or trace bytes cannot be parsed at all."""


class PackVersionError(ValueError):
    """Pack schema_version is missing or unsupported."""


class PackValidationError(ValueError):
    """Parsed data violates a pack invariant."""


# ---------------------------------------------------------------------------
# Records and tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StepTraceRecord:
    """One per-step observation emitted by the engine tracer.

    total_tokens is the number of tokens processed in the step (tt) and
    concurrency the number of running requests in it (conc).
    """

    step_index: int
    total_tokens: int
    concurrency: int
    phase: StepPhase
    latency_s: float

    def validate(self) -> None:
        if self.step_index < 0:
            raise PackValidationError(f"step_index must be >= 0, got {self.step_index}")
        if self.total_tokens < 1:
            raise PackValidationError(f"total_tokens must be >= 1, got {self.total_tokens}")
        if self.concurrency < 1:
            raise PackValidationError(f"concurrency must be >= 1, got {self.concurrency}")
        if self.phase is StepPhase.DECODE_ONLY and self.total_tokens < self.concurrency:
            raise PackValidationError(
                f"decode-only step has total_tokens={self.total_tokens} < "
                f"concurrency={self.concurrency}"
            )
        if not self.latency_s > 0:
            raise PackValidationError(f"latency_s must be > 0, got {self.latency_s}")


@dataclass(eq=False)
class Bucket:
    """Raw latency samples observed at one exact (tt, conc) point."""

    tt: int
    conc: int
    samples: list[float]

    def validate(self) -> None:
        if self.tt < 1 or self.conc < 1:
            raise PackValidationError(f"bucket key ({self.tt}, {self.conc}) must be positive")
        if not self.samples:
            raise PackValidationError(f"bucket ({self.tt}, {self.conc}) has no samples")
        for s in self.samples:
            if not s > 0:
                raise PackValidationError(
                    f"bucket ({self.tt}, {self.conc}) has nonpositive sample {s}"
                )

    def __eq__(self, other: object) -> bool:
        # Samples are kept in capture order but compare as a multiset, matching
        # the sorted canonical serialization.
        if not isinstance(other, Bucket):
            return NotImplemented
        return (
            self.tt == other.tt
            and self.conc == other.conc
            and sorted(self.samples) == sorted(other.samples)
        )


@dataclass(eq=False)
class PhaseTable:
    """All buckets of one table plus the key ranges used for distance scaling."""

    kind: TableKind
    buckets: list[Bucket]
    tt_range: tuple[int, int] | None
    conc_range: tuple[int, int] | None

    @classmethod
    def from_buckets(cls, kind: TableKind, buckets: Iterable[Bucket]) -> "PhaseTable":
        ordered = sorted(buckets, key=lambda b: (b.tt, b.conc))
        if ordered:
            tts = [b.tt for b in ordered]
            concs = [b.conc for b in ordered]
            return cls(kind, ordered, (min(tts), max(tts)), (min(concs), max(concs)))
        return cls(kind, [], None, None)

    @property
    def total_samples(self) -> int:
        return sum(len(b.samples) for b in self.buckets)

    @property
    def is_empty(self) -> bool:
        return not self.buckets

    def validate(self) -> None:
        seen: set[tuple[int, int]] = set()
        for b in self.buckets:
            b.validate()
            key = (b.tt, b.conc)
            if key in seen:
                raise PackValidationError(f"{self.kind.value} table has duplicate bucket {key}")
            seen.add(key)
        recomputed = PhaseTable.from_buckets(self.kind, self.buckets)
        if recomputed.tt_range != self.tt_range or recomputed.conc_range != self.conc_range:
            raise PackValidationError(
                f"{self.kind.value} table ranges {self.tt_range}/{self.conc_range} do not "
                f"match bucket extrema {recomputed.tt_range}/{recomputed.conc_range}"
            )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PhaseTable):
            return NotImplemented
        mine = {(b.tt, b.conc): sorted(b.samples) for b in self.buckets}
        theirs = {(b.tt, b.conc): sorted(b.samples) for b in other.buckets}
        return (
            self.kind == other.kind
            and mine == theirs
            and self.tt_range == other.tt_range
            and self.conc_range == other.conc_range
        )


@dataclass(eq=False)
class ProfilePack:
    """The serialized profiling artifact the latency oracle samples from."""

    num_gpu_blocks: int
    decode_table: PhaseTable
    mixed_table: PhaseTable
    combined_table: PhaseTable
    metadata: dict[str, str] = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def validate(self) -> None:
        if self.num_gpu_blocks < 1:
            raise PackValidationError(f"num_gpu_blocks must be >= 1, got {self.num_gpu_blocks}")
        for table, kind in (
            (self.decode_table, TableKind.DECODE),
            (self.mixed_table, TableKind.MIXED),
            (self.combined_table, TableKind.COMBINED),
        ):
            if table.kind is not kind:
                raise PackValidationError(f"table kind mismatch: {table.kind} != {kind}")
            table.validate()
        phase_total = self.decode_table.total_samples + self.mixed_table.total_samples
        if self.combined_table.total_samples != phase_total:
            raise PackValidationError(
                "combined table inconsistent: "
                f"{self.combined_table.total_samples} samples != decode+mixed {phase_total}"
            )

    def table_for(self, phase: StepPhase) -> PhaseTable:
        return self.decode_table if phase is StepPhase.DECODE_ONLY else self.mixed_table

    def stats(self) -> dict:
        """Bucket/sample counts per table and across tables."""
        per_table = {
            t.kind.value: {"buckets": len(t.buckets), "samples": t.total_samples}
            for t in (self.decode_table, self.mixed_table, self.combined_table)
        }
        return {
            "per_table": per_table,
            "total_buckets": sum(v["buckets"] for v in per_table.values()),
            "total_samples": sum(v["samples"] for v in per_table.values()),
            "num_gpu_blocks": self.num_gpu_blocks,
        }

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ProfilePack):
            return NotImplemented
        return (
            self.schema_version == other.schema_version
            and self.metadata == other.metadata
            and self.num_gpu_blocks == other.num_gpu_blocks
            and self.decode_table == other.decode_table
            and self.mixed_table == other.mixed_table
            and self.combined_table == other.combined_table
        )


# ---------------------------------------------------------------------------
# Building
# ---------------------------------------------------------------------------


def build_pack(
    traces: Iterable[StepTraceRecord],
    num_gpu_blocks: int,
    metadata: dict[str, str] | None = None,
) -> ProfilePack:
    """Bucket step records into a pack.

    Every record lands in the table matching its phase and, additionally, in
    the combined table, so the combined sample count always equals the sum of
    the two phase tables.
    """
    if num_gpu_blocks < 1:
        raise PackValidationError(f"num_gpu_blocks must be >= 1, got {num_gpu_blocks}")
    decode: dict[tuple[int, int], list[float]] = {}
    mixed: dict[tuple[int, int], list[float]] = {}
    combined: dict[tuple[int, int], list[float]] = {}
    for i, rec in enumerate(traces):
        try:
            rec.validate()
        except PackValidationError as exc:
            raise PackValidationError(f"trace record {i}: {exc}") from None
        key = (rec.total_tokens, rec.concurrency)
        target = decode if rec.phase is StepPhase.DECODE_ONLY else mixed
        target.setdefault(key, []).append(rec.latency_s)
        combined.setdefault(key, []).append(rec.latency_s)

    def make(kind: TableKind, acc: dict[tuple[int, int], list[float]]) -> PhaseTable:
        return PhaseTable.from_buckets(
            kind, (Bucket(tt, conc, samples) for (tt, conc), samples in acc.items())
        )

    return ProfilePack(
        num_gpu_blocks=num_gpu_blocks,
        decode_table=make(TableKind.DECODE, decode),
        mixed_table=make(TableKind.MIXED, mixed),
        combined_table=make(TableKind.COMBINED, combined),
        metadata=dict(metadata or {}),
    )


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def save_pack(pack: ProfilePack) -> bytes:
    """Serialize to canonical JSON: buckets sorted by key, samples ascending."""

    def table_obj(table: PhaseTable) -> dict:
        return {
            "buckets": [
                {"tt": b.tt, "conc": b.conc, "samples": sorted(b.samples)}
                for b in sorted(table.buckets, key=lambda b: (b.tt, b.conc))
            ]
        }

    obj = {
        "schema_version": pack.schema_version,
        "metadata": dict(sorted(pack.metadata.items())),
        "num_gpu_blocks": pack.num_gpu_blocks,
        "tables": {
            "decode": table_obj(pack.decode_table),
            "mixed": table_obj(pack.mixed_table),
            "combined": table_obj(pack.combined_table),
        },
    }
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def load_pack(data: bytes | str) -> ProfilePack:
    """Parse and validate pack bytes; ranges are derived, not read."""
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    try:
        obj = json.loads(data)
    except json.JSONDecodeError as exc:
        raise PackFormatError(f"malformed pack JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise PackFormatError("pack JSON top level must be an object")
    version = obj.get("schema_version")
    if version != SCHEMA_VERSION:
        raise PackVersionError(f"unsupported schema_version {version!r}, expected {SCHEMA_VERSION}")

    tables_obj = obj.get("tables")
    if not isinstance(tables_obj, dict):
        raise PackFormatError("pack JSON is missing the tables object")

    def parse_table(kind: TableKind) -> PhaseTable:
        raw = tables_obj.get(kind.value)
        if not isinstance(raw, dict) or not isinstance(raw.get("buckets"), list):
            raise PackFormatError(f"table {kind.value!r} is missing or malformed")
        buckets = []
        for entry in raw["buckets"]:
            try:
                buckets.append(
                    Bucket(int(entry["tt"]), int(entry["conc"]), [float(s) for s in entry["samples"]])
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise PackFormatError(f"malformed bucket in {kind.value} table: {exc}") from None
        return PhaseTable.from_buckets(kind, buckets)

    metadata = obj.get("metadata", {})
    if not isinstance(metadata, dict):
        raise PackFormatError("metadata must be an object")
    num_gpu_blocks = obj.get("num_gpu_blocks")
    if not isinstance(num_gpu_blocks, int) or isinstance(num_gpu_blocks, bool):
        raise PackFormatError("num_gpu_blocks must be an integer")

    pack = ProfilePack(
        num_gpu_blocks=num_gpu_blocks,
        decode_table=parse_table(TableKind.DECODE),
        mixed_table=parse_table(TableKind.MIXED),
        combined_table=parse_table(TableKind.COMBINED),
        metadata={str(k): str(v) for k, v in metadata.items()},
        schema_version=version,
    )
    pack.validate()
    return pack


def save_pack_file(pack: ProfilePack, path: str | Path) -> None:
    Path(path).write_bytes(save_pack(pack))


def load_pack_file(path: str | Path) -> ProfilePack:
    return load_pack(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Trace files (JSON lines, one StepTraceRecord per line)
# ---------------------------------------------------------------------------


def trace_record_to_line(rec: StepTraceRecord) -> str:
    return json.dumps(
        {
            "step": rec.step_index,
            "tt": rec.total_tokens,
            "conc": rec.concurrency,
            "phase": rec.phase.value,
            "latency_s": rec.latency_s,
        },
        separators=(",", ":"),
    )


def parse_trace_line(line: str) -> StepTraceRecord:
    try:
        obj = json.loads(line)
        rec = StepTraceRecord(
            step_index=int(obj["step"]),
            total_tokens=int(obj["tt"]),
            concurrency=int(obj["conc"]),
            phase=StepPhase(obj["phase"]),
            latency_s=float(obj["latency_s"]),
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise PackFormatError(f"malformed trace line: {exc}") from None
    return rec


def read_trace_file(path: str | Path) -> list[StepTraceRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(parse_trace_line(line))
    return records


def iter_trace_dir(path: str | Path) -> Iterator[StepTraceRecord]:
    """Records from every *.jsonl file in a directory, in sorted file order."""
    for file in sorted(Path(path).glob("*.jsonl")):
        yield from read_trace_file(file)
