from __future__ import annotations

import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from serve_emu.profile import (
    Bucket,
    PackFormatError,
    PackValidationError,
    PackVersionError,
    PhaseTable,
    ProfilePack,
    StepPhase,
    StepTraceRecord,
    TableKind,
    build_pack,
    load_pack,
    parse_trace_line,
    save_pack,
    trace_record_to_line,
)


def rec(step, tt, conc, phase, latency):
    return StepTraceRecord(step, tt, conc, phase, latency)


DEC = StepPhase.DECODE_ONLY
MIX = StepPhase.PREFILL_OR_MIXED


class TestBuildPack:
    def test_empty_input(self):
        pack = build_pack([], num_gpu_blocks=100, metadata={})
        for table in (pack.decode_table, pack.mixed_table, pack.combined_table):
            assert table.buckets == []
            assert table.tt_range is None and table.conc_range is None
        pack.validate()

    def test_single_bucket_accumulation(self):
        records = [rec(i, 3, 3, DEC, lat) for i, lat in enumerate([0.010, 0.011, 0.012])]
        pack = build_pack(records, num_gpu_blocks=10)
        assert len(pack.decode_table.buckets) == 1
        assert sorted(pack.decode_table.buckets[0].samples) == [0.010, 0.011, 0.012]
        assert len(pack.combined_table.buckets) == 1
        assert len(pack.combined_table.buckets[0].samples) == 3
        assert pack.mixed_table.buckets == []

    def test_partition_counts(self):
        pack = build_pack(
            [rec(0, 3, 3, DEC, 0.01), rec(1, 64, 1, MIX, 0.05)], num_gpu_blocks=10
        )
        assert len(pack.decode_table.buckets) == 1
        assert len(pack.mixed_table.buckets) == 1
        assert len(pack.combined_table.buckets) == 2
        assert pack.combined_table.total_samples == 2

    @pytest.mark.parametrize(
        "bad",
        [
            StepTraceRecord(0, 3, 3, DEC, 0.0),
            StepTraceRecord(0, 3, 3, DEC, -1.0),
            StepTraceRecord(0, 0, 1, MIX, 0.1),
            StepTraceRecord(0, 3, 0, MIX, 0.1),
        ],
    )
    def test_invalid_record_names_index(self, bad):
        with pytest.raises(PackValidationError, match="trace record 1"):
            build_pack([rec(0, 2, 2, DEC, 0.01), bad], num_gpu_blocks=10)

    def test_decode_tokens_below_concurrency_rejected(self):
        with pytest.raises(PackValidationError, match="decode-only"):
            build_pack([rec(0, 2, 3, DEC, 0.01)], num_gpu_blocks=10)


class TestSerialization:
    def test_empty_pack_json_shape(self):
        data = save_pack(build_pack([], 5))
        obj = json.loads(data)
        assert obj["schema_version"] == 1
        assert obj["num_gpu_blocks"] == 5
        for key in ("decode", "mixed", "combined"):
            assert obj["tables"][key]["buckets"] == []

    def test_round_trip(self):
        pack = build_pack(
            [
                rec(0, 3, 3, DEC, 0.012),
                rec(1, 3, 3, DEC, 0.010),
                rec(2, 64, 1, MIX, 0.05),
                rec(3, 7, 2, MIX, 0.02),
            ],
            num_gpu_blocks=7,
            metadata={"model": "toy", "gpu": "none"},
        )
        assert load_pack(save_pack(pack)) == pack

    def test_canonical_bytes_independent_of_insertion_order(self):
        records = [
            rec(0, 3, 3, DEC, 0.012),
            rec(1, 5, 2, MIX, 0.02),
            rec(2, 3, 3, DEC, 0.010),
            rec(3, 9, 4, DEC, 0.03),
        ]
        shuffled = records[:]
        random.Random(1).shuffle(shuffled)
        # Re-index so both lists are valid capture sequences.
        shuffled = [rec(i, r.total_tokens, r.concurrency, r.phase, r.latency_s)
                    for i, r in enumerate(shuffled)]
        assert save_pack(build_pack(records, 7)) == save_pack(build_pack(shuffled, 7))

    def test_malformed_json(self):
        with pytest.raises(PackFormatError, match="malformed"):
            load_pack(b"{nope")

    def test_version_mismatch(self):
        data = save_pack(build_pack([], 5)).decode()
        obj = json.loads(data)
        obj["schema_version"] = 99
        with pytest.raises(PackVersionError):
            load_pack(json.dumps(obj))

    def test_empty_samples_rejected(self):
        obj = json.loads(save_pack(build_pack([rec(0, 3, 3, DEC, 0.01)], 5)))
        obj["tables"]["decode"]["buckets"][0]["samples"] = []
        with pytest.raises(PackValidationError, match="no samples"):
            load_pack(json.dumps(obj))

    def test_combined_count_mismatch(self):
        obj = json.loads(save_pack(build_pack([rec(0, 3, 3, DEC, 0.01)], 5)))
        obj["tables"]["combined"]["buckets"][0]["samples"].append(0.02)
        with pytest.raises(PackValidationError, match="combined table inconsistent"):
            load_pack(json.dumps(obj))

    def test_duplicate_bucket_rejected(self):
        obj = json.loads(save_pack(build_pack([rec(0, 3, 3, DEC, 0.01)], 5)))
        obj["tables"]["decode"]["buckets"].append(
            {"tt": 3, "conc": 3, "samples": [0.02]}
        )
        with pytest.raises(PackValidationError, match="duplicate"):
            load_pack(json.dumps(obj))


record_strategy = st.builds(
    lambda tt, conc, phase, lat: (max(tt, conc) if phase is DEC else tt, conc, phase, lat),
    tt=st.integers(min_value=1, max_value=300),
    conc=st.integers(min_value=1, max_value=40),
    phase=st.sampled_from([DEC, MIX]),
    lat=st.floats(min_value=1e-6, max_value=10.0, allow_nan=False),
)


@settings(max_examples=50, deadline=None)
@given(st.lists(record_strategy, max_size=60))
def test_pack_properties(raw):
    records = [rec(i, tt, conc, phase, lat) for i, (tt, conc, phase, lat) in enumerate(raw)]
    pack = build_pack(records, num_gpu_blocks=64)
    # Conservation: combined holds exactly one sample per record.
    assert pack.combined_table.total_samples == len(records)
    # Partition: decode + mixed == combined.
    assert (
        pack.decode_table.total_samples + pack.mixed_table.total_samples
        == pack.combined_table.total_samples
    )
    # Range correctness, checked across all tables.
    for table in (pack.decode_table, pack.mixed_table, pack.combined_table):
        if table.buckets:
            assert table.tt_range == (
                min(b.tt for b in table.buckets),
                max(b.tt for b in table.buckets),
            )
            assert table.conc_range == (
                min(b.conc for b in table.buckets),
                max(b.conc for b in table.buckets),
            )
    # Round trip.
    assert load_pack(save_pack(pack)) == pack


class TestTraceLines:
    def test_line_round_trip(self):
        r = rec(4, 17, 3, MIX, 0.0123)
        assert parse_trace_line(trace_record_to_line(r)) == r

    def test_wire_fields(self):
        obj = json.loads(trace_record_to_line(rec(1, 5, 5, DEC, 0.01)))
        assert obj == {"step": 1, "tt": 5, "conc": 5, "phase": "decode", "latency_s": 0.01}

    def test_malformed_line(self):
        with pytest.raises(PackFormatError):
            parse_trace_line("{\"step\": 1}")


class TestTableValidation:
    def test_stored_range_mismatch_caught(self):
        table = PhaseTable(TableKind.DECODE, [Bucket(3, 3, [0.01])], (1, 9), (3, 3))
        with pytest.raises(PackValidationError, match="ranges"):
            table.validate()

    def test_pack_equality_ignores_sample_order(self):
        a = ProfilePack(
            num_gpu_blocks=4,
            decode_table=PhaseTable.from_buckets(TableKind.DECODE, [Bucket(3, 3, [2.0, 1.0])]),
            mixed_table=PhaseTable.from_buckets(TableKind.MIXED, []),
            combined_table=PhaseTable.from_buckets(TableKind.COMBINED, [Bucket(3, 3, [1.0, 2.0])]),
        )
        b = ProfilePack(
            num_gpu_blocks=4,
            decode_table=PhaseTable.from_buckets(TableKind.DECODE, [Bucket(3, 3, [1.0, 2.0])]),
            mixed_table=PhaseTable.from_buckets(TableKind.MIXED, []),
            combined_table=PhaseTable.from_buckets(TableKind.COMBINED, [Bucket(3, 3, [2.0, 1.0])]),
        )
        assert a == b
