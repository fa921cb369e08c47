"""Latency oracle: density-aware neighbor pooling over a profile pack.

A query carries a step's shape (total tokens, concurrency, phase). The oracle
sorts the matching table's buckets by range-normalized 2D distance, pools the
nearest buckets until their cumulative sample count reaches a reliability
floor, then draws one raw latency with inverse-distance (Shepard) weighting:
bucket i is selected with probability proportional to w_i * n_i, where
w_i = 1 / max(d_i, eps)^p, and the sample is drawn uniformly within the
selected bucket. Equivalently, every pooled sample is weighted by its
bucket's Shepard weight. The returned value is always one that literally
appears in the pack.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .profile import Bucket, PhaseTable, ProfilePack, StepPhase


class NoProfileDataError(RuntimeError):
    """Raised when the queried table (and any fallback) holds no samples."""


@dataclass(frozen=True)
class OracleQuery:
    total_tokens: int
    concurrency: int
    phase: StepPhase

    def validate(self) -> None:
        if self.total_tokens < 1 or self.concurrency < 1:
            raise ValueError(f"query ({self.total_tokens}, {self.concurrency}) must be positive")


@dataclass
class OracleConfig:
    """Sampling knobs.

    reliability_floor is the minimum pooled sample count before neighbor
    expansion stops. shepard_power is the inverse-distance exponent and
    epsilon_distance the clamp that keeps exact-hit weights finite (and
    dominant).
    """

    reliability_floor: int = 32
    shepard_power: float = 2.0
    epsilon_distance: float = 1e-9
    rng_seed: int = 0

    def validate(self) -> None:
        if self.reliability_floor < 1:
            raise ValueError(f"reliability_floor must be >= 1, got {self.reliability_floor}")
        if not self.shepard_power > 0:
            raise ValueError(f"shepard_power must be > 0, got {self.shepard_power}")
        if not self.epsilon_distance > 0:
            raise ValueError(f"epsilon_distance must be > 0, got {self.epsilon_distance}")


def normalized_distance(
    query: tuple[int, int],
    bucket: tuple[int, int],
    tt_range: tuple[int, int],
    conc_range: tuple[int, int],
) -> float:
    """Euclidean distance after scaling each axis by its table-wide span.

    An axis whose span is zero contributes nothing, so a degenerate table
    ranks buckets by the other axis alone.
    """
    t, c = query
    tt, conc = bucket
    dt = 0.0 if tt_range[1] == tt_range[0] else (t - tt) / (tt_range[1] - tt_range[0])
    dc = 0.0 if conc_range[1] == conc_range[0] else (c - conc) / (conc_range[1] - conc_range[0])
    return math.sqrt(dt * dt + dc * dc)


def _pool_order(
    tts: np.ndarray,
    concs: np.ndarray,
    counts: np.ndarray,
    tt_range: tuple[int, int],
    conc_range: tuple[int, int],
    query: tuple[int, int],
    floor: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Indices and distances of the shortest distance-sorted bucket prefix
    whose cumulative sample count reaches the floor (all buckets if the table
    is too small). Ties in distance break by ascending (tt, conc)."""
    t, c = query
    tt_span = tt_range[1] - tt_range[0]
    conc_span = conc_range[1] - conc_range[0]
    dt = (t - tts) / tt_span if tt_span else np.zeros(len(tts))
    dc = (c - concs) / conc_span if conc_span else np.zeros(len(concs))
    dists = np.sqrt(dt * dt + dc * dc)
    order = np.lexsort((concs, tts, dists))
    cum = np.cumsum(counts[order])
    if cum[-1] < floor:
        k = len(order)
    else:
        k = int(np.searchsorted(cum, floor, side="left")) + 1
    chosen = order[:k]
    return chosen, dists[chosen]


def pool_neighbors(
    table: PhaseTable, query: tuple[int, int], floor: int
) -> list[tuple[Bucket, float]]:
    """Pool nearby buckets until at least `floor` samples are covered."""
    if table.is_empty:
        raise NoProfileDataError(f"{table.kind.value} table has no data")
    if floor < 1:
        raise ValueError(f"floor must be >= 1, got {floor}")
    tts = np.array([b.tt for b in table.buckets], dtype=np.float64)
    concs = np.array([b.conc for b in table.buckets], dtype=np.float64)
    counts = np.array([len(b.samples) for b in table.buckets], dtype=np.int64)
    assert table.tt_range is not None and table.conc_range is not None
    chosen, dists = _pool_order(tts, concs, counts, table.tt_range, table.conc_range, query, floor)
    return [(table.buckets[i], float(d)) for i, d in zip(chosen, dists)]


def _selection_probs(dists: np.ndarray, counts: np.ndarray, cfg: OracleConfig) -> np.ndarray:
    weights = 1.0 / np.maximum(dists, cfg.epsilon_distance) ** cfg.shepard_power
    mass = weights * counts
    return mass / mass.sum()


def _draw(
    probs: np.ndarray, samples: list[np.ndarray], rng: np.random.Generator
) -> float:
    i = int(rng.choice(len(probs), p=probs))
    bucket = samples[i]
    return float(bucket[int(rng.integers(len(bucket)))])


def _select_table(pack: ProfilePack, phase: StepPhase) -> PhaseTable:
    table = pack.table_for(phase)
    if table.is_empty:
        table = pack.combined_table
    if table.is_empty:
        raise NoProfileDataError("profile pack has no samples in any table")
    return table


def sample_latency(
    pack: ProfilePack,
    query: OracleQuery,
    cfg: OracleConfig,
    rng: np.random.Generator,
) -> float:
    """Draw one latency for the query from the pack.

    Falls back to the combined table when the phase table is entirely empty.
    """
    query.validate()
    cfg.validate()
    table = _select_table(pack, query.phase)
    pooled = pool_neighbors(table, (query.total_tokens, query.concurrency), cfg.reliability_floor)
    dists = np.array([d for _, d in pooled])
    counts = np.array([len(b.samples) for b, _ in pooled], dtype=np.float64)
    probs = _selection_probs(dists, counts, cfg)
    samples = [np.asarray(b.samples, dtype=np.float64) for b, _ in pooled]
    return _draw(probs, samples, rng)


class _TableIndex:
    """Vectorized view of one table for repeated pooling."""

    def __init__(self, table: PhaseTable):
        self.tts = np.array([b.tt for b in table.buckets], dtype=np.float64)
        self.concs = np.array([b.conc for b in table.buckets], dtype=np.float64)
        self.counts = np.array([len(b.samples) for b in table.buckets], dtype=np.int64)
        self.samples = [np.asarray(b.samples, dtype=np.float64) for b in table.buckets]
        self.tt_range = table.tt_range
        self.conc_range = table.conc_range
        self.empty = table.is_empty


class LatencyOracle:
    """Engine-facing sampler over a loaded pack, with per-query pooling cache.

    Stateless apart from its rng; share one instance per sampling stream.
    """

    def __init__(self, pack: ProfilePack, cfg: OracleConfig | None = None):
        self.cfg = cfg or OracleConfig()
        self.cfg.validate()
        pack.validate()
        self._pack = pack
        self._rng = np.random.default_rng(self.cfg.rng_seed)
        self._indices = {
            StepPhase.DECODE_ONLY: _TableIndex(pack.decode_table),
            StepPhase.PREFILL_OR_MIXED: _TableIndex(pack.mixed_table),
        }
        self._combined = _TableIndex(pack.combined_table)
        self._cache: dict[tuple[StepPhase, int, int], tuple[np.ndarray, list[np.ndarray]]] = {}

    def _pooled(self, phase: StepPhase, tt: int, conc: int) -> tuple[np.ndarray, list[np.ndarray]]:
        key = (phase, tt, conc)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        index = self._indices[phase]
        if index.empty:
            index = self._combined
        if index.empty:
            raise NoProfileDataError("profile pack has no samples in any table")
        chosen, dists = _pool_order(
            index.tts,
            index.concs,
            index.counts,
            index.tt_range,
            index.conc_range,
            (tt, conc),
            self.cfg.reliability_floor,
        )
        probs = _selection_probs(dists, index.counts[chosen].astype(np.float64), self.cfg)
        entry = (probs, [index.samples[i] for i in chosen])
        self._cache[key] = entry
        return entry

    def sample(self, tt: int, conc: int, phase: StepPhase) -> float:
        probs, samples = self._pooled(phase, tt, conc)
        return _draw(probs, samples, self._rng)

    __call__ = sample
