"""serve-emu: wall-clock emulation of an LLM online-serving engine.

The engine keeps a production-shaped control plane (HTTP admission,
continuous batching with chunked prefill, paged KV-block accounting,
streaming output) and replaces model execution with either a configurable
ground-truth latency model or a profile-sampled latency oracle.
"""
from .bench import (
    RequestRecord,
    RunMetrics,
    WorkloadSpec,
    compare_runs,
    compute_metrics,
    generate_arrivals,
    run_benchmark,
)
from .engine import (
    EmulatorEngine,
    EngineConfig,
    GroundTruthBackend,
    GroundTruthParams,
    ground_truth_latency,
)
from .oracle import LatencyOracle, OracleConfig, OracleQuery, sample_latency
from .profile import (
    Bucket,
    PhaseTable,
    ProfilePack,
    StepPhase,
    StepTraceRecord,
    build_pack,
    load_pack,
    save_pack,
)
from .server import ServerConfig, create_app, run_server

__all__ = [
    "Bucket",
    "EmulatorEngine",
    "EngineConfig",
    "GroundTruthBackend",
    "GroundTruthParams",
    "LatencyOracle",
    "OracleConfig",
    "OracleQuery",
    "PhaseTable",
    "ProfilePack",
    "RequestRecord",
    "RunMetrics",
    "ServerConfig",
    "StepPhase",
    "StepTraceRecord",
    "WorkloadSpec",
    "build_pack",
    "compare_runs",
    "compute_metrics",
    "create_app",
    "generate_arrivals",
    "ground_truth_latency",
    "load_pack",
    "run_benchmark",
    "run_server",
    "sample_latency",
    "save_pack",
]
