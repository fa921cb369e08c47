from __future__ import annotations

import argparse
import json
import subprocess
import sys

import pytest

from serve_emu.bench import load_report, read_workload
from serve_emu.cli import main, server_config_from_args
from serve_emu.profile import load_pack_file
from serve_emu.server import BACKEND_GROUND_TRUTH, BACKEND_ORACLE

from conftest import free_port, get_json, server_subprocess


def run_cli(args: list[str]) -> int:
    return main(args)


def parse_serve_args(extra: list[str]) -> argparse.Namespace:
    parser = argparse.ArgumentParser()
    sub = parser.add_subparsers(dest="command")
    from serve_emu.cli import _add_serve

    _add_serve(sub)
    return parser.parse_args(["serve", "--num-gpu-blocks", "64", *extra])


class TestServeConfigPlumbing:
    def test_defaults_to_ground_truth(self, monkeypatch):
        monkeypatch.delenv("EMU_ENABLE_ORACLE", raising=False)
        cfg = server_config_from_args(parse_serve_args([]))
        assert cfg.backend == BACKEND_GROUND_TRUTH
        assert cfg.engine.num_gpu_blocks == 64
        assert cfg.engine.async_scheduling is True

    def test_env_enables_oracle(self, monkeypatch, tmp_path):
        pack = tmp_path / "pack.json"
        pack.write_text("{}")
        monkeypatch.setenv("EMU_ENABLE_ORACLE", "1")
        monkeypatch.setenv("EMU_PROFILE_PACK", str(pack))
        cfg = server_config_from_args(parse_serve_args([]))
        assert cfg.backend == BACKEND_ORACLE
        assert cfg.profile_pack == str(pack)

    def test_cli_wins_over_env(self, monkeypatch, tmp_path):
        monkeypatch.setenv("EMU_ENABLE_ORACLE", "1")
        monkeypatch.setenv("EMU_PROFILE_PACK", "/env/pack.json")
        cfg = server_config_from_args(
            parse_serve_args(["--backend", "groundtruth", "--profile-pack", "/cli/pack.json"])
        )
        assert cfg.backend == BACKEND_GROUND_TRUTH
        assert cfg.profile_pack == "/cli/pack.json"

    def test_blocking_flag(self):
        cfg = server_config_from_args(parse_serve_args(["--blocking"]))
        assert cfg.engine.async_scheduling is False


class TestOfflineCommands:
    def test_gen_workload(self, tmp_path):
        out = tmp_path / "w.jsonl"
        assert run_cli(
            [
                "gen-workload", "--num", "50", "--prompt-median", "60",
                "--output-median", "20", "--seed", "3", "--out", str(out),
            ]
        ) == 0
        entries = read_workload(out)
        assert len(entries) == 50

    def test_build_pack_and_stats(self, tmp_path, capsys):
        traces = tmp_path / "traces"
        traces.mkdir()
        lines = [
            {"step": 0, "tt": 3, "conc": 3, "phase": "decode", "latency_s": 0.01},
            {"step": 1, "tt": 64, "conc": 1, "phase": "mixed", "latency_s": 0.05},
        ]
        (traces / "a.jsonl").write_text("\n".join(json.dumps(x) for x in lines) + "\n")
        out = tmp_path / "pack.json"
        assert run_cli(
            [
                "build-pack", "--traces", str(traces), "--num-gpu-blocks", "128",
                "--out", str(out), "--meta", "model=toy",
            ]
        ) == 0
        pack = load_pack_file(out)
        assert pack.num_gpu_blocks == 128
        assert pack.metadata == {"model": "toy"}
        assert pack.combined_table.total_samples == 2
        printed = capsys.readouterr().out
        assert '"total_samples": 4' in printed  # per-table plus combined view


@pytest.mark.slow
class TestSubprocessPipeline:
    def test_full_cli_pipeline(self, tmp_path):
        """gen-workload -> serve -> capture -> build-pack -> bench x2 -> compare,
        all through the public CLI."""
        workload = tmp_path / "w.jsonl"
        run_cli(
            [
                "gen-workload", "--num", "40", "--prompt-median", "30",
                "--output-median", "10", "--seed", "5", "--out", str(workload),
            ]
        )

        # Step latencies must dwarf timer slack for meaningful accuracy, so
        # use GPU-like milliseconds here, not the sub-ms values of fast tests.
        fast_gt = [
            "--gt-base", "0.004", "--gt-per-token", "4e-5", "--gt-per-seq", "1.2e-4",
            "--gt-noise-cv", "0.02",
        ]
        port = free_port()
        common = ["--num-gpu-blocks", "512", "--seed", "0", *fast_gt]

        with server_subprocess(common, port) as url:
            trace_dir = tmp_path / "traces"
            assert run_cli(
                [
                    "capture", "--target", url, "--rates", "20,40",
                    "--prompts-per-rate", "20", "--workload", str(workload),
                    "--seed", "100", "--rounds", "2", "--trace-dir", str(trace_dir),
                ]
            ) == 0
            assert len(list(trace_dir.glob("*.jsonl"))) == 4

            pack = tmp_path / "pack.json"
            assert run_cli(
                [
                    "build-pack", "--traces", str(trace_dir),
                    "--num-gpu-blocks", "512", "--out", str(pack),
                ]
            ) == 0

            real_report = tmp_path / "real.json"
            assert run_cli(
                [
                    "bench", "--target", url, "--workload", str(workload),
                    "--rate", "20", "--num-prompts", "30", "--seed", "42",
                    "--out", str(real_report),
                ]
            ) == 0

        oracle_port = free_port()
        oracle_args = [
            "--num-gpu-blocks", "512", "--seed", "0",
            "--backend", "oracle", "--profile-pack", str(pack),
        ]
        with server_subprocess(oracle_args, oracle_port) as url:
            stats = get_json(f"{url}/stats")
            assert stats["free_blocks"] == 512
            emu_report = tmp_path / "emu.json"
            assert run_cli(
                [
                    "bench", "--target", url, "--workload", str(workload),
                    "--rate", "20", "--num-prompts", "30", "--seed", "42",
                    "--out", str(emu_report),
                ]
            ) == 0

        out = tmp_path / "table"
        assert run_cli(
            [
                "compare", "--real", str(real_report), "--emu", str(emu_report),
                "--label", "r=20", "--out", str(out),
            ]
        ) == 0
        table = (tmp_path / "table.txt").read_text()
        assert "TPOT" in table and "r=20" in table
        report = json.loads((tmp_path / "table.json").read_text())
        # Loose smoke bounds; the tight bounds live in the acceptance suite.
        for key, bound in (("tpot_mean", 0.15), ("itl_mean", 0.15), ("tps", 0.10)):
            entry = report["r=20"]["metrics"][key]
            assert entry["real"] > 0 and entry["emu"] > 0
            assert abs(entry["rel_err"]) < bound

    def test_env_var_launch(self, tmp_path):
        """EMU_ENABLE_ORACLE=1 plus EMU_PROFILE_PACK behaves like the flags."""
        traces = tmp_path / "traces"
        traces.mkdir()
        line = {"step": 0, "tt": 4, "conc": 4, "phase": "decode", "latency_s": 0.02}
        lines = [dict(line, step=i) for i in range(5)]
        mixed = [
            {"step": 9, "tt": 30, "conc": 1, "phase": "mixed", "latency_s": 0.04}
        ]
        (traces / "t.jsonl").write_text(
            "\n".join(json.dumps(x) for x in lines + mixed) + "\n"
        )
        pack = tmp_path / "pack.json"
        run_cli(["build-pack", "--traces", str(traces), "--num-gpu-blocks", "64",
                 "--out", str(pack)])

        import os
        import signal
        import time
        from conftest import wait_for_health

        port = free_port()
        env = dict(os.environ, EMU_ENABLE_ORACLE="1", EMU_PROFILE_PACK=str(pack))
        cmd = [
            sys.executable, "-m", "serve_emu", "serve",
            "--port", str(port), "--num-gpu-blocks", "64",
        ]
        proc = subprocess.Popen(cmd, env=env, stdout=subprocess.PIPE,
                                stderr=subprocess.STDOUT, text=True)
        url = f"http://127.0.0.1:{port}"
        try:
            wait_for_health(url)
            report = tmp_path / "r.json"
            workload = tmp_path / "w.jsonl"
            workload.write_text(json.dumps({"prompt_tokens": 8, "output_tokens": 4}) + "\n")
            assert run_cli(
                [
                    "bench", "--target", url, "--workload", str(workload),
                    "--rate", "10", "--seed", "1", "--out", str(report),
                ]
            ) == 0
            data = load_report(report)
            # Oracle replays the 20 ms decode samples from the pack, clearly
            # distinguishable from the 3 ms ground-truth default.
            assert data["metrics"]["itl"]["mean"] > 0.015
        finally:
            proc.send_signal(signal.SIGINT)
            try:
                proc.wait(timeout=10)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()
