import asyncio
import contextlib
import json
import signal
import socket
import subprocess
import sys
import threading

import pytest

import test_daemon
from orca import __version__
from orca.calibration import profile_from_dict
from orca.cli import build_parser, main
from orca.retarget import keypoint_frame_for_pose


@pytest.fixture(scope="module")
def ideal_profile(model):
    from orca.calibration import calibrate_all
    from orca.motor_bus import SimBackend

    backend = SimBackend(model, test_daemon.ideal_params(model))
    return calibrate_all(backend, model)


@contextlib.contextmanager
def live_daemon(**kwargs):
    """Runs a daemon on its own event-loop thread for blocking clients."""
    started = threading.Event()
    box = {}

    def runner():
        async def go():
            harness = await test_daemon.start_daemon(**kwargs)
            box["harness"] = harness
            box["loop"] = asyncio.get_running_loop()
            box["stop"] = asyncio.Event()
            started.set()
            await box["stop"].wait()
            await harness.daemon.stop()

        asyncio.run(go())

    thread = threading.Thread(target=runner, daemon=True)
    thread.start()
    assert started.wait(10), "daemon failed to start"
    try:
        yield box["harness"]
    finally:
        box["loop"].call_soon_threadsafe(box["stop"].set)
        thread.join(10)


class TestParser:
    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args(["--version"])
        assert exc.value.code == 0
        assert __version__ in capsys.readouterr().out

    def test_subcommand_required(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([])

    def test_jog_args(self):
        args = build_parser().parse_args(["jog", "wrist", "-3.5"])
        assert args.joint == "wrist"
        assert args.delta_deg == -3.5
        assert args.port == 8472

    def test_run_sine_args(self):
        args = build_parser().parse_args(
            [
                "run", "sine", "--joint", "index_mcp", "--frequency-hz", "0.5",
                "--amplitude-deg", "30", "--duration-s", "10",
            ]
        )
        assert args.pattern == "sine"
        assert args.frequency_hz == 0.5
        assert args.offset_deg is None


class TestLocalCommands:
    def test_calibrate_sim_writes_profile(self, tmp_path, capsys):
        out = tmp_path / "profile.json"
        rc = main(["calibrate", "--sim", "-o", str(out)])
        assert rc == 0
        text = capsys.readouterr().out
        assert "calibrated 17 joints" in text
        doc = json.loads(out.read_text())
        profile = profile_from_dict(doc)
        assert len(profile.joints) == 17

    def test_calibrate_needs_a_target(self, capsys):
        rc = main(["calibrate"])
        assert rc == 2
        assert "--sim" in capsys.readouterr().err

    def test_bench_sine(self, tmp_path, capsys):
        out = tmp_path / "report.csv"
        rc = main(
            [
                "bench", "sine", "--frequency-hz", "0.5",
                "--duration-s", "6", "--csv", str(out),
            ]
        )
        assert rc == 0
        assert "latency" in capsys.readouterr().out
        header = out.read_text().splitlines()[0]
        assert header == (
            "joint,frequency_hz,amplitude_deg,duration_s,"
            "latency_s,rmse_deg,samples"
        )

    def test_bench_reliability(self, tmp_path, capsys):
        out = tmp_path / "cycles.csv"
        rc = main(["bench", "reliability", "--cycles", "2", "--csv", str(out)])
        assert rc == 0
        text = capsys.readouterr().out
        assert "2 cycles" in text
        assert "0 flagged" in text
        assert out.read_text().startswith(
            "cycle,timestamp_s,motor_id,max_current_ma,temperature_c"
        )

    def test_retarget_round_trip(self, tmp_path, model, capsys):
        zero = {name: 0.0 for name in model.joint_names()}
        flexed = dict(zero, index_mcp=40.0, index_pip=30.0)
        lines = []
        for t, pose in enumerate((zero, flexed)):
            frame = keypoint_frame_for_pose(model, pose, t=float(t))
            lines.append(
                json.dumps(
                    {
                        "t": frame.t,
                        "wrist": {
                            "p": list(frame.wrist_pose.position_mm),
                            "q": list(frame.wrist_pose.quaternion_wxyz),
                        },
                        "tips": {
                            f: list(v) for f, v in frame.tips_mm.items()
                        },
                    }
                )
            )
        trace = tmp_path / "trace.ndjson"
        trace.write_text("\n".join(lines) + "\n")
        out = tmp_path / "joints.csv"
        rc = main(
            ["retarget", str(trace), "-o", str(out), "--max-iters", "300"]
        )
        assert rc == 0
        assert "2 frames" in capsys.readouterr().out
        rows = out.read_text().splitlines()
        header = rows[0].split(",")
        assert header == ["t"] + list(model.joint_names())
        first = dict(zip(header, (float(v) for v in rows[1].split(","))))
        second = dict(zip(header, (float(v) for v in rows[2].split(","))))
        assert all(abs(first[n]) < 2.0 for n in model.joint_names())
        assert second["index_mcp"] > 5.0

    def test_retarget_empty_trace(self, tmp_path, capsys):
        trace = tmp_path / "empty.ndjson"
        trace.write_text("\n\n")
        rc = main(["retarget", str(trace), "-o", str(tmp_path / "out.csv")])
        assert rc == 2
        assert "no keypoint frames" in capsys.readouterr().err

    def test_retarget_missing_trace(self, tmp_path, capsys):
        rc = main(
            [
                "retarget", str(tmp_path / "nope.ndjson"),
                "-o", str(tmp_path / "out.csv"),
            ]
        )
        assert rc == 2
        assert "cannot read trace" in capsys.readouterr().err


class TestDaemonCommands:
    def test_calibrate_jog_and_run_against_daemon(self, capsys):
        with live_daemon() as h:
            rc = main(
                ["calibrate", "--connect", "--port", str(h.port)]
            )
            assert rc == 0
            assert "calibrated 17 joints" in capsys.readouterr().out
            rc = main(["jog", "index_mcp", "0", "--port", str(h.port)])
            assert rc == 0
            before = float(capsys.readouterr().out.split("target ")[1].split()[0])
            rc = main(["jog", "index_mcp", "10", "--port", str(h.port)])
            assert rc == 0
            after = float(capsys.readouterr().out.split("target ")[1].split()[0])
            assert after == pytest.approx(before + 10.0)
            rc = main(
                [
                    "run", "sine", "--joint", "wrist", "--frequency-hz", "1",
                    "--amplitude-deg", "10", "--duration-s", "2",
                    "--port", str(h.port),
                ]
            )
            assert rc == 0
            assert "trajectory complete (2.0 s)" in capsys.readouterr().out

    def test_jog_uncalibrated_daemon_fails(self, capsys):
        with live_daemon() as h:
            rc = main(["jog", "wrist", "5", "--port", str(h.port)])
            assert rc == 2
            assert "uncalibrated" in capsys.readouterr().err

    def test_token_auth(self, ideal_profile, capsys):
        with live_daemon(token="sekret", profile=ideal_profile) as h:
            rc = main(
                [
                    "jog", "wrist", "5",
                    "--port", str(h.port), "--token", "sekret",
                ]
            )
            assert rc == 0
            rc = main(
                [
                    "jog", "wrist", "5",
                    "--port", str(h.port), "--token", "wrong",
                ]
            )
            assert rc == 2
            assert "unauthorized" in capsys.readouterr().err

    def test_connection_refused_is_clean(self, capsys):
        with socket.socket() as probe:
            probe.bind(("127.0.0.1", 0))
            free_port = probe.getsockname()[1]
        rc = main(["jog", "wrist", "5", "--port", str(free_port)])
        assert rc == 2
        assert "cannot connect" in capsys.readouterr().err


class TestServe:
    def test_serve_requires_sim(self, capsys):
        rc = main(["serve"])
        assert rc == 2
        assert "--sim" in capsys.readouterr().err

    def test_serve_subprocess_smoke(self):
        proc = subprocess.Popen(
            [
                sys.executable, "-m", "orca.cli", "serve", "--sim",
                "--port", "0", "--ws-port", "0", "--accelerated",
            ],
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            text=True,
        )
        try:
            banner = proc.stdout.readline()
            assert "tcp://127.0.0.1:" in banner
            port = int(banner.split("tcp://127.0.0.1:")[1].split()[0])
            with socket.create_connection(("127.0.0.1", port), timeout=5) as s:
                fh = s.makefile("rwb")
                fh.write(b'{"id":1,"type":"ping","payload":{}}\n')
                fh.flush()
                reply = json.loads(fh.readline())
                assert reply["ok"] is True
                assert reply["result"]["pong"] is True
            proc.send_signal(signal.SIGINT)
            assert proc.wait(timeout=15) == 0
        finally:
            if proc.poll() is None:
                proc.kill()
                proc.wait()
