"""``orcactl``: serve, calibrate, jog, play trajectories, bench, retarget.

Subcommands either run locally against the built-in simulator
(``serve``, ``bench``, ``retarget``, ``calibrate --sim``) or talk to a
running daemon over its newline-delimited JSON TCP endpoint (``jog``,
``run``, ``calibrate --connect``).
"""

from __future__ import annotations

import argparse
import asyncio
import csv
import json
import os
import signal
import socket
import sys
from pathlib import Path
from typing import Optional

from . import __version__
from .bench import export_csv, run_reliability, run_sine_benchmark
from .calibration import calibrate_all, profile_to_dict
from .daemon import DEFAULT_TCP_PORT, DEFAULT_WS_PORT, DaemonConfig, HandDaemon
from .hand_model import HandModel, default_model, load_hand_config
from .motor_bus import SimBackend, SimParams
from .protocol import Request, Response, encode, parse_message
from .retarget import RetargetConfig, parse_keypoint_stream, retarget_trace


class CliError(RuntimeError):
    """A subcommand failed; the message is printed to stderr."""


def _load_model(config_path: Optional[str]) -> HandModel:
    if config_path is None:
        return default_model()
    try:
        text = Path(config_path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read config {config_path}: {exc}")
    return load_hand_config(text)


def _sim_backend(model: HandModel, seed: int) -> SimBackend:
    return SimBackend(model, SimParams.for_model(model, seed=seed))


class DaemonClient:
    """Minimal blocking client for the daemon's TCP endpoint."""

    def __init__(self, host: str, port: int, token: str = "", timeout_s: float = 10.0):
        try:
            self._sock = socket.create_connection((host, port), timeout=timeout_s)
        except OSError as exc:
            raise CliError(f"cannot connect to {host}:{port}: {exc}")
        self._file = self._sock.makefile("rwb")
        self._next_id = 1
        token = token or os.environ.get("ORCA_TOKEN", "")
        if token:
            self.request("auth", {"token": token})

    def close(self) -> None:
        self._file.close()
        self._sock.close()

    def request(self, kind: str, payload: dict, timeout_s: Optional[float] = None) -> dict:
        """Sends one command and waits for its response.

        Telemetry and event lines arriving in between are skipped.

        Raises:
            CliError: error response, closed connection, or timeout.
        """
        request_id = self._next_id
        self._next_id += 1
        if timeout_s is not None:
            self._sock.settimeout(timeout_s)
        line = encode(Request(id=request_id, type=kind, payload=payload))
        self._file.write(line.encode() + b"\n")
        self._file.flush()
        while True:
            try:
                raw = self._file.readline()
            except socket.timeout:
                raise CliError(f"{kind}: no response within the timeout")
            if not raw:
                raise CliError("connection closed by the daemon")
            message = parse_message(raw)
            if isinstance(message, Response) and message.id == request_id:
                if not message.ok:
                    error = message.error or {}
                    raise CliError(
                        f"{kind}: {error.get('code', 'error')}: "
                        f"{error.get('message', '')}"
                    )
                return message.result or {}


def _connect(args) -> DaemonClient:
    return DaemonClient(args.host, args.port, token=args.token)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_serve(args) -> int:
    if not args.sim:
        raise CliError(
            "this build drives the bundled simulator only; pass --sim"
        )
    model = _load_model(args.config)
    backend = _sim_backend(model, args.seed)
    config = DaemonConfig(
        host=args.host,
        port=args.port,
        ws_port=args.ws_port,
        accelerated=args.accelerated,
        console_dir=args.console_dir,
    )

    async def run() -> None:
        daemon = HandDaemon(backend, model, config)
        await daemon.start()
        print(
            f"orca daemon v{__version__}: tcp://{config.host}:{daemon.tcp_port} "
            f"ws://{config.host}:{daemon.ws_port} (console at /console)",
            flush=True,
        )
        stop = asyncio.Event()
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGINT, signal.SIGTERM):
            try:
                loop.add_signal_handler(sig, stop.set)
            except NotImplementedError:
                pass
        try:
            await stop.wait()
        finally:
            await daemon.stop()

    asyncio.run(run())
    return 0


def cmd_calibrate(args) -> int:
    if args.connect:
        client = _connect(args)
        try:
            result = client.request("calibrate", {}, timeout_s=args.timeout)
        finally:
            client.close()
        ratios = result["ratios"]
        profile = result["profile"]
    else:
        if not args.sim:
            raise CliError("pass --sim for a local run or --connect for a daemon")
        model = _load_model(args.config)
        backend = _sim_backend(model, args.seed)
        prof = calibrate_all(backend, model)
        profile = profile_to_dict(prof)
        ratios = {name: cal.ratio for name, cal in prof.joints.items()}
    for name in sorted(ratios):
        print(f"{name:<12} ratio {ratios[name]:+.6f} rad/deg")
    print(f"calibrated {len(ratios)} joints")
    if args.output:
        Path(args.output).write_text(json.dumps(profile, indent=2) + "\n")
        print(f"profile written to {args.output}")
    return 0


def cmd_jog(args) -> int:
    client = _connect(args)
    try:
        result = client.request(
            "jog", {"joint": args.joint, "delta_deg": args.delta_deg}
        )
    finally:
        client.close()
    print(f"{args.joint} target {result['target_deg']:.2f} deg")
    return 0


def cmd_run(args) -> int:
    if args.pattern == "sine":
        payload = {
            "kind": "sine",
            "joint": args.joint,
            "frequency_hz": args.frequency_hz,
            "amplitude_deg": args.amplitude_deg,
            "duration_s": args.duration_s,
        }
        if args.offset_deg is not None:
            payload["offset_deg"] = args.offset_deg
    else:
        payload = {"kind": "grasp", "duration_s": args.duration_s}
    client = _connect(args)
    try:
        result = client.request("run_trajectory", payload, timeout_s=args.timeout)
    finally:
        client.close()
    print(f"trajectory complete ({result['duration_s']:.1f} s)")
    return 0


def cmd_bench(args) -> int:
    model = _load_model(args.config)
    backend = _sim_backend(model, args.seed)
    if args.bench == "sine":
        report = run_sine_benchmark(
            model,
            backend,
            args.joint,
            amplitude_deg=args.amplitude_deg,
            frequency_hz=args.frequency_hz,
            duration_s=args.duration_s,
            auto_calibrate=True,
        )
        print(
            f"{report.joint} @ {report.frequency_hz} Hz: "
            f"latency {report.latency_s * 1000:.1f} ms, "
            f"rmse {report.rmse_deg:.3f} deg over {report.samples} samples"
        )
        if args.csv:
            export_csv(report, args.csv)
            print(f"report written to {args.csv}")
    else:
        log = run_reliability(
            model,
            backend,
            args.cycles,
            auto_calibrate=True,
            csv_path=args.csv,
        )
        flagged = log.flagged()
        peak = max((r.max_current_ma for r in log.rows), default=0.0)
        print(
            f"{args.cycles} cycles, {len(log.rows)} rows, "
            f"peak current {peak:.0f} mA, {len(flagged)} flagged"
        )
        if args.csv:
            print(f"log written to {args.csv}")
        if flagged:
            return 1
    return 0


def cmd_retarget(args) -> int:
    model = _load_model(args.config)
    try:
        lines = Path(args.trace).read_text().splitlines()
    except OSError as exc:
        raise CliError(f"cannot read trace {args.trace}: {exc}")
    frames = parse_keypoint_stream(lines)
    if not frames:
        raise CliError(f"{args.trace}: no keypoint frames found")
    config = RetargetConfig(
        scale_beta=args.scale,
        smoothness_lambda=args.smoothness,
        max_iters=args.max_iters,
    )
    results = retarget_trace(model, frames, config)
    names = list(model.joint_names())
    with open(args.output, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + names)
        for frame in results:
            writer.writerow(
                [repr(frame.t)] + [repr(frame.joints[n]) for n in names]
            )
    print(f"{len(results)} frames -> {args.output}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _add_client_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--host", default="127.0.0.1", help="daemon host")
    parser.add_argument(
        "--port", type=int, default=DEFAULT_TCP_PORT, help="daemon TCP port"
    )
    parser.add_argument(
        "--token", default="", help="bearer token (default: ORCA_TOKEN env)"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="orcactl", description="Operate a 17-DoF tendon-driven hand."
    )
    parser.add_argument(
        "--version", action="version", version=f"orcactl {__version__}"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run the operator daemon")
    serve.add_argument("--config", help="hand config JSON (default: built-in)")
    serve.add_argument(
        "--sim", action="store_true", help="drive the bundled simulator"
    )
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=DEFAULT_TCP_PORT)
    serve.add_argument("--ws-port", type=int, default=DEFAULT_WS_PORT)
    serve.add_argument(
        "--accelerated",
        action="store_true",
        help="run trajectories flat out instead of wall-clock paced",
    )
    serve.add_argument(
        "--console-dir", help="directory of built console assets for /console"
    )
    serve.add_argument("--seed", type=int, default=0, help="simulator seed")
    serve.set_defaults(func=cmd_serve)

    cal = sub.add_parser("calibrate", help="sweep end stops and fit the joint map")
    cal.add_argument("--config", help="hand config JSON (default: built-in)")
    cal.add_argument("--sim", action="store_true", help="calibrate a local simulator")
    cal.add_argument("--connect", action="store_true", help="calibrate via a daemon")
    cal.add_argument("--seed", type=int, default=0, help="simulator seed")
    cal.add_argument("-o", "--output", help="write the profile JSON here")
    cal.add_argument(
        "--timeout", type=float, default=120.0, help="daemon response timeout (s)"
    )
    _add_client_args(cal)
    cal.set_defaults(func=cmd_calibrate)

    jog = sub.add_parser("jog", help="nudge one joint on a running daemon")
    jog.add_argument("joint")
    jog.add_argument("delta_deg", type=float)
    _add_client_args(jog)
    jog.set_defaults(func=cmd_jog)

    run = sub.add_parser("run", help="play a trajectory on a running daemon")
    run_sub = run.add_subparsers(dest="pattern", required=True)
    run_sine = run_sub.add_parser("sine", help="single-joint sinusoid")
    run_sine.add_argument("--joint", required=True)
    run_sine.add_argument("--frequency-hz", type=float, required=True)
    run_sine.add_argument("--amplitude-deg", type=float, required=True)
    run_sine.add_argument("--duration-s", type=float, required=True)
    run_sine.add_argument("--offset-deg", type=float, default=None)
    run_grasp = run_sub.add_parser("grasp", help="whole-hand grasp cycles")
    run_grasp.add_argument("--duration-s", type=float, required=True)
    for p in (run_sine, run_grasp):
        p.add_argument(
            "--timeout", type=float, default=600.0,
            help="daemon response timeout (s)",
        )
        _add_client_args(p)
        p.set_defaults(func=cmd_run)

    bench = sub.add_parser("bench", help="run a benchmark on a local simulator")
    bench_sub = bench.add_subparsers(dest="bench", required=True)
    bench_sine = bench_sub.add_parser("sine", help="latency/accuracy sine run")
    bench_sine.add_argument("--joint", default="index_mcp")
    bench_sine.add_argument("--frequency-hz", type=float, default=0.2)
    bench_sine.add_argument("--amplitude-deg", type=float, default=40.0)
    bench_sine.add_argument("--duration-s", type=float, default=30.0)
    bench_rel = bench_sub.add_parser("reliability", help="repeated grasp cycles")
    bench_rel.add_argument("--cycles", type=int, default=100)
    for p in (bench_sine, bench_rel):
        p.add_argument("--config", help="hand config JSON (default: built-in)")
        p.add_argument("--seed", type=int, default=0, help="simulator seed")
        p.add_argument("--csv", help="write results to this CSV path")
    bench_sine.set_defaults(func=cmd_bench)
    bench_rel.set_defaults(func=cmd_bench)

    ret = sub.add_parser(
        "retarget", help="convert a keypoint trace to joint targets"
    )
    ret.add_argument("trace", help="NDJSON keypoint trace file")
    ret.add_argument("-o", "--output", required=True, help="joint CSV out path")
    ret.add_argument("--config", help="hand config JSON (default: built-in)")
    ret.add_argument("--scale", type=float, default=1.1, help="hand scale factor")
    ret.add_argument(
        "--smoothness", type=float, default=1e-3, help="frame-to-frame damping"
    )
    ret.add_argument("--max-iters", type=int, default=50)
    ret.set_defaults(func=cmd_retarget)

    return parser


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"orcactl: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
