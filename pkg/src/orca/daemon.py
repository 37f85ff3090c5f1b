"""Operator daemon: owns one hand backend and serves it over the wire.

Exposes control, calibration, benchmarks, telemetry, and fault
injection through the protocol in :mod:`orca.protocol`, on two
transports carrying identical payloads: newline-delimited JSON over TCP
(default port 8472) and WebSocket (default port 8473). The WebSocket
port also serves the browser console's static assets at ``/console``.

Concurrency model: the event loop owns the backend and runs a 100 Hz
control pump plus a telemetry fan-out task. Long activities
(calibration, trajectories, benchmarks, tension checks) take an
exclusive lease and run in a worker thread that drives the backend
clock itself; while the lease is held the pump pauses and conflicting
commands are rejected with ``busy`` rather than queued. Telemetry is
decimated per subscriber, and a slow subscriber drops frames instead of
back-pressuring the pump.

Authentication is a static bearer token from ``ORCA_TOKEN``: when the
token is empty only loopback connections are accepted; when set, every
connection must present it (an ``auth`` command, or ``?token=`` on the
WebSocket URL) before any other command.
"""

from __future__ import annotations

import asyncio
import json
import logging
import mimetypes
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional
from urllib.parse import parse_qs

from websockets.asyncio.server import serve as ws_serve
from websockets.datastructures import Headers
from websockets.exceptions import ConnectionClosed
from websockets.http11 import Response as HttpResponse

from . import __version__
from .bench import BenchError, run_reliability, run_sine_benchmark
from .calibration import (
    CalibrationError,
    calibrate_all,
    profile_to_dict,
)
from .control import (
    ControlError,
    Controller,
    ControllerConfig,
    GraspCycleSpec,
    SineSpec,
    generate_trajectory,
)
from .hand_model import HandModel, UnknownJointError, serialize_hand_config
from .motor_bus import MotorBackend
from .protocol import (
    ERR_BUSY,
    ERR_FAILED,
    ERR_SCHEMA,
    ERR_UNAUTHORIZED,
    ERR_UNCALIBRATED,
    Event,
    ProtocolError,
    Request,
    Response,
    Telemetry,
    encode,
    error_response,
    ok_response,
    parse_message,
    validate_command,
)
from .tactile import ChannelFault

logger = logging.getLogger(__name__)

DEFAULT_TCP_PORT = 8472
DEFAULT_WS_PORT = 8473
TELEMETRY_TICK_S = 0.02
MAX_SUBSCRIBE_RATE_HZ = 50.0
MAX_LINE_BYTES = 2**20
QUEUE_DEPTH = 256

LOOPBACK_HOSTS = frozenset({"127.0.0.1", "::1", "::ffff:127.0.0.1", "localhost"})

# Commands that move the hand or monopolize the bus for their duration.
_LEASE_COMMANDS = frozenset(
    {"calibrate", "run_trajectory", "run_bench", "tension_check"}
)


@dataclass
class DaemonConfig:
    """Service settings.

    ``token=None`` reads ``ORCA_TOKEN`` from the environment. An empty
    token disables authentication but restricts connections to
    loopback. ``accelerated`` runs trajectories flat out instead of
    wall-clock paced (benchmarks and calibration always step the
    simulated clock as fast as they can).
    """

    host: str = "127.0.0.1"
    port: int = DEFAULT_TCP_PORT
    ws_port: int = DEFAULT_WS_PORT
    token: Optional[str] = None
    accelerated: bool = False
    console_dir: Optional[str] = None
    loop_rate_hz: float = 100.0


class _Client:
    """One connection on either transport."""

    def __init__(self, label: str, authed: bool):
        self.label = label
        self.authed = authed
        self.telemetry_rate = 0.0
        self.next_frame_due = 0.0
        self.queue: asyncio.Queue = asyncio.Queue(maxsize=QUEUE_DEPTH)
        self.closed = False
        self.dropped_frames = 0

    async def send(self, message) -> None:
        """Queues a response or event; applies backpressure if full."""
        if not self.closed:
            await self.queue.put(encode(message))

    def offer_telemetry(self, line: str) -> None:
        """Queues a telemetry line; drops it when the client is slow."""
        if self.closed:
            return
        try:
            self.queue.put_nowait(line)
        except asyncio.QueueFull:
            self.dropped_frames += 1


class HandDaemon:
    """Long-running operator service around one backend."""

    def __init__(
        self,
        backend: MotorBackend,
        model: HandModel,
        config: Optional[DaemonConfig] = None,
    ):
        self._backend = backend
        self._model = model
        self._cfg = config or DaemonConfig()
        token = self._cfg.token
        if token is None:
            token = os.environ.get("ORCA_TOKEN", "")
        self._token = token
        self._controller = Controller(
            backend, model, ControllerConfig(loop_rate_hz=self._cfg.loop_rate_hz)
        )
        self._mode = "idle"
        self._lease: Optional[str] = None
        self._clients: set[_Client] = set()
        self._running = False
        self._tasks: list[asyncio.Task] = []
        self._tcp_server: Optional[asyncio.AbstractServer] = None
        self._ws_server = None
        self._loop: Optional[asyncio.AbstractEventLoop] = None
        self._model_doc = json.loads(serialize_hand_config(model))

    # -- lifecycle -----------------------------------------------------------

    @property
    def tcp_port(self) -> int:
        return self._tcp_server.sockets[0].getsockname()[1]

    @property
    def ws_port(self) -> int:
        for sock in self._ws_server.sockets:
            return sock.getsockname()[1]
        raise RuntimeError("websocket server has no bound socket")

    @property
    def mode(self) -> str:
        return self._mode

    @property
    def calibrated(self) -> bool:
        return self._controller.calibrated

    def adopt_profile(self, profile) -> None:
        """Installs a previously measured calibration profile.

        Raises:
            ProfileError: profile does not match this hand.
        """
        self._controller.install_profile(profile)

    async def start(self) -> None:
        self._loop = asyncio.get_running_loop()
        self._running = True
        self._tcp_server = await asyncio.start_server(
            self._serve_tcp_connection,
            self._cfg.host,
            self._cfg.port,
            limit=MAX_LINE_BYTES,
        )
        self._ws_server = await ws_serve(
            self._serve_ws_connection,
            self._cfg.host,
            self._cfg.ws_port,
            process_request=self._process_http,
            max_size=MAX_LINE_BYTES,
        )
        self._tasks.append(asyncio.create_task(self._pump()))
        self._tasks.append(asyncio.create_task(self._telemetry_fanout()))
        logger.info(
            "serving TCP on %s:%d, WebSocket on %s:%d",
            self._cfg.host, self.tcp_port, self._cfg.host, self.ws_port,
        )

    async def stop(self) -> None:
        """Graceful shutdown: stop serving, park the hand at neutral."""
        self._running = False
        for task in self._tasks:
            task.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)
        self._tasks.clear()
        if self._controller.calibrated and self._lease is None:
            self._lease = "shutdown"
            try:
                await asyncio.to_thread(self._controller.park)
            except ControlError:
                logger.exception("parking failed during shutdown")
        for client in list(self._clients):
            client.closed = True
        if self._tcp_server is not None:
            self._tcp_server.close()
            await self._tcp_server.wait_closed()
        if self._ws_server is not None:
            self._ws_server.close()
            await self._ws_server.wait_closed()

    # -- background tasks ----------------------------------------------------

    async def _pump(self) -> None:
        dt = 1.0 / self._cfg.loop_rate_hz
        while self._running:
            if self._lease is None:
                self._controller.tick()
            await asyncio.sleep(dt)

    async def _telemetry_fanout(self) -> None:
        while self._running:
            now = self._loop.time()
            due = [
                c
                for c in self._clients
                if c.telemetry_rate > 0 and c.next_frame_due <= now
            ]
            if due:
                line = encode(Telemetry(frame=self._build_frame()))
                for client in due:
                    client.offer_telemetry(line)
                    client.next_frame_due += 1.0 / client.telemetry_rate
                    # After a stall, resume from now instead of bursting.
                    if client.next_frame_due < now - 0.5:
                        client.next_frame_due = now
            await asyncio.sleep(TELEMETRY_TICK_S)

    def _build_frame(self) -> dict:
        snap = self._controller.telemetry_snapshot()
        joints: dict = {}
        motors: dict = {}
        for name, entry in snap["joints"].items():
            motors[str(entry["motor_id"])] = {
                "position_rad": entry["position_rad"],
                "current_ma": entry["current_ma"],
                "temperature_c": entry["temperature_c"],
            }
            if snap["calibrated"]:
                joints[name] = {
                    "target_deg": entry["target_deg"],
                    "estimated_deg": entry["angle_deg"],
                }
        tactile = {
            finger: {"voltage_v": t["voltage_v"], "touch": t["touch"]}
            for finger, t in snap.get("tactile", {}).items()
        }
        return {
            "timestamp": snap["t"],
            "joints": joints,
            "motors": motors,
            "tactile": tactile,
            "calibrated": snap["calibrated"],
            "mode": self._mode,
        }

    def _broadcast_event(self, event: dict) -> None:
        line = encode(Event(event=event))
        for client in self._clients:
            if client.authed:
                client.offer_telemetry(line)

    def _emit_threadsafe(self, event: dict) -> None:
        self._loop.call_soon_threadsafe(self._broadcast_event, event)

    # -- connection plumbing -------------------------------------------------

    def _peer_allowed(self, host: str) -> bool:
        if self._token:
            return True
        return host in LOOPBACK_HOSTS

    async def _serve_tcp_connection(self, reader, writer) -> None:
        peer = writer.get_extra_info("peername")
        host = peer[0] if peer else ""
        if not self._peer_allowed(host):
            logger.warning("rejecting non-loopback connection from %r", host)
            writer.close()
            return
        client = _Client(label=f"tcp:{host}", authed=not self._token)
        self._clients.add(client)

        async def drain() -> None:
            try:
                while True:
                    line = await client.queue.get()
                    writer.write(line.encode() + b"\n")
                    await writer.drain()
            except (ConnectionError, RuntimeError):
                client.closed = True

        drain_task = asyncio.create_task(drain())
        try:
            while self._running:
                try:
                    raw = await reader.readline()
                except (ValueError, ConnectionError):
                    break
                if not raw:
                    break
                if not raw.strip():
                    continue
                await self._dispatch_line(client, raw)
        finally:
            client.closed = True
            self._clients.discard(client)
            drain_task.cancel()
            writer.close()

    async def _serve_ws_connection(self, connection) -> None:
        remote = connection.remote_address
        host = remote[0] if remote else ""
        if not self._peer_allowed(host):
            await connection.close(code=1008, reason="loopback only")
            return
        authed = not self._token
        query = ""
        path = connection.request.path if connection.request else ""
        if "?" in path:
            query = path.split("?", 1)[1]
        if not authed and query:
            tokens = parse_qs(query).get("token", [])
            if tokens and tokens[0] == self._token:
                authed = True
        client = _Client(label=f"ws:{host}", authed=authed)
        self._clients.add(client)

        async def drain() -> None:
            try:
                while True:
                    line = await client.queue.get()
                    await connection.send(line)
            except ConnectionClosed:
                client.closed = True

        drain_task = asyncio.create_task(drain())
        try:
            async for raw in connection:
                await self._dispatch_line(client, raw)
        except ConnectionClosed:
            pass
        finally:
            client.closed = True
            self._clients.discard(client)
            drain_task.cancel()

    @staticmethod
    def _salvage_id(raw) -> int:
        try:
            doc = json.loads(raw)
            request_id = doc.get("id")
            if (
                isinstance(request_id, int)
                and not isinstance(request_id, bool)
                and 0 <= request_id <= 2**64 - 1
            ):
                return request_id
        except (ValueError, AttributeError, UnicodeDecodeError):
            pass
        return 0

    async def _dispatch_line(self, client: _Client, raw) -> None:
        try:
            message = parse_message(raw)
        except ProtocolError as exc:
            await client.send(
                error_response(self._salvage_id(raw), exc.code, str(exc))
            )
            return
        if not isinstance(message, Request):
            await client.send(
                error_response(
                    0, ERR_SCHEMA, "only requests are accepted from clients"
                )
            )
            return
        try:
            validate_command(message)
        except ProtocolError as exc:
            await client.send(error_response(message.id, exc.code, str(exc)))
            return
        if not client.authed and message.type != "auth":
            await client.send(
                error_response(
                    message.id, ERR_UNAUTHORIZED, "authenticate first"
                )
            )
            return
        if message.type in _LEASE_COMMANDS:
            await self._start_activity(client, message)
        else:
            response = await self._handle_immediate(client, message)
            await client.send(response)

    # -- immediate commands --------------------------------------------------

    async def _handle_immediate(self, client: _Client, req: Request) -> Response:
        payload = req.payload
        if req.type == "auth":
            if not self._token or payload["token"] == self._token:
                client.authed = True
                return ok_response(req.id, {"authenticated": True})
            return error_response(req.id, ERR_UNAUTHORIZED, "bad token")
        if req.type == "ping":
            return ok_response(req.id, {"pong": True, "version": __version__})
        if req.type == "get_model":
            return ok_response(req.id, {"model": self._model_doc})
        if req.type == "get_status":
            return ok_response(
                req.id,
                {
                    "version": __version__,
                    "mode": self._mode,
                    "calibrated": self._controller.calibrated,
                    "lease": self._lease,
                    "t": self._backend.now(),
                },
            )
        if req.type == "subscribe":
            rate = min(float(payload["rate_hz"]), MAX_SUBSCRIBE_RATE_HZ)
            client.telemetry_rate = rate
            client.next_frame_due = self._loop.time()
            return ok_response(req.id, {"rate_hz": rate})
        if req.type == "set_targets":
            return self._do_set_targets(req)
        if req.type == "jog":
            return self._do_jog(req)
        if req.type == "set_fault":
            return self._do_set_fault(req)
        raise AssertionError(f"unrouted command {req.type}")

    def _reject_if_unavailable(self, req: Request) -> Optional[Response]:
        if self._lease is not None:
            return error_response(
                req.id, ERR_BUSY, f"{self._lease} in progress; try again later"
            )
        if not self._controller.calibrated:
            return error_response(
                req.id, ERR_UNCALIBRATED, "calibrate the hand first"
            )
        return None

    def _do_set_targets(self, req: Request) -> Response:
        rejection = self._reject_if_unavailable(req)
        if rejection:
            return rejection
        try:
            applied = self._controller.set_joint_targets(req.payload["targets"])
        except UnknownJointError as exc:
            return error_response(req.id, ERR_SCHEMA, f"unknown joint {exc}")
        except ValueError as exc:
            return error_response(req.id, ERR_SCHEMA, str(exc))
        self._mode = "jog"
        return ok_response(req.id, {"applied": applied, "mode": self._mode})

    def _do_jog(self, req: Request) -> Response:
        rejection = self._reject_if_unavailable(req)
        if rejection:
            return rejection
        try:
            target = self._controller.jog(
                req.payload["joint"], req.payload["delta_deg"]
            )
        except UnknownJointError as exc:
            return error_response(req.id, ERR_SCHEMA, f"unknown joint {exc}")
        self._mode = "jog"
        return ok_response(
            req.id,
            {"joint": req.payload["joint"], "target_deg": target, "mode": self._mode},
        )

    def _do_set_fault(self, req: Request) -> Response:
        payload = req.payload
        kind = payload["kind"]
        hooks = {
            "tendon": "set_tendon_connected",
            "force": "apply_fingertip_force",
            "tactile": "set_tactile_fault",
        }
        hook = getattr(self._backend, hooks[kind], None)
        if hook is None:
            return error_response(
                req.id, ERR_FAILED, "fault injection requires a simulator backend"
            )
        try:
            if kind == "tendon":
                hook(payload["joint"], payload["connected"])
            elif kind == "force":
                hook(payload["finger"], payload["newtons"])
            else:
                fault = ChannelFault(
                    mode=payload["mode"],
                    threshold_n=payload.get("threshold_n", 0.0),
                )
                hook(payload["finger"], fault)
        except KeyError as exc:
            return error_response(req.id, ERR_SCHEMA, f"unknown name {exc}")
        except ValueError as exc:
            return error_response(req.id, ERR_SCHEMA, str(exc))
        return ok_response(req.id, {"applied": True})

    # -- lease activities ----------------------------------------------------

    async def _start_activity(self, client: _Client, req: Request) -> None:
        if self._lease is not None:
            await client.send(
                error_response(
                    req.id, ERR_BUSY, f"{self._lease} in progress; try again later"
                )
            )
            return
        payload = req.payload
        needs_profile = req.type in ("run_trajectory", "tension_check") or (
            req.type == "run_bench" and not payload.get("auto_calibrate", False)
        )
        if needs_profile and not self._controller.calibrated:
            await client.send(
                error_response(req.id, ERR_UNCALIBRATED, "calibrate the hand first")
            )
            return

        if req.type == "run_trajectory":
            try:
                spec = self._trajectory_spec(payload)
                # Validate the joint and range cheaply before taking the lease.
                probe = payload.get("duration_s", 1.0)
                generate_trajectory(
                    self._model,
                    self._trajectory_spec({**payload, "duration_s": min(probe, 1.0)}),
                    self._cfg.loop_rate_hz,
                )
            except (UnknownJointError, KeyError) as exc:
                await client.send(
                    error_response(req.id, ERR_SCHEMA, f"unknown joint {exc}")
                )
                return
            except ValueError as exc:
                await client.send(error_response(req.id, ERR_SCHEMA, str(exc)))
                return
            work = lambda: self._activity_trajectory(spec)
            mode = "trajectory"
        elif req.type == "calibrate":
            work = self._activity_calibrate
            mode = "calibrating"
        elif req.type == "run_bench":
            work = lambda: self._activity_bench(payload)
            mode = "bench"
        else:
            joints = payload.get("joints")
            if joints:
                unknown = [j for j in joints if j not in self._model.joint_names()]
                if unknown:
                    await client.send(
                        error_response(
                            req.id, ERR_SCHEMA,
                            f"unknown joint(s) {', '.join(unknown)}",
                        )
                    )
                    return
            work = lambda: self._activity_tension(joints)
            mode = "bench"

        self._lease = req.type
        self._mode = mode
        asyncio.create_task(self._run_activity(client, req, work))

    async def _run_activity(self, client: _Client, req: Request, work) -> None:
        try:
            result = await asyncio.to_thread(work)
        except (CalibrationError, BenchError, ControlError, ValueError) as exc:
            await client.send(error_response(req.id, ERR_FAILED, str(exc)))
        except Exception as exc:  # keep the daemon alive on surprises
            logger.exception("activity %s failed", req.type)
            await client.send(
                error_response(req.id, ERR_FAILED, f"internal error: {exc}")
            )
        else:
            await client.send(ok_response(req.id, result))
        finally:
            self._lease = None
            self._mode = "idle"

    def _trajectory_spec(self, payload: dict):
        if payload["kind"] == "sine":
            return SineSpec(
                joint=payload["joint"],
                frequency_hz=payload["frequency_hz"],
                amplitude_deg=payload["amplitude_deg"],
                duration_s=payload["duration_s"],
                offset_deg=payload.get("offset_deg"),
            )
        return GraspCycleSpec(duration_s=payload["duration_s"])

    def _activity_trajectory(self, spec) -> dict:
        self._controller.run_trajectory(
            spec,
            on_progress=lambda f: self._emit_threadsafe(
                {"kind": "trajectory", "fraction": f}
            ),
            realtime=not self._cfg.accelerated,
        )
        return {"completed": True, "duration_s": spec.duration_s}

    def _calibrate_blocking(self):
        """Runs a full calibration sweep, emitting per-joint events."""

        def on_progress(info: dict) -> None:
            self._emit_threadsafe({"kind": "calibration", **info})

        try:
            profile = calibrate_all(self._backend, self._model, progress=on_progress)
        except CalibrationError as exc:
            self._emit_threadsafe(
                {
                    "kind": "calibration",
                    "joint": exc.joint,
                    "phase": "failed",
                    "message": str(exc),
                }
            )
            raise
        self._loop.call_soon_threadsafe(self._adopt_profile, profile)
        return profile

    def _adopt_profile(self, profile) -> None:
        self._controller.install_profile(profile)

    def _activity_calibrate(self) -> dict:
        profile = self._calibrate_blocking()
        return {
            "ratios": {name: cal.ratio for name, cal in profile.joints.items()},
            "profile": profile_to_dict(profile),
        }

    def _activity_bench(self, payload: dict) -> dict:
        profile = self._controller.profile
        if profile is None:
            profile = self._calibrate_blocking()

        def on_progress(fraction: float) -> None:
            self._emit_threadsafe({"kind": "bench", "fraction": fraction})

        if payload["kind"] == "sine":
            report = run_sine_benchmark(
                self._model,
                self._backend,
                payload["joint"],
                amplitude_deg=payload["amplitude_deg"],
                frequency_hz=payload["frequency_hz"],
                duration_s=payload.get("duration_s", 30.0),
                rate_hz=self._cfg.loop_rate_hz,
                profile=profile,
                progress=on_progress,
            )
            return {"report": asdict(report)}
        log = run_reliability(
            self._model,
            self._backend,
            payload["n_cycles"],
            profile=profile,
            rate_hz=self._cfg.loop_rate_hz,
            csv_path=payload.get("csv_path"),
            progress=on_progress,
        )
        summary: dict = {
            "rows": len(log.rows),
            "flagged": len(log.flagged()),
            "motors": log.motor_ids(),
        }
        if log.rows:
            summary["max_current_ma"] = max(r.max_current_ma for r in log.rows)
        if payload.get("csv_path"):
            summary["csv_path"] = payload["csv_path"]
        return summary

    def _activity_tension(self, joints) -> dict:
        estimates = self._controller.tension_check(joints)
        return {
            "estimates": {
                name: {
                    "slack_rad": est.slack_rad,
                    "travel_rad": est.travel_rad,
                    "joint_moved_deg": est.joint_moved_deg,
                }
                for name, est in estimates.items()
            }
        }

    # -- console static assets -----------------------------------------------

    def _process_http(self, connection, request):
        path = request.path.split("?", 1)[0]
        if path == "/console" or path.startswith("/console/"):
            return self._serve_console_asset(path)
        return None

    def _serve_console_asset(self, path: str):
        def http_error(status: int, text: str):
            body = text.encode()
            return HttpResponse(
                status,
                "Not Found" if status == 404 else "Error",
                Headers(
                    **{
                        "Content-Type": "text/plain; charset=utf-8",
                        "Content-Length": str(len(body)),
                    }
                ),
                body,
            )

        if not self._cfg.console_dir:
            return http_error(404, "console assets are not built into this daemon")
        root = Path(self._cfg.console_dir).resolve()
        rel = path[len("/console"):].lstrip("/") or "index.html"
        target = (root / rel).resolve()
        if not str(target).startswith(str(root)) or not target.is_file():
            return http_error(404, f"no such asset: {rel}")
        body = target.read_bytes()
        content_type = (
            mimetypes.guess_type(target.name)[0] or "application/octet-stream"
        )
        return HttpResponse(
            200,
            "OK",
            Headers(
                **{
                    "Content-Type": content_type,
                    "Content-Length": str(len(body)),
                }
            ),
            body,
        )
