"""Maps streamed hand keypoints onto robot joint angles.

Each incoming frame carries a wrist pose plus five fingertip positions in
the wrist frame (millimeters). The solver finds joint angles whose
forward kinematics match the keypoints after a fixed size scale while
staying close to the previous pose:

    E(q) = sum_f w_f * ||beta * p_f - fk_f(q)||^2 + lambda * ||q - q_prev||^2

Fingers share no joints, so the objective separates per chain and each
finger is solved independently by projected gradient descent: central
finite-difference gradients, a backtracking line search that halves the
step on any energy increase, and a box projection onto the range of
motion after every step. The wrist pose is never optimized; it rides
along with the result for a downstream arm controller.

The fingertip alone cannot pin down all four thumb joints (three
constraints, four angles), so distinct poses can share a fingertip; the
smoothness term makes the solver pick the candidate nearest the warm
start, deterministically.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .hand_model import FingerChainSpec, HandModel, base_transform

TraceFn = Callable[[str, int, float], None]


class KeypointError(ValueError):
    """A keypoint frame or stream is malformed."""


@dataclass(frozen=True)
class WristPose:
    """Wrist position (mm) and orientation (unit quaternion, w first)."""

    position_mm: tuple[float, float, float]
    quaternion_wxyz: tuple[float, float, float, float]

    def __post_init__(self):
        if len(self.position_mm) != 3:
            raise KeypointError("wrist position must be a 3-vector")
        if len(self.quaternion_wxyz) != 4:
            raise KeypointError("wrist orientation must be a quaternion")
        values = (*self.position_mm, *self.quaternion_wxyz)
        if not all(math.isfinite(float(v)) for v in values):
            raise KeypointError("wrist pose must be finite")
        norm = math.sqrt(sum(float(v) ** 2 for v in self.quaternion_wxyz))
        if abs(norm - 1.0) > 1e-6:
            raise KeypointError(
                f"wrist quaternion must have unit norm, got {norm:.8f}"
            )


IDENTITY_WRIST = WristPose((0.0, 0.0, 0.0), (1.0, 0.0, 0.0, 0.0))


@dataclass(frozen=True)
class KeypointFrame:
    """One teleoperation input frame.

    Attributes:
        t: Capture time, seconds.
        wrist_pose: Tracked wrist pose, passed through unmodified.
        tips_mm: Fingertip positions keyed by finger name, wrist frame
            mm. Every finger of the hand must be present.
    """

    t: float
    wrist_pose: WristPose
    tips_mm: Mapping[str, tuple[float, float, float]]


@dataclass(frozen=True)
class RetargetConfig:
    """Solver parameters.

    Attributes:
        scale_beta: Human-to-robot size factor applied to keypoints.
        weights: Per-finger data-term weights; default 1.
        smoothness_lambda: Weight tying the solution to the previous
            pose, in mm^2 per deg^2.
        max_iters: Gradient-step budget per finger per frame.
        step_size_deg: The first step is sized so the fastest-moving
            joint moves this far.
        convergence_tol_deg: Terminate once an accepted step moves every
            joint less than this.
        fd_step_deg: Central-difference probe size.
    """

    scale_beta: float = 1.1
    weights: Mapping[str, float] = field(default_factory=dict)
    smoothness_lambda: float = 1e-3
    max_iters: int = 50
    step_size_deg: float = 5.0
    convergence_tol_deg: float = 1e-3
    fd_step_deg: float = 0.05

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.convergence_tol_deg <= 0:
            raise ValueError("convergence tolerance must be positive")
        if self.smoothness_lambda < 0:
            raise ValueError("smoothness weight must be non-negative")
        if any(w < 0 for w in self.weights.values()):
            raise ValueError("finger weights must be non-negative")
        if self.scale_beta <= 0:
            raise ValueError("scale must be positive")
        if self.fd_step_deg <= 0 or self.step_size_deg <= 0:
            raise ValueError("step sizes must be positive")


@dataclass(frozen=True)
class RetargetedFrame:
    """Solver output for one frame: joints plus the pass-through pose."""

    t: float
    joints: dict[str, float]
    wrist_pose: WristPose


def _validate_frame(model: HandModel, frame: KeypointFrame) -> None:
    fingers = {chain.finger for chain in model.chains}
    for finger in frame.tips_mm:
        if finger not in fingers:
            raise KeypointError(f"frame t={frame.t}: unknown finger '{finger}'")
    missing = sorted(fingers - set(frame.tips_mm))
    if missing:
        raise KeypointError(
            f"frame t={frame.t}: missing fingertip(s): {', '.join(missing)}"
        )
    for finger, tip in frame.tips_mm.items():
        if len(tip) != 3 or not all(math.isfinite(float(v)) for v in tip):
            raise KeypointError(
                f"frame t={frame.t}: finger '{finger}' needs a finite "
                "[x, y, z] position"
            )


class _FastChain:
    """Scalar forward kinematics for one chain, tuned for tight loops.

    Matches ``hand_model.chain_fingertip`` for the same pose: flexion
    joints rotate about local x and then consume one link along local y,
    abduction joints rotate about local z, leftover links extend rigidly
    along the final local y.
    """

    def __init__(self, model: HandModel, chain: FingerChainSpec):
        base = base_transform(chain)
        self._base_r = tuple(float(v) for v in base[:3, :3].reshape(-1))
        self._base_t = tuple(float(v) for v in base[:3, 3])
        steps = []
        li = 0
        for name in chain.joint_order:
            joint = model.joint(name)
            if joint.axis == "flexion":
                steps.append(("flex", chain.link_lengths_mm[li]))
                li += 1
            else:
                steps.append(("abd", 0.0))
        self._steps = tuple(steps)
        self._tail = tuple(chain.link_lengths_mm[li:])

    def tip(self, q_deg: Sequence[float]) -> tuple[float, float, float]:
        r00, r01, r02, r10, r11, r12, r20, r21, r22 = self._base_r
        px, py, pz = self._base_t
        for (kind, link), theta in zip(self._steps, q_deg):
            a = math.radians(theta)
            c = math.cos(a)
            s = math.sin(a)
            if kind == "flex":
                # R = R @ Rx(a): col1' = c*col1 + s*col2, col2' = -s*col1 + c*col2
                n01 = c * r01 + s * r02
                n11 = c * r11 + s * r12
                n21 = c * r21 + s * r22
                r02 = -s * r01 + c * r02
                r12 = -s * r11 + c * r12
                r22 = -s * r21 + c * r22
                r01, r11, r21 = n01, n11, n21
                px += link * r01
                py += link * r11
                pz += link * r21
            else:
                # R = R @ Rz(a): col0' = c*col0 + s*col1, col1' = -s*col0 + c*col1
                n00 = c * r00 + s * r01
                n10 = c * r10 + s * r11
                n20 = c * r20 + s * r21
                r01 = -s * r00 + c * r01
                r11 = -s * r10 + c * r11
                r21 = -s * r20 + c * r21
                r00, r10, r20 = n00, n10, n20
        for link in self._tail:
            px += link * r01
            py += link * r11
            pz += link * r21
        return (px, py, pz)


class _FingerProblem:
    """Objective for one chain with everything else frozen."""

    def __init__(
        self,
        model: HandModel,
        chain: FingerChainSpec,
        target_mm: Sequence[float],
        prev: np.ndarray,
        weight: float,
        config: RetargetConfig,
    ):
        self._fk = _FastChain(model, chain)
        self.names = list(chain.joint_order)
        self._tx, self._ty, self._tz = (
            config.scale_beta * float(v) for v in target_mm
        )
        self._prev = prev
        self._weight = weight
        self._smooth = config.smoothness_lambda
        lo, hi = [], []
        for name in self.names:
            a, b = model.rom(name)
            lo.append(a)
            hi.append(b)
        self.lo = np.array(lo)
        self.hi = np.array(hi)

    def clip(self, q: np.ndarray) -> np.ndarray:
        return np.clip(q, self.lo, self.hi)

    def value(self, q: Sequence[float]) -> float:
        fx, fy, fz = self._fk.tip(q)
        data = (
            (self._tx - fx) ** 2 + (self._ty - fy) ** 2 + (self._tz - fz) ** 2
        )
        smooth = 0.0
        for value, prev in zip(q, self._prev):
            d = value - prev
            smooth += d * d
        return self._weight * data + self._smooth * smooth


def fd_gradient(
    fn: Callable[[np.ndarray], float], q: np.ndarray, h: float
) -> np.ndarray:
    """Central-difference gradient of a scalar function of a vector."""
    g = np.empty_like(q)
    for i in range(len(q)):
        probe = q.copy()
        probe[i] = q[i] + h
        above = fn(probe)
        probe[i] = q[i] - h
        below = fn(probe)
        g[i] = (above - below) / (2.0 * h)
    return g


def _descend(
    problem: _FingerProblem,
    q0: np.ndarray,
    config: RetargetConfig,
    trace: Optional[TraceFn],
    finger: str,
) -> np.ndarray:
    q = problem.clip(np.asarray(q0, dtype=float).copy())
    e_now = problem.value(q)
    for it in range(config.max_iters):
        g = fd_gradient(problem.value, q, config.fd_step_deg)
        g_max = float(np.max(np.abs(g)))
        if g_max < 1e-14:
            break
        # Steepest descent with an exact step for locally quadratic energy:
        # measure curvature along the unit descent direction by a second
        # difference at a fixed 0.5 deg probe, alpha = |g|^2 / (g'Hg) = 1/c.
        g_norm = float(np.linalg.norm(g))
        probe = 0.5 / g_norm
        along = problem.value(q - probe * g)
        back = problem.value(q + probe * g)
        curvature = (along + back - 2.0 * e_now) / 0.25
        alpha_cap = config.step_size_deg / g_max
        if curvature > 1e-12:
            alpha = min(1.0 / curvature, alpha_cap)
        else:
            alpha = alpha_cap
        full_alpha = alpha
        accepted = False
        step = math.inf
        while alpha * g_max > 1e-12:
            candidate = problem.clip(q - alpha * g)
            e_cand = problem.value(candidate)
            if e_cand < e_now:
                step = float(np.max(np.abs(candidate - q)))
                q, e_now = candidate, e_cand
                accepted = True
                if trace:
                    trace(finger, it, e_now)
                break
            alpha *= 0.5
        if not accepted:
            break
        # A sub-tolerance update only signals convergence when the line
        # search accepted the full quadratic step; a collapsed alpha can
        # produce a tiny step while the gradient is still large.
        if step < config.convergence_tol_deg and alpha == full_alpha:
            break
    return q


def energy(
    model: HandModel,
    q: Mapping[str, float],
    frame: KeypointFrame,
    q_prev: Mapping[str, float],
    config: Optional[RetargetConfig] = None,
) -> float:
    """Full-hand retargeting objective at pose q.

    Raises:
        KeypointError: a fingertip is missing or malformed.
    """
    config = config or RetargetConfig()
    _validate_frame(model, frame)
    total = 0.0
    for chain in model.chains:
        prob = _FingerProblem(
            model,
            chain,
            frame.tips_mm[chain.finger],
            np.array([q_prev[name] for name in chain.joint_order]),
            config.weights.get(chain.finger, 1.0),
            config,
        )
        total += prob.value([q[name] for name in chain.joint_order])
    chained = {name for chain in model.chains for name in chain.joint_order}
    for name, value in q.items():
        if name not in chained:
            d = value - q_prev[name]
            total += config.smoothness_lambda * d * d
    return total


def solve_frame(
    model: HandModel,
    frame: KeypointFrame,
    q_prev: Mapping[str, float],
    config: Optional[RetargetConfig] = None,
    trace: Optional[TraceFn] = None,
) -> dict[str, float]:
    """Solves one keypoint frame for a full joint vector.

    Args:
        model: Hand description.
        frame: Keypoint targets; every finger must be present.
        q_prev: Complete previous pose in degrees, used both as the warm
            start and as the smoothness anchor.
        config: Solver parameters.
        trace: Optional callback ``(finger, iteration, energy)`` invoked
            on every accepted descent step.

    Returns:
        Complete joint vector in degrees, every entry inside its range
        of motion. Joints outside the finger chains (the wrist) keep
        their previous value.

    Raises:
        KeypointError: malformed frame.
    """
    config = config or RetargetConfig()
    _validate_frame(model, frame)
    q: dict[str, float] = {}
    for joint in model.joints:
        lo, hi = joint.rom_min_deg, joint.rom_max_deg
        q[joint.name] = min(max(float(q_prev[joint.name]), lo), hi)
    for chain in model.chains:
        prev = np.array(
            [q[name] for name in chain.joint_order], dtype=float
        )
        problem = _FingerProblem(
            model,
            chain,
            frame.tips_mm[chain.finger],
            prev,
            config.weights.get(chain.finger, 1.0),
            config,
        )
        solution = _descend(problem, prev, config, trace, chain.finger)
        q.update(zip(problem.names, (float(v) for v in solution)))
    return q


def retarget_trace(
    model: HandModel,
    frames: Sequence[KeypointFrame],
    config: Optional[RetargetConfig] = None,
    q0: Optional[Mapping[str, float]] = None,
) -> list[RetargetedFrame]:
    """Solves a time-ordered trace, warm-starting each frame from the last.

    The wrist pose of every input frame is passed through unmodified.

    Raises:
        KeypointError: any per-frame failure, annotated with the frame
            index.
    """
    config = config or RetargetConfig()
    if q0 is None:
        prev: Mapping[str, float] = {name: 0.0 for name in model.joint_names()}
    else:
        prev = dict(q0)
    out: list[RetargetedFrame] = []
    for index, frame in enumerate(frames):
        try:
            solved = solve_frame(model, frame, prev, config)
        except KeypointError as exc:
            raise KeypointError(f"frame {index}: {exc}") from exc
        out.append(
            RetargetedFrame(t=frame.t, joints=solved, wrist_pose=frame.wrist_pose)
        )
        prev = solved
    return out


def parse_keypoint_line(line: str, line_no: int = 0) -> KeypointFrame:
    """Parses one NDJSON keypoint record.

    Expected shape::

        {"t": 0.0,
         "wrist": {"p": [x, y, z], "q": [w, x, y, z]},
         "tips": {"thumb": [x, y, z], "index": [...], ...}}
    """
    where = f"line {line_no}" if line_no else "keypoint record"
    try:
        doc = json.loads(line)
    except json.JSONDecodeError as exc:
        raise KeypointError(f"{where}: not valid JSON ({exc})")
    if not isinstance(doc, dict):
        raise KeypointError(f"{where}: record must be an object")
    if "t" not in doc or not isinstance(doc["t"], (int, float)):
        raise KeypointError(f"{where}: missing numeric 't'")
    wrist_doc = doc.get("wrist")
    if (
        not isinstance(wrist_doc, dict)
        or not isinstance(wrist_doc.get("p"), (list, tuple))
        or not isinstance(wrist_doc.get("q"), (list, tuple))
    ):
        raise KeypointError(f"{where}: missing wrist object with 'p' and 'q'")
    try:
        wrist = WristPose(
            tuple(float(v) for v in wrist_doc["p"]),
            tuple(float(v) for v in wrist_doc["q"]),
        )
    except (TypeError, ValueError) as exc:
        raise KeypointError(f"{where}: bad wrist pose ({exc})")
    tips_doc = doc.get("tips")
    if not isinstance(tips_doc, dict):
        raise KeypointError(f"{where}: missing 'tips' object")
    tips: dict[str, tuple[float, float, float]] = {}
    for finger, xyz in tips_doc.items():
        if (
            not isinstance(xyz, (list, tuple))
            or len(xyz) != 3
            or not all(isinstance(v, (int, float)) for v in xyz)
        ):
            raise KeypointError(
                f"{where}: finger '{finger}' must be an [x, y, z] triple"
            )
        tips[finger] = (float(xyz[0]), float(xyz[1]), float(xyz[2]))
    return KeypointFrame(t=float(doc["t"]), wrist_pose=wrist, tips_mm=tips)


def parse_keypoint_stream(lines: Iterable[str]) -> list[KeypointFrame]:
    """Parses an NDJSON keypoint stream, skipping blank lines."""
    frames = []
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        frames.append(parse_keypoint_line(line, line_no))
    return frames


def keypoint_frame_for_pose(
    model: HandModel,
    q: Mapping[str, float],
    config: Optional[RetargetConfig] = None,
    t: float = 0.0,
    wrist_pose: WristPose = IDENTITY_WRIST,
) -> KeypointFrame:
    """Builds the frame whose exact solution is the given pose.

    Runs the forward kinematics at ``q`` and divides by the scale so
    that ``scale_beta * tips == FK(q)``. Useful for round-trip checks
    and synthetic traces.
    """
    config = config or RetargetConfig()
    tips: dict[str, tuple[float, float, float]] = {}
    for chain in model.chains:
        fk = _FastChain(model, chain)
        tip = fk.tip([q[name] for name in chain.joint_order])
        tips[chain.finger] = tuple(v / config.scale_beta for v in tip)
    return KeypointFrame(t=t, wrist_pose=wrist_pose, tips_mm=tips)
