import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from orca.hand_model import default_model
from orca.motor_bus import (
    OP_PING,
    OP_READ_STATUS,
    TICKS_PER_REV,
    FrameError,
    JointSimParams,
    MotorSample,
    SimBackend,
    SimParams,
    UnknownMotorError,
    decode_frame,
    decode_goal,
    decode_status,
    encode_goal,
    encode_ping,
    encode_status,
    rad_to_ticks,
    ticks_to_rad,
)

DT = 0.01


def quiet_params(model, **joint_overrides):
    """Stock params with zero drift and zero noise for exact-value tests."""
    base = SimParams.for_model(model)
    joints = {
        name: JointSimParams(
            true_ratio=jp.true_ratio,
            motor_origin=jp.motor_origin,
            slack_deadband=joint_overrides.get("slack_deadband", jp.slack_deadband),
            drift_rate=0.0,
            lag_seconds=joint_overrides.get("lag_seconds", jp.lag_seconds),
            time_constant=joint_overrides.get("time_constant", jp.time_constant),
            stall_current_ma=jp.stall_current_ma,
        )
        for name, jp in base.joints.items()
    }
    return SimParams(joints=joints, measurement_noise_deg=0.0)


def settle(backend, seconds=1.5):
    for _ in range(int(seconds / DT)):
        backend.step(DT)


class TestCodec:
    def test_one_rev_is_4096_ticks(self):
        assert rad_to_ticks(math.tau) == TICKS_PER_REV
        frame = encode_goal(3, math.tau)
        assert frame == oracles.GOAL_FRAME_MOTOR3_ONE_REV
        motor, pos = decode_goal(frame)
        assert motor == 3 and pos == pytest.approx(math.tau, abs=1e-12)

    def test_zero_goal(self):
        motor, pos = decode_goal(encode_goal(0, 0.0))
        assert motor == 0 and pos == 0.0

    def test_checksum_matches_reference(self):
        for ticks in (0, 1, -1, 123456, -4096):
            assert encode_goal(7, ticks_to_rad(ticks)) == oracles.reference_goal_frame(7, ticks)

    def test_ping_round_trip(self):
        motor, opcode, payload = decode_frame(encode_ping(9))
        assert (motor, opcode, payload) == (9, OP_PING, b"")

    @given(st.integers(0, 255), st.integers(-(2**31), 2**31 - 1))
    def test_goal_round_trip(self, motor, ticks):
        frame = encode_goal(motor, ticks_to_rad(ticks))
        got_motor, got_pos = decode_goal(frame)
        assert got_motor == motor
        assert rad_to_ticks(got_pos) == ticks

    @given(
        st.integers(0, 255),
        st.integers(-(2**31), 2**31 - 1),
        st.integers(-(2**15), 2**15 - 1),
        st.integers(0, 255),
    )
    def test_status_round_trip(self, motor, ticks, current, temp):
        sample = MotorSample(motor, 0.0, ticks_to_rad(ticks), float(current), float(temp))
        assert decode_status(encode_status(sample)) == sample

    @settings(max_examples=300)
    @given(st.data())
    def test_any_single_flipped_byte_is_rejected(self, data):
        kind = data.draw(st.sampled_from(["goal", "status", "ping"]))
        motor = data.draw(st.integers(0, 255))
        if kind == "goal":
            frame = encode_goal(motor, ticks_to_rad(data.draw(st.integers(-(2**31), 2**31 - 1))))
        elif kind == "status":
            frame = encode_status(
                MotorSample(
                    motor,
                    0.0,
                    ticks_to_rad(data.draw(st.integers(-(2**31), 2**31 - 1))),
                    float(data.draw(st.integers(-(2**15), 2**15 - 1))),
                    float(data.draw(st.integers(0, 255))),
                )
            )
        else:
            frame = encode_ping(motor)
        pos = data.draw(st.integers(0, len(frame) - 1))
        flip = data.draw(st.integers(1, 255))
        corrupted = bytearray(frame)
        corrupted[pos] ^= flip
        with pytest.raises(FrameError):
            decode_frame(bytes(corrupted))

    def test_truncated_frame(self):
        frame = encode_goal(1, 1.0)
        with pytest.raises(FrameError):
            decode_frame(frame[:-1])
        with pytest.raises(FrameError):
            decode_frame(frame[:4])

    def test_overflow_rejected(self):
        with pytest.raises(FrameError):
            encode_goal(1, 1e9)
        with pytest.raises(FrameError):
            encode_status(MotorSample(1, 0.0, 0.0, 1e6, 25.0))
        with pytest.raises(FrameError):
            encode_status(MotorSample(1, 0.0, 0.0, 0.0, -4.0))

    def test_wrong_opcode_for_decoder(self):
        with pytest.raises(FrameError):
            decode_status(encode_goal(1, 0.0))


class TestSimBasics:
    def setup_method(self):
        self.model = default_model()
        self.backend = SimBackend(self.model, quiet_params(self.model))
        self.mcp = self.model.joint("index_mcp")

    def test_initial_state(self):
        sample = self.backend.read_sample(self.mcp.motor_id)
        assert sample.current == pytest.approx(80.0)
        assert sample.temperature == pytest.approx(25.0)
        assert self.backend.read_joint_truth("index_mcp") == pytest.approx(0.0)

    def test_goal_at_current_position_is_steady(self):
        m0 = self.backend.read_sample(self.mcp.motor_id).position
        self.backend.write_goal_position(self.mcp.motor_id, m0)
        settle(self.backend)
        sample = self.backend.read_sample(self.mcp.motor_id)
        assert sample.position == pytest.approx(m0, abs=1e-12)
        assert sample.current == pytest.approx(80.0)

    def test_dt_must_be_positive(self):
        with pytest.raises(ValueError):
            self.backend.step(0.0)
        with pytest.raises(ValueError):
            self.backend.step(-0.1)

    def test_unknown_motor(self):
        with pytest.raises(UnknownMotorError):
            self.backend.write_goal_position(99, 0.0)
        with pytest.raises(UnknownMotorError):
            self.backend.read_sample(99)

    def test_timestamps_non_decreasing(self):
        stamps = []
        for _ in range(5):
            self.backend.step(DT)
            stamps.append(self.backend.read_sample(self.mcp.motor_id).timestamp)
        assert stamps == sorted(stamps)

    def test_latest_write_wins(self):
        self.backend.write_goal_position(self.mcp.motor_id, 2.0)
        self.backend.write_goal_position(self.mcp.motor_id, 3.0)
        settle(self.backend, 2.0)
        assert self.backend.read_sample(self.mcp.motor_id).position == pytest.approx(3.0, abs=1e-6)


class TestTransportAndLag:
    def setup_method(self):
        self.model = default_model()
        self.backend = SimBackend(self.model, quiet_params(self.model))
        self.motor = self.model.joint("index_mcp").motor_id

    def test_no_motion_until_lag_elapses(self):
        m0 = self.backend.read_sample(self.motor).position
        self.backend.write_goal_position(self.motor, m0 + 2.0)
        for _ in range(12):  # 0.12 s exactly
            self.backend.step(DT)
        assert self.backend.read_sample(self.motor).position == m0
        self.backend.step(DT)
        assert self.backend.read_sample(self.motor).position > m0

    def test_first_order_response_matches_closed_form(self):
        m0 = self.backend.read_sample(self.motor).position
        goal = m0 + 2.0
        self.backend.write_goal_position(self.motor, goal)
        for k in range(1, 80):
            self.backend.step(DT)
            expected = oracles.first_order_step(m0, goal, k * DT, 0.12, 0.03)
            assert self.backend.read_sample(self.motor).position == pytest.approx(
                expected, abs=1e-9
            )

    def test_current_follows_error_law(self):
        m0 = self.backend.read_sample(self.motor).position
        goal = m0 + 0.3
        self.backend.write_goal_position(self.motor, goal)
        for k in range(1, 30):
            self.backend.step(DT)
            sample = self.backend.read_sample(self.motor)
            # While the write is still in flight the servo chases its old goal.
            # Activation happens at the start of the step whose elapsed time
            # has reached the lag, so the new goal first acts in step 13.
            active = goal if (k - 1) * DT >= 0.12 - 1e-9 else m0
            expected = min(80.0 + 1500.0 * abs(active - sample.position), 600.0)
            assert sample.current == pytest.approx(expected, abs=1e-9)


class TestSlack:
    def setup_method(self):
        self.model = default_model()
        self.backend = SimBackend(self.model, quiet_params(self.model))
        self.motor = self.model.joint("index_mcp").motor_id

    def engaged_position(self):
        m0 = self.backend.read_sample(self.motor).position
        self.backend.write_goal_position(self.motor, m0 + 0.5)
        settle(self.backend)
        return self.backend.read_sample(self.motor).position

    def test_reversal_below_deadband_leaves_joint_still(self):
        m1 = self.engaged_position()
        theta1 = self.backend.read_joint_truth("index_mcp")
        self.backend.write_goal_position(self.motor, m1 - 0.015)  # < 0.02 deadband
        settle(self.backend)
        assert self.backend.read_joint_truth("index_mcp") == pytest.approx(theta1, abs=1e-12)

    def test_reversal_beyond_deadband_moves_joint(self):
        m1 = self.engaged_position()
        theta1 = self.backend.read_joint_truth("index_mcp")
        self.backend.write_goal_position(self.motor, m1 - 0.1)
        settle(self.backend)
        moved = theta1 - self.backend.read_joint_truth("index_mcp")
        # 0.1 rad of travel minus the 0.02 rad deadband, at 0.05 rad/deg
        assert moved == pytest.approx(0.08 / 0.05, abs=1e-6)

    def test_full_cycle_below_deadband_is_lost_motion(self):
        m1 = self.engaged_position()
        theta1 = self.backend.read_joint_truth("index_mcp")
        self.backend.write_goal_position(self.motor, m1 - 0.018)
        settle(self.backend)
        self.backend.write_goal_position(self.motor, m1)
        settle(self.backend)
        assert self.backend.read_joint_truth("index_mcp") == pytest.approx(theta1, abs=1e-12)


class TestHardStopsAndStall:
    def setup_method(self):
        self.model = default_model()
        self.backend = SimBackend(self.model, quiet_params(self.model))
        self.joint = self.model.joint("index_mcp")
        self.motor = self.joint.motor_id

    def test_goal_beyond_stop_pins_joint_and_stalls(self):
        # index_mcp: ratio +0.05, origin 0, ROM [-20, 110] -> shaft span [0, 6.5]
        self.backend.write_goal_position(self.motor, 9.0)
        settle(self.backend, 3.0)
        assert self.backend.read_joint_truth("index_mcp") == pytest.approx(110.0, abs=1e-9)
        sample = self.backend.read_sample(self.motor)
        assert sample.current == pytest.approx(600.0)
        assert sample.position == pytest.approx(6.5 + 0.01, abs=1e-9)  # stop + half slack

    def test_saturated_response_is_clipped_first_order(self):
        m0 = self.backend.read_sample(self.motor).position
        goal = 9.0
        stop = 6.5 + 0.01
        self.backend.write_goal_position(self.motor, goal)
        for k in range(1, 200):
            self.backend.step(DT)
            expected = min(oracles.first_order_step(m0, goal, k * DT, 0.12, 0.03), stop)
            assert self.backend.read_sample(self.motor).position == pytest.approx(
                expected, abs=1e-9
            )

    def test_extension_stop(self):
        self.backend.write_goal_position(self.motor, -5.0)
        settle(self.backend, 4.0)
        assert self.backend.read_joint_truth("index_mcp") == pytest.approx(-20.0, abs=1e-9)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(-30, 30), st.integers(1, 40))
    def test_joint_never_leaves_rom(self, goal, steps):
        model = default_model()
        backend = SimBackend(model, quiet_params(model))
        motor = model.joint("index_pip").motor_id
        backend.write_goal_position(motor, goal)
        for _ in range(steps):
            backend.step(0.05)
            theta = backend.read_joint_truth("index_pip")
            lo, hi = model.rom("index_pip")
            assert lo - 1e-9 <= theta <= hi + 1e-9

    def test_current_never_exceeds_clamp(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            motor = int(rng.choice(self.backend.motor_ids()))
            self.backend.write_goal_position(motor, float(rng.uniform(-20, 20)))
            state = self.backend.step(DT)
            assert np.all(state.current_ma <= 600.0 + 1e-12)
            assert np.all(state.current_ma >= 0.0)


class TestCurrentLimit:
    def setup_method(self):
        self.model = default_model()
        self.backend = SimBackend(self.model, quiet_params(self.model))
        self.motor = self.model.joint("index_mcp").motor_id

    def test_lowered_limit_caps_stall(self):
        self.backend.set_current_limit(self.motor, 400.0)
        self.backend.write_goal_position(self.motor, 9.0)
        settle(self.backend, 3.0)
        assert self.backend.read_sample(self.motor).current == pytest.approx(400.0)

    def test_limit_cannot_be_raised_above_clamp(self):
        self.backend.set_current_limit(self.motor, 5000.0)
        self.backend.write_goal_position(self.motor, 9.0)
        settle(self.backend, 3.0)
        assert self.backend.read_sample(self.motor).current == pytest.approx(600.0)


class TestDriftAndNoise:
    def test_drift_shifts_joint_under_holding(self):
        model = default_model()
        params = SimParams.for_model(model)  # 0.05 rad/h drift
        backend = SimBackend(model, params)
        theta0 = backend.read_joint_truth("index_mcp")
        for _ in range(1800):
            backend.step(1.0)  # 30 min
        expected = theta0 - 0.05 * 0.5 / 0.05  # -drift/ratio over half an hour
        assert backend.read_joint_truth("index_mcp") == pytest.approx(expected, abs=1e-6)

    def test_motor_samples_are_noise_free(self):
        model = default_model()
        a = SimBackend(model, SimParams.for_model(model, seed=1))
        b = SimBackend(model, SimParams.for_model(model, seed=2))
        for backend in (a, b):
            backend.write_goal_position(6, 2.0)
            backend.step(DT)
        assert a.read_sample(6) == b.read_sample(6)
        assert a.read_joint_deg("index_mcp") != b.read_joint_deg("index_mcp")

    def test_noise_applies_to_ground_truth_channel(self):
        model = default_model()
        backend = SimBackend(model, SimParams.for_model(model, seed=5))
        reads = np.array([backend.read_joint_deg("index_mcp") for _ in range(4000)])
        assert abs(reads.mean()) < 0.01
        assert reads.std() == pytest.approx(0.08, rel=0.1)

    def test_determinism_bit_identical(self):
        model = default_model()

        def run():
            backend = SimBackend(model, SimParams.for_model(model, seed=42))
            out = []
            for k in range(100):
                if k % 7 == 0:
                    backend.write_goal_position(6, math.sin(k) * 2)
                state = backend.step(DT)
                out.append(state.motor_pos.tobytes())
                out.append(state.current_ma.tobytes())
                out.append(backend.read_joint_deg("index_pip").hex())
            return out

        assert run() == run()


class TestRandomizedParams:
    def test_signs_follow_model_directions(self):
        model = default_model()
        params = SimParams.randomized(model, seed=11)
        for j in model.joints:
            jp = params.joints[j.name]
            assert math.copysign(1, jp.true_ratio) == j.direction
            assert 0.045 <= abs(jp.true_ratio) <= 0.08
            assert 0.0 <= jp.slack_deadband <= 0.05
            assert abs(jp.drift_rate) <= 0.1


class TestTactileHooks:
    def test_force_produces_touch(self):
        backend = SimBackend(default_model())
        v0, counts0, touch0 = backend.tactile_read("index")
        assert not touch0 and counts0 <= 2
        backend.apply_fingertip_force("index", 1.0)
        v1, counts1, touch1 = backend.tactile_read("index")
        assert touch1 and v1 > v0 and counts1 > counts0

    def test_open_circuit_fault_reads_zero(self):
        from orca.tactile import ChannelFault

        backend = SimBackend(default_model())
        backend.apply_fingertip_force("index", 2.0)
        backend.set_tactile_fault("index", ChannelFault("open_circuit"))
        v, counts, touch = backend.tactile_read("index")
        assert v == 0.0 and counts == 0 and not touch
