import dataclasses
import math

import numpy as np
import pytest

from orca.calibration import (
    CalibrationProfile,
    JointCalibration,
    ProfileError,
    calibrate_all,
)
from orca.control import (
    Controller,
    ControllerConfig,
    ControlError,
    GraspCycleSpec,
    NotCalibratedError,
    SineSpec,
    estimate_slack,
    generate_trajectory,
)
from orca.hand_model import UnknownJointError, default_model
from orca.motor_bus import JointSimParams, SimBackend, SimParams


def ideal_params(model):
    base = SimParams.for_model(model)
    joints = {
        name: JointSimParams(
            true_ratio=jp.true_ratio,
            motor_origin=jp.motor_origin,
            slack_deadband=0.0,
            drift_rate=0.0,
        )
        for name, jp in base.joints.items()
    }
    return SimParams(joints=joints, measurement_noise_deg=0.0)


def quiet_default_params(model):
    """Stock slack, no drift, no noise."""
    base = SimParams.for_model(model)
    joints = {
        name: dataclasses.replace(jp, drift_rate=0.0) for name, jp in base.joints.items()
    }
    return SimParams(joints=joints, measurement_noise_deg=0.0)


@pytest.fixture(scope="module")
def ideal_profile():
    model = default_model()
    backend = SimBackend(model, ideal_params(model))
    return calibrate_all(backend, model)


@pytest.fixture(scope="module")
def stock_profile():
    model = default_model()
    backend = SimBackend(model, SimParams.for_model(model))
    return calibrate_all(backend, model)


@pytest.fixture()
def rig(ideal_profile):
    model = default_model()
    backend = SimBackend(model, ideal_params(model))
    ctl = Controller(backend, model)
    ctl.install_profile(ideal_profile)
    return backend, ctl


class TestGuards:
    def test_motion_requires_profile(self):
        model = default_model()
        ctl = Controller(SimBackend(model, ideal_params(model)), model)
        with pytest.raises(NotCalibratedError):
            ctl.set_joint_targets({"index_mcp": 10.0})
        with pytest.raises(NotCalibratedError):
            ctl.jog("index_mcp", 1.0)
        with pytest.raises(NotCalibratedError):
            ctl.park()

    def test_tick_without_profile_just_steps_time(self):
        model = default_model()
        ctl = Controller(SimBackend(model, ideal_params(model)), model)
        t0 = ctl.backend.now()
        ctl.tick()
        assert ctl.backend.now() == pytest.approx(t0 + 0.01)

    def test_version_mismatch_rejected(self, ideal_profile):
        model = default_model()
        ctl = Controller(SimBackend(model, ideal_params(model)), model)
        stale = dataclasses.replace(ideal_profile, hand_model_version=999)
        with pytest.raises(ProfileError, match="version"):
            ctl.install_profile(stale)

    def test_incomplete_profile_rejected(self, ideal_profile):
        model = default_model()
        ctl = Controller(SimBackend(model, ideal_params(model)), model)
        joints = {k: v for k, v in ideal_profile.joints.items() if k != "wrist"}
        partial = dataclasses.replace(ideal_profile, joints=joints)
        with pytest.raises(ProfileError, match="wrist"):
            ctl.install_profile(partial)

    def test_unknown_joint_and_bad_value(self, rig):
        _, ctl = rig
        with pytest.raises(UnknownJointError):
            ctl.set_joint_targets({"index_dip": 5.0})
        with pytest.raises(ValueError):
            ctl.set_joint_targets({"index_mcp": float("nan")})


class TestMotion:
    def test_targets_clamp_to_rom(self, rig):
        _, ctl = rig
        applied = ctl.set_joint_targets({"index_mcp": 140.0, "wrist": -75.0})
        assert applied == {"index_mcp": 110.0, "wrist": -60.0}

    def test_install_is_motionless(self, rig):
        backend, ctl = rig
        backend.write_log = []
        ctl.run_for(0.5)
        assert backend.write_log == []

    def test_setpoint_slews_at_limit(self, rig):
        _, ctl = rig
        ctl.set_joint_targets({"index_mcp": 36.0})
        for _ in range(5):
            ctl.tick()
        snap = ctl.telemetry_snapshot()
        # 360 deg/s at 100 Hz is 3.6 deg per tick.
        assert snap["joints"]["index_mcp"]["setpoint_deg"] == pytest.approx(18.0)

    def test_reaches_target(self, rig):
        backend, ctl = rig
        ctl.set_joint_targets({"index_mcp": 60.0, "thumb_ip": -10.0})
        ctl.run_for(2.0)
        assert backend.read_joint_truth("index_mcp") == pytest.approx(60.0, abs=0.2)
        assert backend.read_joint_truth("thumb_ip") == pytest.approx(-10.0, abs=0.2)

    def test_write_on_change_only(self, rig):
        backend, ctl = rig
        ctl.set_joint_targets({"index_mcp": 20.0})
        ctl.run_for(2.0)
        backend.write_log = []
        ctl.run_for(1.0)
        assert backend.write_log == []
        ctl.jog("index_mcp", 5.0)
        ctl.run_for(0.2)
        assert backend.write_log
        assert {motor for _, motor, _ in backend.write_log} == {6}

    def test_jog_returns_clamped_absolute(self, rig):
        _, ctl = rig
        assert ctl.jog("index_pip", 25.0) == pytest.approx(25.0)
        assert ctl.jog("index_pip", 200.0) == pytest.approx(130.0)
        assert ctl.targets()["index_pip"] == pytest.approx(130.0)

    def test_park_returns_to_zero(self, rig):
        backend, ctl = rig
        ctl.set_joint_targets({"index_mcp": 70.0, "wrist": 30.0, "thumb_cmc": -40.0})
        ctl.run_for(1.5)
        ctl.park()
        for name in ("index_mcp", "wrist", "thumb_cmc"):
            assert backend.read_joint_truth(name) == pytest.approx(0.0, abs=0.5)


class TestTelemetry:
    def test_snapshot_shape(self, rig):
        _, ctl = rig
        snap = ctl.telemetry_snapshot()
        assert snap["calibrated"] is True
        assert set(snap["joints"]) == set(default_model().joint_names())
        entry = snap["joints"]["index_mcp"]
        for key in (
            "motor_id", "position_rad", "current_ma", "temperature_c",
            "angle_deg", "target_deg", "setpoint_deg", "out_of_range",
        ):
            assert key in entry
        assert entry["out_of_range"] is False
        assert set(snap["tactile"]) == {"thumb", "index", "middle", "ring", "pinky"}

    def test_angle_estimate_tracks_truth(self, rig):
        backend, ctl = rig
        ctl.set_joint_targets({"middle_pip": 40.0})
        ctl.run_for(1.5)
        snap = ctl.telemetry_snapshot()
        assert snap["joints"]["middle_pip"]["angle_deg"] == pytest.approx(
            backend.read_joint_truth("middle_pip"), abs=1e-6
        )

    def test_uncalibrated_snapshot_has_motor_data_only(self):
        model = default_model()
        ctl = Controller(SimBackend(model, ideal_params(model)), model)
        snap = ctl.telemetry_snapshot()
        assert snap["calibrated"] is False
        entry = snap["joints"]["index_mcp"]
        assert "position_rad" in entry and "angle_deg" not in entry


class TestTrajectoryGeneration:
    def test_sine_sample_grid(self, model):
        t, series = generate_trajectory(
            model, SineSpec("index_mcp", 0.2, 40.0, 10.0), 100.0
        )
        assert len(t) == 1000
        assert t[0] == 0.0 and t[1] == pytest.approx(0.01)
        expected = 45.0 + 40.0 * np.sin(2 * math.pi * 0.2 * t)
        np.testing.assert_allclose(series["index_mcp"], expected, atol=1e-12)

    def test_sine_explicit_offset(self, model):
        _, series = generate_trajectory(
            model, SineSpec("wrist", 0.5, 10.0, 2.0, offset_deg=20.0), 100.0
        )
        assert series["wrist"][0] == pytest.approx(20.0)

    def test_sine_rom_validation(self, model):
        with pytest.raises(ValueError, match="range of motion"):
            generate_trajectory(model, SineSpec("index_mcp", 0.2, 80.0, 5.0), 100.0)
        with pytest.raises(ValueError):
            generate_trajectory(
                model, SineSpec("index_mcp", 0.2, 10.0, 5.0, offset_deg=105.0), 100.0
            )

    def test_sine_parameter_validation(self, model):
        with pytest.raises(UnknownJointError):
            generate_trajectory(model, SineSpec("index_dip", 0.2, 10.0, 5.0), 100.0)
        with pytest.raises(ValueError):
            generate_trajectory(model, SineSpec("index_mcp", 0.0, 10.0, 5.0), 100.0)
        with pytest.raises(ValueError):
            generate_trajectory(model, SineSpec("index_mcp", 0.2, 10.0, 0.0), 100.0)

    def test_grasp_cycle_roles(self, model):
        t, series = generate_trajectory(model, GraspCycleSpec(32.0), 100.0)
        assert set(series) == set(model.joint_names())
        for joint in model.joints:
            values = series[joint.name]
            if joint.axis == "abduction":
                assert np.all(values == 0.0)
            elif joint.kind == "WRIST":
                assert np.max(np.abs(values)) <= 40.0 + 1e-9
            else:
                assert values.min() >= -1e-9
                assert values.max() == pytest.approx(0.8 * joint.rom_max_deg)

    def test_grasp_cycle_periodicity(self, model):
        _, series = generate_trajectory(model, GraspCycleSpec(8.0), 100.0)
        flex = series["index_mcp"]
        np.testing.assert_allclose(flex[400:800], flex[0:400], atol=1e-9)

    def test_wrist_toggles_sign_each_period(self, model):
        t, series = generate_trajectory(model, GraspCycleSpec(48.0), 100.0)
        wrist = series["wrist"]
        assert wrist[800] == pytest.approx(40.0)  # t = 8 s
        assert wrist[2400] == pytest.approx(-40.0)  # t = 24 s
        assert wrist[4000] == pytest.approx(40.0)  # t = 40 s

    def test_slew_bounded_everywhere(self, model):
        _, series = generate_trajectory(model, GraspCycleSpec(20.0), 100.0)
        for values in series.values():
            steps = np.abs(np.diff(values))
            assert steps.max() <= 150.0 / 100.0 + 1e-9


class TestRunTrajectory:
    def test_plays_sine_and_reports_progress(self, rig):
        backend, ctl = rig
        fractions = []
        spec = SineSpec("index_mcp", 0.5, 20.0, 2.0)
        ctl.run_trajectory(spec, on_progress=fractions.append)
        assert fractions == sorted(fractions)
        assert fractions[-1] == 1.0
        # Final sample is t=1.99: target 45 + 20 sin(2*pi*0.5*1.99).
        final = 45.0 + 20.0 * math.sin(2 * math.pi * 0.5 * 1.99)
        ctl.run_for(0.5)
        assert backend.read_joint_truth("index_mcp") == pytest.approx(final, abs=0.5)

    def test_requires_profile(self):
        model = default_model()
        ctl = Controller(SimBackend(model, ideal_params(model)), model)
        with pytest.raises(NotCalibratedError):
            ctl.run_trajectory(SineSpec("index_mcp", 0.5, 10.0, 1.0))

    def test_grasp_cycle_stays_under_current_clamp(self, rig):
        backend, ctl = rig
        peak = 0.0
        ctl.set_joint_targets({n: 0.0 for n in default_model().joint_names()})
        ctl.run_for(1.0)
        _, series = generate_trajectory(ctl.model, GraspCycleSpec(4.0), 100.0)
        names = list(series)
        for k in range(len(series[names[0]])):
            ctl.set_joint_targets({n: series[n][k] for n in names})
            ctl.tick()
            state = backend.state()
            peak = max(peak, float(np.max(state.current_ma)))
        assert peak <= 600.0
        assert peak < 550.0  # comfortably below the clamp while slewing


class TestSlackProbe:
    def test_stock_slack_recovered(self, stock_profile):
        model = default_model()
        backend = SimBackend(model, quiet_default_params(model))
        ctl = Controller(backend, model)
        ctl.install_profile(stock_profile)
        est = estimate_slack(backend, stock_profile.joints["index_mcp"])
        assert est.slack_rad == pytest.approx(0.02, abs=0.005)

    def test_zero_slack_reads_near_zero(self, rig, ideal_profile):
        backend, _ = rig
        est = estimate_slack(backend, ideal_profile.joints["index_mcp"])
        assert est.slack_rad <= 0.005

    def test_probe_with_noise(self, stock_profile):
        model = default_model()
        base = SimParams.for_model(model)
        joints = {n: dataclasses.replace(jp, drift_rate=0.0) for n, jp in base.joints.items()}
        backend = SimBackend(model, SimParams(joints=joints, seed=8))
        est = estimate_slack(backend, stock_profile.joints["index_mcp"])
        assert est.slack_rad == pytest.approx(0.02, abs=0.006)

    def test_pose_restored(self, stock_profile):
        model = default_model()
        backend = SimBackend(model, quiet_default_params(model))
        ctl = Controller(backend, model)
        ctl.install_profile(stock_profile)
        ctl.set_joint_targets({"index_mcp": 30.0})
        ctl.run_for(1.5)
        before = backend.read_joint_truth("index_mcp")
        report = ctl.tension_check(["index_mcp", "index_pip"])
        assert set(report) == {"index_mcp", "index_pip"}
        assert backend.read_joint_truth("index_mcp") == pytest.approx(before, abs=0.5)
        assert ctl.targets()["index_mcp"] == pytest.approx(30.0)

    def test_detached_tendon_raises(self, rig, ideal_profile):
        backend, _ = rig
        backend.set_tendon_connected("index_mcp", False)
        with pytest.raises(ControlError, match="index_mcp"):
            estimate_slack(backend, ideal_profile.joints["index_mcp"])

    def test_no_headroom_raises(self, rig):
        backend, _ = rig
        narrow = JointCalibration(
            joint="index_mcp", motor_id=6, theta_min_deg=-20.0,
            theta_max_deg=110.0, m_min=0.9, m_max=1.1,
            ratio=(1.1 - 0.9) / 130.0,
        )
        with pytest.raises(ControlError, match="headroom"):
            estimate_slack(backend, narrow)

    def test_unknown_joint_in_tension_check(self, rig):
        _, ctl = rig
        with pytest.raises(UnknownJointError):
            ctl.tension_check(["index_dip"])
