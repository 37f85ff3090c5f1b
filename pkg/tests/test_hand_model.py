import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from orca.hand_model import (
    ConfigError,
    FingerChainSpec,
    HandModel,
    JointSpec,
    UnknownJointError,
    chain_fingertip,
    clamp_to_rom,
    default_model,
    forward_kinematics,
    load_hand_config,
    serialize_hand_config,
    validate,
)


def make_single_link_model(link_mm=50.0, rom=(-20.0, 110.0)):
    joint = JointSpec("j_mcp", "index", "MCP", rom[0], rom[1], 1)
    chain = FingerChainSpec("index", (0.0, 0.0, 0.0), (0.0, 0.0, 0.0), (link_mm,), ("j_mcp",))
    return HandModel(version=1, joints=(joint,), chains=(chain,))


class TestDefaultModel:
    def test_has_17_dof(self, model):
        assert model.dof == 17
        assert len(model.joint_names()) == 17

    def test_index_mcp_rom(self, model):
        assert model.rom("index_mcp") == (-20.0, 110.0)

    def test_rom_table(self, model):
        expected = {
            "thumb_ip": (-20.0, 100.0),
            "thumb_mcp": (-20.0, 115.0),
            "thumb_abd": (-45.0, 45.0),
            "thumb_cmc": (-53.0, 48.0),
            "wrist": (-60.0, 60.0),
        }
        for finger in ("index", "middle", "ring", "pinky"):
            expected[f"{finger}_pip"] = (-20.0, 130.0)
            expected[f"{finger}_mcp"] = (-20.0, 110.0)
            expected[f"{finger}_abd"] = (-30.0, 30.0)
        for name, rom in expected.items():
            assert model.rom(name) == rom

    def test_validates_clean(self, model):
        assert validate(model) == []

    def test_thumb_chain_has_four_joints(self, model):
        chains = {c.finger: c for c in model.chains}
        assert len(chains["thumb"].joint_order) == 4
        for finger in ("index", "middle", "ring", "pinky"):
            assert len(chains[finger].joint_order) == 3

    def test_wrist_is_only_belt(self, model):
        for j in model.joints:
            assert (j.transmission == "belt") == (j.name == "wrist")

    def test_five_sensors(self, model):
        assert sorted(s.finger for s in model.sensors) == [
            "index",
            "middle",
            "pinky",
            "ring",
            "thumb",
        ]


class TestLoad:
    def test_empty_model_is_valid(self):
        m = load_hand_config('{"version": 1, "joints": [], "chains": [], "sensors": []}')
        assert m.dof == 0

    def test_parse_error_has_position(self):
        with pytest.raises(ConfigError, match=r"line \d+ column \d+"):
            load_hand_config('{"version": 1, "joints": [}')

    def test_missing_field(self, model):
        doc = json.loads(serialize_hand_config(model))
        del doc["joints"][0]["motor_id"]
        with pytest.raises(ConfigError, match="missing field 'motor_id'"):
            load_hand_config(json.dumps(doc))

    def test_unknown_kind(self, model):
        doc = json.loads(serialize_hand_config(model))
        doc["joints"][0]["kind"] = "XIP"
        with pytest.raises(ConfigError, match="unknown kind 'XIP'"):
            load_hand_config(json.dumps(doc))

    def test_duplicate_motor_id(self, model):
        doc = json.loads(serialize_hand_config(model))
        doc["joints"][1]["motor_id"] = doc["joints"][0]["motor_id"]
        with pytest.raises(ConfigError, match="duplicate motor_id"):
            load_hand_config(json.dumps(doc))

    def test_inverted_rom(self, model):
        doc = json.loads(serialize_hand_config(model))
        doc["joints"][0]["rom_min_deg"] = 50.0
        doc["joints"][0]["rom_max_deg"] = -50.0
        with pytest.raises(ConfigError, match="rom_min_deg must be below"):
            load_hand_config(json.dumps(doc))

    def test_round_trip_is_identical(self, model):
        assert load_hand_config(serialize_hand_config(model)) == model


class TestValidate:
    def test_belt_off_wrist_is_one_violation(self, model):
        joints = []
        for j in model.joints:
            if j.name == "index_mcp":
                joints.append(
                    JointSpec(j.name, j.finger, j.kind, j.rom_min_deg, j.rom_max_deg,
                              j.motor_id, "belt", j.direction, j.axis)
                )
            elif j.name == "wrist":
                joints.append(
                    JointSpec(j.name, j.finger, j.kind, j.rom_min_deg, j.rom_max_deg,
                              j.motor_id, "tendon_pair", j.direction, j.axis)
                )
            else:
                joints.append(j)
        bad = HandModel(model.version, tuple(joints), model.chains, model.sensors)
        problems = validate(bad)
        assert len(problems) == 1
        assert "belt" in problems[0]

    def test_chain_with_unknown_joint(self, model):
        chain = FingerChainSpec("index", (0, 0, 0), (0, 0, 0), (45.0, 25.0, 24.0),
                                ("index_abd", "index_mcp", "ghost"))
        bad = HandModel(model.version, model.joints, (chain,), model.sensors)
        assert any("ghost" in p for p in validate(bad))

    def test_nonpositive_link(self, model):
        chains = list(model.chains)
        c = chains[1]
        chains[1] = FingerChainSpec(c.finger, c.base_position_mm, c.base_orientation_deg,
                                    (45.0, 0.0, 24.0), c.joint_order)
        bad = HandModel(model.version, model.joints, tuple(chains), model.sensors)
        assert any("link lengths" in p for p in validate(bad))


class TestClamp:
    def test_clamps_above(self, model):
        assert clamp_to_rom(model, {"index_mcp": 140.0})["index_mcp"] == 110.0

    def test_clamps_below(self, model):
        assert clamp_to_rom(model, {"index_mcp": -25.0})["index_mcp"] == -20.0

    def test_boundary_unchanged(self, model):
        q = clamp_to_rom(model, {"index_mcp": 110.0, "wrist": -60.0})
        assert q == {"index_mcp": 110.0, "wrist": -60.0}

    def test_unknown_joint(self, model):
        with pytest.raises(UnknownJointError):
            clamp_to_rom(model, {"nope": 0.0})

    @given(st.floats(-720, 720), st.sampled_from(["index_mcp", "thumb_cmc", "wrist"]))
    def test_always_within_rom_and_idempotent(self, value, name):
        m = default_model()
        out = clamp_to_rom(m, {name: value})
        lo, hi = m.rom(name)
        assert lo <= out[name] <= hi
        assert clamp_to_rom(m, out) == out


class TestForwardKinematics:
    def test_straight_index_reaches_94mm(self, model, zero_pose):
        tips = forward_kinematics(model, zero_pose)
        chain = next(c for c in model.chains if c.finger == "index")
        expected = np.array(chain.base_position_mm) + np.array(oracles.INDEX_STRAIGHT_TIP_MM)
        assert np.allclose(tips["index"], expected, atol=1e-9)

    def test_single_link_90deg_folds_to_palm_normal(self):
        m = make_single_link_model()
        tips = forward_kinematics(m, {"j_mcp": 90.0})
        assert np.allclose(tips["index"], oracles.SINGLE_LINK_90_TIP_MM, atol=1e-12)

    def test_matches_matrix_oracle_on_random_poses(self, model):
        rng = np.random.default_rng(7)
        index_chain = next(c for c in model.chains if c.finger == "index")
        thumb_chain = next(c for c in model.chains if c.finger == "thumb")
        for _ in range(50):
            q = {j.name: rng.uniform(j.rom_min_deg, j.rom_max_deg) for j in model.joints}
            tips = forward_kinematics(model, q)
            index_ref = oracles.chain_tip(
                index_chain.base_position_mm,
                index_chain.base_orientation_deg,
                [
                    ("abd", q["index_abd"]),
                    ("flex", q["index_mcp"]),
                    ("link", 45.0),
                    ("flex", q["index_pip"]),
                    ("link", 25.0),
                    ("link", 24.0),
                ],
            )
            thumb_ref = oracles.chain_tip(
                thumb_chain.base_position_mm,
                thumb_chain.base_orientation_deg,
                [
                    ("abd", q["thumb_abd"]),
                    ("flex", q["thumb_cmc"]),
                    ("link", 46.0),
                    ("flex", q["thumb_mcp"]),
                    ("link", 32.0),
                    ("flex", q["thumb_ip"]),
                    ("link", 28.0),
                ],
            )
            assert np.allclose(tips["index"], index_ref, atol=1e-9)
            assert np.allclose(tips["thumb"], thumb_ref, atol=1e-9)

    @settings(max_examples=40)
    @given(
        st.tuples(st.floats(-100, 100), st.floats(-100, 100), st.floats(-100, 100)),
        st.floats(-20, 110),
        st.floats(-20, 130),
    )
    def test_translation_equivariance(self, offset, mcp, pip):
        base = make_single_link_model()
        joint2 = JointSpec("j_pip", "index", "PIP", -20.0, 130.0, 2)
        chain = FingerChainSpec("index", (0.0, 0.0, 0.0), (10.0, 0.0, 5.0),
                                (45.0, 25.0), ("j_mcp", "j_pip"))
        m0 = HandModel(1, base.joints + (joint2,), (chain,))
        moved = FingerChainSpec("index", offset, chain.base_orientation_deg,
                                chain.link_lengths_mm, chain.joint_order)
        m1 = HandModel(1, m0.joints, (moved,))
        q = {"j_mcp": mcp, "j_pip": pip}
        t0 = forward_kinematics(m0, q)["index"]
        t1 = forward_kinematics(m1, q)["index"]
        assert np.allclose(t1 - t0, offset, atol=1e-9)

    @settings(max_examples=40)
    @given(st.floats(-180, 180), st.floats(-180, 180), st.floats(-180, 180))
    def test_zero_pose_distance_is_link_sum(self, a, b, c):
        m = default_model()
        chains = [
            FingerChainSpec(ch.finger, ch.base_position_mm, (a, b, c),
                            ch.link_lengths_mm, ch.joint_order)
            for ch in m.chains
        ]
        rotated = HandModel(m.version, m.joints, tuple(chains), m.sensors)
        q = {j.name: 0.0 for j in m.joints}
        tips = forward_kinematics(rotated, q)
        for ch in rotated.chains:
            reach = np.linalg.norm(tips[ch.finger] - np.array(ch.base_position_mm))
            assert math.isclose(reach, sum(ch.link_lengths_mm), rel_tol=1e-12)

    def test_missing_joint_in_pose(self, model, zero_pose):
        q = dict(zero_pose)
        del q["index_pip"]
        with pytest.raises(UnknownJointError):
            forward_kinematics(model, q)

    def test_chain_referencing_unknown_joint(self, model, zero_pose):
        chain = FingerChainSpec("index", (0, 0, 0), (0, 0, 0), (45.0,), ("ghost",))
        bad = HandModel(model.version, model.joints, (chain,), model.sensors)
        with pytest.raises(UnknownJointError):
            forward_kinematics(bad, zero_pose)

    def test_chain_fingertip_matches_bulk_fk(self, model, zero_pose):
        tips = forward_kinematics(model, zero_pose)
        for chain in model.chains:
            assert np.allclose(chain_fingertip(model, chain, zero_pose), tips[chain.finger])
