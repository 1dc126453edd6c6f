import math

import numpy as np
import pytest

from reactive_control import sim
from reactive_control.controller import load_config
from reactive_control.kinematics import Pose, forward_kinematics
from reactive_control.obstacles import VisualKeypoint


@pytest.fixture(scope="module")
def exp3():
    return sim.run_scenario(sim.exp_scenario("3"))


def fake_rows(n, bad=()):
    rows = []
    for k in range(n):
        rows.append({
            "tick": k, "time": k * 0.01, "status": "infeasible" if k in bad else "optimal",
            "fallback": 0, "frozen": int(k in bad), "clamped": 0,
            "min_obstacle_distance": math.inf, "min_interarm_distance": math.nan,
            "right_target": -1, "right_streamed": 1, "right_reached": 0, "right_speed": 0.0,
            "right_track_pos_err": 0.0, "right_track_ori_err": 0.0,
        })
    return rows


class TestCircle:
    def test_closes_after_one_period(self):
        pts = sim.circle_reference(0.08, 10.0, (-0.25, 0.15, 0.08))
        assert len(pts) == 1001
        assert np.max(np.abs(pts[0] - pts[-1])) < 1e-12
        assert np.allclose(np.linalg.norm(pts - [-0.25, 0.15, 0.08], axis=1), 0.08, atol=1e-15)

    def test_dual_circles_counter_rotate_half_a_turn_apart(self):
        c1, c2 = np.array([-0.25, 0.12, 0.08]), np.array([-0.25, -0.12, 0.08])
        a, b = sim.circle_reference(0.1, 10.0, c1, dual_center=c2)
        ua, ub = (a[0] - c1) / 0.1, (b[0] - c2) / 0.1
        assert np.allclose(ua, -ub, atol=1e-15)
        ta = np.unwrap(np.arctan2(a[:, 2] - c1[2], a[:, 1] - c1[1]))
        tb = np.unwrap(np.arctan2(b[:, 2] - c2[2], b[:, 1] - c2[1]))
        assert abs(abs(ta[0] - tb[0]) - np.pi) < 1e-12
        assert np.all(np.diff(ta) > 0) and np.all(np.diff(tb) < 0)
        # mirror images through the sagittal plane
        assert np.allclose(a[:, 1], -b[:, 1], atol=1e-15)
        assert np.allclose(a[:, [0, 2]], b[:, [0, 2]], atol=1e-15)

    def test_non_positive_radius(self):
        with pytest.raises(sim.ScenarioError):
            sim.circle_reference(0.0, 10.0, (0, 0, 0))
        with pytest.raises(sim.ScenarioError):
            sim.CircleScript((0, 0, 0), -0.1, 10.0, Pose(np.zeros(3), np.zeros(3)))

    def test_streamed_after_approach(self):
        script = sim.exp_scenario("3").targets["right"]
        run = sim._ScriptRun(script, 0.01, 0.1)
        target, tid, streamed = run.target(0)
        assert target.mode.kind == "discrete" and not streamed
        k = int(round(script.approach / 0.01)) + 7
        target, tid, streamed = run.target(k)
        assert streamed and target.mode.kind == "streamed"
        assert np.allclose(target.pose.position, script.point(7 * 0.01), atol=1e-15)

    def test_streamed_targets_bypass_filter(self, exp3):
        streamed = [r for r in exp3.rows if r["right_streamed"]]
        assert len(streamed) > 900
        assert exp3.summary["arms"]["right"]["tracking_pos_median"] < 1e-5
        assert exp3.summary["arms"]["right"]["tracking_ori_median"] < 1e-5


class TestReachabilityGrid:
    def test_27_targets(self):
        s = sim.reachability_grid()
        assert len(s.targets["right"].targets) == 27
        got = {tuple(np.round(p.position, 9)) for p in s.targets["right"].targets}
        want = {(x, y, z) for x in sim.GRID_X for y in sim.GRID_Y for z in sim.GRID_Z}
        assert got == want

    def test_same_seed_same_order(self):
        a = [p.position for p in sim.reachability_grid(seed=5).targets["right"].targets]
        b = [p.position for p in sim.reachability_grid(seed=5).targets["right"].targets]
        c = [p.position for p in sim.reachability_grid(seed=6).targets["right"].targets]
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        assert not all(np.array_equal(x, y) for x, y in zip(a, c))

    def test_orientations_from_the_two_choices(self):
        o = [Pose.from_axis_angle4((0, 0, 0), a).rotation for a in (sim.ORIENTATION_1, sim.ORIENTATION_2)]
        for p in sim.reachability_grid().targets["right"].targets:
            assert min(np.max(np.abs(p.rotation - R)) for R in o) < 1e-12

    def test_prng_recipe(self):
        rng = np.random.Generator(np.random.PCG64(1))
        order = rng.permutation(27)
        first = sim.reachability_grid(seed=1).targets["right"].targets[0].position
        i = order[0]
        assert np.allclose(first, [sim.GRID_X[i // 9], sim.GRID_Y[(i // 3) % 3], sim.GRID_Z[i % 3]], atol=1e-15)


class TestSummarize:
    def test_all_optimal(self):
        assert sim.summarize(fake_rows(50))["solver_success_fraction"] == 1.0

    def test_one_bad_tick_in_hundred(self):
        assert sim.summarize(fake_rows(100, bad={37}))["solver_success_fraction"] == pytest.approx(0.99, abs=1e-15)

    def test_empty_stream(self):
        with pytest.raises(sim.ScenarioError, match="empty"):
            sim.summarize([])

    def test_perfect_tracking_is_zero(self):
        s = sim.summarize(fake_rows(10))
        assert s["arms"]["right"]["tracking_pos_median"] == 0.0

    @pytest.mark.parametrize(
        "speeds, expected",
        [([0, 1, 2, 3, 2, 1, 0], True), ([0, 2, 1, 2, 0], False), ([0, 0, 0], True), ([3, 2, 1], True), ([0, 1, 1 - 1e-5, 1, 0], True)],
    )
    def test_unimodal(self, speeds, expected):
        assert sim.is_unimodal(speeds) is expected


class TestRunScenario:
    def test_hold_start_pose_without_obstacles(self, robot):
        home = load_config(robot).home
        start = forward_kinematics(robot, home, "right")
        s = sim.Scenario("hold", 1.0, {"right": sim.SequenceScript([start], hold=0.2)}, mode="single")
        r = sim.run_scenario(s)
        assert r.summary["reach_rate"] == 1.0
        assert r.summary["min_obstacle_distance"] == math.inf
        assert r.summary["solver_success_fraction"] == 1.0
        assert "min_obstacle_distance: .inf" in sim.summary_text(r.summary)

    def test_unresolvable_reference(self, tmp_path):
        s = sim.Scenario("x", 1.0, {}, model="missing.yaml", base_dir=tmp_path)
        with pytest.raises(sim.ScenarioError, match="not found"):
            sim.run_scenario(s)

    def test_targets_for_uncontrolled_arm(self):
        s = sim.exp_scenario("4")
        s.mode = "single"
        with pytest.raises(sim.ScenarioError, match="not controlled"):
            sim.run_scenario(s, ticks=1)

    def test_pose_matches_fk_of_recorded_q(self, robot, exp3):
        names = [f"q_{j.name}" for j in robot.joints]
        for row in exp3.rows[::25]:
            q = np.array([row[n] for n in names])
            for arm in robot.arms:
                p = forward_kinematics(robot, q, arm).position
                assert np.max(np.abs(p - [row[f"{arm}_x"], row[f"{arm}_y"], row[f"{arm}_z"]])) < 1e-12

    def test_csv_round_trip_preserves_floats(self, exp3):
        text = exp3.csv_text()
        assert text.splitlines()[0].split(",") == exp3.columns
        rows = sim.read_metrics(text)
        assert len(rows) == len(exp3.rows)
        for a, b in zip(rows[::50], exp3.rows[::50]):
            for c in ("right_x", "mu", "q_torso_yaw", "right_track_pos_err"):
                assert (a[c] == b[c]) or (math.isnan(a[c]) and math.isnan(b[c]))

    def test_replay_is_bit_identical(self):
        s = sim.exp_scenario("5-1")
        a = sim.run_scenario(s, ticks=150).csv_text()
        b = sim.run_scenario(sim.exp_scenario("5-1"), ticks=150).csv_text()
        assert a == b

    def test_obstacle_positions_follow_script_exactly(self):
        s = sim.exp_scenario("5-2")
        r = sim.run_scenario(s, ticks=120)
        o = s.obstacles[0]
        for row in sim.read_metrics(r.csv_text()):
            k = row["tick"]
            want = o.start + k * 0.01 * o.velocity
            assert [row["obstacle0_x"], row["obstacle0_y"], row["obstacle0_z"]] == want.tolist()

    def test_timed_events_reach_the_controller(self, robot):
        home = load_config(robot).home
        start = forward_kinematics(robot, home, "right")
        kp = start.position + [0.0, 0.0, 0.05]
        s = sim.Scenario("events", 0.3, {"right": sim.SequenceScript([start])}, mode="single",
                         events=[(0.1, VisualKeypoint(kp))], stop_when_done=False)
        r = sim.run_scenario(s)
        rows = r.rows
        assert rows[10]["n_collision_rows"] > 0
        assert rows[5]["n_collision_rows"] == 0
        assert rows[10]["min_obstacle_distance"] < 0.06

    def test_dump_qp(self):
        r = sim.run_scenario(sim.exp_scenario("2"), ticks=3, dump_qp=True)
        assert len(r.qp_dumps) == 3
        assert r.qp_dumps[0].startswith("# tick 0 status optimal")


def poses(script):
    if isinstance(script, sim.SequenceScript):
        return script.targets
    if isinstance(script, sim.CircleScript):
        return [script.orientation]
    return [e[1] for e in script.entries]


class TestScenarioFiles:
    @pytest.mark.parametrize("name", sim.EXPERIMENTS)
    def test_doc_round_trip(self, name, tmp_path):
        s = sim.exp_scenario(name)
        text = sim.save_scenario(s, tmp_path / "s.yaml")
        back = sim.load_scenario(tmp_path / "s.yaml")
        assert sim.save_scenario(back) == text
        for arm in s.targets:
            for pa, pb in zip(poses(s.targets[arm]), poses(back.targets[arm])):
                assert np.array_equal(pa.position, pb.position)
                assert np.array_equal(pa.orientation, pb.orientation)

    def test_axis_angle_input(self):
        p = sim.pose_from_doc({"position": [0, 0, 0], "axis_angle": [0, 0, 2, np.pi / 2]})
        assert np.allclose(p.orientation, [0, 0, np.pi / 2], atol=1e-15)
        with pytest.raises(sim.ScenarioError):
            sim.pose_from_doc({"position": [0, 0, 0], "rotation_vector": [4.0, 0, 0]})

    def test_bundled_constants(self):
        p1, p2 = sim.exp_scenario("2").targets["right"].targets[:2]
        assert p1.position.tolist() == [-0.23, 0.26, 0.02]
        assert p2.position.tolist() == [-0.26, 0.03, 0.03]
        assert sim.exp_scenario("5-1").obstacles[0].velocity.tolist() == [0.0, -0.05, 0.0]
        assert sim.exp_scenario("3").targets["right"].radius == 0.08
        assert sim.exp_scenario("4").targets["left"].radius == 0.1
        assert sim.exp_scenario("1").targets["right"].timeout == 10.0

    def test_events_round_trip(self):
        doc = {"time": 0.5, "type": "tactile", "taxel": 3, "link": 8, "position": [0.0, 0.01, 0.0],
               "normal": [0.0, 0.0, 1.0], "pressure": 0.4}
        t, e = sim.event_from_doc(doc)
        assert sim.event_to_doc(t, e) == doc

    @pytest.mark.parametrize(
        "doc, match",
        [
            ({"format_version": 2}, "format_version"),
            ({"format_version": 1, "name": "x"}, "missing key"),
            ({"format_version": 1, "name": "x", "duration": 0.0}, "duration"),
        ],
    )
    def test_invalid_documents(self, doc, match):
        with pytest.raises(sim.ScenarioError, match=match):
            sim.scenario_from_doc(doc)

    def test_event_order(self):
        with pytest.raises(sim.ScenarioError, match="non-decreasing"):
            sim.Scenario("x", 1.0, {}, events=[(0.2, VisualKeypoint(np.zeros(3))), (0.1, VisualKeypoint(np.zeros(3)))])

    def test_static_plane(self):
        pts = sim.static_from_doc([{"kind": "plane", "center": [0, 0, -0.1], "size": [0.2, 0.1], "spacing": 0.05}])
        assert pts.shape == (15, 3)
        assert np.all(pts[:, 2] == -0.1)
