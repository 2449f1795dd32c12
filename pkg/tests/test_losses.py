import numpy as np
import pytest

from trajcouple.errors import MissingTargets, OutOfDomain
from trajcouple.fixtures import random_coupling_fixture
from trajcouple.grad import GRIDS, POSES, TRACKS, ParamLayout, Tape
from trajcouple.losses import (
    LossBreakdown,
    LossConfig,
    TermStats,
    huber,
    huber_gradient,
    loss_cam,
    loss_cons,
    loss_selfsup,
    selfsup_static_mask,
    total_loss,
)
from trajcouple.pose import Pose, PoseTangent, exp_map, so3_left_jacobian
from trajcouple.synthetic import SceneConfig, build_problem, generate, initial_store
from trajcouple.tracks import TrackSet


def single_sample_setup(delta=0.5):
    """One track, one frame, 2x2 grid, query at the cell center."""
    grid = np.array(
        [[[0.0, 0.0, 1.0], [1.0, 0.0, 1.2]], [[0.0, 1.0, 0.8], [1.0, 1.0, 1.0]]]
    )[None]
    p_tilde = grid[0].reshape(4, 3).mean(axis=0)
    p_hat = p_tilde + np.array([0.03, -0.02, 0.05])
    tracks = TrackSet(
        p_hat.reshape(1, 1, 3), np.ones((1, 1)), np.full((1, 1, 2), 0.5)
    )
    return tracks, grid, p_tilde, p_hat


class TestHuber:
    def test_zero_residual(self):
        assert huber(np.zeros(3), 0.1) == 0.0
        assert np.array_equal(huber_gradient(np.zeros(3), 0.1), np.zeros(3))

    def test_branch_continuity_at_delta(self):
        delta = 0.3
        r = np.array([delta, 0.0, 0.0])
        inside = 0.5 * delta**2
        outside = delta * (delta - 0.5 * delta)
        assert huber(r, delta) == pytest.approx(inside, abs=1e-15)
        assert inside == pytest.approx(outside, abs=1e-15)
        # gradient continuous too: r vs delta*r/||r|| coincide at the kink
        assert np.allclose(huber_gradient(r, delta), r, atol=1e-15)

    def test_quadratic_and_linear_values(self):
        delta = 0.2
        small = np.array([0.03, 0.04, 0.0])  # norm 0.05
        assert huber(small, delta) == pytest.approx(0.5 * 0.05**2, abs=1e-15)
        big = np.array([3.0, 4.0, 0.0])  # norm 5
        assert huber(big, delta) == pytest.approx(delta * (5 - 0.5 * delta), abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        delta = 0.3
        h = 1e-7
        for _ in range(30):
            r = rng.standard_normal(3)
            if abs(np.linalg.norm(r) - delta) < 1e-3:
                continue
            g = huber_gradient(r, delta)
            for k in range(3):
                dr = np.zeros(3)
                dr[k] = h
                num = (huber(r + dr, delta) - huber(r - dr, delta)) / (2 * h)
                assert num == pytest.approx(g[k], rel=1e-6, abs=1e-9)

    def test_delta_validation(self):
        with pytest.raises(ValueError):
            huber(np.ones(3), 0.0)


class TestLossCons:
    def test_consistent_state_zero(self):
        tracks, grid, p_tilde, _ = single_sample_setup()
        tracks.points[0, 0] = p_tilde
        tape = Tape({GRIDS: 12, TRACKS: 3, POSES: 6})
        stats = loss_cons(tracks, grid, 0.5, tape, layout=ParamLayout(1, 1, 2, 2))
        assert stats.value == 0.0
        assert tape.max_abs() == 0.0

    def test_fully_occluded_zero(self):
        tracks, grid, _, _ = single_sample_setup()
        tracks.visibility[:] = 0.0
        stats = loss_cons(tracks, grid, 0.5)
        assert stats.value == 0.0
        assert stats.n_samples == 0
        assert stats.n_skipped == 1

    def test_hand_derivation_single_sample(self):
        tracks, grid, p_tilde, p_hat = single_sample_setup()
        layout = ParamLayout(1, 1, 2, 2)
        tape = Tape(layout.sizes())
        stats = loss_cons(tracks, grid, 0.5, tape, layout=layout)

        r = p_hat - p_tilde
        assert stats.value == pytest.approx(2 * 0.5 * float(r @ r), abs=1e-15)
        # track side: d/dp_hat of 0.5||p_hat - sg||^2 = r
        assert np.allclose(tape.grad(TRACKS), r, atol=1e-15)
        # pointmap side: each corner gets -w_corner * r = -0.25 r
        expected = np.tile(-0.25 * r, 4)
        assert np.allclose(tape.grad(GRIDS), expected, atol=1e-15)
        assert tape.max_abs() > 0
        assert np.array_equal(tape.grad(POSES), np.zeros(6))

    def test_out_of_domain_propagates(self):
        tracks, grid, _, _ = single_sample_setup()
        tracks.query_pixels[0, 0] = (5.0, 0.5)
        with pytest.raises(OutOfDomain):
            loss_cons(tracks, grid, 0.5)

    def test_low_weight_samples_skipped(self):
        tracks, grid, _, _ = single_sample_setup()
        tracks.visibility[0, 0] = 1e-4  # below the 1e-3 cutoff
        stats = loss_cons(tracks, grid, 0.5)
        assert stats.value == 0.0 and stats.n_skipped == 1


class TestLossCam:
    def make_cam_setup(self):
        tracks, grid, p_tilde, p_hat = single_sample_setup()
        targets = (p_hat + np.array([-0.04, 0.01, 0.02])).reshape(1, 1, 3)
        mask = np.ones((1, 1), dtype=bool)
        return tracks, grid, [Pose.identity()], mask, targets

    def test_perfect_state_zero(self):
        tracks, grid, poses, mask, _ = self.make_cam_setup()
        targets = tracks.points.copy()
        tape = Tape(ParamLayout(1, 1, 2, 2).sizes())
        stats = loss_cam(tracks, grid, poses, mask, targets, 0.5, tape,
                         layout=ParamLayout(1, 1, 2, 2))
        assert stats.value == 0.0
        assert tape.max_abs() == 0.0

    def test_hand_derivation_identity_pose(self):
        tracks, grid, poses, mask, targets = self.make_cam_setup()
        layout = ParamLayout(1, 1, 2, 2)
        tape = Tape(layout.sizes())
        stats = loss_cam(tracks, grid, poses, mask, targets, 0.5, tape, layout=layout)

        p_hat = tracks.points[0, 0]
        r = p_hat - targets[0, 0]
        # static sample: pose half + track half, both quadratic
        assert stats.value == pytest.approx(2 * 0.5 * float(r @ r), abs=1e-15)
        # track side: R^T r with R = I
        assert np.allclose(tape.grad(TRACKS), r, atol=1e-15)
        # pose side at identity: d/d_upsilon = r, d/d_omega = p_hat x r
        assert np.allclose(tape.grad(POSES)[3:], r, atol=1e-15)
        assert np.allclose(tape.grad(POSES)[:3], np.cross(p_hat, r), atol=1e-15)
        assert np.array_equal(tape.grad(GRIDS), np.zeros(12))

    def test_all_dynamic_gates_pose_gradient_exactly(self):
        tracks, grid, poses, _, targets = self.make_cam_setup()
        mask = np.zeros((1, 1), dtype=bool)
        layout = ParamLayout(1, 1, 2, 2)
        tape = Tape(layout.sizes())
        stats = loss_cam(tracks, grid, poses, mask, targets, 0.5, tape, layout=layout)
        assert np.array_equal(tape.grad(POSES), np.zeros(6))  # bitwise zero
        assert tape.grad(TRACKS).any()  # track side still live
        # only the (ungated) track half contributes value
        r = tracks.points[0, 0] - targets[0, 0]
        assert stats.value == pytest.approx(0.5 * float(r @ r), abs=1e-15)

    def test_missing_targets(self):
        tracks, grid, poses, mask, _ = self.make_cam_setup()
        with pytest.raises(MissingTargets):
            loss_cam(tracks, grid, poses, mask, None, 0.5)
        # pose-only half against anchor samples needs no targets
        stats = loss_cam(
            tracks, grid, poses, mask, None, 0.5,
            parts=("pose",), pose_target="anchor_sample",
        )
        assert stats.value >= 0.0

    def test_anchor_sample_target_matches_manual(self):
        tracks, grid, poses, mask, targets = self.make_cam_setup()
        layout = ParamLayout(1, 1, 2, 2)
        stats = loss_cam(
            tracks, grid, poses, mask, targets, 0.5,
            layout=layout, pose_target="anchor_sample", parts=("pose",),
        )
        p_tilde = grid[0].reshape(4, 3).mean(axis=0)
        r = tracks.points[0, 0] - p_tilde
        assert stats.value == pytest.approx(0.5 * float(r @ r), abs=1e-15)


class TestRoutingZeroTests:
    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("selfsup", [False, True])
    def test_off_route_blocks_bitwise_zero(self, seed, selfsup):
        problem, store = random_coupling_fixture(seed, selfsup=selfsup)
        off_route = {
            "cons_pointmap": (TRACKS, POSES),
            "cons_track": (GRIDS, POSES),
            "cam_pose": (TRACKS, GRIDS),
            "cam_track": (GRIDS, POSES),
            "anchor": (TRACKS,),
        }
        for term in problem.active_terms():
            tape = Tape(store)
            problem.evaluate_term(store, term, tape)
            for block in off_route[term]:
                assert not tape.grad(block).any(), (term, block)
            live = sum(tape.grad(b).any() for b in (GRIDS, TRACKS, POSES))
            assert live >= 1


class TestSelfSupervised:
    def make_scene(self, seed=0, sigma_pose=0.04):
        scene = generate(
            SceneConfig(seed=seed, n_static=24, n_dynamic=0, n_frames=5,
                        height=10, width=10, sigma_pose=sigma_pose)
        )
        problem = build_problem(scene, mode="selfsup")
        store = initial_store(scene)
        problem.refresh_static_mask(store)
        return scene, problem, store

    def test_self_consistent_state_near_zero(self):
        scene, problem, store = self.make_scene(sigma_pose=0.0)
        bd = problem.evaluate(store)
        assert bd.cons_value == 0.0  # shared sampling path: bitwise
        assert bd.selfsup_value < 1e-24  # anchor chain: fp roundoff only

    def test_no_targets_consumed(self):
        scene, problem, store = self.make_scene()
        assert problem.targets is None
        # wipe every 3D ground-truth field; evaluation must not notice
        scene.targets = None
        scene.world_tracks = None
        tape = Tape(store)
        bd = problem.evaluate(store, tape)
        assert bd.total > 0.0
        assert tape.grad(POSES).any()

    def test_supervised_term_unreachable(self):
        scene, problem, store = self.make_scene()
        assert not problem.config.use_cam
        assert "cam_pose" not in problem.active_terms()

    def test_pose_gradient_points_toward_truth(self):
        from trajcouple.pose import compose, inverse, log_map

        scene, problem, store = self.make_scene(sigma_pose=0.05)
        tape = Tape(store)
        problem.evaluate(store, tape)
        g = tape.grad(POSES).reshape(-1, 6)
        assert np.abs(g).max() > 0
        total = 0.0
        for t, (est, gt) in enumerate(zip(problem.base_rel_poses, scene.rel_poses)):
            correction = log_map(compose(gt, inverse(est))).as_array()
            total += float(-g[t] @ correction)
        assert total > 0.0

    def test_adaptive_mask_admits_majority_under_pose_noise(self):
        scene, problem, store = self.make_scene(sigma_pose=0.05)
        assert problem.static_mask.mean() > 0.5

    def test_public_entry_point_matches_problem_evaluation(self):
        scene, problem, store = self.make_scene(sigma_pose=0.03)
        tracks_view, grids, tangents = problem.views(store)
        ts = TrackSet(tracks_view, problem.visibility, problem.query_pixels)
        bd = loss_selfsup(
            ts, grids, problem.base_rel_poses, problem.static_mask,
            delta=problem.config.delta, pose_tangents=tangents,
            anchor=problem.anchor,
        )
        ref = problem.evaluate(store)
        assert bd.total == ref.total
        assert bd.selfsup_value == ref.selfsup_value

    def test_mask_rejects_moving_tracks_near_convergence(self):
        scene = generate(
            SceneConfig(seed=3, n_static=20, n_dynamic=20, n_frames=6,
                        height=16, width=16, motion_speed=0.4)
        )
        problem = build_problem(scene, mode="selfsup")
        store = initial_store(scene)
        problem.refresh_static_mask(store)  # ground-truth state
        mask = problem.static_mask
        dyn = ~scene.static_mask
        # dynamic samples are overwhelmingly rejected, static ones admitted
        assert mask[~dyn].mean() > 0.9
        assert mask[dyn].mean() < 0.1


class TestTotalLoss:
    def make_state(self, seed=0):
        problem, store = random_coupling_fixture(seed)
        tracks, grids, tangents = problem.views(store)
        ts = TrackSet(tracks, problem.visibility, problem.query_pixels)
        return problem, ts, grids, tangents

    def test_all_zero_components(self):
        tracks, grid, p_tilde, _ = single_sample_setup()
        tracks.points[0, 0] = p_tilde
        cfg = LossConfig(use_cam=False)
        bd = total_loss(cfg, tracks, grid, [Pose.identity()])
        assert bd.total == 0.0

    def test_toggles_select_components(self):
        problem, ts, grids, tangents = self.make_state()
        common = dict(
            static_mask=problem.static_mask, targets=problem.targets,
            pose_tangents=tangents, anchor=problem.anchor,
        )
        cons_only = total_loss(
            LossConfig(use_cam=False, delta=problem.config.delta),
            ts, grids, problem.base_rel_poses, **common,
        )
        cam_only = total_loss(
            LossConfig(use_cons=False, delta=problem.config.delta),
            ts, grids, problem.base_rel_poses, **common,
        )
        both = total_loss(
            LossConfig(delta=problem.config.delta),
            ts, grids, problem.base_rel_poses, **common,
        )
        assert cons_only.total == cons_only.cons_value
        assert cam_only.total == cam_only.cam_value
        assert both.total == pytest.approx(
            cons_only.cons_value + cam_only.cam_value, rel=1e-12
        )

    def test_weighted_sum_matches_manual(self):
        problem, ts, grids, tangents = self.make_state(1)
        cfg = LossConfig(
            weight_cons=2.5, weight_cam=0.7, delta=problem.config.delta
        )
        bd = total_loss(
            cfg, ts, grids, problem.base_rel_poses,
            static_mask=problem.static_mask, targets=problem.targets,
            pose_tangents=tangents, anchor=problem.anchor,
        )
        manual = 2.5 * bd.cons_value + 0.7 * bd.cam_value
        assert bd.total == pytest.approx(manual, rel=1e-12)
        assert bd.cons_value >= 0 and bd.cam_value >= 0

    def test_quadratic_scale_behavior(self):
        # scaling geometry and delta by s multiplies small-residual losses by s^2
        s = 2.0
        problem, store = random_coupling_fixture(7)
        tracks, grids, tangents = problem.views(store)
        # shrink residuals into the quadratic zone
        x, y = problem.query_pixels[..., 0], problem.query_pixels[..., 1]
        from trajcouple.pointmap import bilinear_gather

        n, t = problem.visibility.shape
        ii = np.repeat(np.arange(n), t)
        tt = np.tile(np.arange(t), n)
        vals, _, _, _ = bilinear_gather(grids, tt, x[ii, tt], y[ii, tt])
        tracks[:] = vals.reshape(n, t, 3) + 1e-3 * np.random.default_rng(0).standard_normal((n, t, 3))
        problem.config.delta = 0.5
        problem.targets[:] = tracks + 1e-3 * np.random.default_rng(1).standard_normal((n, t, 3))
        tangents[:] *= 1e-3

        base = problem.evaluate(store).total

        store[GRIDS][:] *= s
        store[TRACKS][:] *= s
        tangents[:, 3:] *= s
        problem.targets[:] *= s
        problem.base_rel_poses = [
            Pose(p.rotation.copy(), s * p.translation) for p in problem.base_rel_poses
        ]
        problem.config.delta *= s
        scaled = problem.evaluate(store).total
        assert scaled == pytest.approx(s * s * base, rel=1e-9)

    def test_breakdown_stats_present(self):
        problem, store = random_coupling_fixture(2)
        bd = problem.evaluate(store)
        summary = bd.summary()
        assert summary["total"] == pytest.approx(bd.total)
        assert summary["cons_samples"] == bd.cons.n_samples
        assert bd.cons.residual_max >= bd.cons.residual_mean >= 0


class TestPoseChainJacobian:
    def test_left_jacobian_consistency(self):
        # exp(omega + d) ~= exp(J_l(omega) d) exp(omega)
        rng = np.random.default_rng(3)
        from trajcouple.pose import so3_exp

        for _ in range(20):
            omega = rng.standard_normal(3)
            d = 1e-6 * rng.standard_normal(3)
            left = so3_exp(omega + d)
            right = so3_exp(so3_left_jacobian(omega) @ d) @ so3_exp(omega)
            assert np.allclose(left, right, atol=1e-11)
