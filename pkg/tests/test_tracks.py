import numpy as np
import pytest

from trajcouple.errors import FileFormatError
from trajcouple.pose import Pose, PoseTangent, exp_map, inverse, transform_point
from trajcouple.tracks import (
    TrackSet,
    WorldTrackSet,
    anchor_targets,
    camera_frame_position,
    read_static_mask,
    read_targets,
    read_tracks,
    static_mask,
    write_static_mask,
    write_targets,
    write_tracks,
)


def random_pose(rng):
    return exp_map(PoseTangent(rng.standard_normal(3), rng.standard_normal(3)))


class TestStaticMask:
    def test_static_point_all_ones(self):
        pts = np.tile(np.array([0.3, -0.1, 2.0]), (1, 7, 1))
        for tau in (1e-6, 0.5, 100.0):
            mask = static_mask(WorldTrackSet(pts), anchor=0, tau=tau)
            assert mask.all()

    def test_translating_point_median_reference(self):
        # one unit per frame over T=5; median reference sits at frame 2
        pts = np.zeros((1, 5, 3))
        pts[0, :, 0] = np.arange(5.0)
        mask = static_mask(WorldTrackSet(pts), anchor=0, tau=0.5)
        assert mask.tolist() == [[False, False, True, False, False]]

    def test_huge_tau_all_ones(self):
        rng = np.random.default_rng(0)
        pts = rng.standard_normal((4, 6, 3))
        mask = static_mask(WorldTrackSet(pts), anchor=0, tau=1e9)
        assert mask.all()

    def test_monotone_in_tau(self):
        rng = np.random.default_rng(1)
        pts = rng.standard_normal((6, 8, 3))
        gt = WorldTrackSet(pts)
        taus = [0.1, 0.5, 1.0, 2.0]
        masks = [static_mask(gt, 0, tau) for tau in taus]
        for small, big in zip(masks, masks[1:]):
            assert np.all(big[small])  # tau1 <= tau2 => mask1 subset of mask2

    def test_rigid_invariance(self):
        rng = np.random.default_rng(2)
        pts = rng.standard_normal((5, 6, 3))
        gt = WorldTrackSet(pts)
        g = random_pose(rng)
        moved = WorldTrackSet(g.apply(pts.reshape(-1, 3)).reshape(5, 6, 3))
        assert np.array_equal(static_mask(gt, 0, 0.7), static_mask(moved, 0, 0.7))

    def test_anchor_camera_coordinates_equivalent(self):
        rng = np.random.default_rng(3)
        pts = rng.standard_normal((5, 6, 3))
        gt = WorldTrackSet(pts)
        cam = random_pose(rng)
        plain = static_mask(gt, 2, 0.6)
        in_cam = static_mask(gt, 2, 0.6, anchor_pose=cam)
        assert np.array_equal(plain, in_cam)

    def test_anchor_reference_marks_anchor_static(self):
        rng = np.random.default_rng(4)
        pts = rng.standard_normal((4, 5, 3)) * 10
        mask = static_mask(WorldTrackSet(pts), anchor=3, tau=1e-9, reference="anchor")
        assert mask[:, 3].all()

    def test_median_respects_visibility(self):
        # the outlier frame is invisible, so the median ignores it
        pts = np.zeros((1, 5, 3))
        pts[0, 4, 0] = 100.0
        vis = np.ones((1, 5))
        vis[0, 4] = 0.0
        mask = static_mask(WorldTrackSet(pts), 0, tau=0.5, visibility=vis)
        assert mask[0, :4].all() and not mask[0, 4]

    def test_bad_args(self):
        pts = np.zeros((1, 3, 3))
        with pytest.raises(ValueError):
            static_mask(WorldTrackSet(pts), 0, tau=0.0)
        with pytest.raises(ValueError):
            static_mask(WorldTrackSet(pts), 5, tau=1.0)


class TestCameraFramePosition:
    def test_identity_camera(self):
        x = np.array([1.0, 2.0, 3.0])
        assert np.array_equal(camera_frame_position(x, Pose.identity()), x)

    def test_sign_convention(self):
        # camera 5 units behind the origin on -z, axes aligned: origin is 5 ahead
        cam = Pose(np.eye(3), np.array([0.0, 0.0, -5.0]))
        assert np.allclose(camera_frame_position(np.zeros(3), cam), [0, 0, 5], atol=1e-12)

    def test_matches_pose_algebra_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            cam = random_pose(rng)
            x = rng.standard_normal(3)
            expected = transform_point(inverse(cam), x)
            assert np.allclose(camera_frame_position(x, cam), expected, atol=1e-12)

    def test_static_point_varies_iff_camera_moves(self):
        # moving camera: camera-frame position of a fixed world point varies;
        # static camera: it is constant
        rng = np.random.default_rng(6)
        x = np.array([0.2, -0.4, 1.0])
        moving = [random_pose(rng) for _ in range(4)]
        tracks = np.stack([camera_frame_position(x, c) for c in moving])
        assert np.std(tracks, axis=0).max() > 1e-3
        frozen = [moving[0]] * 4
        tracks = np.stack([camera_frame_position(x, c) for c in frozen])
        assert np.std(tracks, axis=0).max() == 0.0


class TestAnchorTargets:
    def test_identity_anchor(self):
        rng = np.random.default_rng(7)
        pts = rng.standard_normal((3, 4, 3))
        out = anchor_targets(WorldTrackSet(pts), Pose.identity())
        assert np.array_equal(out, pts)

    def test_static_point_constant_targets(self):
        rng = np.random.default_rng(8)
        point = rng.standard_normal(3)
        pts = np.tile(point, (2, 6, 1))
        out = anchor_targets(WorldTrackSet(pts), random_pose(rng))
        assert np.allclose(out, out[:, :1, :], atol=1e-12)

    def test_per_frame_transform_oracle(self):
        rng = np.random.default_rng(9)
        pts = rng.standard_normal((4, 5, 3))
        cam = random_pose(rng)
        out = anchor_targets(WorldTrackSet(pts), cam)
        inv = inverse(cam)
        for i in range(4):
            for t in range(5):
                assert np.allclose(out[i, t], transform_point(inv, pts[i, t]), atol=1e-12)


class TestTrackSetValidation:
    def test_visibility_range_checked(self):
        with pytest.raises(ValueError):
            TrackSet(
                np.zeros((1, 2, 3)),
                np.array([[0.5, 1.5]]),
                np.zeros((1, 2, 2)),
            )

    def test_invisible_nan_points_allowed(self):
        pts = np.zeros((1, 2, 3))
        pts[0, 1] = np.nan
        ts = TrackSet(pts, np.array([[1.0, 0.0]]), np.zeros((1, 2, 2)))
        assert ts.n_tracks == 1 and ts.n_frames == 2

    def test_visible_nan_points_rejected(self):
        pts = np.zeros((1, 2, 3))
        pts[0, 1] = np.nan
        with pytest.raises(ValueError):
            TrackSet(pts, np.array([[1.0, 1.0]]), np.zeros((1, 2, 2)))


class TestTrackFileIo:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(10)
        pts = rng.standard_normal((3, 4, 3))
        vis = rng.uniform(0, 1, size=(3, 4))
        q = rng.uniform(0, 10, size=(3, 4, 2))
        path = tmp_path / "tracks.txt"
        write_tracks(path, pts, vis, q)
        p2, v2, q2 = read_tracks(path)
        assert np.array_equal(p2, pts)
        assert np.array_equal(v2, vis)
        assert np.array_equal(q2, q)

    def test_pseudo_tracks_nan_roundtrip(self, tmp_path):
        vis = np.ones((2, 3))
        q = np.zeros((2, 3, 2))
        path = tmp_path / "pseudo.txt"
        write_tracks(path, np.full((2, 3, 3), np.nan), vis, q)
        p2, v2, _ = read_tracks(path)
        assert np.all(np.isnan(p2))
        assert np.array_equal(v2, vis)

    def test_malformed_rows_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("1 1\n0 0 1.0\n")
        with pytest.raises(FileFormatError) as err:
            read_tracks(path)
        assert "bad.txt" in str(err.value)

    def test_missing_rows_rejected(self, tmp_path):
        path = tmp_path / "short.txt"
        path.write_text("2 2\n0 0 1.0 2.0 3.0 1.0 0.0 0.0\n")
        with pytest.raises(FileFormatError):
            read_tracks(path)

    def test_mask_and_targets_roundtrip(self, tmp_path):
        rng = np.random.default_rng(11)
        mask = rng.random((3, 4)) < 0.5
        write_static_mask(tmp_path / "m.txt", mask)
        assert np.array_equal(read_static_mask(tmp_path / "m.txt"), mask)
        targets = rng.standard_normal((3, 4, 3))
        write_targets(tmp_path / "t.txt", targets)
        assert np.array_equal(read_targets(tmp_path / "t.txt"), targets)
