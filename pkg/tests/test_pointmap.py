import numpy as np
import pytest

from trajcouple.errors import FileFormatError, OutOfDomain
from trajcouple.pointmap import (
    PixelLocation,
    PointMapGrid,
    bilinear_gather,
    init_query,
    read_depth_map,
    read_pointmap,
    sample,
    sample_with_grad,
    write_depth_map,
    write_pointmap,
)


def random_grid(rng, h=6, w=8, frame=0):
    return PointMapGrid(rng.standard_normal((h, w, 3)), frame_index=frame)


class TestSample:
    def test_integer_pixel_returns_stored_point(self):
        rng = np.random.default_rng(0)
        grid = random_grid(rng, 9, 10)
        assert np.array_equal(sample(grid, (3.0, 7.0)), grid.points[7, 3])

    def test_constant_field(self):
        grid = PointMapGrid(np.tile(np.array([1.0, -2.0, 3.0]), (5, 5, 1)))
        rng = np.random.default_rng(1)
        for _ in range(20):
            u = rng.uniform(0, 4, size=2)
            assert np.allclose(sample(grid, u), [1.0, -2.0, 3.0], atol=1e-12)

    def test_linear_field_reproduced(self):
        h, w = 7, 9
        yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        grid = PointMapGrid(np.stack([xx, yy, np.zeros_like(xx)], axis=-1).astype(float))
        out = sample(grid, PixelLocation(2.25, 5.5))
        assert np.allclose(out, [2.25, 5.5, 0.0], atol=1e-12)

    def test_affine_field_reproduced(self):
        h, w = 5, 6
        yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        pts = np.stack([2 * xx - yy, 0.5 * yy + 1, xx + yy], axis=-1).astype(float)
        grid = PointMapGrid(pts)
        rng = np.random.default_rng(2)
        for _ in range(25):
            x, y = rng.uniform(0, w - 1), rng.uniform(0, h - 1)
            assert np.allclose(
                sample(grid, (x, y)), [2 * x - y, 0.5 * y + 1, x + y], atol=1e-12
            )

    def test_boundary_exact(self):
        rng = np.random.default_rng(3)
        grid = random_grid(rng, 4, 5)
        assert np.allclose(sample(grid, (4.0, 3.0)), grid.points[3, 4], atol=1e-12)
        # tiny slack outside is clamped rather than rejected
        sample(grid, (-1e-10, 0.0))

    def test_out_of_domain(self):
        rng = np.random.default_rng(4)
        grid = random_grid(rng, 4, 5)
        for u in [(-0.5, 1.0), (1.0, -0.5), (4.2, 1.0), (1.0, 3.5)]:
            with pytest.raises(OutOfDomain):
                sample(grid, u)


class TestSampleWithGrad:
    def test_integer_pixel_weight_one(self):
        rng = np.random.default_rng(5)
        grid = random_grid(rng)
        out = sample_with_grad(grid, (2.0, 3.0))
        assert out.weights[0] == pytest.approx(1.0, abs=1e-12)
        assert np.allclose(out.weights[1:], 0.0, atol=1e-12)

    def test_cell_center_weights(self):
        rng = np.random.default_rng(6)
        grid = random_grid(rng, 2, 2)
        out = sample_with_grad(grid, (0.5, 0.5))
        assert np.allclose(out.weights, 0.25, atol=1e-12)

    def test_partition_of_unity(self):
        rng = np.random.default_rng(7)
        grid = random_grid(rng, 5, 7)
        for _ in range(50):
            u = (rng.uniform(0, 6), rng.uniform(0, 4))
            out = sample_with_grad(grid, u)
            assert np.sum(out.weights) == pytest.approx(1.0, abs=1e-12)

    def test_pixel_jacobian_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        grid = random_grid(rng, 6, 8)
        h = 1e-4
        for _ in range(30):
            x = rng.uniform(0.3, 6.4)
            y = rng.uniform(0.3, 4.4)
            if abs(x - round(x)) < 0.05 or abs(y - round(y)) < 0.05:
                continue  # stay away from cell boundaries where d/du jumps
            out = sample_with_grad(grid, (x, y))
            num_x = (sample(grid, (x + h, y)) - sample(grid, (x - h, y))) / (2 * h)
            num_y = (sample(grid, (x, y + h)) - sample(grid, (x, y - h))) / (2 * h)
            assert np.allclose(out.d_du[:, 0], num_x, rtol=1e-5, atol=1e-8)
            assert np.allclose(out.d_du[:, 1], num_y, rtol=1e-5, atol=1e-8)

    def test_corner_weights_match_value_gradient(self):
        # perturbing a corner point changes the sample by weight * delta
        rng = np.random.default_rng(9)
        grid = random_grid(rng, 5, 5)
        u = (2.3, 1.7)
        out = sample_with_grad(grid, u)
        for k in range(4):
            bumped = grid.points.copy()
            bumped[out.rows[k], out.cols[k], 1] += 1e-6
            new = sample(PointMapGrid(bumped), u)
            got = (new - out.value)[1] / 1e-6
            assert got == pytest.approx(out.weights[k], abs=1e-9)


class TestInitQuery:
    def test_delegates_to_sample(self):
        rng = np.random.default_rng(10)
        grid = random_grid(rng, 4, 4, frame=0)
        u = (1.25, 2.5)
        assert np.array_equal(init_query(grid, u), sample(grid, u))

    def test_requires_first_frame(self):
        rng = np.random.default_rng(11)
        with pytest.raises(ValueError):
            init_query(random_grid(rng, 4, 4, frame=3), (1.0, 1.0))


class TestBilinearGather:
    def test_matches_scalar_sample(self):
        rng = np.random.default_rng(12)
        stack = rng.standard_normal((3, 5, 6, 3))
        frames = np.array([0, 2, 1, 2])
        xs = rng.uniform(0, 5, size=4)
        ys = rng.uniform(0, 4, size=4)
        values, _, _, _ = bilinear_gather(stack, frames, xs, ys)
        for k in range(4):
            single = sample(PointMapGrid(stack[frames[k]]), (xs[k], ys[k]))
            assert np.array_equal(values[k], single)


class TestFileIo:
    def test_pointmap_roundtrip_bitwise(self, tmp_path):
        rng = np.random.default_rng(13)
        grid = random_grid(rng, 7, 3, frame=5)
        path = tmp_path / "g.pm"
        write_pointmap(path, grid)
        back = read_pointmap(path)
        assert back.frame_index == 5
        assert np.array_equal(back.points, grid.points)

    def test_pointmap_truncated_raises(self, tmp_path):
        path = tmp_path / "bad.pm"
        path.write_bytes(b"\x01\x02")
        with pytest.raises(FileFormatError):
            read_pointmap(path)

    def test_depth_roundtrip(self, tmp_path):
        rng = np.random.default_rng(14)
        depth = rng.uniform(0.5, 3.0, size=(4, 6))
        path = tmp_path / "d.dm"
        write_depth_map(path, depth, frame_index=2)
        back, frame = read_depth_map(path)
        assert frame == 2
        assert np.array_equal(back, depth)

    def test_non_finite_rejected(self):
        pts = np.zeros((3, 3, 3))
        pts[1, 1, 1] = np.nan
        with pytest.raises(ValueError):
            PointMapGrid(pts)
