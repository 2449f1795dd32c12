"""Pixel-aligned pointmap grids with differentiable bilinear sampling.

A grid stores one 3D point per pixel, expressed in the owning frame's
camera coordinates.  The sampling domain is [0, W-1] x [0, H-1] in
(x, y) pixel coordinates; locations on the boundary use clamped corner
indices, and anything farther than 1e-9 outside raises OutOfDomain.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import FileFormatError, OutOfDomain

_DOMAIN_TOL = 1e-9


@dataclass
class PixelLocation:
    """Continuous pixel coordinates (x right, y down)."""

    x: float
    y: float


@dataclass
class PointMapGrid:
    """H x W grid of 3D points in one frame's camera coordinates."""

    points: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 3 or self.points.shape[2] != 3:
            raise ValueError(f"points must be (H, W, 3), got {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("pointmap contains non-finite values")

    @property
    def height(self):
        return self.points.shape[0]

    @property
    def width(self):
        return self.points.shape[1]


def _as_xy(u):
    if isinstance(u, PixelLocation):
        return float(u.x), float(u.y)
    u = np.asarray(u, dtype=np.float64).reshape(2)
    return float(u[0]), float(u[1])


def check_domain(height, width, x, y):
    """Raise OutOfDomain unless (x, y) lies in the grid domain (with 1e-9 slack)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    bad = (
        (x < -_DOMAIN_TOL)
        | (x > width - 1 + _DOMAIN_TOL)
        | (y < -_DOMAIN_TOL)
        | (y > height - 1 + _DOMAIN_TOL)
    )
    if np.any(bad):
        k = int(np.argmax(bad))
        bx = float(np.ravel(x)[k]) if x.ndim else float(x)
        by = float(np.ravel(y)[k]) if y.ndim else float(y)
        raise OutOfDomain(
            f"pixel ({bx}, {by}) outside domain [0, {width - 1}] x [0, {height - 1}]"
        )


def corner_data(height, width, x, y):
    """Bilinear corner rows/cols/weights for sample locations.

    x, y may be scalars or equal-shape arrays.  Returns (rows, cols, weights)
    with a trailing axis of 4 corners ordered (y0,x0), (y0,x1), (y1,x0),
    (y1,x1).  Weights are non-negative up to the domain slack and sum to 1.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    check_domain(height, width, x, y)

    if width > 1:
        x0 = np.clip(np.floor(x), 0, width - 2).astype(np.int64)
        fx = x - x0
    else:
        x0 = np.zeros(x.shape, dtype=np.int64)
        fx = np.zeros_like(x)
    if height > 1:
        y0 = np.clip(np.floor(y), 0, height - 2).astype(np.int64)
        fy = y - y0
    else:
        y0 = np.zeros(y.shape, dtype=np.int64)
        fy = np.zeros_like(y)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)

    rows = np.stack([y0, y0, y1, y1], axis=-1)
    cols = np.stack([x0, x1, x0, x1], axis=-1)
    weights = np.stack(
        [(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx], axis=-1
    )
    return rows, cols, weights


def bilinear_gather(stack, frames, x, y):
    """Sample a (T, H, W, 3) stack at per-sample frames and pixel locations.

    Returns (values (M, 3), rows (M, 4), cols (M, 4), weights (M, 4)).
    This is the single code path used for sampling everywhere, so repeated
    evaluations on identical inputs are bitwise reproducible.
    """
    stack = np.asarray(stack, dtype=np.float64)
    frames = np.asarray(frames, dtype=np.int64)
    rows, cols, weights = corner_data(stack.shape[1], stack.shape[2], x, y)
    corners = stack[frames[:, None], rows, cols, :]  # (M, 4, 3)
    values = np.einsum("mk,mkc->mc", weights, corners)
    return values, rows, cols, weights


def sample(grid: PointMapGrid, u):
    """Bilinear interpolation of the grid at pixel location u."""
    x, y = _as_xy(u)
    values, _, _, _ = bilinear_gather(
        grid.points[None], np.zeros(1, dtype=np.int64), np.array([x]), np.array([y])
    )
    return values[0]


@dataclass
class GridSample:
    """Sample value with the corner footprint and pixel-location Jacobian."""

    value: np.ndarray
    rows: np.ndarray  # (4,) corner row indices
    cols: np.ndarray  # (4,) corner column indices
    weights: np.ndarray  # (4,) corner weights, sum to 1
    d_du: np.ndarray = field(default=None)  # (3, 2) d value / d (x, y)


def sample_with_grad(grid: PointMapGrid, u) -> GridSample:
    """Sample plus derivatives w.r.t. the corner grid values and w.r.t. u.

    The derivative w.r.t. a corner point is its bilinear weight (per
    component); d_du holds the derivative of the value w.r.t. (x, y).
    """
    x, y = _as_xy(u)
    values, rows, cols, weights = bilinear_gather(
        grid.points[None], np.zeros(1, dtype=np.int64), np.array([x]), np.array([y])
    )
    r, c, w = rows[0], cols[0], weights[0]
    p00 = grid.points[r[0], c[0]]
    p01 = grid.points[r[1], c[1]]
    p10 = grid.points[r[2], c[2]]
    p11 = grid.points[r[3], c[3]]
    fy = w[2] + w[3]
    fx = w[1] + w[3]
    d_dx = (1 - fy) * (p01 - p00) + fy * (p11 - p10)
    d_dy = (1 - fx) * (p10 - p00) + fx * (p11 - p01)
    return GridSample(values[0], r, c, w, np.stack([d_dx, d_dy], axis=1))


def init_query(grid0: PointMapGrid, q) -> np.ndarray:
    """3D query initialization: sample the first-frame pointmap at q."""
    if grid0.frame_index != 0:
        raise ValueError(f"query initialization needs frame 0, got {grid0.frame_index}")
    return sample(grid0, q)


# ---------------------------------------------------------------------------
# File format: 3 little-endian int64 header (H, W, frame_index) followed by
# H*W*3 little-endian float64 values in row-major (y, x, component) order.
# Depth maps use the same container with one channel per pixel.

def write_pointmap(path, grid: PointMapGrid):
    header = np.array([grid.height, grid.width, grid.frame_index], dtype="<i8")
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(grid.points.astype("<f8").tobytes())


def read_pointmap(path) -> PointMapGrid:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 24:
        raise FileFormatError(path, "truncated header")
    h, w, frame = (int(v) for v in np.frombuffer(raw[:24], dtype="<i8"))
    expected = 24 + h * w * 3 * 8
    if h <= 0 or w <= 0 or len(raw) != expected:
        raise FileFormatError(
            path, f"expected {expected} bytes for {h}x{w}x3 grid, got {len(raw)}"
        )
    pts = np.frombuffer(raw[24:], dtype="<f8").reshape(h, w, 3).copy()
    return PointMapGrid(pts, frame_index=frame)


def write_depth_map(path, depth, frame_index=0):
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise ValueError(f"depth must be (H, W), got {depth.shape}")
    header = np.array([depth.shape[0], depth.shape[1], frame_index], dtype="<i8")
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(depth.astype("<f8").tobytes())


def read_depth_map(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 24:
        raise FileFormatError(path, "truncated header")
    h, w, frame = (int(v) for v in np.frombuffer(raw[:24], dtype="<i8"))
    expected = 24 + h * w * 8
    if h <= 0 or w <= 0 or len(raw) != expected:
        raise FileFormatError(
            path, f"expected {expected} bytes for {h}x{w} depth map, got {len(raw)}"
        )
    depth = np.frombuffer(raw[24:], dtype="<f8").reshape(h, w).copy()
    return depth, frame
