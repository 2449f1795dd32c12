"""Camera-coordinate 3D trajectories, visibility weights, and static gating.

A TrackSet holds N tracks over T frames: per-sample 3D points expressed in
the frame's own camera coordinates, a visibility weight in [0, 1] (which is
also the loss weight), the 2D query pixel per sample, and an optional
binary static mask.  World-coordinate ground-truth tracks live in a
WorldTrackSet.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import FileFormatError
from .pose import Pose, inverse

MIN_VISIBLE_WEIGHT = 1e-3


@dataclass
class TrackSet:
    """N x T camera-coordinate trajectories with weights and pixels."""

    points: np.ndarray  # (N, T, 3) in frame camera coordinates
    visibility: np.ndarray  # (N, T) in [0, 1]
    query_pixels: np.ndarray  # (N, T, 2) as (x, y)
    static_mask: Optional[np.ndarray] = None  # (N, T) bool

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.visibility = np.asarray(self.visibility, dtype=np.float64)
        self.query_pixels = np.asarray(self.query_pixels, dtype=np.float64)
        n, t = self.visibility.shape
        if self.points.shape != (n, t, 3):
            raise ValueError(f"points shape {self.points.shape} != ({n}, {t}, 3)")
        if self.query_pixels.shape != (n, t, 2):
            raise ValueError(
                f"query_pixels shape {self.query_pixels.shape} != ({n}, {t}, 2)"
            )
        if np.any(self.visibility < 0.0) or np.any(self.visibility > 1.0):
            raise ValueError("visibility must lie in [0, 1]")
        vis = self.visibility >= MIN_VISIBLE_WEIGHT
        if not np.all(np.isfinite(self.points[vis])):
            raise ValueError("visible track points must be finite")
        if self.static_mask is not None:
            self.static_mask = np.asarray(self.static_mask).astype(bool)
            if self.static_mask.shape != (n, t):
                raise ValueError(f"static_mask shape {self.static_mask.shape}")

    @property
    def n_tracks(self):
        return self.points.shape[0]

    @property
    def n_frames(self):
        return self.points.shape[1]


@dataclass
class WorldTrackSet:
    """Ground-truth N x T trajectories in world coordinates."""

    points: np.ndarray  # (N, T, 3)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 3 or self.points.shape[2] != 3:
            raise ValueError(f"points must be (N, T, 3), got {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("world tracks must be finite")


def geometric_median(points, max_iter=100, tol=1e-14):
    """Weiszfeld iteration for the geometric median of a small point set.

    Unlike the coordinate-wise median, the geometric median commutes with
    rigid transforms, so displacement norms measured against it are frame
    independent.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 1:
        return pts[0].copy()
    y = pts.mean(axis=0)
    scale = float(np.max(np.abs(pts - y)))
    if scale == 0.0:  # all points coincide
        return y
    for _ in range(max_iter):
        d = np.linalg.norm(pts - y, axis=1)
        d = np.maximum(d, 1e-15 * scale)
        w = 1.0 / d
        y_new = (pts * w[:, None]).sum(axis=0) / w.sum()
        if np.linalg.norm(y_new - y) <= tol * scale:
            return y_new
        y = y_new
    return y


def static_mask(
    gt: WorldTrackSet,
    anchor: int,
    tau: float,
    visibility=None,
    anchor_pose: Optional[Pose] = None,
    reference="median",
):
    """Binary mask of samples whose world displacement stays below tau.

    A sample (i, t) is static when the distance from its world position to
    the track's temporal reference is below tau.  The reference is the
    geometric median over visible frames ("median", robust to outliers and
    equivariant under rigid motion) or the anchor-frame position ("anchor",
    which makes the anchor sample static by construction).  When
    anchor_pose is given the test runs in anchor camera coordinates; rigid
    transforms preserve distances, so the result matches the world-frame
    test.
    """
    if tau <= 0.0:
        raise ValueError(f"tau must be positive, got {tau}")
    pts = gt.points
    n, t, _ = pts.shape
    if not 0 <= anchor < t:
        raise ValueError(f"anchor {anchor} outside [0, {t})")
    if anchor_pose is not None:
        pts = inverse(anchor_pose).apply(pts.reshape(-1, 3)).reshape(n, t, 3)

    if reference == "median":
        if visibility is None:
            ref = np.stack([geometric_median(pts[i]) for i in range(n)])
        else:
            visibility = np.asarray(visibility, dtype=np.float64)
            ref = np.empty((n, 3))
            for i in range(n):
                vis = visibility[i] >= MIN_VISIBLE_WEIGHT
                ref[i] = geometric_median(pts[i, vis] if np.any(vis) else pts[i])
    elif reference == "anchor":
        ref = pts[:, anchor]
    else:
        raise ValueError(f"unknown reference {reference!r}")

    disp = np.linalg.norm(pts - ref[:, None, :], axis=2)
    return disp < tau


def camera_frame_position(world_point, c_t: Pose):
    """World point(s) expressed in the camera coordinates of pose c_t."""
    return inverse(c_t).apply(world_point)


def anchor_targets(gt: WorldTrackSet, c_x: Pose):
    """Ground-truth tracks expressed in the anchor camera's coordinates."""
    n, t, _ = gt.points.shape
    return inverse(c_x).apply(gt.points.reshape(-1, 3)).reshape(n, t, 3)


# ---------------------------------------------------------------------------
# Track file format (text): first line "N T", then one line per sample:
#   i t x y z visibility px py
# Pseudo 2D tracks reuse the format with x = y = z = nan.

def write_tracks(path, points, visibility, query_pixels):
    points = np.asarray(points, dtype=np.float64)
    visibility = np.asarray(visibility, dtype=np.float64)
    query_pixels = np.asarray(query_pixels, dtype=np.float64)
    n, t = visibility.shape
    lines = [f"{n} {t}"]
    for i in range(n):
        for f in range(t):
            x, y, z = (float(v) for v in points[i, f])
            px, py = (float(v) for v in query_pixels[i, f])
            lines.append(
                f"{i} {f} {x!r} {y!r} {z!r} {float(visibility[i, f])!r} {px!r} {py!r}"
            )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_tracks(path):
    """Read a track file; returns (points, visibility, query_pixels)."""
    with open(path) as fh:
        raw = [ln.strip() for ln in fh if ln.strip()]
    if not raw:
        raise FileFormatError(path, "empty track file")
    head = raw[0].split()
    if len(head) != 2:
        raise FileFormatError(path, f"bad header {raw[0]!r}", line=1)
    try:
        n, t = int(head[0]), int(head[1])
    except ValueError:
        raise FileFormatError(path, f"bad header {raw[0]!r}", line=1)
    if len(raw) - 1 != n * t:
        raise FileFormatError(path, f"expected {n * t} rows, got {len(raw) - 1}")
    points = np.zeros((n, t, 3))
    visibility = np.zeros((n, t))
    pixels = np.zeros((n, t, 2))
    seen = np.zeros((n, t), dtype=bool)
    for ln_no, ln in enumerate(raw[1:], start=2):
        parts = ln.split()
        if len(parts) != 8:
            raise FileFormatError(path, f"expected 8 fields, got {len(parts)}", line=ln_no)
        try:
            i, f = int(parts[0]), int(parts[1])
            vals = [float(v) for v in parts[2:]]
        except ValueError:
            raise FileFormatError(path, f"bad row {ln!r}", line=ln_no)
        if not (0 <= i < n and 0 <= f < t):
            raise FileFormatError(path, f"index ({i}, {f}) out of range", line=ln_no)
        points[i, f] = vals[:3]
        visibility[i, f] = vals[3]
        pixels[i, f] = vals[4:6]
        seen[i, f] = True
    if not np.all(seen):
        raise FileFormatError(path, "missing samples in track file")
    return points, visibility, pixels


def write_static_mask(path, mask):
    mask = np.asarray(mask).astype(int)
    n, t = mask.shape
    lines = [f"{n} {t}"]
    for i in range(n):
        for f in range(t):
            lines.append(f"{i} {f} {mask[i, f]}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_static_mask(path):
    with open(path) as fh:
        raw = [ln.strip() for ln in fh if ln.strip()]
    if not raw:
        raise FileFormatError(path, "empty mask file")
    head = raw[0].split()
    if len(head) != 2:
        raise FileFormatError(path, f"bad header {raw[0]!r}", line=1)
    n, t = int(head[0]), int(head[1])
    if len(raw) - 1 != n * t:
        raise FileFormatError(path, f"expected {n * t} rows, got {len(raw) - 1}")
    mask = np.zeros((n, t), dtype=bool)
    for ln_no, ln in enumerate(raw[1:], start=2):
        parts = ln.split()
        if len(parts) != 3:
            raise FileFormatError(path, f"expected 3 fields, got {len(parts)}", line=ln_no)
        mask[int(parts[0]), int(parts[1])] = bool(int(parts[2]))
    return mask


def write_targets(path, targets):
    targets = np.asarray(targets, dtype=np.float64)
    n, t, _ = targets.shape
    lines = [f"{n} {t}"]
    for i in range(n):
        for f in range(t):
            x, y, z = (float(v) for v in targets[i, f])
            lines.append(f"{i} {f} {x!r} {y!r} {z!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_targets(path):
    with open(path) as fh:
        raw = [ln.strip() for ln in fh if ln.strip()]
    if not raw:
        raise FileFormatError(path, "empty targets file")
    head = raw[0].split()
    if len(head) != 2:
        raise FileFormatError(path, f"bad header {raw[0]!r}", line=1)
    n, t = int(head[0]), int(head[1])
    if len(raw) - 1 != n * t:
        raise FileFormatError(path, f"expected {n * t} rows, got {len(raw) - 1}")
    targets = np.zeros((n, t, 3))
    for ln_no, ln in enumerate(raw[1:], start=2):
        parts = ln.split()
        if len(parts) != 5:
            raise FileFormatError(path, f"expected 5 fields, got {len(parts)}", line=ln_no)
        targets[int(parts[0]), int(parts[1])] = [float(v) for v in parts[2:]]
    return targets
