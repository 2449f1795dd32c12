"""Rigid-transform arithmetic, tangent parameterization, and similarity alignment.

Poses store a full 3x3 rotation matrix plus a translation vector and map
points as ``R @ x + t``.  Camera poses are camera-to-world; world-to-camera
is ``inverse(pose)``.  Long composition chains are kept orthonormal by a
polar re-projection every ``REORTHO_PERIOD`` compositions.

The tangent parameterization is deliberately decoupled: ``exp_map`` maps a
``PoseTangent`` ``(omega, upsilon)`` to ``(exp_so3(omega), upsilon)``, so a
left perturbation of a pose acts as ``x -> exp_so3(omega) @ (pose @ x) + upsilon``.
This keeps pose-gradient chain rules closed-form through the SO(3) left
Jacobian alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateConfiguration, FileFormatError, LogNearPi

# Compositions between orthonormality re-projections.
REORTHO_PERIOD = 64

# Below this angle the Rodrigues terms switch to their Taylor expansions.
_SMALL_ANGLE = 1e-8


def so3_hat(w):
    """Skew-symmetric matrix of a 3-vector."""
    wx, wy, wz = w
    return np.array(
        [[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]], dtype=np.float64
    )


def so3_exp(omega):
    """Rodrigues' formula, exact identity at omega == 0."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = float(np.linalg.norm(omega))
    S = so3_hat(omega)
    if theta < _SMALL_ANGLE:
        # I + S + S^2/2, error O(theta^3)
        return np.eye(3) + S + 0.5 * (S @ S)
    return (
        np.eye(3)
        + (np.sin(theta) / theta) * S
        + ((1.0 - np.cos(theta)) / theta**2) * (S @ S)
    )


def so3_log(rotation):
    """Axis-angle vector of a rotation matrix.

    Raises LogNearPi when trace(R) <= -1 + 1e-6, i.e. the angle is within
    roughly a milliradian of pi where the axis is ill-conditioned.
    """
    R = np.asarray(rotation, dtype=np.float64)
    tr = float(np.trace(R))
    if tr <= -1.0 + 1e-6:
        raise LogNearPi(f"rotation angle too close to pi (trace={tr:.9f})")
    theta = float(np.arccos(np.clip(0.5 * (tr - 1.0), -1.0, 1.0)))
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < _SMALL_ANGLE:
        return 0.5 * v
    return (0.5 * theta / np.sin(theta)) * v


def so3_left_jacobian(omega):
    """Left Jacobian of SO(3): exp(omega + d) ~= exp(J_l(omega) d) exp(omega)."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = float(np.linalg.norm(omega))
    S = so3_hat(omega)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * S + (S @ S) / 6.0
    t2 = theta * theta
    return (
        np.eye(3)
        + ((1.0 - np.cos(theta)) / t2) * S
        + ((theta - np.sin(theta)) / (t2 * theta)) * (S @ S)
    )


def project_rotation(M):
    """Nearest rotation matrix in Frobenius norm (polar projection)."""
    U, _, Vt = np.linalg.svd(M)
    R = U @ Vt
    if np.linalg.det(R) < 0.0:
        U = U.copy()
        U[:, -1] = -U[:, -1]
        R = U @ Vt
    return R


class Pose:
    """Rigid transform: rotation (3x3, det +1) and translation (3,)."""

    __slots__ = ("rotation", "translation", "_age")

    def __init__(self, rotation=None, translation=None, _age=0):
        self.rotation = (
            np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
        )
        self.translation = (
            np.zeros(3)
            if translation is None
            else np.asarray(translation, dtype=np.float64)
        )
        if self.rotation.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {self.rotation.shape}")
        if self.translation.shape != (3,):
            raise ValueError(f"translation must be (3,), got {self.translation.shape}")
        self._age = _age

    @classmethod
    def identity(cls):
        return cls()

    def apply(self, pts):
        """Transform a point (3,) or stack of points (..., 3)."""
        pts = np.asarray(pts, dtype=np.float64)
        if pts.ndim == 1:
            return self.rotation @ pts + self.translation
        return pts @ self.rotation.T + self.translation

    def matrix(self):
        """4x4 homogeneous matrix."""
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def copy(self):
        return Pose(self.rotation.copy(), self.translation.copy(), _age=self._age)

    def is_orthonormal(self, tol=1e-9):
        err = np.linalg.norm(self.rotation.T @ self.rotation - np.eye(3))
        return err < tol and np.linalg.det(self.rotation) > 0.0

    def __repr__(self):
        return f"Pose(R={self.rotation.tolist()}, t={self.translation.tolist()})"


def compose(a: Pose, b: Pose) -> Pose:
    """Composition a * b: apply b first, then a."""
    R = a.rotation @ b.rotation
    t = a.rotation @ b.translation + a.translation
    age = a._age + b._age + 1
    if age >= REORTHO_PERIOD:
        R = project_rotation(R)
        age = 0
    return Pose(R, t, _age=age)


def inverse(p: Pose) -> Pose:
    Rt = p.rotation.T
    return Pose(Rt, -(Rt @ p.translation), _age=p._age)


def relative_pose(c_t: Pose, c_x: Pose) -> Pose:
    """Transform taking frame-t camera coordinates into frame-x camera coordinates.

    Both arguments are camera-to-world poses; the result is inv(c_x) * c_t.
    """
    return compose(inverse(c_x), c_t)


def transform_point(p: Pose, x):
    return p.apply(x)


@dataclass
class PoseTangent:
    """Tangent increment: axis-angle rotation part and translation part."""

    omega: np.ndarray
    upsilon: np.ndarray

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=np.float64).reshape(3)
        self.upsilon = np.asarray(self.upsilon, dtype=np.float64).reshape(3)

    @classmethod
    def zero(cls):
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_array(cls, v):
        v = np.asarray(v, dtype=np.float64).reshape(6)
        return cls(v[:3], v[3:])

    def as_array(self):
        return np.concatenate([self.omega, self.upsilon])

    def norm(self):
        return float(np.linalg.norm(self.as_array()))


def exp_map(t: PoseTangent) -> Pose:
    """Pose with rotation exp_so3(omega) and translation upsilon.

    exp_map(0) is the identity exactly, bit for bit.
    """
    return Pose(so3_exp(t.omega), t.upsilon.copy())


def log_map(p: Pose) -> PoseTangent:
    """Inverse of exp_map; requires rotation angle < pi."""
    return PoseTangent(so3_log(p.rotation), p.translation.copy())


def rotation_angle(R) -> float:
    """Rotation angle in radians of a rotation matrix.

    Uses atan2 of the skew part against the trace, which keeps full
    precision for tiny angles where arccos of the trace saturates.
    """
    R = np.asarray(R, dtype=np.float64)
    v = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = float(np.linalg.norm(v))
    c = float(np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0))
    return float(np.arctan2(s, c))


@dataclass
class Similarity:
    """Scaled rigid transform x -> scale * R @ x + t with scale > 0."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.scale = float(self.scale)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.scale <= 0.0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    @classmethod
    def identity(cls):
        return cls(1.0, np.eye(3), np.zeros(3))

    def apply(self, pts):
        pts = np.asarray(pts, dtype=np.float64)
        if pts.ndim == 1:
            return self.scale * (self.rotation @ pts) + self.translation
        return self.scale * (pts @ self.rotation.T) + self.translation

    def inverse(self):
        Rt = self.rotation.T
        s = 1.0 / self.scale
        return Similarity(s, Rt, -s * (Rt @ self.translation))

    def compose(self, other: "Similarity") -> "Similarity":
        """self * other: apply other first."""
        return Similarity(
            self.scale * other.scale,
            self.rotation @ other.rotation,
            self.scale * (self.rotation @ other.translation) + self.translation,
        )


def umeyama(src, dst, with_scale=True) -> Similarity:
    """Least-squares similarity aligning src onto dst (paired points).

    Minimizes sum ||dst_i - s R src_i - t||^2 over rotation R, scale s > 0
    (fixed to 1 when with_scale is False), and translation t.  Closed-form
    via SVD of the cross-covariance.  Raises DegenerateConfiguration for
    fewer than 3 pairs or (near-)collinear/coincident source or target
    points, where the rotation is not determined.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise ValueError(f"point counts differ: {src.shape} vs {dst.shape}")
    n = src.shape[0]
    if n < 3:
        raise DegenerateConfiguration(f"need at least 3 point pairs, got {n}")

    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    X = src - mu_s
    Y = dst - mu_d

    for name, M in (("source", X), ("target", Y)):
        sv = np.linalg.svd(M, compute_uv=False)
        if sv[0] < 1e-12 or sv[1] < 1e-9 * sv[0]:
            raise DegenerateConfiguration(
                f"{name} points are coincident or collinear (singular values {sv})"
            )

    cov = (Y.T @ X) / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0.0:
        S[2, 2] = -1.0
    R = U @ S @ Vt

    if with_scale:
        var_src = float(np.mean(np.sum(X * X, axis=1)))
        s = float(np.trace(np.diag(D) @ S)) / var_src
        if s <= 0.0:
            raise DegenerateConfiguration(f"non-positive scale {s} from alignment")
    else:
        s = 1.0
    t = mu_d - s * (R @ mu_s)
    return Similarity(s, R, t)


def icp_refine(src, dst, init: Similarity, max_iter=20, tol=1e-6) -> Similarity:
    """Point-to-point ICP refinement of a similarity alignment.

    Keeps the scale from the initial alignment fixed and refines the rigid
    part: each iteration matches transformed src points to their nearest
    dst points and solves the rigid Kabsch update.  Stops after max_iter
    iterations or when the mean residual changes by less than tol.
    """
    from scipy.spatial import cKDTree

    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    tree = cKDTree(dst)
    sim = Similarity(init.scale, init.rotation.copy(), init.translation.copy())
    prev = None
    for _ in range(max_iter):
        cur = sim.apply(src)
        dists, idx = tree.query(cur)
        mean_res = float(np.mean(dists))
        if prev is not None and abs(prev - mean_res) < tol:
            break
        prev = mean_res
        matched = dst[idx]
        mu_c = cur.mean(axis=0)
        mu_m = matched.mean(axis=0)
        H = (matched - mu_m).T @ (cur - mu_c)
        U, _, Vt = np.linalg.svd(H)
        Sfix = np.eye(3)
        if np.linalg.det(U) * np.linalg.det(Vt) < 0.0:
            Sfix[2, 2] = -1.0
        R = U @ Sfix @ Vt
        t = mu_m - R @ mu_c
        sim = Similarity(1.0, R, t).compose(sim)
    return sim


def write_poses(path, poses):
    """Write poses as text: count line, then per line 'index r00..r22 tx ty tz'."""
    lines = [str(len(poses))]
    for k, p in enumerate(poses):
        vals = list(p.rotation.reshape(9)) + list(p.translation)
        lines.append(" ".join([str(k)] + [repr(float(v)) for v in vals]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_poses(path):
    """Read poses written by write_poses."""
    with open(path) as fh:
        raw = [ln.strip() for ln in fh if ln.strip()]
    if not raw:
        raise FileFormatError(path, "empty pose file")
    try:
        count = int(raw[0])
    except ValueError:
        raise FileFormatError(path, f"bad count line {raw[0]!r}", line=1)
    if len(raw) - 1 != count:
        raise FileFormatError(path, f"expected {count} pose lines, got {len(raw) - 1}")
    poses = []
    for ln_no, ln in enumerate(raw[1:], start=2):
        parts = ln.split()
        if len(parts) != 13:
            raise FileFormatError(path, f"expected 13 fields, got {len(parts)}", line=ln_no)
        vals = np.array([float(v) for v in parts[1:]])
        R = vals[:9].reshape(3, 3)
        p = Pose(R, vals[9:])
        if not p.is_orthonormal(tol=1e-6):
            raise FileFormatError(path, "rotation not orthonormal", line=ln_no)
        poses.append(p)
    return poses
