"""Deterministic synthetic dynamic scenes with ground truth and noisy estimates.

A scene is a smooth height-field surface observed by a moving camera.  The
pixel lattice is glued to the surface (a material parameterization), so a
track's query pixel is constant over time while its camera-coordinate
position moves with the camera — which is exactly what makes camera-frame
trajectories informative for pose recovery.  A tapered sub-region of the
surface can translate or oscillate over time to provide dynamic tracks.

Construction rules that the coupling losses rely on:

* ground-truth camera tracks are defined as bilinear samples of the
  ground-truth grids (the same sampling code path the losses use), so the
  consistency residuals of an unperturbed scene are exactly zero;
* anchor targets are defined by pushing those camera tracks through the
  ground-truth relative poses with the losses' own transform chain, so the
  camera-consistency residuals of an unperturbed scene are exactly zero;
* world tracks are bilinear samples of the world lattice, so static tracks
  are bit-for-bit constant over time.

Scale is normalized so the surface bounding-box diagonal is 1.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigInvalid, FileFormatError
from .grad import GRIDS, TRACKS, ParamLayout, ParamStore
from .losses import CouplingProblem, LossConfig, pose_stacks, transform_samples
from .pointmap import PointMapGrid, bilinear_gather, read_pointmap, write_pointmap
from .pose import (
    Pose,
    PoseTangent,
    compose,
    exp_map,
    inverse,
    read_poses,
    relative_pose,
    write_poses,
)
from .tracks import (
    WorldTrackSet,
    read_static_mask,
    read_targets,
    read_tracks,
    write_static_mask,
    write_targets,
    write_tracks,
)
from .tracks import static_mask as tracks_static_mask

CAMERA_PATHS = ("orbit", "line", "random-walk")
MOTIONS = ("linear", "sinusoidal")

# Dynamic sub-region of the pixel domain, as fractions of [0, W-1] x [0, H-1].
_DYN_X = (0.50, 0.95)
_DYN_Y = (0.20, 0.80)


@dataclass
class SceneConfig:
    n_frames: int = 6
    n_static: int = 48
    n_dynamic: int = 0
    camera_path: str = "orbit"
    camera_magnitude: float = 0.6
    motion: str = "linear"
    motion_speed: float = 0.3
    height: int = 16
    width: int = 16
    sigma_pointmap: float = 0.0
    sigma_track: float = 0.0
    sigma_pose: float = 0.0
    occlusion_span: int = 0
    anchor: int = 0
    tau_scale: float = 0.02
    seed: int = 0

    def validate(self):
        if self.n_frames < 1:
            raise ConfigInvalid("n_frames", "must be >= 1")
        if self.height < 2 or self.width < 2:
            raise ConfigInvalid("height" if self.height < 2 else "width", "must be >= 2")
        if self.n_static < 0 or self.n_dynamic < 0:
            raise ConfigInvalid("n_static", "track counts must be >= 0")
        if self.n_static + self.n_dynamic < 1:
            raise ConfigInvalid("n_static", "need at least one track")
        if self.camera_path not in CAMERA_PATHS:
            raise ConfigInvalid("camera_path", f"must be one of {CAMERA_PATHS}")
        if self.motion not in MOTIONS:
            raise ConfigInvalid("motion", f"must be one of {MOTIONS}")
        if self.camera_magnitude < 0:
            raise ConfigInvalid("camera_magnitude", "must be >= 0")
        if self.motion_speed < 0:
            raise ConfigInvalid("motion_speed", "must be >= 0")
        for name in ("sigma_pointmap", "sigma_track", "sigma_pose"):
            if getattr(self, name) < 0:
                raise ConfigInvalid(name, "must be >= 0")
        if not 0 <= self.occlusion_span < self.n_frames:
            raise ConfigInvalid("occlusion_span", "must be in [0, n_frames)")
        if not 0 <= self.anchor < self.n_frames:
            raise ConfigInvalid("anchor", "must be a valid frame index")
        if self.tau_scale <= 0:
            raise ConfigInvalid("tau_scale", "must be positive")
        return self

    def to_dict(self):
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigInvalid(sorted(unknown)[0], "unknown scene config field")
        return cls(**d).validate()

    @classmethod
    def from_json_file(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class SyntheticScene:
    config: SceneConfig
    cam_poses: list  # camera-to-world, per frame
    rel_poses: list  # frame -> anchor-frame transforms
    gt_grids: np.ndarray  # (T, H, W, 3)
    gt_tracks: np.ndarray  # (N, T, 3) camera-frame
    world_tracks: Optional[np.ndarray]  # (N, T, 3)
    query_pixels: np.ndarray  # (N, T, 2)
    visibility: np.ndarray  # (N, T)
    static_mask: Optional[np.ndarray]  # (N, T) bool
    targets: Optional[np.ndarray]  # (N, T, 3), anchor-frame
    pseudo_visibility: np.ndarray  # (N, T)
    est_grids: np.ndarray = None
    est_tracks: np.ndarray = None
    est_rel_poses: list = None
    tau_static: float = 0.02
    diagonal: float = 1.0

    @property
    def n_tracks(self):
        return self.gt_tracks.shape[0]

    @property
    def n_frames(self):
        return self.gt_tracks.shape[1]

    def layout(self):
        t, h, w, _ = self.gt_grids.shape
        return ParamLayout(self.n_tracks, t, h, w)


def _lookat(eye, target, up=(0.0, 0.0, 1.0)):
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f = f / np.linalg.norm(f)
    up = np.asarray(up, dtype=np.float64)
    if abs(float(f @ up)) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    x = np.cross(up, f)
    x = x / np.linalg.norm(x)
    y = np.cross(f, x)
    R = np.stack([x, y, f], axis=1)
    return Pose(R, eye)


def _surface_height(u, v):
    # sum of low-frequency sinusoids; smooth and gently curved
    return (
        0.12 * np.sin(2 * np.pi * (1.1 * u + 0.35)) * np.cos(2 * np.pi * (0.8 * v + 0.1))
        + 0.08 * np.sin(2 * np.pi * (0.6 * u - 0.9 * v + 0.45))
    )


def _taper(config):
    h, w = config.height, config.width
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    x0, x1 = _DYN_X[0] * (w - 1), _DYN_X[1] * (w - 1)
    y0, y1 = _DYN_Y[0] * (h - 1), _DYN_Y[1] * (h - 1)

    def bump(v, lo, hi):
        u = (v - lo) / (hi - lo)
        out = np.zeros_like(v)
        inside = (u > 0.0) & (u < 1.0)
        out[inside] = np.sin(np.pi * u[inside]) ** 2
        return out

    return bump(ys, y0, y1)[:, None] * bump(xs, x0, x1)[None, :]


def _displacements(config, direction, t_axis):
    speed = config.motion_speed
    denom = max(config.n_frames - 1, 1)
    if config.motion == "linear":
        mags = speed * (t_axis / denom)
    else:
        mags = speed * np.sin(2.0 * np.pi * t_axis / max(config.n_frames, 1))
    return mags[:, None] * direction[None, :]


def _camera_eyes(config, center, rng):
    t_axis = np.arange(config.n_frames, dtype=np.float64)
    denom = max(config.n_frames - 1, 1)
    radius = 1.2
    elevation = 0.5
    if config.camera_path == "orbit":
        az = config.camera_magnitude * (t_axis / denom)
        eyes = center + radius * np.stack(
            [np.cos(az) * np.cos(elevation), np.sin(az) * np.cos(elevation),
             np.full_like(az, np.sin(elevation))],
            axis=1,
        )
        return [_lookat(e, center) for e in eyes]
    if config.camera_path == "line":
        direction = np.array([0.0, 1.0, 0.15])
        direction /= np.linalg.norm(direction)
        start = center + radius * np.array(
            [np.cos(elevation), 0.0, np.sin(elevation)]
        )
        base = _lookat(start + 0.5 * config.camera_magnitude * direction, center)
        return [
            Pose(base.rotation.copy(), start + config.camera_magnitude * (k / denom) * direction)
            for k in t_axis
        ]
    # random-walk: small pose increments composed onto an initial look-at
    start = center + radius * np.array([np.cos(elevation), 0.0, np.sin(elevation)])
    poses = [_lookat(start, center)]
    step = config.camera_magnitude / max(config.n_frames, 1)
    for _ in range(config.n_frames - 1):
        tangent = PoseTangent(
            step * rng.standard_normal(3), step * rng.standard_normal(3)
        )
        poses.append(compose(poses[-1], exp_map(tangent)))
    return poses


def _sample_queries(rng, count, cell_ok, height, width):
    """Rejection-sample continuous pixels inside cells flagged by cell_ok."""
    if count == 0:
        return np.zeros((0, 2))
    rows, cols = np.nonzero(cell_ok)
    if rows.size == 0:
        raise ConfigInvalid("n_dynamic", "grid too small for the requested track layout")
    out = np.empty((count, 2))
    for k in range(count):
        c = rng.integers(0, rows.size)
        out[k, 0] = cols[c] + rng.uniform(0.15, 0.85)
        out[k, 1] = rows[c] + rng.uniform(0.15, 0.85)
    return out


def generate(config: SceneConfig) -> SyntheticScene:
    """Deterministically build a scene plus noisy estimates from config.seed."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    h, w, t_frames = config.height, config.width, config.n_frames

    # world lattice, normalized to unit bounding-box diagonal
    xs = np.linspace(-0.5, 0.5, w)
    ys = np.linspace(-0.5, 0.5, h)
    u = np.linspace(0.0, 1.0, w)
    v = np.linspace(0.0, 1.0, h)
    zz = _surface_height(u[None, :], v[:, None])
    lattice = np.stack(
        [np.broadcast_to(xs[None, :], (h, w)), np.broadcast_to(ys[:, None], (h, w)), zz],
        axis=-1,
    ).astype(np.float64)
    span = lattice.reshape(-1, 3).max(axis=0) - lattice.reshape(-1, 3).min(axis=0)
    lattice = lattice / float(np.linalg.norm(span))
    mins = lattice.reshape(-1, 3).min(axis=0)
    maxs = lattice.reshape(-1, 3).max(axis=0)
    diagonal = float(np.linalg.norm(maxs - mins))
    center = 0.5 * (mins + maxs)

    taper = _taper(config)
    direction = np.array([1.0, 0.4, 0.25])
    direction /= np.linalg.norm(direction)
    disp = _displacements(config, direction * diagonal, np.arange(t_frames, dtype=np.float64))
    world_stack = lattice[None] + taper[None, :, :, None] * disp[:, None, None, :]

    cam_poses = _camera_eyes(config, center, rng)
    # the anchor's own relative pose is the identity by definition
    rel_poses = [
        Pose.identity() if t == config.anchor
        else relative_pose(c, cam_poses[config.anchor])
        for t, c in enumerate(cam_poses)
    ]

    gt_grids = np.empty((t_frames, h, w, 3))
    for t in range(t_frames):
        gt_grids[t] = inverse(cam_poses[t]).apply(world_stack[t].reshape(-1, 3)).reshape(h, w, 3)

    # query pixels: constant per track (material pixel parameterization)
    cell_taper = np.stack(
        [taper[:-1, :-1], taper[:-1, 1:], taper[1:, :-1], taper[1:, 1:]]
    )
    static_cells = np.all(cell_taper == 0.0, axis=0)
    dynamic_cells = np.all(cell_taper >= 0.5, axis=0)
    q_static = _sample_queries(rng, config.n_static, static_cells, h, w)
    q_dynamic = _sample_queries(rng, config.n_dynamic, dynamic_cells, h, w)
    q0 = np.concatenate([q_static, q_dynamic], axis=0)
    n = q0.shape[0]
    query_pixels = np.repeat(q0[:, None, :], t_frames, axis=1)

    # visibility with one deterministic occlusion window per track
    visibility = np.ones((n, t_frames))
    if config.occlusion_span > 0 and t_frames - config.occlusion_span >= 1:
        for i in range(n):
            start = int(rng.integers(1, t_frames - config.occlusion_span + 1))
            visibility[i, start : start + config.occlusion_span] = 0.0

    # tracks via the shared sampling path; targets via the shared pose chain
    ii = np.repeat(np.arange(n), t_frames)
    tt = np.tile(np.arange(t_frames), n)
    qx = query_pixels[ii, tt, 0]
    qy = query_pixels[ii, tt, 1]
    world_tracks = bilinear_gather(world_stack, tt, qx, qy)[0].reshape(n, t_frames, 3)
    gt_tracks = bilinear_gather(gt_grids, tt, qx, qy)[0].reshape(n, t_frames, 3)
    stacks = pose_stacks(rel_poses, None)
    targets = transform_samples(stacks, tt, gt_tracks.reshape(-1, 3))[0].reshape(
        n, t_frames, 3
    )

    tau_static = config.tau_scale * diagonal
    static = tracks_static_mask(
        WorldTrackSet(world_tracks), config.anchor, tau_static, visibility=visibility
    )

    scene = SyntheticScene(
        config=config,
        cam_poses=cam_poses,
        rel_poses=rel_poses,
        gt_grids=gt_grids,
        gt_tracks=gt_tracks,
        world_tracks=world_tracks,
        query_pixels=query_pixels,
        visibility=visibility,
        static_mask=static,
        targets=targets,
        pseudo_visibility=visibility.copy(),
        tau_static=tau_static,
        diagonal=diagonal,
    )
    est_grids, est_tracks, est_rel = perturb(
        scene, config.sigma_pointmap, config.sigma_track, config.sigma_pose,
        seed=config.seed + 1,
    )
    scene.est_grids = est_grids
    scene.est_tracks = est_tracks
    scene.est_rel_poses = est_rel
    return scene


def perturb(scene: SyntheticScene, sigma_pointmap, sigma_track, sigma_pose, seed):
    """Noisy copies of grids, tracks, and relative poses.

    Grid and track points get i.i.d. Gaussian noise.  Each non-anchor
    relative pose is left-composed with exp of a random tangent whose six
    components are N(0, sigma_pose^2); the anchor's relative pose is the
    identity by definition and stays exact.  Zero sigmas return exact copies.
    """
    rng = np.random.default_rng(seed)
    est_grids = scene.gt_grids.copy()
    if sigma_pointmap > 0:
        est_grids += sigma_pointmap * rng.standard_normal(est_grids.shape)
    est_tracks = scene.gt_tracks.copy()
    if sigma_track > 0:
        est_tracks += sigma_track * rng.standard_normal(est_tracks.shape)
    est_rel = []
    for t, p in enumerate(scene.rel_poses):
        if sigma_pose > 0 and t != scene.config.anchor:
            tangent = PoseTangent(
                sigma_pose * rng.standard_normal(3),
                sigma_pose * rng.standard_normal(3),
            )
            est_rel.append(compose(exp_map(tangent), p))
        else:
            est_rel.append(p.copy())
    return est_grids, est_tracks, est_rel


def initial_store(scene: SyntheticScene) -> ParamStore:
    """ParamStore holding the scene's noisy estimates (pose tangents zero)."""
    layout = scene.layout()
    store = layout.make_store()
    store.view(GRIDS, layout.grids_shape())[:] = scene.est_grids
    store.view(TRACKS, layout.tracks_shape())[:] = scene.est_tracks
    return store


def build_problem(scene: SyntheticScene, loss_cfg: LossConfig = None, mode="supervised") -> CouplingProblem:
    """Coupled objective over the scene; selfsup mode never consumes 3D ground truth."""
    if mode not in ("supervised", "selfsup"):
        raise ValueError(f"unknown mode {mode!r}")
    if loss_cfg is None:
        if mode == "supervised":
            loss_cfg = LossConfig(tau_static=scene.tau_static)
        else:
            loss_cfg = LossConfig(
                use_cam=False, use_anchor=True, tau_static=scene.tau_static
            )
    loss_cfg.validate()
    if mode == "selfsup":
        if loss_cfg.use_cam:
            raise ConfigInvalid("use_cam", "camera term needs targets; not available self-supervised")
        visibility = scene.pseudo_visibility
        targets = None
        mask = np.ones_like(scene.visibility, dtype=bool)
    else:
        visibility = scene.visibility
        targets = scene.targets
        mask = scene.static_mask
    return CouplingProblem(
        layout=scene.layout(),
        base_rel_poses=[p.copy() for p in scene.est_rel_poses],
        query_pixels=scene.query_pixels,
        visibility=visibility,
        static_mask=mask,
        targets=targets,
        config=loss_cfg,
        anchor=scene.config.anchor,
    )


# ---------------------------------------------------------------------------
# Directory serialization (formats documented in the owning modules).

def save_scene(scene: SyntheticScene, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    cfg = scene.config.to_dict()
    doc = {
        "config": cfg,
        "derived": {"tau_static": scene.tau_static, "diagonal": scene.diagonal},
    }
    with open(os.path.join(out_dir, "scene_config.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    nan = float("nan")
    n, t = scene.visibility.shape
    for sub in ("gt", "est"):
        os.makedirs(os.path.join(out_dir, sub, "pointmaps"), exist_ok=True)
    gt = os.path.join(out_dir, "gt")
    est = os.path.join(out_dir, "est")
    for t_idx in range(t):
        write_pointmap(
            os.path.join(gt, "pointmaps", f"frame_{t_idx:03d}.pm"),
            PointMapGrid(scene.gt_grids[t_idx], frame_index=t_idx),
        )
        write_pointmap(
            os.path.join(est, "pointmaps", f"frame_{t_idx:03d}.pm"),
            PointMapGrid(scene.est_grids[t_idx], frame_index=t_idx),
        )
    write_tracks(os.path.join(gt, "tracks.txt"), scene.gt_tracks, scene.visibility, scene.query_pixels)
    write_tracks(
        os.path.join(gt, "world_tracks.txt"),
        scene.world_tracks,
        np.ones((n, t)),
        np.full((n, t, 2), nan),
    )
    write_tracks(
        os.path.join(gt, "pseudo_tracks.txt"),
        np.full((n, t, 3), nan),
        scene.pseudo_visibility,
        scene.query_pixels,
    )
    write_tracks(os.path.join(est, "tracks.txt"), scene.est_tracks, scene.visibility, scene.query_pixels)
    write_poses(os.path.join(gt, "poses.txt"), scene.cam_poses)
    write_poses(os.path.join(gt, "rel_poses.txt"), scene.rel_poses)
    write_poses(os.path.join(est, "rel_poses.txt"), scene.est_rel_poses)
    write_targets(os.path.join(gt, "targets.txt"), scene.targets)
    write_static_mask(os.path.join(gt, "static_mask.txt"), scene.static_mask)


def load_scene(scene_dir) -> SyntheticScene:
    cfg_path = os.path.join(scene_dir, "scene_config.json")
    if not os.path.exists(cfg_path):
        raise FileFormatError(cfg_path, "missing scene config")
    with open(cfg_path) as fh:
        doc = json.load(fh)
    config = SceneConfig.from_dict(doc["config"])
    derived = doc.get("derived", {})

    gt = os.path.join(scene_dir, "gt")
    est = os.path.join(scene_dir, "est")
    gt_grids = _load_grid_stack(os.path.join(gt, "pointmaps"), config.n_frames)
    est_grids = _load_grid_stack(os.path.join(est, "pointmaps"), config.n_frames)
    gt_pts, visibility, pixels = read_tracks(os.path.join(gt, "tracks.txt"))
    world_pts, _, _ = read_tracks(os.path.join(gt, "world_tracks.txt"))
    _, pseudo_vis, _ = read_tracks(os.path.join(gt, "pseudo_tracks.txt"))
    est_pts, _, _ = read_tracks(os.path.join(est, "tracks.txt"))
    cam_poses = read_poses(os.path.join(gt, "poses.txt"))
    rel_poses = read_poses(os.path.join(gt, "rel_poses.txt"))
    est_rel = read_poses(os.path.join(est, "rel_poses.txt"))
    targets = read_targets(os.path.join(gt, "targets.txt"))
    static = read_static_mask(os.path.join(gt, "static_mask.txt"))

    return SyntheticScene(
        config=config,
        cam_poses=cam_poses,
        rel_poses=rel_poses,
        gt_grids=gt_grids,
        gt_tracks=gt_pts,
        world_tracks=world_pts,
        query_pixels=pixels,
        visibility=visibility,
        static_mask=static,
        targets=targets,
        pseudo_visibility=pseudo_vis,
        est_grids=est_grids,
        est_tracks=est_pts,
        est_rel_poses=est_rel,
        tau_static=float(derived.get("tau_static", config.tau_scale)),
        diagonal=float(derived.get("diagonal", 1.0)),
    )


def _load_grid_stack(dir_path, n_frames):
    grids = []
    for t in range(n_frames):
        path = os.path.join(dir_path, f"frame_{t:03d}.pm")
        if not os.path.exists(path):
            raise FileFormatError(path, "missing pointmap frame")
        grids.append(read_pointmap(path).points)
    return np.stack(grids)
