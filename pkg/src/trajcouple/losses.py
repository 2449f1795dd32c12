"""Coupling objectives linking tracks, pointmaps, and relative camera poses.

Three terms, each a weighted Huber sum over (track, frame) samples:

* bidirectional track-pointmap consistency: the tracked 3D point and the
  pointmap sampled at the track's pixel must agree; one half updates only
  the pointmaps (tracks detached), the mirror half updates only the tracks;
* camera consistency: track points mapped through the per-frame relative
  pose must land on anchor-frame targets; the first half updates only the
  pose (gated to static samples), the second only the track points;
* anchor consistency (the self-supervised camera term): pointmap samples
  reprojected into the anchor frame must agree with the anchor-frame
  samples; updates poses through the reprojection and the anchor grid
  through the comparison side.  No 3D ground truth is consumed.

Detachment is structural: every accumulation carries a routing mask, and
each term only emits partials for its non-detached factors.

Pose gradients are taken w.r.t. per-frame tangents ``(omega, upsilon)``
around held base poses, with the transform acting as
``x -> exp_so3(omega) @ (base @ x) + upsilon``; the chain rule through
``omega`` uses the SO(3) left Jacobian and is exact at any tangent value.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigInvalid, MissingTargets
from .grad import (
    GRIDS,
    POSES,
    ROUTE_GRIDS,
    ROUTE_POSES,
    ROUTE_POSES_AND_GRIDS,
    ROUTE_TRACKS,
    TRACKS,
    ParamLayout,
    ParamStore,
    Tape,
    vector_indices,
)
from .pointmap import PointMapGrid, bilinear_gather
from .pose import Pose, PoseTangent, compose, exp_map, so3_exp, so3_left_jacobian
from .tracks import TrackSet

DEFAULT_DELTA = 0.05
DEFAULT_MIN_WEIGHT = 1e-3


def huber(residual, delta):
    """Huber penalty of a 3-vector residual: 0.5||r||^2 inside delta, linear outside."""
    if delta <= 0.0:
        raise ValueError(f"delta must be positive, got {delta}")
    r = np.asarray(residual, dtype=np.float64).reshape(-1)
    nrm = float(np.linalg.norm(r))
    if nrm <= delta:
        return 0.5 * nrm * nrm
    return delta * (nrm - 0.5 * delta)


def huber_gradient(residual, delta):
    """Gradient of the Huber penalty w.r.t. the residual vector."""
    if delta <= 0.0:
        raise ValueError(f"delta must be positive, got {delta}")
    r = np.asarray(residual, dtype=np.float64).reshape(-1)
    nrm = float(np.linalg.norm(r))
    if nrm <= delta:
        return r.copy()
    return (delta / nrm) * r


def _huber_batch(res, delta):
    """Vectorized Huber values and gradients for (M, 3) residuals."""
    norms = np.linalg.norm(res, axis=1)
    quad = norms <= delta
    vals = np.where(quad, 0.5 * norms * norms, delta * (norms - 0.5 * delta))
    scale = np.where(quad, 1.0, delta / np.maximum(norms, 1e-300))
    return vals, res * scale[:, None]


@dataclass
class PoseStacks:
    """Per-frame arrays of the tangent-parameterized relative transforms."""

    r_base: np.ndarray  # (T, 3, 3)
    t_base: np.ndarray  # (T, 3)
    exp_rot: np.ndarray  # (T, 3, 3)  exp_so3(omega_t)
    left_jac: np.ndarray  # (T, 3, 3)
    upsilon: np.ndarray  # (T, 3)
    r_cur: np.ndarray  # (T, 3, 3)  exp_rot @ r_base


def pose_stacks(base_poses: Sequence[Pose], tangents=None) -> PoseStacks:
    t = len(base_poses)
    r_base = np.stack([p.rotation for p in base_poses])
    t_base = np.stack([p.translation for p in base_poses])
    if tangents is None:
        tangents = np.zeros((t, 6))
    else:
        tangents = np.asarray(tangents, dtype=np.float64).reshape(t, 6)
    exp_rot = np.stack([so3_exp(tangents[k, :3]) for k in range(t)])
    left_jac = np.stack([so3_left_jacobian(tangents[k, :3]) for k in range(t)])
    r_cur = np.einsum("tij,tjk->tik", exp_rot, r_base)
    return PoseStacks(r_base, t_base, exp_rot, left_jac, tangents[:, 3:].copy(), r_cur)


def transform_samples(stacks: PoseStacks, frames, pts):
    """Apply the per-sample current transform; returns (y, a).

    y = exp_rot @ (base @ p) + upsilon is the transformed point and
    a = y - upsilon is the rotated part needed by the omega chain rule.
    This is the single code path for pose application inside the losses,
    shared with the synthetic generator for bitwise reproducibility.
    """
    frames = np.asarray(frames, dtype=np.int64)
    pts = np.asarray(pts, dtype=np.float64)
    z = np.einsum("mij,mj->mi", stacks.r_base[frames], pts) + stacks.t_base[frames]
    a = np.einsum("mij,mj->mi", stacks.exp_rot[frames], z)
    return a + stacks.upsilon[frames], a


def current_rel_poses(base_poses: Sequence[Pose], tangents=None):
    """Relative poses with tangent offsets folded in: exp(tangent) * base."""
    if tangents is None:
        return [p.copy() for p in base_poses]
    tangents = np.asarray(tangents, dtype=np.float64).reshape(len(base_poses), 6)
    return [
        compose(exp_map(PoseTangent.from_array(tangents[t])), base)
        for t, base in enumerate(base_poses)
    ]


def _scatter_pose_grads(tape, layout, stacks, frames, a_sel, gvec, routing):
    """Accumulate d(loss)/d(omega, upsilon) for selected samples.

    For y = exp(omega) z + upsilon and downstream gradient g:
    d/d upsilon = g and d/d omega = J_l(omega)^T (a x g) with a = exp(omega) z.
    """
    pose_base = layout.pose_base(frames)
    ups_idx = (pose_base[:, None] + np.arange(3, 6)).reshape(-1)
    tape.scatter(POSES, ups_idx, gvec.reshape(-1), routing)
    cross = np.cross(a_sel, gvec)
    gw = np.einsum("mji,mj->mi", stacks.left_jac[frames], cross)
    om_idx = (pose_base[:, None] + np.arange(3)).reshape(-1)
    tape.scatter(POSES, om_idx, gw.reshape(-1), routing)


@dataclass
class TermStats:
    """Value and residual statistics of one loss term (value is unweighted)."""

    name: str
    value: float
    n_samples: int
    n_skipped: int
    residual_mean: float
    residual_max: float


def _empty_stats(name, n_skipped):
    return TermStats(name, 0.0, 0, n_skipped, 0.0, 0.0)


def _stats(name, value, norms, n_skipped):
    if norms.size == 0:
        return _empty_stats(name, n_skipped)
    return TermStats(
        name, float(value), int(norms.size), int(n_skipped),
        float(norms.mean()), float(norms.max()),
    )


def _grid_stack(grids):
    if isinstance(grids, np.ndarray):
        return np.asarray(grids, dtype=np.float64)
    return np.stack(
        [g.points if isinstance(g, PointMapGrid) else np.asarray(g) for g in grids]
    )


def _default_layout(track_pts, grids):
    n, t = track_pts.shape[:2]
    return ParamLayout(n, t, grids.shape[1], grids.shape[2])


def _cons_core(
    track_pts, grids, query_pixels, visibility, delta,
    *, weight=1.0, min_weight=DEFAULT_MIN_WEIGHT, tape=None, layout=None,
    parts=("pointmap", "track"),
):
    parts = set(parts)
    valid = visibility >= min_weight
    ii, tt = np.nonzero(valid)
    n_skipped = int(valid.size - ii.size)
    if ii.size == 0:
        return _empty_stats("cons", n_skipped)
    if layout is None:
        layout = _default_layout(track_pts, grids)

    x = query_pixels[ii, tt, 0]
    y = query_pixels[ii, tt, 1]
    p_tilde, rows, cols, wts = bilinear_gather(grids, tt, x, y)
    p_hat = track_pts[ii, tt]
    r = p_hat - p_tilde
    vals, g = _huber_batch(r, delta)
    w = visibility[ii, tt]
    half = float(np.sum(w * vals))

    value = 0.0
    coeff = (weight * w)[:, None] * g  # (M, 3)
    if "pointmap" in parts:
        value += half
        if tape is not None:
            partials = -wts[:, :, None] * coeff[:, None, :]
            gidx = layout.grid_base(tt[:, None], rows, cols)
            idx = (gidx[:, :, None] + np.arange(3)).reshape(-1)
            tape.scatter(GRIDS, idx, partials.reshape(-1), ROUTE_GRIDS)
    if "track" in parts:
        value += half
        if tape is not None:
            idx = vector_indices(layout.track_base(ii, tt))
            tape.scatter(TRACKS, idx, coeff.reshape(-1), ROUTE_TRACKS)

    return _stats("cons", value, np.linalg.norm(r, axis=1), n_skipped)


def _cam_core(
    track_pts, grids, query_pixels, visibility, static_mask, targets,
    base_poses, pose_tangents, delta,
    *, weight=1.0, min_weight=DEFAULT_MIN_WEIGHT, tape=None, layout=None,
    parts=("pose", "track"), pose_target="gt", anchor=0,
):
    parts = set(parts)
    if pose_target not in ("gt", "anchor_sample"):
        raise ValueError(f"unknown pose_target {pose_target!r}")
    need_targets = "track" in parts or ("pose" in parts and pose_target == "gt")
    if need_targets and targets is None:
        raise MissingTargets("camera consistency in supervised mode needs anchor targets")
    if static_mask is None:
        raise ValueError("camera consistency needs a static mask (use all-ones to disable gating)")

    valid = visibility >= min_weight
    ii, tt = np.nonzero(valid)
    n_skipped = int(valid.size - ii.size)
    if ii.size == 0:
        return _empty_stats("cam", n_skipped)
    if layout is None:
        layout = _default_layout(track_pts, grids)

    stacks = pose_stacks(base_poses, pose_tangents)
    p_hat = track_pts[ii, tt]
    yv, a = transform_samples(stacks, tt, p_hat)
    w = visibility[ii, tt]

    value = 0.0
    norms = np.zeros(0)
    if targets is not None:
        r_all = yv - targets[ii, tt]
        norms = np.linalg.norm(r_all, axis=1)

    if "track" in parts:
        vals, g = _huber_batch(r_all, delta)
        value += float(np.sum(w * vals))
        if tape is not None:
            coeff = (weight * w)[:, None] * g
            gp = np.einsum("mji,mj->mi", stacks.r_cur[tt], coeff)
            idx = vector_indices(layout.track_base(ii, tt))
            tape.scatter(TRACKS, idx, gp.reshape(-1), ROUTE_TRACKS)

    if "pose" in parts:
        sel = static_mask[ii, tt].astype(bool)
        if pose_target == "gt":
            tgt = targets[ii, tt]
        else:
            avis = visibility[ii, anchor] >= min_weight
            sel = sel & avis
            ax = query_pixels[ii, anchor, 0]
            ay = query_pixels[ii, anchor, 1]
            tgt, _, _, _ = bilinear_gather(
                grids, np.full(ii.shape, anchor, dtype=np.int64), ax, ay
            )
        if np.any(sel):
            r1 = yv[sel] - tgt[sel]
            vals1, g1 = _huber_batch(r1, delta)
            value += float(np.sum(w[sel] * vals1))
            if norms.size == 0:
                norms = np.linalg.norm(r1, axis=1)
            if tape is not None:
                gvec = (weight * w[sel])[:, None] * g1
                _scatter_pose_grads(tape, layout, stacks, tt[sel], a[sel], gvec, ROUTE_POSES)

    return _stats("cam", value, norms, n_skipped)


def _anchor_core(
    grids, query_pixels, visibility, static_mask, base_poses, pose_tangents, delta,
    *, weight=1.0, min_weight=DEFAULT_MIN_WEIGHT, tape=None, layout=None, anchor=0,
):
    if static_mask is None:
        raise ValueError("anchor consistency needs a static mask")
    n, t = visibility.shape
    w_eff = visibility * visibility[:, anchor : anchor + 1]
    valid = (w_eff >= min_weight) & static_mask.astype(bool)
    valid[:, anchor] = False  # reprojecting the anchor onto itself is vacuous
    ii, tt = np.nonzero(valid)
    n_skipped = int(n * (t - 1) - ii.size)
    if ii.size == 0:
        return _empty_stats("anchor", n_skipped)
    if layout is None:
        layout = ParamLayout(n, t, grids.shape[1], grids.shape[2])

    stacks = pose_stacks(base_poses, pose_tangents)
    x = query_pixels[ii, tt, 0]
    y = query_pixels[ii, tt, 1]
    p_t, _, _, _ = bilinear_gather(grids, tt, x, y)  # detached side
    ax = query_pixels[ii, anchor, 0]
    ay = query_pixels[ii, anchor, 1]
    anchor_frames = np.full(ii.shape, anchor, dtype=np.int64)
    p_x, rows_x, cols_x, wts_x = bilinear_gather(grids, anchor_frames, ax, ay)

    yv, a = transform_samples(stacks, tt, p_t)
    r = yv - p_x
    vals, g = _huber_batch(r, delta)
    w = w_eff[ii, tt]
    value = float(np.sum(w * vals))

    if tape is not None:
        gvec = (weight * w)[:, None] * g
        _scatter_pose_grads(tape, layout, stacks, tt, a, gvec, ROUTE_POSES_AND_GRIDS)
        partials = -wts_x[:, :, None] * gvec[:, None, :]
        gidx = layout.grid_base(anchor_frames[:, None], rows_x, cols_x)
        idx = (gidx[:, :, None] + np.arange(3)).reshape(-1)
        tape.scatter(GRIDS, idx, partials.reshape(-1), ROUTE_POSES_AND_GRIDS)

    return _stats("anchor", value, np.linalg.norm(r, axis=1), n_skipped)


def selfsup_static_mask(
    grids, query_pixels, visibility, base_poses, pose_tangents, tau, anchor=0,
    *, min_weight=DEFAULT_MIN_WEIGHT, scale_quantile=0.4, scale_factor=3.0,
):
    """Provisional static mask from reprojection stability under current poses.

    Visible samples are reprojected into the anchor frame; a sample counts
    as static when it stays within tau_eff of its track's temporal median.
    tau_eff is per frame: tau inflated to scale_factor times a low quantile
    of that frame's deviations.  Early in an optimization, pose error alone
    moves every reprojection of a frame coherently, so a per-frame scale
    keeps the consistent majority admitted (no frame starves of gradient),
    while genuinely dynamic samples sit far above their frame's quantile
    and are rejected; as the poses converge the threshold tightens to tau.
    """
    grids = _grid_stack(grids)
    visibility = np.asarray(visibility, dtype=np.float64)
    n, t = visibility.shape
    valid = visibility >= min_weight
    ii, tt = np.nonzero(valid)
    if ii.size == 0:
        return np.zeros((n, t), dtype=bool)

    stacks = pose_stacks(base_poses, pose_tangents)
    x = query_pixels[ii, tt, 0]
    y = query_pixels[ii, tt, 1]
    p_t, _, _, _ = bilinear_gather(grids, tt, x, y)
    repro, _ = transform_samples(stacks, tt, p_t)

    repro_full = np.full((n, t, 3), np.nan)
    repro_full[ii, tt] = repro
    with np.errstate(all="ignore"):
        ref = np.nanmedian(repro_full, axis=1)
        dev = np.linalg.norm(repro_full - ref[:, None, :], axis=2)

    mask = np.zeros((n, t), dtype=bool)
    for frame in range(t):
        col = dev[:, frame]
        finite = np.isfinite(col)
        if not np.any(finite):
            continue
        scale = float(np.quantile(col[finite], scale_quantile))
        tau_eff = max(tau, scale_factor * scale)
        mask[finite, frame] = col[finite] < tau_eff
    return mask


# ---------------------------------------------------------------------------
# Public term entry points on domain objects.

def _unpack(tracks: TrackSet, grids):
    return tracks.points, _grid_stack(grids)


def loss_cons(
    tracks: TrackSet, grids, delta=DEFAULT_DELTA, tape: Optional[Tape] = None,
    *, weight=1.0, min_weight=DEFAULT_MIN_WEIGHT, layout=None,
    parts=("pointmap", "track"),
) -> TermStats:
    """Bidirectional track-pointmap consistency; accumulates routed gradients."""
    pts, stack = _unpack(tracks, grids)
    return _cons_core(
        pts, stack, tracks.query_pixels, tracks.visibility, delta,
        weight=weight, min_weight=min_weight, tape=tape, layout=layout, parts=parts,
    )


def loss_cam(
    tracks: TrackSet, grids, rel_poses: Sequence[Pose], static_mask, targets,
    delta=DEFAULT_DELTA, tape: Optional[Tape] = None,
    *, pose_tangents=None, weight=1.0, min_weight=DEFAULT_MIN_WEIGHT,
    layout=None, parts=("pose", "track"), pose_target="gt", anchor=0,
) -> TermStats:
    """Camera consistency against anchor targets with static-gated pose updates."""
    pts, stack = _unpack(tracks, grids)
    return _cam_core(
        pts, stack, tracks.query_pixels, tracks.visibility, static_mask, targets,
        rel_poses, pose_tangents, delta,
        weight=weight, min_weight=min_weight, tape=tape, layout=layout,
        parts=parts, pose_target=pose_target, anchor=anchor,
    )


def loss_selfsup(
    tracks: TrackSet, grids, rel_poses: Sequence[Pose], static_mask,
    tape: Optional[Tape] = None,
    *, delta=DEFAULT_DELTA, pose_tangents=None, weight_cons=1.0, weight_anchor=1.0,
    min_weight=DEFAULT_MIN_WEIGHT, layout=None, anchor=0,
) -> "LossBreakdown":
    """Self-supervised objective: pseudo-track consistency plus anchor consistency.

    No ground-truth 3D targets are consumed; the only supervision is the
    tracked pixel locations and tracker visibility carried by ``tracks``.
    """
    pts, stack = _unpack(tracks, grids)
    cons = _cons_core(
        pts, stack, tracks.query_pixels, tracks.visibility, delta,
        weight=weight_cons, min_weight=min_weight, tape=tape, layout=layout,
    )
    anchor_stats = _anchor_core(
        stack, tracks.query_pixels, tracks.visibility, static_mask,
        rel_poses, pose_tangents, delta,
        weight=weight_anchor, min_weight=min_weight, tape=tape, layout=layout,
        anchor=anchor,
    )
    return LossBreakdown(
        cons=cons, cam=None, selfsup=anchor_stats,
        weight_cons=weight_cons, weight_selfsup=weight_anchor,
    )


@dataclass
class LossConfig:
    """Term toggles, weights, and thresholds for the coupled objective."""

    delta: float = DEFAULT_DELTA
    tau_static: float = 0.02
    use_cons: bool = True
    use_cam: bool = True
    use_anchor: bool = False
    weight_cons: float = 1.0
    weight_cam: float = 1.0
    weight_anchor: float = 1.0
    min_weight: float = DEFAULT_MIN_WEIGHT
    pose_target: str = "gt"  # or "anchor_sample"
    gate_static: bool = True

    def validate(self):
        if self.delta <= 0.0:
            raise ConfigInvalid("delta", "must be positive")
        if self.tau_static <= 0.0:
            raise ConfigInvalid("tau_static", "must be positive")
        for name in ("weight_cons", "weight_cam", "weight_anchor"):
            if getattr(self, name) <= 0.0:
                raise ConfigInvalid(name, "must be positive")
        if self.pose_target not in ("gt", "anchor_sample"):
            raise ConfigInvalid("pose_target", "must be 'gt' or 'anchor_sample'")
        return self

    def to_dict(self):
        return {
            "delta": self.delta, "tau_static": self.tau_static,
            "use_cons": self.use_cons, "use_cam": self.use_cam,
            "use_anchor": self.use_anchor, "weight_cons": self.weight_cons,
            "weight_cam": self.weight_cam, "weight_anchor": self.weight_anchor,
            "min_weight": self.min_weight, "pose_target": self.pose_target,
            "gate_static": self.gate_static,
        }

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigInvalid(sorted(unknown)[0], "unknown loss config field")
        return cls(**d).validate()

    @classmethod
    def from_json_file(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class LossBreakdown:
    """Per-term values/statistics; total is the weighted sum of term values."""

    cons: Optional[TermStats] = None
    cam: Optional[TermStats] = None
    selfsup: Optional[TermStats] = None
    weight_cons: float = 1.0
    weight_cam: float = 1.0
    weight_selfsup: float = 1.0

    @property
    def cons_value(self):
        return self.cons.value if self.cons is not None else 0.0

    @property
    def cam_value(self):
        return self.cam.value if self.cam is not None else 0.0

    @property
    def selfsup_value(self):
        return self.selfsup.value if self.selfsup is not None else 0.0

    @property
    def total(self):
        return (
            self.weight_cons * self.cons_value
            + self.weight_cam * self.cam_value
            + self.weight_selfsup * self.selfsup_value
        )

    def summary(self):
        out = {
            "total": self.total,
            "cons": self.cons_value,
            "cam": self.cam_value,
            "selfsup": self.selfsup_value,
        }
        for stats in (self.cons, self.cam, self.selfsup):
            if stats is not None:
                out[f"{stats.name}_samples"] = stats.n_samples
                out[f"{stats.name}_skipped"] = stats.n_skipped
                out[f"{stats.name}_residual_mean"] = stats.residual_mean
                out[f"{stats.name}_residual_max"] = stats.residual_max
        return out


def total_loss(
    config: LossConfig, tracks: TrackSet, grids, rel_poses: Sequence[Pose],
    *, static_mask=None, targets=None, pose_tangents=None,
    tape: Optional[Tape] = None, layout=None, anchor=0,
) -> LossBreakdown:
    """Weighted sum of the enabled coupling terms with a full breakdown."""
    config.validate()
    pts, stack = _unpack(tracks, grids)
    q, vis = tracks.query_pixels, tracks.visibility
    mask = static_mask
    if mask is not None and not config.gate_static:
        mask = np.ones_like(np.asarray(mask), dtype=bool)

    cons = cam = anchor_stats = None
    if config.use_cons:
        cons = _cons_core(
            pts, stack, q, vis, config.delta,
            weight=config.weight_cons, min_weight=config.min_weight,
            tape=tape, layout=layout,
        )
    if config.use_cam:
        cam = _cam_core(
            pts, stack, q, vis, mask, targets, rel_poses, pose_tangents,
            config.delta, weight=config.weight_cam, min_weight=config.min_weight,
            tape=tape, layout=layout, pose_target=config.pose_target, anchor=anchor,
        )
    if config.use_anchor:
        anchor_stats = _anchor_core(
            stack, q, vis, mask, rel_poses, pose_tangents, config.delta,
            weight=config.weight_anchor, min_weight=config.min_weight,
            tape=tape, layout=layout, anchor=anchor,
        )
    return LossBreakdown(
        cons=cons, cam=cam, selfsup=anchor_stats,
        weight_cons=config.weight_cons, weight_cam=config.weight_cam,
        weight_selfsup=config.weight_anchor,
    )


TERM_NAMES = ("cons_pointmap", "cons_track", "cam_pose", "cam_track", "anchor")


@dataclass
class CouplingProblem:
    """Static data of a coupled objective over a ParamStore.

    The store carries the free parameters (grids, tracks, pose tangents);
    everything else (pixels, weights, gating, targets, base poses) lives
    here.  targets is None in self-supervised mode.
    """

    layout: ParamLayout
    base_rel_poses: list
    query_pixels: np.ndarray
    visibility: np.ndarray
    static_mask: np.ndarray
    targets: Optional[np.ndarray]
    config: LossConfig
    anchor: int = 0

    def views(self, store: ParamStore):
        return (
            store.view(TRACKS, self.layout.tracks_shape()),
            store.view(GRIDS, self.layout.grids_shape()),
            store.view(POSES, self.layout.poses_shape()),
        )

    def _mask(self):
        if self.config.gate_static:
            return self.static_mask
        return np.ones_like(self.static_mask, dtype=bool)

    def evaluate(self, store: ParamStore, tape: Optional[Tape] = None) -> LossBreakdown:
        cfg = self.config
        track_pts, grid_stack, tangents = self.views(store)
        cons = cam = anchor_stats = None
        if cfg.use_cons:
            cons = _cons_core(
                track_pts, grid_stack, self.query_pixels, self.visibility,
                cfg.delta, weight=cfg.weight_cons, min_weight=cfg.min_weight,
                tape=tape, layout=self.layout,
            )
        if cfg.use_cam:
            cam = _cam_core(
                track_pts, grid_stack, self.query_pixels, self.visibility,
                self._mask(), self.targets, self.base_rel_poses, tangents,
                cfg.delta, weight=cfg.weight_cam, min_weight=cfg.min_weight,
                tape=tape, layout=self.layout, pose_target=cfg.pose_target,
                anchor=self.anchor,
            )
        if cfg.use_anchor:
            anchor_stats = _anchor_core(
                grid_stack, self.query_pixels, self.visibility, self._mask(),
                self.base_rel_poses, tangents, cfg.delta,
                weight=cfg.weight_anchor, min_weight=cfg.min_weight,
                tape=tape, layout=self.layout, anchor=self.anchor,
            )
        return LossBreakdown(
            cons=cons, cam=cam, selfsup=anchor_stats,
            weight_cons=cfg.weight_cons, weight_cam=cfg.weight_cam,
            weight_selfsup=cfg.weight_anchor,
        )

    def evaluate_value(self, store: ParamStore, tape: Optional[Tape] = None) -> float:
        """Total loss as a plain float; matches finite_diff_check's loss_fn shape."""
        return self.evaluate(store, tape).total

    def evaluate_term(self, store: ParamStore, term: str, tape: Optional[Tape] = None) -> float:
        """One routed sub-term in isolation (for gradient verification)."""
        cfg = self.config
        track_pts, grid_stack, tangents = self.views(store)
        if term in ("cons_pointmap", "cons_track"):
            part = "pointmap" if term == "cons_pointmap" else "track"
            stats = _cons_core(
                track_pts, grid_stack, self.query_pixels, self.visibility,
                cfg.delta, weight=cfg.weight_cons, min_weight=cfg.min_weight,
                tape=tape, layout=self.layout, parts=(part,),
            )
            return cfg.weight_cons * stats.value
        if term in ("cam_pose", "cam_track"):
            part = "pose" if term == "cam_pose" else "track"
            stats = _cam_core(
                track_pts, grid_stack, self.query_pixels, self.visibility,
                self._mask(), self.targets, self.base_rel_poses, tangents,
                cfg.delta, weight=cfg.weight_cam, min_weight=cfg.min_weight,
                tape=tape, layout=self.layout, parts=(part,),
                pose_target=cfg.pose_target, anchor=self.anchor,
            )
            return cfg.weight_cam * stats.value
        if term == "anchor":
            stats = _anchor_core(
                grid_stack, self.query_pixels, self.visibility, self._mask(),
                self.base_rel_poses, tangents, cfg.delta,
                weight=cfg.weight_anchor, min_weight=cfg.min_weight,
                tape=tape, layout=self.layout, anchor=self.anchor,
            )
            return cfg.weight_anchor * stats.value
        raise ValueError(f"unknown term {term!r}")

    def active_terms(self):
        terms = []
        if self.config.use_cons:
            terms += ["cons_pointmap", "cons_track"]
        if self.config.use_cam:
            terms += ["cam_pose", "cam_track"]
        if self.config.use_anchor:
            terms += ["anchor"]
        return terms

    def refresh_static_mask(self, store: ParamStore):
        """Recompute the provisional static mask from the current state."""
        _, grid_stack, tangents = self.views(store)
        self.static_mask = selfsup_static_mask(
            grid_stack, self.query_pixels, self.visibility,
            self.base_rel_poses, tangents, self.config.tau_static, self.anchor,
            min_weight=self.config.min_weight,
        )

    def current_poses(self, store: ParamStore):
        _, _, tangents = self.views(store)
        return current_rel_poses(self.base_rel_poses, tangents)

    def fold_pose_tangents(self, store: ParamStore):
        """Fold the tangent block into the base poses and zero the block."""
        _, _, tangents = self.views(store)
        if not np.any(tangents):
            return
        self.base_rel_poses = current_rel_poses(self.base_rel_poses, tangents)
        tangents.fill(0.0)

    def with_config(self, **overrides) -> "CouplingProblem":
        return replace(self, config=replace(self.config, **overrides))
