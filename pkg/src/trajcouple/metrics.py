"""Evaluation protocols for trajectories, relative poses, 3D tracks, point clouds, and depth.

Conventions (one per metric family, fixed across the package):

* ATE / RPE-translation are in scene length units, RPE-rotation in degrees;
* RRA@30 / RTA@30 / AUC@30 and AJ / APD / OA are percentages in [0, 100];
* depth AbsRel and the delta < 1.25 inlier rate are plain fractions;
* accuracy thresholds are strict ("error < threshold").

Alignment conventions are explicit arguments: ATE aligns the estimated
trajectory with a similarity (scale included) by default; point-cloud
metrics align with a similarity, optionally refined by rigid ICP; depth is
aligned by a median-ratio scale or a least-squares scale-and-shift, per
image or per sequence.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateConfiguration, EmptyValidMask
from .pose import Pose, compose, icp_refine, inverse, rotation_angle, umeyama

DEFAULT_TRACK_THRESHOLDS = (0.01, 0.02, 0.04, 0.08, 0.16)


@dataclass
class TrajectoryPair:
    """Matched estimated / ground-truth camera-to-world pose sequences."""

    est: Sequence[Pose]
    gt: Sequence[Pose]

    def __post_init__(self):
        if len(self.est) != len(self.gt):
            raise ValueError(f"length mismatch: {len(self.est)} vs {len(self.gt)}")
        if len(self.est) == 0:
            raise ValueError("empty trajectory")

    def __len__(self):
        return len(self.est)

    def positions(self):
        est = np.stack([p.translation for p in self.est])
        gt = np.stack([p.translation for p in self.gt])
        return est, gt


def ate(pair: TrajectoryPair, align="similarity") -> float:
    """RMS translation error after aligning the estimate onto the ground truth.

    align: "similarity" (Umeyama with scale, the monocular default),
    "rigid" (no scale), or "none".
    """
    if len(pair) < 3 and align != "none":
        raise DegenerateConfiguration("ATE alignment needs at least 3 poses")
    est, gt = pair.positions()
    if align == "similarity":
        est = umeyama(est, gt, with_scale=True).apply(est)
    elif align == "rigid":
        est = umeyama(est, gt, with_scale=False).apply(est)
    elif align != "none":
        raise ValueError(f"unknown align mode {align!r}")
    return float(np.sqrt(np.mean(np.sum((est - gt) ** 2, axis=1))))


@dataclass
class RpeResult:
    trans: float
    rot_deg: float


def rpe(pair: TrajectoryPair, step=1) -> RpeResult:
    """Relative pose error over a fixed frame delta (RMS translation / rotation)."""
    if not 1 <= step < len(pair):
        raise ValueError(f"step {step} must be in [1, {len(pair)})")
    d_trans = []
    d_rot = []
    for i in range(len(pair) - step):
        rel_gt = compose(inverse(pair.gt[i]), pair.gt[i + step])
        rel_est = compose(inverse(pair.est[i]), pair.est[i + step])
        d_trans.append(np.sum((rel_est.translation - rel_gt.translation) ** 2))
        ang = rotation_angle(rel_gt.rotation.T @ rel_est.rotation)
        d_rot.append(ang * ang)
    return RpeResult(
        float(np.sqrt(np.mean(d_trans))),
        float(np.degrees(np.sqrt(np.mean(d_rot)))),
    )


@dataclass
class RelPoseAccuracy:
    rra: float
    rta: float
    auc: float
    n_pairs: int
    n_skipped: int


def rel_pose_accuracy(pair: TrajectoryPair, max_threshold=30) -> RelPoseAccuracy:
    """Relative rotation / translation-direction accuracy over all frame pairs.

    Rotation error is the relative-rotation angle between estimate and
    ground truth; translation error is the angle between the relative
    translation directions.  Pairs whose ground-truth relative translation
    is shorter than 1e-9 have no direction and are skipped (counted).  An
    estimate with a near-zero relative translation against a valid ground
    truth scores the maximum error of 180 degrees.  AUC integrates the
    pointwise min of the two accuracy curves over integer thresholds
    1..max_threshold with trapezoidal weights.
    """
    if len(pair) < 2:
        raise ValueError("need at least 2 frames")
    rot_err = []
    trans_err = []
    n_skipped = 0
    for i in range(len(pair)):
        for j in range(i + 1, len(pair)):
            rel_gt = compose(inverse(pair.gt[i]), pair.gt[j])
            rel_est = compose(inverse(pair.est[i]), pair.est[j])
            t_gt = rel_gt.translation
            nrm_gt = float(np.linalg.norm(t_gt))
            if nrm_gt < 1e-9:
                n_skipped += 1
                continue
            rot_err.append(
                math.degrees(rotation_angle(rel_gt.rotation.T @ rel_est.rotation))
            )
            t_est = rel_est.translation
            nrm_est = float(np.linalg.norm(t_est))
            if nrm_est < 1e-9:
                trans_err.append(180.0)
            else:
                cosv = float(np.clip(t_gt @ t_est / (nrm_gt * nrm_est), -1.0, 1.0))
                trans_err.append(math.degrees(math.acos(cosv)))
    rot_err = np.asarray(rot_err)
    trans_err = np.asarray(trans_err)
    n_pairs = rot_err.size
    if n_pairs == 0:
        return RelPoseAccuracy(0.0, 0.0, 0.0, 0, n_skipped)

    thresholds = np.arange(1, max_threshold + 1, dtype=np.float64)
    acc_r = np.array([np.mean(rot_err < th) for th in thresholds])
    acc_t = np.array([np.mean(trans_err < th) for th in thresholds])
    curve = np.minimum(acc_r, acc_t)
    auc = float(np.trapezoid(curve, thresholds) / (thresholds[-1] - thresholds[0]))
    return RelPoseAccuracy(
        100.0 * float(np.mean(rot_err < max_threshold)),
        100.0 * float(np.mean(trans_err < max_threshold)),
        100.0 * auc,
        int(n_pairs),
        int(n_skipped),
    )


@dataclass
class Tapvid3DResult:
    aj: float
    apd: float
    oa: float


def tapvid3d_metrics(
    est_tracks, est_visibility, gt_tracks, gt_visibility,
    thresholds=DEFAULT_TRACK_THRESHOLDS, depth_scaled=True,
) -> Tapvid3DResult:
    """3D tracking scores: threshold-averaged Jaccard, position accuracy, occlusion accuracy.

    Visibilities are binarized at 0.5.  With depth_scaled the per-sample
    distance threshold is scaled by the ground-truth |z| (a metric
    tolerance proportional to depth); otherwise thresholds are absolute.
    Results are percentages.
    """
    est_tracks = np.asarray(est_tracks, dtype=np.float64)
    gt_tracks = np.asarray(gt_tracks, dtype=np.float64)
    est_vis = np.asarray(est_visibility, dtype=np.float64) > 0.5
    gt_vis = np.asarray(gt_visibility, dtype=np.float64) > 0.5
    if est_tracks.shape != gt_tracks.shape:
        raise ValueError(f"track shapes differ: {est_tracks.shape} vs {gt_tracks.shape}")

    dist = np.linalg.norm(est_tracks - gt_tracks, axis=-1)
    depth = np.abs(gt_tracks[..., 2]) if depth_scaled else np.ones_like(dist)

    jaccards = []
    fractions = []
    n_gt_visible = int(np.sum(gt_vis))
    for th in thresholds:
        within = dist < th * depth
        tp = float(np.sum(gt_vis & est_vis & within))
        fn = float(np.sum(gt_vis & ~(est_vis & within)))
        fp = float(np.sum(est_vis & ~(gt_vis & within)))
        denom = tp + fn + fp
        jaccards.append(tp / denom if denom > 0 else 1.0)
        fractions.append(
            float(np.sum(gt_vis & within)) / n_gt_visible if n_gt_visible else 0.0
        )
    oa = float(np.mean(est_vis == gt_vis))
    return Tapvid3DResult(
        100.0 * float(np.mean(jaccards)),
        100.0 * float(np.mean(fractions)),
        100.0 * oa,
    )


@dataclass
class PointmapResult:
    acc_mean: float
    acc_median: float
    comp_mean: float
    comp_median: float
    nc_mean: float
    nc_median: float


def estimate_normals(cloud, k=16):
    """Unit normals from a local plane fit over k nearest neighbors."""
    cloud = np.asarray(cloud, dtype=np.float64)
    n = cloud.shape[0]
    k = min(k, n - 1)
    if k < 2:
        raise DegenerateConfiguration("too few points for normal estimation")
    tree = cKDTree(cloud)
    _, idx = tree.query(cloud, k=k + 1)
    neigh = cloud[idx]  # (n, k+1, 3)
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    return vecs[:, :, 0]  # eigenvector of the smallest eigenvalue


def pointmap_metrics(
    pred, gt, align=True, use_icp=False, k_normals=16
) -> PointmapResult:
    """Accuracy / completion / normal consistency between point clouds.

    With align the prediction is first fit to the ground truth by a
    similarity transform over index-paired points (the pixel-aligned
    protocol; requires equal sizes), optionally refined with point-to-point
    ICP.  Accuracy is the nearest-neighbor distance pred -> gt, completion
    the reverse, and normal consistency the absolute cosine between local
    plane-fit normals of matched pred -> gt pairs.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if pred.shape[0] < 3 or gt.shape[0] < 3:
        raise DegenerateConfiguration("point clouds need at least 3 points")
    if align:
        if pred.shape[0] != gt.shape[0]:
            raise DegenerateConfiguration(
                "similarity alignment needs index-paired clouds of equal size"
            )
        sim = umeyama(pred, gt, with_scale=True)
        if use_icp:
            sim = icp_refine(pred, gt, sim)
        pred = sim.apply(pred)
    elif use_icp:
        from .pose import Similarity

        pred = icp_refine(pred, gt, Similarity.identity()).apply(pred)

    gt_tree = cKDTree(gt)
    pred_tree = cKDTree(pred)
    acc_d, acc_idx = gt_tree.query(pred)
    comp_d, _ = pred_tree.query(gt)

    normals_pred = estimate_normals(pred, k_normals)
    normals_gt = estimate_normals(gt, k_normals)
    cosines = np.abs(np.sum(normals_pred * normals_gt[acc_idx], axis=1))

    return PointmapResult(
        float(np.mean(acc_d)), float(np.median(acc_d)),
        float(np.mean(comp_d)), float(np.median(comp_d)),
        float(np.mean(cosines)), float(np.median(cosines)),
    )


@dataclass
class DepthResult:
    abs_rel: float
    delta_125: float


def _as_image_list(x):
    x = [np.asarray(v, dtype=np.float64) for v in (x if isinstance(x, (list, tuple)) else [x])]
    out = []
    for v in x:
        if v.ndim == 3:
            out.extend(v[k] for k in range(v.shape[0]))
        elif v.ndim == 2:
            out.append(v)
        else:
            raise ValueError(f"depth maps must be 2D or stacked 3D, got shape {v.shape}")
    return out


def _fit_scale(pred, gt):
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = gt / pred
    ok = np.isfinite(ratio) & (pred > 0)
    if not np.any(ok):
        raise EmptyValidMask("no usable pixels for scale alignment")
    return float(np.median(ratio[ok])), 0.0


def _fit_scale_shift(pred, gt):
    A = np.stack([pred, np.ones_like(pred)], axis=1)
    sol, _, _, _ = np.linalg.lstsq(A, gt, rcond=None)
    return float(sol[0]), float(sol[1])


def depth_metrics(
    pred, gt, mode="scale", per="sequence", masks=None
) -> DepthResult:
    """AbsRel and the delta < 1.25 inlier rate after depth alignment.

    mode "scale" aligns with the median ratio gt/pred; "scale_and_shift"
    with a least-squares affine fit.  per "sequence" fits one alignment
    over all frames, per "image" fits each frame independently.  Valid
    pixels have positive finite ground truth (intersected with masks when
    given); metrics pool all valid pixels after alignment.
    """
    if mode not in ("scale", "scale_and_shift"):
        raise ValueError(f"unknown mode {mode!r}")
    if per not in ("sequence", "image"):
        raise ValueError(f"unknown per {per!r}")
    preds = _as_image_list(pred)
    gts = _as_image_list(gt)
    if len(preds) != len(gts):
        raise ValueError(f"frame counts differ: {len(preds)} vs {len(gts)}")
    if masks is None:
        mask_list = [None] * len(preds)
    else:
        mask_list = [np.asarray(m, dtype=bool) for m in _as_image_list(masks)]

    valids = []
    for p, g, m in zip(preds, gts, mask_list):
        ok = np.isfinite(g) & (g > 0) & np.isfinite(p)
        if m is not None:
            ok &= m
        valids.append(ok)

    fit = _fit_scale if mode == "scale" else _fit_scale_shift

    pred_all = []
    gt_all = []
    if per == "sequence":
        pv = np.concatenate([p[ok] for p, ok in zip(preds, valids)])
        gv = np.concatenate([g[ok] for g, ok in zip(gts, valids)])
        if pv.size == 0:
            raise EmptyValidMask("no valid pixels in sequence")
        s, b = fit(pv, gv)
        pred_all.append(s * pv + b)
        gt_all.append(gv)
    else:
        for k, (p, g, ok) in enumerate(zip(preds, gts, valids)):
            if not np.any(ok):
                raise EmptyValidMask(f"no valid pixels in image {k}")
            s, b = fit(p[ok], g[ok])
            pred_all.append(s * p[ok] + b)
            gt_all.append(g[ok])
    pa = np.concatenate(pred_all)
    ga = np.concatenate(gt_all)

    abs_rel = float(np.mean(np.abs(pa - ga) / ga))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.maximum(pa / ga, ga / pa)
    ratio = np.where(pa > 0, ratio, np.inf)
    delta = float(np.mean(ratio < 1.25))
    return DepthResult(abs_rel, delta)


@dataclass
class MetricReport:
    """Named scalar results plus the conventions under which they were computed."""

    values: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def add(self, name, value):
        value = float(value)
        if not np.isfinite(value):
            raise ValueError(f"metric {name!r} is not finite: {value}")
        self.values[name] = value

    def merge(self, other: "MetricReport"):
        self.values.update(other.values)
        self.metadata.update(other.metadata)

    def to_json(self, indent=2):
        return json.dumps(
            {"values": self.values, "metadata": self.metadata},
            indent=indent, sort_keys=True,
        )

    def to_csv(self):
        lines = ["metric,value"]
        for name in sorted(self.values):
            lines.append(f"{name},{self.values[name]!r}")
        return "\n".join(lines) + "\n"
