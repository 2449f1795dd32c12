"""Joint first-order refinement of grids, tracks, and pose tangents.

Plain gradient descent with per-block step sizes and a backtracking line
search: the shared step scale doubles after every accepted step and halves
on increase, up to a bounded number of halvings.  Pose updates are applied
by exponentiating the tangent block onto the base poses after every
accepted step, so gradients are always taken at a freshly centered chart.

In self-supervised mode the provisional static mask is recomputed from the
current state at the start of every epoch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigInvalid, DegenerateConfiguration, Diverged
from .grad import GRIDS, POSES, TRACKS, ParamStore, Tape
from .losses import CouplingProblem, LossConfig
from .pose import compose, inverse, log_map
from .synthetic import SyntheticScene, build_problem
from . import metrics as _metrics

_BLOCK_STEP_FIELDS = {GRIDS: "step_grids", TRACKS: "step_tracks", POSES: "step_poses"}


@dataclass
class OptimConfig:
    # per-block steps tuned for unit-diagonal scenes with tens of tracks;
    # poses run faster than the coupled drift of tracks and grids
    step_grids: float = 0.01
    step_tracks: float = 0.02
    step_poses: float = 0.01
    max_epochs: int = 200
    tol: float = 1e-8
    tol_window: int = 5
    clip_norm: float = 0.0
    max_backtracks: int = 20
    step_growth: float = 2.0
    max_step_scale: float = 1024.0
    grad_tol: float = 1e-12
    mode: str = "supervised"
    loss: LossConfig = field(default_factory=LossConfig)

    def validate(self):
        for name in ("step_grids", "step_tracks", "step_poses"):
            if getattr(self, name) <= 0:
                raise ConfigInvalid(name, "must be positive")
        if self.max_epochs < 1:
            raise ConfigInvalid("max_epochs", "must be >= 1")
        if self.max_backtracks < 0:
            raise ConfigInvalid("max_backtracks", "must be >= 0")
        if self.mode not in ("supervised", "selfsup"):
            raise ConfigInvalid("mode", "must be 'supervised' or 'selfsup'")
        self.loss.validate()
        return self

    def to_dict(self):
        d = {f: getattr(self, f) for f in self.__dataclass_fields__ if f != "loss"}
        d["loss"] = self.loss.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        loss = LossConfig.from_dict(d.pop("loss", {}))
        known = set(cls.__dataclass_fields__) - {"loss"}
        unknown = set(d) - known
        if unknown:
            raise ConfigInvalid(sorted(unknown)[0], "unknown optimizer config field")
        return cls(loss=loss, **d).validate()

    @classmethod
    def from_json_file(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class EpochRecord:
    epoch: int
    total: float
    cons: float
    cam: float
    selfsup: float
    step_scale: float
    accepted: bool

    def to_dict(self):
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


@dataclass
class OptimReport:
    epochs: list
    termination: str
    initial_metrics: dict
    final_metrics: dict

    @property
    def n_epochs(self):
        return len(self.epochs)

    def metric_deltas(self):
        return {
            k: self.final_metrics[k] - self.initial_metrics[k]
            for k in self.initial_metrics
            if k in self.final_metrics
        }

    def to_dict(self):
        return {
            "termination": self.termination,
            "n_epochs": self.n_epochs,
            "initial_metrics": self.initial_metrics,
            "final_metrics": self.final_metrics,
            "metric_deltas": self.metric_deltas(),
            "epochs": [e.to_dict() for e in self.epochs],
        }


def pose_tangent_rms(est_poses, gt_poses):
    """RMS norm of the left-residual tangents log(est * inv(gt)) over frames."""
    sq = 0.0
    for est, gt in zip(est_poses, gt_poses):
        sq += log_map(compose(est, inverse(gt))).norm() ** 2
    return float(np.sqrt(sq / max(len(est_poses), 1)))


def scene_error_metrics(scene: SyntheticScene, problem: CouplingProblem, store: ParamStore) -> dict:
    """Errors of the current state against the scene's ground truth."""
    layout = problem.layout
    est_grids = store.view(GRIDS, layout.grids_shape())
    est_tracks = store.view(TRACKS, layout.tracks_shape())
    rel_est = problem.current_poses(store)

    out = {
        "pose_tangent_rms": pose_tangent_rms(rel_est, scene.rel_poses),
        "grid_err": float(
            np.mean(np.linalg.norm(est_grids - scene.gt_grids, axis=-1))
        ),
    }
    vis = scene.visibility >= problem.config.min_weight
    if np.any(vis):
        out["track_err"] = float(
            np.mean(np.linalg.norm((est_tracks - scene.gt_tracks)[vis], axis=-1))
        )
    else:
        out["track_err"] = 0.0
    # gauge-fix the relative poses at the ground-truth anchor to get a trajectory
    anchor_pose = scene.cam_poses[scene.config.anchor]
    est_traj = [compose(anchor_pose, rel) for rel in rel_est]
    try:
        pair = _metrics.TrajectoryPair(est_traj, scene.cam_poses)
        out["ate"] = _metrics.ate(pair)
    except (DegenerateConfiguration, ValueError):
        pass
    return out


def optimize(store: ParamStore, scene: SyntheticScene, cfg: OptimConfig) -> OptimReport:
    """Refine the store in place under the coupled objective.

    Raises Diverged when, after exhausting the backtracking halvings, the
    best candidate loss still exceeds ten times the initial loss.
    """
    cfg.validate()
    problem = build_problem(scene, cfg.loss, mode=cfg.mode)
    refresh_mask = cfg.mode == "selfsup"

    initial_metrics = scene_error_metrics(scene, problem, store)
    tape = Tape(store)
    candidate = store.copy()
    steps = {b: getattr(cfg, f) for b, f in _BLOCK_STEP_FIELDS.items()}

    epochs = []
    termination = "max_epochs"
    initial_loss = None
    step_scale = 1.0
    window = []

    for epoch in range(1, cfg.max_epochs + 1):
        if refresh_mask:
            problem.refresh_static_mask(store)
        tape.reset()
        bd = problem.evaluate(store, tape)
        loss = bd.total
        if initial_loss is None:
            initial_loss = loss
            initial_metrics["loss"] = loss

        record = EpochRecord(
            epoch, loss, bd.cons_value, bd.cam_value, bd.selfsup_value,
            step_scale, False,
        )
        epochs.append(record)

        if loss == 0.0 or tape.max_abs() < cfg.grad_tol:
            termination = "stationary"
            break

        grads = {}
        for block in steps:
            g = tape.grad(block).copy()
            if cfg.clip_norm > 0.0:
                nrm = float(np.linalg.norm(g))
                if nrm > cfg.clip_norm:
                    g *= cfg.clip_norm / nrm
            grads[block] = g

        trial = min(step_scale * cfg.step_growth, cfg.max_step_scale)
        accepted = False
        cand_loss = np.inf
        for _ in range(cfg.max_backtracks + 1):
            store.copy_into(candidate)
            for block, g in grads.items():
                candidate[block] -= trial * steps[block] * g
            cand_loss = problem.evaluate(candidate).total
            if cand_loss < loss:
                accepted = True
                break
            trial *= 0.5
        if not accepted:
            if cand_loss > 10.0 * initial_loss:
                raise Diverged(
                    f"loss {cand_loss:.6g} above 10x initial {initial_loss:.6g} "
                    f"after {cfg.max_backtracks} halvings"
                )
            termination = "stalled"
            break

        candidate.copy_into(store)
        problem.fold_pose_tangents(store)
        record.step_scale = trial
        record.accepted = True
        step_scale = trial

        window.append(loss)
        if len(window) > cfg.tol_window:
            window.pop(0)
            drop = (window[0] - loss) / max(abs(window[0]), 1e-300)
            if drop < cfg.tol:
                termination = "converged"
                break

    final_metrics = scene_error_metrics(scene, problem, store)
    final_metrics["loss"] = problem.evaluate(store).total
    return OptimReport(epochs, termination, initial_metrics, final_metrics)


# Ablation configurations: which coupling terms are active, and whether the
# camera term is gated by the static mask.
ABLATIONS = {
    "none": dict(mode="supervised", use_cons=False, use_cam=False, use_anchor=False),
    "cons": dict(mode="supervised", use_cons=True, use_cam=False, use_anchor=False),
    "cam": dict(mode="supervised", use_cons=False, use_cam=True, use_anchor=False),
    "cam_ungated": dict(
        mode="supervised", use_cons=False, use_cam=True, use_anchor=False,
        gate_static=False,
    ),
    "cons_cam": dict(mode="supervised", use_cons=True, use_cam=True, use_anchor=False),
    "cons_cam_ungated": dict(
        mode="supervised", use_cons=True, use_cam=True, use_anchor=False,
        gate_static=False,
    ),
    "selfsup": dict(mode="selfsup", use_cons=True, use_cam=False, use_anchor=True),
    "full": dict(mode="supervised", use_cons=True, use_cam=True, use_anchor=True),
}


def ablation_config(name: str, base: Optional[OptimConfig] = None) -> OptimConfig:
    """Optimizer config for a named ablation, on top of an optional base."""
    if name not in ABLATIONS:
        raise ConfigInvalid("ablation", f"unknown ablation {name!r}; have {sorted(ABLATIONS)}")
    overrides = dict(ABLATIONS[name])
    mode = overrides.pop("mode")
    base = base if base is not None else OptimConfig()
    loss = LossConfig.from_dict({**base.loss.to_dict(), **overrides})
    cfg = OptimConfig.from_dict({**base.to_dict(), "loss": loss.to_dict(), "mode": mode})
    return cfg
