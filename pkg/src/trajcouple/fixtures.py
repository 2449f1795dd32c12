"""Seeded random fixtures for gradient verification sweeps.

Each fixture is a small coupled problem with random grids, tracks, pose
tangents (deliberately nonzero, so the left-Jacobian chain is exercised),
targets, gating, and a mix of visible/occluded samples.  The Huber delta
is chosen away from every residual norm so central differences stay in a
smooth region.
"""

from __future__ import annotations

import numpy as np

from .grad import GRIDS, POSES, TRACKS, ParamLayout, finite_diff_check
from .losses import CouplingProblem, LossConfig, pose_stacks, transform_samples
from .pointmap import bilinear_gather
from .pose import PoseTangent, exp_map

# (term, block) pairs with a live (non-detached) dependency; only these are
# finite-difference checkable, since differencing a detached factor would
# measure a derivative the routing deliberately discards.
TERM_BLOCKS = {
    "cons_pointmap": (GRIDS,),
    "cons_track": (TRACKS,),
    "cam_pose": (POSES,),
    "cam_track": (TRACKS,),
    "anchor": (POSES, GRIDS),
}


def _random_pose(rng, rot_scale=0.4, trans_scale=0.5):
    tangent = PoseTangent(
        rot_scale * rng.standard_normal(3), trans_scale * rng.standard_normal(3)
    )
    return exp_map(tangent)


def _pick_safe_delta(norms, guard=1e-3):
    """Pick a Huber delta at least `guard` away from every residual norm."""
    norms = np.sort(np.unique(np.round(norms, 12)))
    for delta in np.linspace(0.03, 1.5, 197):
        if norms.size == 0 or np.min(np.abs(norms - delta)) > guard:
            return float(delta)
    return float(np.max(norms) + 10 * guard if norms.size else 0.05)


def random_coupling_fixture(
    seed, n_tracks=5, n_frames=4, height=6, width=7, selfsup=False
):
    """Build a (problem, store) pair with fully random smooth-regime state."""
    rng = np.random.default_rng(seed)
    layout = ParamLayout(n_tracks, n_frames, height, width)
    store = layout.make_store()

    grids = store.view(GRIDS, layout.grids_shape())
    yy, xx = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    base_surface = np.stack(
        [0.1 * xx, 0.1 * yy, 1.0 + 0.05 * np.sin(xx + 0.7 * yy)], axis=-1
    )
    grids[:] = base_surface[None] + 0.1 * rng.standard_normal(grids.shape)

    q = np.empty((n_tracks, n_frames, 2))
    q[..., 0] = rng.uniform(0.3, width - 1.3, size=(n_tracks, n_frames))
    q[..., 1] = rng.uniform(0.3, height - 1.3, size=(n_tracks, n_frames))

    tracks = store.view(TRACKS, layout.tracks_shape())
    tracks[:] = rng.standard_normal((n_tracks, n_frames, 3)) * 0.5 + np.array([0, 0, 1.0])

    visibility = rng.uniform(0.2, 1.0, size=(n_tracks, n_frames))
    occluded = rng.random((n_tracks, n_frames)) < 0.15
    visibility[occluded] = 0.0
    visibility[0, :] = np.maximum(visibility[0, :], 0.5)

    static_mask = rng.random((n_tracks, n_frames)) < 0.7
    # keep one fully visible, fully gated track so the pose path has signal
    static_mask[0, :] = True

    base_poses = [_random_pose(rng) for _ in range(n_frames)]
    tangents = store.view(POSES, layout.poses_shape())
    tangents[:] = 0.3 * rng.standard_normal((n_frames, 6))

    targets = rng.standard_normal((n_tracks, n_frames, 3)) * 0.5

    config = LossConfig(
        use_cons=True, use_cam=not selfsup, use_anchor=selfsup, tau_static=0.05
    )
    problem = CouplingProblem(
        layout=layout,
        base_rel_poses=base_poses,
        query_pixels=q,
        visibility=visibility,
        static_mask=static_mask,
        targets=None if selfsup else targets,
        config=config,
        anchor=0,
    )

    # Residual norms of every active term, for the delta kink guard.
    norms = _residual_norms(problem, store)
    problem.config = LossConfig(
        **{**config.to_dict(), "delta": _pick_safe_delta(norms)}
    )
    return problem, store


def _residual_norms(problem, store):
    track_pts, grid_stack, tangents = problem.views(store)
    vis = problem.visibility
    valid = vis >= problem.config.min_weight
    ii, tt = np.nonzero(valid)
    out = []
    if ii.size:
        x, y = problem.query_pixels[ii, tt, 0], problem.query_pixels[ii, tt, 1]
        p_tilde, _, _, _ = bilinear_gather(grid_stack, tt, x, y)
        out.append(np.linalg.norm(track_pts[ii, tt] - p_tilde, axis=1))
        stacks = pose_stacks(problem.base_rel_poses, tangents)
        yv, _ = transform_samples(stacks, tt, track_pts[ii, tt])
        if problem.targets is not None:
            out.append(np.linalg.norm(yv - problem.targets[ii, tt], axis=1))
        yv2, _ = transform_samples(stacks, tt, p_tilde)
        ax, ay = problem.query_pixels[ii, problem.anchor, 0], problem.query_pixels[ii, problem.anchor, 1]
        p_x, _, _, _ = bilinear_gather(
            grid_stack, np.full(ii.shape, problem.anchor, dtype=np.int64), ax, ay
        )
        out.append(np.linalg.norm(yv2 - p_x, axis=1))
    return np.concatenate(out) if out else np.zeros(0)


def _anchor_grid_indices(problem, rng, count):
    """Grid indices restricted to the anchor frame (the live side of the anchor term)."""
    lo = problem.layout.grid_base(problem.anchor, 0, 0)
    hi = problem.layout.grid_base(problem.anchor, problem.layout.height - 1,
                                  problem.layout.width - 1) + 3
    return rng.integers(lo, hi, size=count)


def pick_indices(problem, store, term, block, rng, count=6):
    """Sample indices of `block` that the given term may legitimately touch."""
    size = store[block].size
    if term == "anchor" and block == GRIDS:
        return _anchor_grid_indices(problem, rng, count)
    return rng.integers(0, size, size=count)


def gradcheck_sweep(
    problem, store, h=1e-5, tol=1e-4, n_indices=6, seed=0, corrupt=False
):
    """Finite-difference verification rows for every active (term, block) pair.

    Returns a list of dicts with keys term, block, max_rel_err, passed.
    With corrupt=True a bias is added to one analytic gradient entry per
    row, which must flip the row to failed (harness self-test hook).
    """
    rng = np.random.default_rng(seed)
    rows = []
    for term in problem.active_terms():
        for block in TERM_BLOCKS[term]:
            indices = pick_indices(problem, store, term, block, rng, n_indices)

            def loss_fn(s, tape=None, _term=term):
                value = problem.evaluate_term(s, _term, tape)
                if corrupt and tape is not None:
                    tape.grad(block)[indices[0]] += 1.0 + abs(
                        10.0 * tape.grad(block)[indices[0]]
                    )
                return value

            err = finite_diff_check(loss_fn, store, block, indices, h)
            rows.append(
                {
                    "term": term,
                    "block": block,
                    "max_rel_err": err,
                    "passed": bool(err < tol),
                }
            )
    return rows
