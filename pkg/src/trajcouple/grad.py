"""Parameter blocks, gradient tape with routing masks, and a finite-difference checker.

The optimization state lives in three named flat blocks:

* ``grids``  — all pointmap values, frame-major ``(t, y, x, component)``
* ``tracks`` — all trajectory points, track-major ``(i, t, component)``
* ``poses``  — per-frame 6-vector tangents ``(omega, upsilon)`` relative to
  held base poses

Losses accumulate analytic partial derivatives into a Tape; every
accumulation carries a RoutingMask that says which blocks the emitting
term is allowed to update.  Stop-gradient boundaries are therefore
structural: a blocked accumulation is a no-op, so a detached factor can
never leak gradient into its block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import IndexOutOfRange, UnknownBlock

GRIDS = "grids"
TRACKS = "tracks"
POSES = "poses"

_FLAG_FOR_BLOCK = {TRACKS: "to_tracks", GRIDS: "to_pointmaps", POSES: "to_poses"}


@dataclass(frozen=True)
class RoutingMask:
    """Which parameter blocks a loss term may update."""

    to_tracks: bool = False
    to_pointmaps: bool = False
    to_poses: bool = False

    def __post_init__(self):
        if not (self.to_tracks or self.to_pointmaps or self.to_poses):
            raise ValueError("routing mask must admit at least one block")

    def admits(self, block: str) -> bool:
        try:
            return getattr(self, _FLAG_FOR_BLOCK[block])
        except KeyError:
            raise UnknownBlock(f"unknown block {block!r}")


ROUTE_TRACKS = RoutingMask(to_tracks=True)
ROUTE_GRIDS = RoutingMask(to_pointmaps=True)
ROUTE_POSES = RoutingMask(to_poses=True)
ROUTE_POSES_AND_GRIDS = RoutingMask(to_poses=True, to_pointmaps=True)


class ParamStore:
    """Named flat float64 parameter blocks of fixed sizes."""

    def __init__(self, blocks: dict):
        self.blocks = {
            name: np.ascontiguousarray(arr, dtype=np.float64).reshape(-1)
            for name, arr in blocks.items()
        }

    @classmethod
    def from_sizes(cls, sizes: dict):
        return cls({name: np.zeros(size) for name, size in sizes.items()})

    def __getitem__(self, name):
        try:
            return self.blocks[name]
        except KeyError:
            raise UnknownBlock(f"unknown block {name!r}")

    def __setitem__(self, name, values):
        arr = self[name]
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if values.size != arr.size:
            raise ValueError(f"size mismatch for block {name!r}")
        if values is not arr:
            np.copyto(arr, values)

    def __contains__(self, name):
        return name in self.blocks

    def view(self, name, shape):
        """Reshaped view sharing memory with the flat block."""
        return self[name].reshape(shape)

    def sizes(self):
        return {name: arr.size for name, arr in self.blocks.items()}

    def copy(self):
        return ParamStore({name: arr.copy() for name, arr in self.blocks.items()})

    def copy_into(self, other: "ParamStore"):
        for name, arr in self.blocks.items():
            np.copyto(other[name], arr)


class Tape:
    """Per-block gradient accumulator aligned with a ParamStore layout."""

    def __init__(self, sizes_or_store):
        if isinstance(sizes_or_store, ParamStore):
            sizes = sizes_or_store.sizes()
        else:
            sizes = dict(sizes_or_store)
        self.grads = {name: np.zeros(size) for name, size in sizes.items()}

    def reset(self):
        for g in self.grads.values():
            g.fill(0.0)

    def grad(self, name):
        try:
            return self.grads[name]
        except KeyError:
            raise UnknownBlock(f"unknown block {name!r}")

    def accumulate(self, block, index, partial, routing: RoutingMask):
        """Add a single partial derivative iff routing admits the block."""
        g = self.grad(block)
        if not routing.admits(block):
            return
        if not 0 <= index < g.size:
            raise IndexOutOfRange(f"index {index} outside block {block!r} ({g.size})")
        g[index] += partial

    def scatter(self, block, indices, partials, routing: RoutingMask):
        """Vectorized accumulate with repeated-index support (np.add.at)."""
        g = self.grad(block)
        if not routing.admits(block):
            return
        indices = np.asarray(indices, dtype=np.int64).reshape(-1)
        partials = np.asarray(partials, dtype=np.float64).reshape(-1)
        if indices.size == 0:
            return
        if indices.min() < 0 or indices.max() >= g.size:
            raise IndexOutOfRange(f"indices outside block {block!r} ({g.size})")
        np.add.at(g, indices, partials)

    def max_abs(self):
        return max(
            (float(np.max(np.abs(g))) if g.size else 0.0) for g in self.grads.values()
        )


@dataclass(frozen=True)
class ParamLayout:
    """Index arithmetic for the standard three-block layout."""

    n_tracks: int
    n_frames: int
    height: int
    width: int

    def sizes(self):
        return {
            GRIDS: self.n_frames * self.height * self.width * 3,
            TRACKS: self.n_tracks * self.n_frames * 3,
            POSES: self.n_frames * 6,
        }

    def make_store(self):
        return ParamStore.from_sizes(self.sizes())

    def grid_base(self, t, y, x):
        """Flat index of the first component of grids[t, y, x]."""
        return ((np.asarray(t) * self.height + np.asarray(y)) * self.width + np.asarray(x)) * 3

    def track_base(self, i, t):
        return (np.asarray(i) * self.n_frames + np.asarray(t)) * 3

    def pose_base(self, t):
        return np.asarray(t) * 6

    def grids_shape(self):
        return (self.n_frames, self.height, self.width, 3)

    def tracks_shape(self):
        return (self.n_tracks, self.n_frames, 3)

    def poses_shape(self):
        return (self.n_frames, 6)


def vector_indices(base):
    """Expand base indices of 3-vectors into per-component flat indices."""
    base = np.asarray(base, dtype=np.int64)
    return (base[..., None] + np.arange(3)).reshape(-1)


def finite_diff_check(
    loss_fn, store: ParamStore, block, sample_indices, h, rel_floor=1e-6, scale_h=True
):
    """Max relative error between tape gradients and central differences.

    ``loss_fn(store, tape=None) -> float`` must be deterministic.  The
    analytic gradient is taken from one taped evaluation; each sampled
    index is then perturbed by ``+/- h`` (scaled by the parameter magnitude
    when scale_h is set) and compared.  The relative error uses
    ``|a - n| / max(|a|, |n|, rel_floor)`` so that zero-gradient entries
    whose numeric difference is pure roundoff do not explode.
    """
    tape = Tape(store)
    loss_fn(store, tape)
    analytic = tape.grad(block)
    arr = store[block]
    worst = 0.0
    for idx in np.asarray(sample_indices, dtype=np.int64).reshape(-1):
        if not 0 <= idx < arr.size:
            raise IndexOutOfRange(f"index {idx} outside block {block!r}")
        theta = arr[idx]
        step = h * max(1.0, abs(theta)) if scale_h else h
        arr[idx] = theta + step
        up = loss_fn(store, None)
        arr[idx] = theta - step
        down = loss_fn(store, None)
        arr[idx] = theta
        numeric = (up - down) / (2.0 * step)
        a = analytic[idx]
        err = abs(a - numeric) / max(abs(a), abs(numeric), rel_floor)
        worst = max(worst, err)
    return worst
