"""Discrete measures and the constructors that turn raw data into them.

A :class:`DiscreteMeasure` is a weighted point cloud ``sum_i w_i delta_{x_i}``
in R^D.  Fibers (3D polylines) are encoded as single atoms of R^{3P} after
arc-length resampling, and track density maps become one atom per nonzero
voxel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class CostSpec:
    """Ground cost ``C(x, y) = ||x - y||^p / p`` with ``1 <= p <= 2``."""

    p: float = 2.0

    def __post_init__(self):
        if not (1.0 <= self.p <= 2.0):
            raise ValueError(f"cost exponent p must lie in [1, 2], got {self.p}")

    def __call__(self, x, y):
        return cost(x, y, self)


def cost(x, y, spec: CostSpec = CostSpec()):
    """Evaluate ``||x - y||^p / p`` along the last axis.

    Broadcasts like numpy, so ``cost(x[:, None], y[None, :])`` gives a full
    cost matrix (only do that for small inputs).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape[-1] != y.shape[-1]:
        raise ValueError(f"dimension mismatch: {x.shape[-1]} vs {y.shape[-1]}")
    dist = np.sqrt(np.sum((x - y) ** 2, axis=-1))
    if spec.p == 2.0:
        out = 0.5 * dist**2
    else:
        out = dist**spec.p / spec.p
    return out[()] if np.ndim(out) == 0 else out


class DiscreteMeasure:
    """Weighted sum of Dirac masses.

    Parameters
    ----------
    points : (N, D) array_like
        Atom locations.  A 1D array is read as N atoms in R^1.
    weights : (N,) array_like, optional
        Nonnegative masses, uniform ``1/N`` by default.  Atoms whose weight is
        exactly zero are dropped; ``kept`` maps surviving atoms back to input
        rows.

    The arrays are copied and made read-only, so measures can be shared
    freely across threads.
    """

    __slots__ = ("points", "weights", "kept", "_mass")

    def __init__(self, points, weights=None):
        pts = np.array(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise ValueError("points must be a nonempty (N, D) array")
        if weights is None:
            w = np.full(pts.shape[0], 1.0 / pts.shape[0])
        else:
            w = np.array(weights, dtype=float).reshape(-1)
        if w.shape[0] != pts.shape[0]:
            raise ValueError(f"{pts.shape[0]} points but {w.shape[0]} weights")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("weights must be finite and nonnegative")
        kept = np.flatnonzero(w > 0)
        if kept.size == 0:
            raise ValueError("total mass must be positive")
        if kept.size < w.size:
            pts, w = pts[kept], w[kept]
        pts = np.ascontiguousarray(pts)
        for arr in (pts, w, kept):
            arr.flags.writeable = False
        self.points = pts
        self.weights = w
        self.kept = kept
        self._mass = math.fsum(w)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def mass(self) -> float:
        return self._mass

    @property
    def log_weights(self) -> np.ndarray:
        return np.log(self.weights)

    def __len__(self):
        return self.n

    def __repr__(self):
        return f"DiscreteMeasure(n={self.n}, dim={self.dim}, mass={self.mass:.6g})"

    def with_points(self, points) -> "DiscreteMeasure":
        """Same weights, new locations (used by position descent)."""
        return DiscreteMeasure(points, self.weights)

    def scaled(self, factor: float) -> "DiscreteMeasure":
        """Same locations, weights multiplied by ``factor``."""
        return DiscreteMeasure(self.points, self.weights * factor)


# --- fibers ---------------------------------------------------------------


@dataclass
class FiberSet:
    """Ordered 3D polylines plus the number of points P to resample them to."""

    fibers: list
    resample_count: int = 20

    def __post_init__(self):
        self.fibers = [np.asarray(f, dtype=float) for f in self.fibers]
        if self.resample_count < 2:
            raise ValueError("resample_count must be >= 2")
        for i, f in enumerate(self.fibers):
            if f.ndim != 2 or f.shape[1] != 3 or f.shape[0] < 2:
                raise ValueError(f"fiber {i} must be an (n >= 2, 3) array, got shape {f.shape}")

    def __len__(self):
        return len(self.fibers)


def resample_polyline(points, count: int) -> np.ndarray:
    """Resample a polyline to ``count`` points equally spaced in arc length.

    Linear interpolation between the input vertices.  Raises if the polyline
    has zero length.
    """
    pts = np.asarray(points, dtype=float)
    seg = np.sqrt(np.sum(np.diff(pts, axis=0) ** 2, axis=1))
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] <= 0:
        raise ValueError("degenerate polyline (zero length)")
    t = np.linspace(0.0, s[-1], count)
    # duplicate vertices give zero-length segments; np.interp needs increasing xp
    keep = np.concatenate([[True], seg > 0])
    s, pts = s[keep], pts[keep]
    return np.column_stack([np.interp(t, s, pts[:, d]) for d in range(pts.shape[1])])


def encode_fibers(fs: FiberSet) -> DiscreteMeasure:
    """One atom per fiber in R^{3P}, pre-scaled by 1/sqrt(P), uniform weights.

    With the scaling folded into the coordinates, the plain Euclidean norm on
    R^{3P} is the root-mean-square distance between corresponding points.
    """
    P = fs.resample_count
    atoms = np.empty((len(fs), 3 * P))
    for i, f in enumerate(fs.fibers):
        try:
            atoms[i] = resample_polyline(f, P).ravel()
        except ValueError:
            raise ValueError(f"fiber {i} is degenerate: all of its points coincide") from None
    atoms /= math.sqrt(P)
    return DiscreteMeasure(atoms)


def decode_fiber(atom, P: int) -> np.ndarray:
    """Inverse of the encoding for a single atom: (P, 3) polyline in input units."""
    return np.asarray(atom, dtype=float).reshape(P, 3) * math.sqrt(P)


def reverse_atoms(points, P: int) -> np.ndarray:
    """Reverse the point order of every encoded fiber in an (N, 3P) array."""
    pts = np.asarray(points, dtype=float)
    return pts.reshape(pts.shape[0], P, 3)[:, ::-1, :].reshape(pts.shape[0], 3 * P)


@dataclass(frozen=True)
class FlipAugmented:
    """A flip-augmented fiber measure.

    Atoms ``0..N-1`` are the original fibers and ``N..2N-1`` their reversals;
    ``flip_map[k] = (original index, orientation)`` with orientation 0 for
    the original traversal and 1 for the flipped one.
    """

    measure: DiscreteMeasure
    flip_map: np.ndarray
    n_original: int


def flip_augment(m: DiscreteMeasure, P: int) -> FlipAugmented:
    """Add the reversed copy of each encoded fiber, halving every weight."""
    if m.dim != 3 * P:
        raise ValueError(f"atom dimension {m.dim} is not 3*P = {3 * P}")
    n = m.n
    pts = np.concatenate([m.points, reverse_atoms(m.points, P)])
    w = np.concatenate([m.weights, m.weights]) * 0.5
    flip_map = np.column_stack([np.tile(np.arange(n), 2), np.repeat([0, 1], n)])
    flip_map.flags.writeable = False
    return FlipAugmented(DiscreteMeasure(pts, w), flip_map, n)


# --- density maps ---------------------------------------------------------


@dataclass
class DensityMap:
    """Voxel grid of nonnegative values, with voxel size and origin in mm."""

    values: np.ndarray
    voxel_size: float = 1.0
    origin: Sequence[float] = field(default_factory=lambda: (0.0, 0.0, 0.0))

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)
        if self.values.ndim != 3:
            raise ValueError("density values must be a 3D grid")
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if np.any(self.values < 0) or not np.all(np.isfinite(self.values)):
            raise ValueError("density values must be finite and nonnegative")

    @property
    def shape(self):
        return self.values.shape

    @classmethod
    def from_sparse(cls, shape, voxel_size, origin, ijk, values) -> "DensityMap":
        grid = np.zeros(tuple(int(s) for s in shape))
        ijk = np.asarray(ijk, dtype=int).reshape(-1, 3)
        if ijk.size and (np.any(ijk < 0) or np.any(ijk >= np.asarray(grid.shape))):
            raise ValueError("voxel index outside the grid")
        grid[tuple(ijk.T)] = values
        return cls(grid, voxel_size, origin)


def density_to_measure(d: DensityMap) -> DiscreteMeasure:
    """Atoms at the centers of nonzero voxels, weights normalized to sum 1."""
    ijk = np.argwhere(d.values > 0)
    if ijk.shape[0] == 0:
        raise ValueError("density map has no nonzero voxel")
    vals = d.values[tuple(ijk.T)]
    pts = d.origin + (ijk + 0.5) * d.voxel_size
    return DiscreteMeasure(pts, vals / math.fsum(vals))
