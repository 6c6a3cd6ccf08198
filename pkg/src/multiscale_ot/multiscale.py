"""Coarse-to-fine Sinkhorn: K-means coarsening and kernel truncation.

The first scales of the epsilon schedule run on the K-means centroids of
both measures.  Once ``sigma`` drops below twice the largest cluster radius,
the coarse duals are copied onto the fine atoms and the remaining scales use
block-sparse reductions: a pair of clusters ``(I, J)`` is skipped whenever
every plan entry between them is provably below ``exp(-theta)`` times its
row total.  The mask is rebuilt from the current duals at every fine scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from . import _kernels
from .measures import DiscreteMeasure
from .sinkhorn import (
    DenseReducer,
    DualPotentials,
    SolverParams,
    check_schedule,
    diameter_estimate,
    final_update,
    make_schedule,
    sinkhorn_steps,
)

DEFAULT_THETA = 20.0


@dataclass(frozen=True)
class ClusterTree:
    """One-level K-means coarsening of a measure.

    ``order[ptr[k]:ptr[k+1]]`` are the input indices of the atoms of cluster
    ``k``; ``labels[i]`` is the cluster of input atom ``i``.
    """

    centroids: np.ndarray
    weights: np.ndarray
    order: np.ndarray
    ptr: np.ndarray
    labels: np.ndarray
    radii: np.ndarray

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.ptr)

    def coarse_measure(self) -> DiscreteMeasure:
        return DiscreteMeasure(self.centroids, self.weights)

    def cluster_max(self, sorted_values) -> np.ndarray:
        """Max of a per-atom array (in cluster order) over each cluster."""
        return np.maximum.reduceat(sorted_values, self.ptr[:-1])


def _farthest_point_seeds(x, K, rng):
    first = int(rng.integers(x.shape[0]))
    seeds = [first]
    dist = np.sum((x - x[first]) ** 2, axis=1)
    for _ in range(1, K):
        nxt = int(np.argmax(dist))
        seeds.append(nxt)
        np.minimum(dist, np.sum((x - x[nxt]) ** 2, axis=1), out=dist)
    return x[seeds].copy()


def kmeans_coarsen(m: DiscreteMeasure, K: int, seed: int = 0,
                   max_iter: int = 100) -> ClusterTree:
    """Mass-weighted Lloyd iterations from farthest-point seeds.

    Stops after ``max_iter`` sweeps or when no centroid moves by more than
    ``1e-9`` times the bounding-box diagonal.  Clusters that end up empty
    (only possible with duplicate points) are dropped, so the tree can have
    fewer than ``K`` clusters.
    """
    if not 1 <= K <= m.n:
        raise ValueError(f"need 1 <= K <= N, got K={K}, N={m.n}")
    x, w = m.points, m.weights
    rng = np.random.default_rng(seed)
    tol = 1e-9 * float(np.sqrt(np.sum((x.max(axis=0) - x.min(axis=0)) ** 2)))
    cent = _farthest_point_seeds(x, K, rng)
    for _ in range(max_iter):
        _, labels = cKDTree(cent).query(x)
        mass = np.bincount(labels, weights=w, minlength=cent.shape[0])
        live = mass > 0
        new = np.column_stack([np.bincount(labels, weights=w * x[:, d], minlength=cent.shape[0])
                               for d in range(x.shape[1])])
        new[live] /= mass[live, None]
        new[~live] = cent[~live]
        shift = float(np.max(np.sqrt(np.sum((new - cent) ** 2, axis=1))))
        cent = new
        if shift <= tol:
            break
    _, labels = cKDTree(cent).query(x)
    # renumber so that only nonempty clusters remain
    used, labels = np.unique(labels, return_inverse=True)
    cent = cent[used]
    order = np.argsort(labels, kind="stable")
    counts = np.bincount(labels, minlength=used.size)
    ptr = np.concatenate([[0], np.cumsum(counts)])
    weights = np.array([math.fsum(w[order[ptr[k]:ptr[k + 1]]]) for k in range(used.size)])
    centroids = np.column_stack([np.bincount(labels, weights=w * x[:, d]) for d in range(x.shape[1])])
    centroids /= weights[:, None]
    single = counts == 1
    centroids[single] = x[order[ptr[:-1][single]]]
    radii = np.zeros(used.size)
    np.maximum.at(radii, labels, np.sqrt(np.sum((x - centroids[labels]) ** 2, axis=1)))
    return ClusterTree(centroids, weights, order, ptr, labels, radii)


@dataclass(frozen=True)
class TruncationMask:
    """Active (source cluster, target cluster) pairs, sorted and unique."""

    pairs: np.ndarray
    shape: tuple

    def __len__(self):
        return self.pairs.shape[0]

    def to_csr(self, out_axis: int):
        """CSR lists of kept clusters on the other axis, for each cluster of ``out_axis``."""
        out, src = self.pairs[:, out_axis], self.pairs[:, 1 - out_axis]
        idx = np.lexsort((src, out))
        counts = np.bincount(out, minlength=self.shape[out_axis])
        ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        return ptr, np.ascontiguousarray(src[idx], dtype=np.int64)

    def evaluated_pairs(self, sizes_src, sizes_tgt) -> int:
        return int(np.sum(sizes_src[self.pairs[:, 0]] * sizes_tgt[self.pairs[:, 1]]))

    @classmethod
    def full(cls, k_src, k_tgt):
        I, J = np.meshgrid(np.arange(k_src), np.arange(k_tgt), indexing="ij")
        return cls(np.column_stack([I.ravel(), J.ravel()]), (k_src, k_tgt))


def _cost_lower_bound(X, rX, Y, rY, p):
    dist = np.sqrt(np.maximum(np.sum((X[:, None, :] - Y[None, :, :]) ** 2, axis=-1), 0.0))
    gap = np.maximum(dist - rX[:, None] - rY[None, :], 0.0)
    return gap**p / p


def truncate(f, X, rX, g, Y, rY, eps, theta, p=2.0, damping=1.0) -> TruncationMask:
    """Keep ``(I, J)`` unless ``f_I / damping + g_J - C_min(I, J) < -theta * eps``.

    ``f`` and ``g`` are upper bounds of the duals over each cluster and
    ``C_min`` is the smallest cost any member pair can have, so a dropped
    block carries at most ``exp(-theta)`` of each row's mass.  The best pair
    of every row and column is always kept.
    """
    slack = (np.asarray(f)[:, None] / damping + np.asarray(g)[None, :]
             - _cost_lower_bound(X, rX, Y, rY, p))
    keep = slack >= -theta * eps
    keep[np.arange(slack.shape[0]), np.argmax(slack, axis=1)] = True
    keep[np.argmax(slack, axis=0), np.arange(slack.shape[1])] = True
    return TruncationMask(np.argwhere(keep), slack.shape)


def _loosen(f, lam):
    # one cross mask serves both update directions: bound f/lam and f at once
    f = np.asarray(f)
    return np.maximum(f, f / lam)


def kernel_truncation(tree_a: ClusterTree, tree_b: ClusterTree, coarse_duals: DualPotentials,
                      eps: float, theta: float = DEFAULT_THETA, p: float = 2.0,
                      damping: float = 1.0) -> TruncationMask:
    """Cross-pair mask from the cluster-level potentials of OT(alpha, beta).

    ``damping`` is the current unbalanced factor ``lambda``; with finite
    reach the softmin equals ``f / lambda`` at the fixed point, which the
    slack test must use.
    """
    if not theta > 0:
        raise ValueError("theta must be positive")
    if math.isinf(theta):
        return TruncationMask.full(tree_a.k, tree_b.k)
    return truncate(_loosen(coarse_duals.b_yx, damping), tree_a.centroids, tree_a.radii,
                    _loosen(coarse_duals.a_xy, damping), tree_b.centroids, tree_b.radii,
                    eps, theta, p)


def self_truncation(tree: ClusterTree, duals, eps, theta=DEFAULT_THETA, p=2.0, damping=1.0):
    """Mask for a self-transport reduction, from cluster upper bounds of its dual."""
    if math.isinf(theta):
        return TruncationMask.full(tree.k, tree.k)
    return truncate(duals, tree.centroids, tree.radii, duals, tree.centroids, tree.radii,
                    eps, theta, p, damping)


def coarse_duals_to_fine(tree_a: ClusterTree, tree_b: ClusterTree,
                         coarse_duals: DualPotentials) -> DualPotentials:
    """Every fine atom inherits the dual value of its cluster."""
    la, lb = tree_a.labels, tree_b.labels
    return DualPotentials(
        coarse_duals.a_xx[la], coarse_duals.b_yy[lb], coarse_duals.a_xy[lb], coarse_duals.b_yx[la],
        eps=coarse_duals.eps, damping=coarse_duals.damping, schedule=coarse_duals.schedule,
    )


class BlockReducer:
    """Block-sparse reductions over cluster-sorted copies of both measures.

    All vectors passed in and out are in cluster order; use ``permute`` /
    ``unpermute`` to convert from/to input order.
    """

    def __init__(self, a, b, tree_a, tree_b, p, masks):
        self.trees = {"x": tree_a, "y": tree_b}
        self.pts = {"x": np.ascontiguousarray(a.points[tree_a.order]),
                    "y": np.ascontiguousarray(b.points[tree_b.order])}
        self.logw = {"x": np.ascontiguousarray(a.log_weights[tree_a.order]),
                     "y": np.ascontiguousarray(b.log_weights[tree_b.order])}
        self.ptr = {"x": tree_a.ptr.astype(np.int64), "y": tree_b.ptr.astype(np.int64)}
        self.p = float(p)
        self.pairs = 0
        self.set_masks(masks)

    def set_masks(self, masks):
        """``masks`` maps "xy", "xx", "yy" to TruncationMask (source axis first)."""
        self.masks = dict(masks)
        sizes = {s: t.sizes for s, t in self.trees.items()}
        self.csr = {}
        self.counts = {}
        for key, mask in self.masks.items():
            s0, s1 = key[0], key[1]
            self.csr[(s1, s0)] = mask.to_csr(1)
            n = mask.evaluated_pairs(sizes[s0], sizes[s1])
            self.counts[(s1, s0)] = n
            if s0 != s1:
                self.csr[(s0, s1)] = mask.to_csr(0)
                self.counts[(s0, s1)] = n

    def size(self, side):
        return self.pts[side].shape[0]

    def permute(self, side, arr):
        return np.asarray(arr)[self.trees[side].order]

    def unpermute(self, side, arr):
        arr = np.asarray(arr)
        out = np.empty_like(arr)
        out[self.trees[side].order] = arr
        return out

    def lse(self, out, src, eps, h):
        res = np.empty(self.size(out))
        cptr, cidx = self.csr[(out, src)]
        _kernels.lse_blocks(self.pts[out], self.pts[src], self.logw[src],
                            np.ascontiguousarray(h, dtype=float), float(eps), self.p,
                            self.ptr[out], self.ptr[src], cptr, cidx, res)
        self.pairs += self.counts[(out, src)]
        return res

    def softmin(self, out, src, eps, h):
        return -eps * self.lse(out, src, eps, h)

    def apply(self, out, src, eps, h, bias, V):
        V = np.ascontiguousarray(V, dtype=float).reshape(self.size(src), -1)
        res = np.empty((self.size(out), V.shape[1]))
        cptr, cidx = self.csr[(out, src)]
        _kernels.apply_blocks(self.pts[out], self.pts[src], self.logw[src],
                              np.ascontiguousarray(h, dtype=float),
                              np.ascontiguousarray(bias, dtype=float), float(eps), self.p, V,
                              self.ptr[out], self.ptr[src], cptr, cidx, res)
        self.pairs += self.counts[(out, src)]
        return res


@dataclass
class MultiscaleSparsity:
    """Cluster trees and final masks attached to multiscale duals."""

    tree_a: ClusterTree
    tree_b: ClusterTree
    masks: dict
    p: float

    def reducer(self, a, b) -> BlockReducer:
        return BlockReducer(a, b, self.tree_a, self.tree_b, self.p, self.masks)


def _fine_masks(trees, duals_sorted, eps, lam, theta, p):
    a_xx, b_yy, a_xy, b_yx = duals_sorted
    ta, tb = trees
    fx, fy = ta.cluster_max(b_yx), tb.cluster_max(a_xy)
    sx, sy = ta.cluster_max(a_xx), tb.cluster_max(b_yy)
    cx, rx, cy, ry = ta.centroids, ta.radii, tb.centroids, tb.radii
    m_xy = truncate(_loosen(fx, lam), cx, rx, _loosen(fy, lam), cy, ry, eps, theta, p)
    m_xx = self_truncation(ta, sx, eps, theta, p, lam)
    m_yy = self_truncation(tb, sy, eps, theta, p, lam)
    return {"xy": m_xy, "xx": m_xx, "yy": m_yy}


def switch_index(schedule, tree_a, tree_b) -> int:
    """First scale below twice the largest cluster radius (len(schedule) if none)."""
    rmax = max(float(tree_a.radii.max()), float(tree_b.radii.max()))
    below = np.flatnonzero(schedule.sigmas < 2.0 * rmax)
    return int(below[0]) if below.size else len(schedule)


def multiscale_sinkhorn(a: DiscreteMeasure, b: DiscreteMeasure, params: SolverParams,
                        K_a: Optional[int] = None, K_b: Optional[int] = None, seed: int = 0,
                        theta: float = DEFAULT_THETA, refresh_masks: bool = True) -> DualPotentials:
    """Coarse-to-fine version of :func:`symmetric_sinkhorn`.

    ``K_a`` and ``K_b`` default to ``ceil(sqrt(N))`` and ``ceil(sqrt(M))``.
    The returned duals are in input order and carry the final truncation
    masks, which plan evaluations reuse.  ``extra`` records the switch index
    and the number of pairwise costs evaluated after the switch.
    """
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    p = params.p
    K_a = K_a or math.ceil(math.sqrt(a.n))
    K_b = K_b or math.ceil(math.sqrt(b.n))
    tree_a = kmeans_coarsen(a, K_a, seed)
    tree_b = kmeans_coarsen(b, K_b, seed)
    schedule = make_schedule(diameter_estimate(a, b, params.blur), params)
    check_schedule(schedule, params)
    items = list(schedule)
    n = len(items)
    t_switch = switch_index(schedule, tree_a, tree_b)
    exact_coarse = max(tree_a.radii.max(), tree_b.radii.max()) == 0.0

    ca, cb = tree_a.coarse_measure(), tree_b.coarse_measure()
    red_c = DenseReducer.from_measures(ca, cb, p)
    coarse = (np.zeros(ca.n), np.zeros(cb.n), np.zeros(cb.n), np.zeros(ca.n))
    coarse = sinkhorn_steps(red_c, items[:t_switch], coarse)
    eps_last, lam_last = items[-1]
    if exact_coarse and t_switch == n:
        # zero radii: the centroid problem is the fine problem with duplicates merged
        coarse = final_update(red_c, eps_last, lam_last, coarse, n)
    coarse_duals = DualPotentials(*coarse, eps=eps_last, damping=lam_last, schedule=schedule)
    fine = coarse_duals_to_fine(tree_a, tree_b, coarse_duals)
    if exact_coarse and t_switch == n:
        masks = {"xy": TruncationMask.full(ca.n, cb.n), "xx": TruncationMask.full(ca.n, ca.n),
                 "yy": TruncationMask.full(cb.n, cb.n)}
        fine.sparsity = MultiscaleSparsity(tree_a, tree_b, masks, p)
        fine.pairs_evaluated = red_c.pairs
        fine.extra = {"switch": t_switch, "fine_pairs": 0, "dense_pairs": 0, "coarse_pairs": red_c.pairs}
        return fine

    eps_sw, lam_sw = items[min(t_switch, n - 1)]
    masks = {
        "xy": kernel_truncation(tree_a, tree_b, coarse_duals, eps_sw, theta, p, lam_sw),
        "xx": self_truncation(tree_a, coarse[0], eps_sw, theta, p, lam_sw),
        "yy": self_truncation(tree_b, coarse[1], eps_sw, theta, p, lam_sw),
    }
    red = BlockReducer(a, b, tree_a, tree_b, p, masks)
    state = (red.permute("x", fine.a_xx), red.permute("y", fine.b_yy),
             red.permute("y", fine.a_xy), red.permute("x", fine.b_yx))
    trees = (tree_a, tree_b)
    dense_pairs = 0
    for t in range(t_switch, n):
        eps, lam = items[t]
        if refresh_masks and t > t_switch and not math.isinf(theta):
            red.set_masks(_fine_masks(trees, state, eps, lam, theta, p))
        state = sinkhorn_steps(red, [items[t]], state, first_index=t)
        dense_pairs += 2 * a.n * b.n + a.n**2 + b.n**2
    if refresh_masks and not math.isinf(theta) and t_switch < n:
        red.set_masks(_fine_masks(trees, state, eps_last, lam_last, theta, p))
    state = final_update(red, eps_last, lam_last, state, n)
    dense_pairs += 2 * a.n * b.n + a.n**2 + b.n**2
    out = (red.unpermute("x", state[0]), red.unpermute("y", state[1]),
           red.unpermute("y", state[2]), red.unpermute("x", state[3]))
    fine_pairs = red.pairs
    return DualPotentials(
        *out, eps=eps_last, damping=lam_last, schedule=schedule,
        sparsity=MultiscaleSparsity(tree_a, tree_b, red.masks, p),
        pairs_evaluated=red_c.pairs + fine_pairs,
        extra={"switch": t_switch, "fine_pairs": fine_pairs, "dense_pairs": dense_pairs,
               "coarse_pairs": red_c.pairs},
    )
