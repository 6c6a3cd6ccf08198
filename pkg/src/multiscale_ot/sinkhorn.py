"""Symmetric, debiased Sinkhorn loop with epsilon-scaling.

The solver tracks four dual vectors at once:

* ``a_xx`` (N,) and ``b_yy`` (M,): self-transport potentials of alpha and beta,
* ``a_xy`` (M,): potential on the beta side of OT(alpha, beta),
* ``b_yx`` (N,): potential on the alpha side of OT(alpha, beta).

Each scale performs four damped softmin updates and averages them with the
previous iterate.  After the last scale one extra pure (non-averaged) update
is run at ``eps = blur**p``, so that the returned vectors satisfy the
fixed-point equations well enough for the envelope-theorem gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from .measures import CostSpec, DiscreteMeasure


class NumericalError(ArithmeticError):
    """A dual update produced non-finite values."""


@dataclass(frozen=True)
class SolverParams:
    """Blur and reach scales, cost exponent and annealing ratio.

    ``blur`` sets the final temperature ``eps = blur**p``; ``reach`` sets the
    marginal penalty ``rho = reach**p`` (``math.inf`` for balanced transport).
    Both are in the units of the point coordinates.  ``final_iters`` appends
    that many extra iterations at the final temperature to the annealing
    schedule; the default 0 runs the plain schedule.
    """

    blur: float
    reach: float = math.inf
    cost: CostSpec = CostSpec(2.0)
    scaling: float = 0.9
    max_full_iters: int = 10_000
    final_iters: int = 0

    def __post_init__(self):
        if not self.blur > 0 or not math.isfinite(self.blur):
            raise ValueError(f"blur must be a positive finite number, got {self.blur}")
        if not self.reach > 0:
            raise ValueError(f"reach must be positive or inf, got {self.reach}")
        if not 0.0 < self.scaling < 1.0:
            raise ValueError(f"scaling must lie in (0, 1), got {self.scaling}")
        if self.max_full_iters < 1:
            raise ValueError("max_full_iters must be >= 1")
        if self.final_iters < 0:
            raise ValueError("final_iters must be >= 0")

    @property
    def p(self) -> float:
        return self.cost.p

    @property
    def balanced(self) -> bool:
        return math.isinf(self.reach)

    @property
    def rho(self) -> float:
        return math.inf if self.balanced else self.reach**self.p

    @property
    def eps(self) -> float:
        return self.blur**self.p

    def damping(self, sigma: float) -> float:
        if self.balanced:
            return 1.0
        return 1.0 / (1.0 + (sigma / self.reach) ** self.p)


@dataclass(frozen=True)
class EpsSchedule:
    """Annealing scales ``sigma_t`` with ``eps_t = sigma_t**p`` and damping ``lambda_t``."""

    diameter: float
    sigmas: np.ndarray
    eps: np.ndarray
    lambdas: np.ndarray

    def __len__(self):
        return len(self.sigmas)

    def __iter__(self):
        return iter(zip(self.eps.tolist(), self.lambdas.tolist()))


def diameter_estimate(a: DiscreteMeasure, b: DiscreteMeasure, blur: float = 0.0) -> float:
    """Diagonal of the joint bounding box, an upper bound on max ||x_i - y_j||.

    Floored at ``blur`` so that degenerate inputs still get a usable schedule.
    """
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    lo = np.minimum(a.points.min(axis=0), b.points.min(axis=0))
    hi = np.maximum(a.points.max(axis=0), b.points.max(axis=0))
    return max(math.hypot(*(hi - lo)), blur)


def make_schedule(d: float, params: SolverParams) -> EpsSchedule:
    """Geometric scales ``d, d*q, d*q**2, ...`` closed by an exact ``blur``.

    The length is ``floor(log(d/blur) / log(1/q)) + 1``, which equals
    ``ceil(log(d/blur) / log(1/q))`` unless the geometric sequence lands
    exactly on ``blur`` (then blur is its own natural last term), plus
    ``params.final_iters`` repeats of ``blur``.
    """
    blur, q = params.blur, params.scaling
    if d <= blur:
        sigmas = np.array([blur])
    else:
        ratio = math.log(d / blur) / math.log(1.0 / q)
        n = math.floor(ratio + 1e-9) + 1
        sigmas = d * q ** np.arange(n, dtype=float)
        sigmas[-1] = blur
    if params.final_iters:
        sigmas = np.concatenate([sigmas, np.full(params.final_iters, blur)])
    eps = sigmas**params.p
    lambdas = np.array([params.damping(s) for s in sigmas])
    return EpsSchedule(float(d), sigmas, eps, lambdas)


def softmin(eps: float, weights, duals, costs) -> float:
    """``-eps * log sum_k w_k exp((g_k - C_k) / eps)``, max-shifted.

    The scalar building block of every dual update; the solvers call a
    compiled, streaming version of the same reduction.
    """
    w = np.asarray(weights, dtype=float)
    g = np.asarray(duals, dtype=float)
    c = np.asarray(costs, dtype=float)
    if w.size == 0:
        raise ValueError("softmin of an empty set")
    if not eps > 0:
        raise ValueError("eps must be positive")
    z = np.log(w) + (g - c) / eps
    zmax = z.max()
    return float(-eps * (zmax + math.log(math.fsum(np.exp(z - zmax)))))


@dataclass
class DualPotentials:
    """The four dual vectors, plus the final temperature they solve for.

    ``sparsity`` is set by the multiscale solver: plan evaluations then
    honor its truncation masks.
    """

    a_xx: np.ndarray
    b_yy: np.ndarray
    a_xy: np.ndarray
    b_yx: np.ndarray
    eps: float
    damping: float
    schedule: EpsSchedule
    sparsity: Optional[object] = None
    pairs_evaluated: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def f(self) -> np.ndarray:
        """Potential of OT(alpha, beta) on the alpha side."""
        return self.b_yx

    @property
    def g(self) -> np.ndarray:
        """Potential of OT(alpha, beta) on the beta side."""
        return self.a_xy


class DenseReducer:
    """All-pairs softmin/plan reductions between two point sets.

    Only O(N + M) scratch is allocated; costs are recomputed on the fly.
    """

    def __init__(self, x, log_a, y, log_b, p):
        self.pts = {"x": np.ascontiguousarray(x), "y": np.ascontiguousarray(y)}
        self.logw = {"x": np.ascontiguousarray(log_a), "y": np.ascontiguousarray(log_b)}
        self.p = float(p)
        self.pairs = 0

    @classmethod
    def from_measures(cls, a, b, p):
        return cls(a.points, a.log_weights, b.points, b.log_weights, p)

    def size(self, side):
        return self.pts[side].shape[0]

    def permute(self, side, arr):
        return np.asarray(arr)

    def unpermute(self, side, arr):
        return np.asarray(arr)

    def n_pairs(self, out, src):
        return self.size(out) * self.size(src)

    def lse(self, out, src, eps, h):
        res = np.empty(self.size(out))
        _kernels.lse_dense(self.pts[out], self.pts[src], self.logw[src],
                           np.ascontiguousarray(h, dtype=float), float(eps), self.p, res)
        self.pairs += self.n_pairs(out, src)
        return res

    def softmin(self, out, src, eps, h):
        """Vector of softmins over ``src`` atoms, one per ``out`` atom."""
        return -eps * self.lse(out, src, eps, h)

    def apply(self, out, src, eps, h, bias, V):
        V = np.ascontiguousarray(V, dtype=float).reshape(self.size(src), -1)
        res = np.empty((self.size(out), V.shape[1]))
        _kernels.apply_dense(self.pts[out], self.pts[src], self.logw[src],
                             np.ascontiguousarray(h, dtype=float),
                             np.ascontiguousarray(bias, dtype=float), float(eps), self.p, V, res)
        self.pairs += self.n_pairs(out, src)
        return res


def _check_finite(t, *arrays):
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"non-finite dual potential at scale index {t}")


def sinkhorn_steps(red, schedule_items, duals, first_index=0):
    """Averaged symmetric updates over ``schedule_items`` ((eps, lambda) pairs).

    ``duals`` is the tuple ``(a_xx, b_yy, a_xy, b_yx)``; returns the updated tuple.
    """
    a_xx, b_yy, a_xy, b_yx = duals
    for t, (eps, lam) in enumerate(schedule_items, start=first_index):
        ft_xx = lam * red.softmin("x", "x", eps, a_xx)
        ft_yy = lam * red.softmin("y", "y", eps, b_yy)
        ft_xy = lam * red.softmin("y", "x", eps, b_yx)
        ft_yx = lam * red.softmin("x", "y", eps, a_xy)
        a_xx = 0.5 * (a_xx + ft_xx)
        b_yy = 0.5 * (b_yy + ft_yy)
        a_xy = 0.5 * (a_xy + ft_xy)
        b_yx = 0.5 * (b_yx + ft_yx)
        _check_finite(t, a_xx, b_yy, a_xy, b_yx)
    return a_xx, b_yy, a_xy, b_yx


def final_update(red, eps, lam, duals, index):
    """One pure damped update of all four vectors from the current iterate."""
    a_xx, b_yy, a_xy, b_yx = duals
    new = (
        lam * red.softmin("x", "x", eps, a_xx),
        lam * red.softmin("y", "y", eps, b_yy),
        lam * red.softmin("y", "x", eps, b_yx),
        lam * red.softmin("x", "y", eps, a_xy),
    )
    _check_finite(index, *new)
    return new


def _check_pair(a, b):
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")


def check_schedule(schedule, params):
    if len(schedule) + 1 > params.max_full_iters:
        raise ValueError(
            f"schedule needs {len(schedule) + 1} iterations, above max_full_iters="
            f"{params.max_full_iters}; raise blur or lower scaling"
        )


def symmetric_sinkhorn(a: DiscreteMeasure, b: DiscreteMeasure, params: SolverParams) -> DualPotentials:
    """Dense single-scale solver; see the module docstring for the iteration."""
    _check_pair(a, b)
    d = diameter_estimate(a, b, params.blur)
    schedule = make_schedule(d, params)
    check_schedule(schedule, params)
    red = DenseReducer.from_measures(a, b, params.p)
    duals = (np.zeros(a.n), np.zeros(b.n), np.zeros(b.n), np.zeros(a.n))
    duals = sinkhorn_steps(red, schedule, duals)
    eps, lam = float(schedule.eps[-1]), float(schedule.lambdas[-1])
    duals = final_update(red, eps, lam, duals, len(schedule))
    return DualPotentials(*duals, eps=eps, damping=lam, schedule=schedule,
                          pairs_evaluated=red.pairs)


# --- values ---------------------------------------------------------------


def reducer_for(a, b, duals, params):
    """Dense reducer, or the block-sparse one when the duals carry truncation masks."""
    if duals.sparsity is not None:
        return duals.sparsity.reducer(a, b)
    return DenseReducer.from_measures(a, b, params.p)


def kernel_rows(red, out, src, eps, f_out, g_src, V):
    """``sum_k w_k exp((f_i + g_k - C_ik) / eps) V_k`` for every ``out`` atom ``i``.

    Inputs and outputs are in input order; ``red`` handles any reordering.
    """
    res = red.apply(out, src, eps, red.permute(src, g_src), red.permute(out, f_out),
                    red.permute(src, V))
    return red.unpermute(out, res)


def plan_row_mass(a, b, duals: DualPotentials, params: SolverParams) -> np.ndarray:
    """Row sums of the plan divided by ``alpha_i`` (about 1 for matched atoms)."""
    red = reducer_for(a, b, duals, params)
    return kernel_rows(red, "x", "y", duals.eps, duals.b_yx, duals.a_xy, np.ones((b.n, 1)))[:, 0]


def ot_value(a, b, duals: DualPotentials, params: SolverParams) -> float:
    """Dual objective of the regularized problem at ``(f, g) = (b_yx, a_xy)``."""
    _check_pair(a, b)
    eps = duals.eps
    f, g = duals.b_yx, duals.a_xy
    plan_mass = math.fsum(a.weights * plan_row_mass(a, b, duals, params))
    if params.balanced:
        marg = math.fsum(a.weights * f) + math.fsum(b.weights * g)
    else:
        rho = params.rho
        marg = rho * math.fsum(a.weights * -np.expm1(-f / rho)) \
            + rho * math.fsum(b.weights * -np.expm1(-g / rho))
    return marg + eps * (a.mass * b.mass - plan_mass)


def divergence(a: DiscreteMeasure, b: DiscreteMeasure, params: SolverParams,
               duals: Optional[DualPotentials] = None) -> float:
    """Debiased Sinkhorn divergence, evaluated from the four dual vectors.

    Pass ``duals`` (e.g. from the multiscale solver) to skip the dense solve.
    """
    _check_pair(a, b)
    if duals is None:
        duals = symmetric_sinkhorn(a, b, params)
    eps = duals.eps
    if params.balanced:
        val = math.fsum(a.weights * (duals.b_yx - duals.a_xx)) \
            + math.fsum(b.weights * (duals.a_xy - duals.b_yy))
        return val + 0.5 * eps * (a.mass - b.mass) ** 2
    # With finite reach the mass-defect term cancels the constants of the
    # three OT values, so the dual expression below is already complete.
    rho = params.rho
    ea = np.exp(-duals.b_yx / rho) - np.exp(-duals.a_xx / rho)
    eb = np.exp(-duals.a_xy / rho) - np.exp(-duals.b_yy / rho)
    return -(rho + 0.5 * eps) * (math.fsum(a.weights * ea) + math.fsum(b.weights * eb))


# --- implicit plan --------------------------------------------------------


def plan_entry(i: int, j: int, a, b, duals: DualPotentials, params: SolverParams) -> float:
    """``alpha_i beta_j exp((f_i + g_j - C(x_i, y_j)) / eps)``."""
    c = params.cost(a.points[i], b.points[j])
    return float(a.weights[i] * b.weights[j]
                 * math.exp((duals.b_yx[i] + duals.a_xy[j] - c) / duals.eps))


def plan_apply(a, b, duals: DualPotentials, params: SolverParams, v) -> np.ndarray:
    """Product of the implicit plan with ``v`` (shape (M,) or (M, L)).

    Streams over the pairs; the N x M plan is never formed.
    """
    v = np.asarray(v, dtype=float)
    if v.shape[0] != b.n:
        raise ValueError(f"vector has {v.shape[0]} rows, expected {b.n}")
    red = reducer_for(a, b, duals, params)
    rows = kernel_rows(red, "x", "y", duals.eps, duals.b_yx, duals.a_xy, v.reshape(b.n, -1))
    return (a.weights[:, None] * rows).reshape((a.n,) + v.shape[1:])


def barycentric_map(a, b, duals: DualPotentials, params: SolverParams) -> np.ndarray:
    """Plan-weighted mean of the target points seen from each source atom."""
    red = reducer_for(a, b, duals, params)
    V = np.column_stack([np.ones(b.n), b.points])
    rows = kernel_rows(red, "x", "y", duals.eps, duals.b_yx, duals.a_xy, V)
    return rows[:, 1:] / rows[:, :1]
