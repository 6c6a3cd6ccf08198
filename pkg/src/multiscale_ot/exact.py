"""Exact (unregularized) transport between small balanced measures.

Used as a ground-truth oracle.  The transportation LP is handed to the dual
simplex solver of HiGHS through :func:`scipy.optimize.linprog`, which returns
an optimal vertex.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .measures import CostSpec, DiscreteMeasure, cost

MAX_PAIRS = 10**6


@dataclass(frozen=True)
class DensePlan:
    """Optimal coupling (N x M) and its cost ``sum pi_ij C_ij``."""

    plan: np.ndarray
    value: float


def exact_ot(a: DiscreteMeasure, b: DiscreteMeasure, spec: CostSpec = CostSpec()) -> DensePlan:
    """Solve ``min sum pi_ij C(x_i, y_j)`` under both marginal constraints.

    Raises
    ------
    ValueError
        If the total masses differ by more than 1e-9, the dimensions differ,
        or ``N * M`` exceeds 10**6.
    """
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    if abs(a.mass - b.mass) > 1e-9:
        raise ValueError(f"unbalanced masses {a.mass!r} and {b.mass!r}; exact transport needs equal mass")
    n, m = a.n, b.n
    if n * m > MAX_PAIRS:
        raise ValueError(f"{n} x {m} exceeds the {MAX_PAIRS} pair limit of the exact solver")
    C = cost(a.points[:, None, :], b.points[None, :, :], spec).reshape(n, m)
    # rescale b so both marginals sum to exactly the same float
    bw = b.weights * (a.mass / b.mass)
    rows = sparse.kron(sparse.eye(n), np.ones((1, m)))
    cols = sparse.kron(np.ones((1, n)), sparse.eye(m))
    A = sparse.vstack([rows, cols]).tocsr()
    rhs = np.concatenate([a.weights, bw])
    res = linprog(C.ravel(), A_eq=A, b_eq=rhs, bounds=(0, None), method="highs-ds")
    if res.status != 0:
        raise ArithmeticError(f"exact solver failed: {res.message}")
    plan = np.maximum(res.x.reshape(n, m), 0.0)
    return DensePlan(plan, math.fsum((plan * C).ravel()))
