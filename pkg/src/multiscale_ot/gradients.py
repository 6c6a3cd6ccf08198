"""Gradients of the Sinkhorn divergence and free-position barycenters.

The dual objective is stationary at the optimal potentials, so derivatives
with respect to the weights and positions are read off with the potentials
held fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .measures import DensityMap, DiscreteMeasure, density_to_measure
from .sinkhorn import (
    DualPotentials,
    NumericalError,
    SolverParams,
    divergence,
    kernel_rows,
    reducer_for,
    symmetric_sinkhorn,
)


def grad_weights(a: DiscreteMeasure, b: DiscreteMeasure, duals: DualPotentials,
                 params: SolverParams) -> np.ndarray:
    """Derivative of the divergence with respect to each weight of ``a``.

    ``(rho + eps) * (exp(-a_xx / rho) - exp(-b_yx / rho))`` for finite reach,
    ``b_yx - a_xx + eps * (mass(a) - mass(b))`` for balanced transport.
    """
    eps = duals.eps
    if params.balanced:
        return duals.b_yx - duals.a_xx + eps * (a.mass - b.mass)
    rho = params.rho
    return (rho + eps) * (np.exp(-duals.a_xx / rho) - np.exp(-duals.b_yx / rho))


def grad_weights_b(a, b, duals, params) -> np.ndarray:
    """Same as :func:`grad_weights` for the weights of ``b``."""
    eps = duals.eps
    if params.balanced:
        return duals.a_xy - duals.b_yy + eps * (b.mass - a.mass)
    rho = params.rho
    return (rho + eps) * (np.exp(-duals.b_yy / rho) - np.exp(-duals.a_xy / rho))


def grad_positions(a: DiscreteMeasure, b: DiscreteMeasure, duals: DualPotentials,
                   params: SolverParams) -> np.ndarray:
    """Derivative of the divergence with respect to the points of ``a`` (p = 2 only).

    Row ``i`` is ``sum_j pi_ij (x_i - y_j) - sum_k pi^aa_ik (x_i - x_k)``:
    the plan-weighted displacement towards ``b`` minus the one towards ``a``
    itself.
    """
    if params.p != 2.0:
        raise NotImplementedError("position gradients are only implemented for p = 2")
    red = reducer_for(a, b, duals, params)
    eps = duals.eps
    x = a.points
    cross = kernel_rows(red, "x", "y", eps, duals.b_yx, duals.a_xy,
                        np.column_stack([np.ones(b.n), b.points]))
    self_ = kernel_rows(red, "x", "x", eps, duals.a_xx, duals.a_xx,
                        np.column_stack([np.ones(a.n), x]))
    disp = (cross[:, :1] - self_[:, :1]) * x - cross[:, 1:] + self_[:, 1:]
    return a.weights[:, None] * disp


# --- barycenters ----------------------------------------------------------


@dataclass
class BarycenterConfig:
    """Descent settings; ``params`` must be balanced (reach = inf)."""

    params: SolverParams
    step: float = 1.0
    iterations: int = 100
    upsample: int = 1
    rel_tol: float = 1e-4
    max_halvings: int = 10
    clusters: Optional[int] = None

    def __post_init__(self):
        if not self.params.balanced:
            raise ValueError("barycenters use reach = inf")
        if not self.step > 0:
            raise ValueError("step must be positive")
        if self.iterations < 0 or self.upsample < 1:
            raise ValueError("iterations must be >= 0 and upsample >= 1")


@dataclass
class BarycenterResult:
    measure: DiscreteMeasure
    losses: list = field(default_factory=list)
    steps: list = field(default_factory=list)


def _solve(a, b, cfg):
    if cfg.clusters:
        from .multiscale import multiscale_sinkhorn

        return multiscale_sinkhorn(a, b, cfg.params, K_a=min(cfg.clusters, a.n),
                                   K_b=min(cfg.clusters, b.n))
    return symmetric_sinkhorn(a, b, cfg.params)


def mean_loss_and_grad(alpha: DiscreteMeasure, targets: Sequence[DiscreteMeasure],
                       cfg: BarycenterConfig):
    """``(1/K) sum_k S(alpha, beta_k)`` and its gradient with respect to the points."""
    loss = 0.0
    grad = np.zeros_like(alpha.points)
    for beta in targets:
        duals = _solve(alpha, beta, cfg)
        loss += divergence(alpha, beta, cfg.params, duals)
        grad += grad_positions(alpha, beta, duals, cfg.params)
    k = len(targets)
    return loss / k, grad / k


def barycenter(targets: Sequence[DiscreteMeasure], init: DiscreteMeasure,
               cfg: BarycenterConfig) -> BarycenterResult:
    """Move the atoms of ``init`` to minimize the mean divergence to ``targets``.

    Weights stay fixed.  Each iteration steps along the displacement field
    ``grad / alpha_i`` and halves the step until the loss does not increase;
    descent stops early once the relative decrease falls below ``rel_tol``.
    """
    if not targets:
        raise ValueError("need at least one target measure")
    for t in targets:
        if t.dim != init.dim:
            raise ValueError(f"dimension mismatch: init is {init.dim}-D, a target is {t.dim}-D")
    alpha = init
    loss, grad = mean_loss_and_grad(alpha, targets, cfg)
    if not math.isfinite(loss):
        raise NumericalError("non-finite loss at iteration 0")
    out = BarycenterResult(alpha, [loss], [])
    for it in range(1, cfg.iterations + 1):
        field_ = grad / alpha.weights[:, None]
        step = cfg.step
        for _ in range(cfg.max_halvings + 1):
            cand = alpha.with_points(alpha.points - step * field_)
            new_loss, new_grad = mean_loss_and_grad(cand, targets, cfg)
            if not math.isfinite(new_loss):
                raise NumericalError(f"non-finite loss at iteration {it}")
            if new_loss <= loss:
                break
            step *= 0.5
        else:
            break
        decrease = loss - new_loss
        alpha, loss, grad = cand, new_loss, new_grad
        out.losses.append(loss)
        out.steps.append(step)
        if decrease <= cfg.rel_tol * abs(loss):
            break
    out.measure = alpha
    return out


def upsample(m: DiscreteMeasure, factor: int, jitter: float = 0.0, seed: int = 0) -> DiscreteMeasure:
    """Replace every atom by ``factor`` copies of weight ``w / factor``.

    Copies are displaced uniformly in ``[-jitter, jitter]^D`` (use half a voxel
    for density maps) so that they can separate during descent.
    """
    if factor < 1:
        raise ValueError("factor must be >= 1")
    pts = np.repeat(m.points, factor, axis=0)
    if jitter > 0:
        pts = pts + np.random.default_rng(seed).uniform(-jitter, jitter, size=pts.shape)
    return DiscreteMeasure(pts, np.repeat(m.weights, factor) / factor)


def average_density(maps: Sequence[DensityMap]) -> DensityMap:
    """Voxel-wise arithmetic mean of normalized maps sharing one grid."""
    if not maps:
        raise ValueError("need at least one density map")
    ref = maps[0]
    acc = np.zeros(ref.shape)
    for d in maps:
        if d.shape != ref.shape or d.voxel_size != ref.voxel_size or not np.allclose(d.origin, ref.origin):
            raise ValueError("density maps must share grid shape, voxel size and origin")
        acc += d.values / d.values.sum()
    return DensityMap(acc / len(maps), ref.voxel_size, ref.origin)


def density_barycenter(maps: Sequence[DensityMap], cfg: BarycenterConfig,
                       seed: int = 0) -> BarycenterResult:
    """Barycenter of track density maps, started from their upsampled average."""
    targets = [density_to_measure(d) for d in maps]
    init = density_to_measure(average_density(maps))
    init = upsample(init, cfg.upsample, 0.5 * maps[0].voxel_size if cfg.upsample > 1 else 0.0, seed)
    return barycenter(targets, init, cfg)
