"""Synthetic inputs for tests, demos and benchmarks."""

from __future__ import annotations

import numpy as np

U_CLASSES = ("u_bundle", "cross_bundle", "arch_bundle")


def _u_curve(t):
    # arms at x = -15 and x = +15 from z = 30 down to a half-circle bottom through the origin
    x = 15.0 * np.sin(np.pi * (t - 0.5))
    z = np.where(np.abs(x) < 15.0, 15.0 - np.sqrt(np.maximum(225.0 - x**2, 0.0)), 0.0)
    arm = np.abs(t - 0.5) > 0.35
    z = np.where(arm, 15.0 + 100.0 * (np.abs(t - 0.5) - 0.35), z)
    return np.column_stack([x, np.zeros_like(t), z])


def _cross_curve(t):
    return np.column_stack([np.zeros_like(t), 50.0 * (t - 0.5), np.zeros_like(t)])


def _arch_curve(t):
    y = 30.0 * (t - 0.5)
    return np.column_stack([np.zeros_like(t), y, 25.0 * np.sin(np.pi * t)])


def u_bundle(n_per_class: int = 20, seed: int = 0, jitter: float = 1.5, n_vertices: int = 40,
             outlier: bool = False, random_orientation: bool = False):
    """Three crossing fiber bundles in mm, optionally plus one far-away outlier fiber.

    The U-shaped bundle lies in the xz plane, a straight bundle runs along y
    through the bottom of the U, and an arch in the yz plane crosses both.
    Each fiber is a noisy copy of its bundle's centreline, shifted by up to
    ``jitter`` mm.

    Returns
    -------
    fibers : list of (n_vertices, 3) arrays
    classes : (n,) int array, index into :data:`U_CLASSES`, -1 for the outlier
    """
    rng = np.random.default_rng(seed)
    t = np.linspace(0.0, 1.0, n_vertices)
    fibers, classes = [], []
    for k, curve in enumerate((_u_curve, _cross_curve, _arch_curve)):
        base = curve(t)
        for _ in range(n_per_class):
            f = base + rng.uniform(-jitter, jitter, size=3) + 0.2 * jitter * rng.normal(size=base.shape)
            if random_orientation and rng.random() < 0.5:
                f = f[::-1]
            fibers.append(f)
            classes.append(k)
    if outlier:
        fibers.append(np.column_stack([np.linspace(180, 220, n_vertices), np.full(n_vertices, 200.0),
                                       np.full(n_vertices, 200.0)]))
        classes.append(-1)
    return fibers, np.array(classes)


def uniform_ball(rng, n: int, dim: int, radius: float = 1.0) -> np.ndarray:
    """``n`` points uniform in the ``dim``-ball of the given radius."""
    d = rng.normal(size=(n, dim))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * radius * rng.random(n)[:, None] ** (1.0 / dim)


def two_blobs(n: int, seed: int = 0, dim: int = 3, separation: float = 10.0,
              shift=(0.2, 0.1, 0.0)):
    """Two clouds of ``n`` points, each made of two unit balls ``separation`` apart.

    The second cloud is the same construction (fresh samples) moved by
    ``shift``.
    """
    rng = np.random.default_rng(seed)
    centre = np.zeros(dim)
    centre[0] = separation / 2
    sh = np.zeros(dim)
    sh[: min(dim, len(shift))] = shift[:dim]

    def cloud():
        pts = uniform_ball(rng, n, dim)
        pts[: n // 2] -= centre
        pts[n // 2:] += centre
        return pts

    return cloud(), cloud() + sh
