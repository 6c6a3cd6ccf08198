"""Label transfer through the implicit transport plan.

Each subject atom receives the plan-weighted average of the one-hot labels of
the atlas atoms it is matched to.  With finite reach, atoms that have no
counterpart in the atlas transport almost no mass, which flags them as
outliers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .measures import DiscreteMeasure
from .sinkhorn import DualPotentials, SolverParams, kernel_rows, reducer_for

OUTLIER = -1


@dataclass(frozen=True)
class LabelSet:
    """Class names plus one class index per atlas atom."""

    names: Tuple[str, ...]
    assignments: np.ndarray

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        idx = np.asarray(self.assignments, dtype=np.int64).reshape(-1)
        if len(set(names)) != len(names):
            raise ValueError("class names must be unique")
        if idx.size and (idx.min() < 0 or idx.max() >= len(names)):
            raise ValueError(f"class indices must lie in [0, {len(names)})")
        idx.flags.writeable = False
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "assignments", idx)

    @property
    def L(self) -> int:
        return len(self.names)

    @classmethod
    def from_names(cls, per_atom: Sequence[str]) -> "LabelSet":
        """Build from one class name per atom; classes are numbered by first appearance."""
        names = list(dict.fromkeys(per_atom))
        lookup = {n: k for k, n in enumerate(names)}
        return cls(tuple(names), np.array([lookup[n] for n in per_atom], dtype=np.int64))

    def one_hot(self) -> np.ndarray:
        out = np.zeros((self.assignments.size, self.L))
        out[np.arange(self.assignments.size), self.assignments] = 1.0
        return out


@dataclass(frozen=True)
class SoftLabels:
    """Per-atom class scores; ``row_mass[i]`` is the plan row sum over ``alpha_i``."""

    scores: np.ndarray
    row_mass: np.ndarray

    def __post_init__(self):
        for arr in (self.scores, self.row_mass):
            arr.flags.writeable = False

    @property
    def n(self) -> int:
        return self.scores.shape[0]


def transfer_labels(a: DiscreteMeasure, b: DiscreteMeasure, labels: LabelSet,
                    duals: DualPotentials, params: SolverParams) -> SoftLabels:
    """Soft scores ``(1 / alpha_i) (pi l)_i`` for every atom of ``a``.

    All class columns go through one streaming pass over the plan (restricted
    to the truncation mask when the duals came from the multiscale solver).
    """
    if labels.assignments.size != b.n:
        raise ValueError(f"{labels.assignments.size} labels for an atlas of {b.n} atoms")
    red = reducer_for(a, b, duals, params)
    scores = kernel_rows(red, "x", "y", duals.eps, duals.b_yx, duals.a_xy, labels.one_hot())
    scores = np.maximum(scores, 0.0)
    return SoftLabels(scores, scores.sum(axis=1))


def resolve_flips(soft: SoftLabels, flip_map) -> SoftLabels:
    """Keep, for every original fiber, the orientation carrying more plan mass.

    ``flip_map[k] = (original index, orientation)`` for each augmented atom.
    Ties go to the original orientation (0).
    """
    fm = np.asarray(flip_map, dtype=np.int64)
    if fm.ndim != 2 or fm.shape != (soft.n, 2):
        raise ValueError(f"flip_map must have shape ({soft.n}, 2)")
    n = soft.n // 2
    rows = np.full((n, 2), -1, dtype=np.int64)
    for k, (orig, orient) in enumerate(fm):
        if not (0 <= orig < n and orient in (0, 1)) or rows[orig, orient] != -1:
            raise ValueError(f"invalid or duplicate flip_map entry {k}: ({orig}, {orient})")
        rows[orig, orient] = k
    missing = np.flatnonzero((rows < 0).any(axis=1))
    if missing.size:
        raise ValueError(f"fiber {missing[0]} lacks one of its two orientations")
    keep_flip = soft.row_mass[rows[:, 1]] > soft.row_mass[rows[:, 0]]
    chosen = np.where(keep_flip, rows[:, 1], rows[:, 0])
    return SoftLabels(soft.scores[chosen], soft.row_mass[chosen])


def classify(soft: SoftLabels, tau: float = 0.5):
    """Hard labels and confidences.

    Atoms with ``row_mass < tau`` are :data:`OUTLIER`; the others get the
    first maximal class and ``confidence = max score / row_mass``.

    Returns
    -------
    labels : (N,) int array
    confidence : (N,) float array
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    best = np.argmax(soft.scores, axis=1)
    top = soft.scores[np.arange(soft.n), best]
    with np.errstate(divide="ignore", invalid="ignore"):
        conf = np.where(soft.row_mass > 0, top / soft.row_mass, 0.0)
    labels = np.where(soft.row_mass < tau, OUTLIER, best)
    return labels, conf
