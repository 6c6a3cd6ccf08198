"""Multiscale, unbalanced Sinkhorn divergences with linear memory.

Discrete measures are compared through a debiased entropic transport cost
whose dual potentials are computed by an annealed, symmetric Sinkhorn loop.
A K-means coarsening prunes negligible blocks of the kernel so that large
point clouds never need an N x M buffer.  The potentials also give transport
plans (implicitly), gradients, label transfer and barycenters.
"""

from ._kernels import get_threads, set_threads
from .exact import DensePlan, exact_ot
from .gradients import (
    BarycenterConfig,
    BarycenterResult,
    average_density,
    barycenter,
    density_barycenter,
    grad_positions,
    grad_weights,
    grad_weights_b,
    upsample,
)
from .labeling import OUTLIER, LabelSet, SoftLabels, classify, resolve_flips, transfer_labels
from .measures import (
    CostSpec,
    DensityMap,
    DiscreteMeasure,
    FiberSet,
    FlipAugmented,
    cost,
    decode_fiber,
    density_to_measure,
    encode_fibers,
    flip_augment,
    resample_polyline,
    reverse_atoms,
)
from .multiscale import (
    ClusterTree,
    TruncationMask,
    coarse_duals_to_fine,
    kernel_truncation,
    kmeans_coarsen,
    multiscale_sinkhorn,
)
from .sinkhorn import (
    DualPotentials,
    EpsSchedule,
    NumericalError,
    SolverParams,
    barycentric_map,
    diameter_estimate,
    divergence,
    make_schedule,
    ot_value,
    plan_apply,
    plan_entry,
    plan_row_mass,
    softmin,
    symmetric_sinkhorn,
)

__version__ = "0.1.0"
