"""Low-rank + sparse separation of complex ultrasound movies.

Iterative proximal-gradient solvers (ISTA/FISTA), a trainable unfolded
network built from the same iteration, a synthetic contrast-enhanced
ultrasound generator, clutter-filter baselines and contrast metrics.

Movies are plain complex ``numpy`` arrays of shape ``(frames, height, width)``;
most routines also accept leading batch axes.
"""

from corona.tensor import (
    ConvKernel2D,
    SvdConvergenceError,
    SvdFactors,
    conv2d,
    conv2d_movie,
    fold,
    spectral_norm,
    svd,
    unfold,
)
from corona.prox import (
    RegWeights,
    l12_norm,
    nuclear_norm,
    objective,
    row_soft_threshold,
    svt,
)
from corona.operators import MeasurementOps
from corona.solver import (
    SolverConfig,
    SolverDivergedError,
    SolverState,
    fista_solve,
    gradient_step,
    ista_solve,
    lipschitz_constant,
    solve,
)
from corona.baselines import (
    SvdFilterConfig,
    WallFilterConfig,
    design_butterworth_highpass,
    svd_filter,
    wall_filter,
)
from corona.network import (
    CoronaNetwork,
    LayerParams,
    compute_thresholds,
    forward,
    forward_layer,
    init_from_ista,
    load_weights,
    save_weights,
)

__version__ = "0.1.0"
