"""Kendall shape space: geometry, h-parallel transport, Jacobi fields,
geodesic regression and population statistics for landmark trajectories."""

__version__ = "0.1.0"

from .errors import *  # noqa: F401,F403
from .preshape import (  # noqa: F401
    LandmarkConfiguration,
    PreShape,
    helmert_basis,
    slerp,
    sphere_dist,
    sphere_exp,
    sphere_log,
    to_landmarks,
    to_preshape,
)
from .shape import (  # noqa: F401
    decompose,
    horizontal,
    omega,
    optimal_rotation,
    shape_dist,
    shape_exp,
    shape_log,
    vertical,
    well_position,
)
from .transport import (  # noqa: F401
    Trajectory,
    TransportProblem,
    transport_closed_form,
    transport_general,
    transport_geodesic,
    transport_trajectory,
    transport_velocity,
)
from .jacobi import JacobiData, boundary_jacobi, jacobi_field, jacobi_field_2d  # noqa: F401
from .regress import RegressionConfig, fit, gradient, objective, permutation_test, r_squared  # noqa: F401
from .stats import bh_fdr, frechet_mean, hotelling_t2, tangent_pca  # noqa: F401
