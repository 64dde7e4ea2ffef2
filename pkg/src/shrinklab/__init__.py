"""Numerical laboratory for rescaled mean curvature flow near closed shrinkers."""

from .errors import (
    BalanceError,
    FlowError,
    FlowEscape,
    GeometryError,
    InadmissibleGraphError,
    ReexpressionError,
    ShootingError,
    ShrinkLabError,
    SpectralError,
    SpectralGapError,
)
from .geometry import (
    BaseShrinker,
    GraphFunction,
    TubularQuantities,
    build_round,
    build_sphere,
    graph_mean_curvature,
    load_geometry,
    normal_graph_reexpress,
    rotate_graph,
    rotation_2d,
    rotation_3d,
    save_geometry,
    shoot_shrinker_profile,
    tubular_quantities,
)

__version__ = "0.1.0"
