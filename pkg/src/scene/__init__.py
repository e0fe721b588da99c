"""Scene module: Gaussian primitives, slices and volumes."""

from .models import (
    PARAM_FIELDS,
    SCALE_FLOOR,
    Axis,
    BoxMode,
    CandidateBox,
    Conditional2D,
    Gaussian3D,
    GaussianCloud,
    Marginal1D,
    RenderedSlice,
    SelectionMethod,
    SliceDataset,
    SliceSpec,
    SplitLabel,
    TileBins,
    Volume,
    inverse_sigmoid,
    sigmoid,
)
from .gaussians import (
    build_covariance,
    cloud_covariances,
    evaluate_density,
    init_grid_cloud,
    max_eigenvalue,
    quaternion_to_rotation,
)

__all__ = [
    "PARAM_FIELDS",
    "SCALE_FLOOR",
    "Axis",
    "BoxMode",
    "CandidateBox",
    "Conditional2D",
    "Gaussian3D",
    "GaussianCloud",
    "Marginal1D",
    "RenderedSlice",
    "SelectionMethod",
    "SliceDataset",
    "SliceSpec",
    "SplitLabel",
    "TileBins",
    "Volume",
    "inverse_sigmoid",
    "sigmoid",
    "build_covariance",
    "cloud_covariances",
    "evaluate_density",
    "init_grid_cloud",
    "max_eigenvalue",
    "quaternion_to_rotation",
]
