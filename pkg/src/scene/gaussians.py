"""Gaussian primitive math: rotations, covariances, densities, grid init."""

import logging
from typing import TYPE_CHECKING, Optional

import numpy as np

from ..errors import ContractViolationError, DegenerateInputError, InvalidConfigError
from .models import SCALE_FLOOR, Gaussian3D, GaussianCloud, inverse_sigmoid

if TYPE_CHECKING:
    from ..config import InitConfig

logger = logging.getLogger(__name__)


# ==========================================
# ROTATIONS
# ==========================================

def normalize_quaternions(q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return unit quaternions and their original norms (batched, w first)."""
    q = np.asarray(q, dtype=np.float64)
    norms = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norms == 0.0) or not np.all(np.isfinite(q)):
        raise DegenerateInputError("quaternion must be finite with nonzero norm")
    return q / norms, norms[..., 0]


def rotation_matrices(q: np.ndarray) -> np.ndarray:
    """Batched quaternion -> rotation matrix, (..., 4) -> (..., 3, 3)."""
    qn, _ = normalize_quaternions(q)
    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    r = np.empty(qn.shape[:-1] + (3, 3), dtype=np.float64)
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def rotation_jacobians(qn: np.ndarray) -> np.ndarray:
    """dR/dq for unit quaternions, (..., 4) -> (..., 4, 3, 3)."""
    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    zero = np.zeros_like(w)
    rows = [
        [[zero, -2 * z, 2 * y], [2 * z, zero, -2 * x], [-2 * y, 2 * x, zero]],
        [[zero, 2 * y, 2 * z], [2 * y, -4 * x, -2 * w], [2 * z, 2 * w, -4 * x]],
        [[-4 * y, 2 * x, 2 * w], [2 * x, zero, 2 * z], [-2 * w, 2 * z, -4 * y]],
        [[-4 * z, -2 * w, 2 * x], [2 * w, -4 * z, 2 * y], [2 * x, 2 * y, zero]],
    ]
    jac = np.array(rows, dtype=np.float64)  # (4, 3, 3, ...)
    return np.moveaxis(jac, (0, 1, 2), (-3, -2, -1))


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a single quaternion (normalized internally)."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,):
        raise ContractViolationError(f"quaternion must have shape (4,), got {q.shape}")
    return rotation_matrices(q)


# ==========================================
# COVARIANCE AND DENSITY
# ==========================================

def covariances(log_scales: np.ndarray, rotations: np.ndarray) -> np.ndarray:
    """Batched Σ = R S Sᵀ Rᵀ with the scale floor applied."""
    scales = np.maximum(np.exp(np.asarray(log_scales, dtype=np.float64)), SCALE_FLOOR)
    m = rotation_matrices(rotations) * scales[..., None, :]
    cov = m @ np.swapaxes(m, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def build_covariance(g: Gaussian3D) -> np.ndarray:
    """Covariance of one Gaussian."""
    return covariances(g.log_scale, g.rotation)


def evaluate_density(g: Gaussian3D, x: np.ndarray) -> np.ndarray:
    """Unnormalized density exp(-½ (x-μ)ᵀ Σ⁻¹ (x-μ)); x may be (3,) or (..., 3)."""
    cov = build_covariance(g)
    d = np.asarray(x, dtype=np.float64) - g.mean
    flat = d.reshape(-1, 3)
    sol = np.linalg.solve(cov, flat.T).T
    quad = np.einsum("ij,ij->i", flat, sol)
    result = np.exp(-0.5 * quad).reshape(d.shape[:-1])
    return result if result.ndim else float(result)


def cloud_covariances(cloud: GaussianCloud) -> np.ndarray:
    return covariances(cloud.log_scales, cloud.rotations)


# ==========================================
# EIGEN-ANALYSIS
# ==========================================

def max_eigenvalues(cov: np.ndarray) -> np.ndarray:
    """Largest eigenvalue of each symmetric 3×3 matrix (closed-form trig solve)."""
    a = np.asarray(cov, dtype=np.float64)
    p1 = a[..., 0, 1] ** 2 + a[..., 0, 2] ** 2 + a[..., 1, 2] ** 2
    diag = np.stack([a[..., 0, 0], a[..., 1, 1], a[..., 2, 2]], axis=-1)
    q = diag.sum(axis=-1) / 3.0
    p2 = ((diag - q[..., None]) ** 2).sum(axis=-1) + 2.0 * p1
    p = np.sqrt(p2 / 6.0)
    safe_p = np.where(p > 0, p, 1.0)
    b = (a - q[..., None, None] * np.eye(3)) / safe_p[..., None, None]
    r = np.clip(np.linalg.det(b) / 2.0, -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    largest = q + 2.0 * p * np.cos(phi)
    return np.where(p1 == 0.0, diag.max(axis=-1), largest)


def max_eigenvalue(cov: np.ndarray) -> float:
    """λ_max of a symmetric 3×3 matrix."""
    a = np.asarray(cov, dtype=np.float64)
    if a.shape != (3, 3):
        raise ContractViolationError(f"expected a 3x3 matrix, got {a.shape}")
    asym = np.max(np.abs(a - a.T))
    if asym > 1e-8 * max(1.0, float(np.max(np.abs(a)))):
        raise ContractViolationError(f"matrix is not symmetric (asymmetry {asym:.3e})")
    return float(max_eigenvalues(a))


def principal_axes(cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Largest eigenvalue and its unit eigenvector for each matrix."""
    vals, vecs = np.linalg.eigh(cov)
    return vals[..., -1], vecs[..., :, -1]


# ==========================================
# INITIALIZATION
# ==========================================

def init_grid_cloud(
    resolution: int,
    bounds: np.ndarray,
    defaults: Optional["InitConfig"] = None,
) -> GaussianCloud:
    """Place resolution³ Gaussians at cell centers of a regular grid.

    Args:
        resolution: Grid points per axis (>= 2)
        bounds: (2, 3) lower and upper corners of the volume
        defaults: Initial opacity / intensity / scale fraction

    Returns:
        A fresh GaussianCloud, x-fastest ordering
    """
    if defaults is None:
        from ..config import InitConfig
        defaults = InitConfig()

    if resolution < 2:
        raise InvalidConfigError(f"grid resolution must be >= 2, got {resolution}")
    bounds = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
    size = bounds[1] - bounds[0]
    if np.any(size <= 0):
        raise InvalidConfigError("bounds must have positive extent on every axis")

    spacing = size / resolution
    centers = [bounds[0, a] + (np.arange(resolution) + 0.5) * spacing[a] for a in range(3)]
    gz, gy, gx = np.meshgrid(centers[2], centers[1], centers[0], indexing="ij")
    means = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    n = means.shape[0]

    dtype = np.dtype(defaults.dtype)
    log_scale = np.log(np.maximum(spacing * defaults.scale_fraction, SCALE_FLOOR))
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0

    cloud = GaussianCloud(
        means=means.astype(dtype),
        log_scales=np.tile(log_scale, (n, 1)).astype(dtype),
        rotations=rotations.astype(dtype),
        opacity_raw=np.full(n, inverse_sigmoid(defaults.opacity), dtype=dtype),
        intensity_raw=np.full(n, inverse_sigmoid(defaults.intensity), dtype=dtype),
        world_bounds=bounds,
    )
    logger.debug("Initialized %d Gaussians on a %d^3 grid", n, resolution)
    return cloud
