"""Conditional splatting: depth-factorized Gaussian densities and candidate boxes.

A 3D Gaussian seen on the plane t = const factorizes exactly as
p(u, v, t) = p(t) · p(u, v | t): a 1D marginal along the slicing axis times
a 2D Gaussian whose mean slides with t and whose covariance is the Schur
complement of the depth block.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfigError
from .scene.gaussians import build_covariance, max_eigenvalues
from .scene.models import (
    Axis,
    BoxMode,
    CandidateBox,
    Conditional2D,
    Gaussian3D,
    Marginal1D,
    SliceSpec,
)

logger = logging.getLogger(__name__)

SINGULAR_DET = 1e-20
POINT_SUPPORT_TOL = 1e-6
CAPPED_RADIUS = 3.0
PIXEL_TOL = 1e-9


# ==========================================
# COORDINATE PERMUTATION
# ==========================================

def permute_for_axis(cov: np.ndarray, mean: np.ndarray, axis: Axis) -> tuple[np.ndarray, np.ndarray]:
    """Reorder coordinates to (u, v, t); works on single or batched inputs."""
    perm = list(Axis(axis).permutation)
    cov = np.asarray(cov, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    return cov[..., perm, :][..., :, perm], mean[..., perm]


def unpermute_for_axis(cov: np.ndarray, mean: np.ndarray, axis: Axis) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of permute_for_axis."""
    inv = list(np.argsort(Axis(axis).permutation))
    cov = np.asarray(cov, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    return cov[..., inv, :][..., :, inv], mean[..., inv]


# ==========================================
# BATCHED CONDITIONING
# ==========================================

@dataclass
class SliceConditionals:
    """Marginal and conditional parameters of many Gaussians on one plane."""
    mu_t: np.ndarray  # (N,)
    var_t: np.ndarray  # (N,)
    offset: np.ndarray  # (N,) t - mu_t
    marginal_density: np.ndarray  # (N,)
    cross: np.ndarray  # (N, 2) covariance between (u, v) and t
    mu_uv: np.ndarray  # (N, 2)
    cov_uv: np.ndarray  # (N, 2, 2)
    cov_inv: np.ndarray  # (N, 2, 2), zero where singular
    singular: np.ndarray  # (N,) bool

    @property
    def count(self) -> int:
        return int(self.mu_t.shape[0])


def condition_batch(means: np.ndarray, covs: np.ndarray, axis: Axis, t: float) -> SliceConditionals:
    """Condition every Gaussian on depth t along axis."""
    cov_p, mean_p = permute_for_axis(covs, means, axis)
    var_t = cov_p[:, 2, 2]
    cross = cov_p[:, :2, 2]
    offset = t - mean_p[:, 2]
    marginal = np.exp(-0.5 * offset * offset / var_t)

    gain = cross / var_t[:, None]
    mu_uv = mean_p[:, :2] + gain * offset[:, None]
    cov_uv = cov_p[:, :2, :2] - cross[:, :, None] * cross[:, None, :] / var_t[:, None, None]
    cov_uv = 0.5 * (cov_uv + np.swapaxes(cov_uv, -1, -2))

    det = cov_uv[:, 0, 0] * cov_uv[:, 1, 1] - cov_uv[:, 0, 1] * cov_uv[:, 1, 0]
    singular = det < SINGULAR_DET
    safe_det = np.where(singular, 1.0, det)
    cov_inv = np.empty_like(cov_uv)
    cov_inv[:, 0, 0] = cov_uv[:, 1, 1] / safe_det
    cov_inv[:, 1, 1] = cov_uv[:, 0, 0] / safe_det
    cov_inv[:, 0, 1] = -cov_uv[:, 0, 1] / safe_det
    cov_inv[:, 1, 0] = -cov_uv[:, 1, 0] / safe_det
    cov_inv[singular] = 0.0

    return SliceConditionals(
        mu_t=mean_p[:, 2],
        var_t=var_t,
        offset=offset,
        marginal_density=marginal,
        cross=cross,
        mu_uv=mu_uv,
        cov_uv=cov_uv,
        cov_inv=cov_inv,
        singular=singular,
    )


def conditional_densities(
    cond: SliceConditionals,
    index: np.ndarray,
    u: np.ndarray,
    v: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Factorized density of Gaussians `index` at in-plane points (u, v).

    Returns:
        density (K, P), and the in-plane offsets e_u, e_v (K, P)
    """
    eu = u[None, :] - cond.mu_uv[index, 0][:, None]
    ev = v[None, :] - cond.mu_uv[index, 1][:, None]
    ci = cond.cov_inv[index]
    quad = ci[:, 0, 0, None] * eu * eu + 2.0 * ci[:, 0, 1, None] * eu * ev + ci[:, 1, 1, None] * ev * ev
    density = cond.marginal_density[index][:, None] * np.exp(-0.5 * quad)

    singular = cond.singular[index]
    if np.any(singular):
        at_mean = (np.abs(eu[singular]) <= POINT_SUPPORT_TOL) & (np.abs(ev[singular]) <= POINT_SUPPORT_TOL)
        density[singular] = cond.marginal_density[index][singular][:, None] * at_mean
    return density, eu, ev


# ==========================================
# SINGLE-GAUSSIAN OPERATIONS
# ==========================================

def _condition_one(g: Gaussian3D, axis: Axis, t: float) -> SliceConditionals:
    cov = build_covariance(g)
    return condition_batch(g.mean[None, :], cov[None, :, :], axis, t)


def marginal(g: Gaussian3D, axis: Axis, t: float) -> tuple[Marginal1D, float]:
    """1D marginal along the slicing axis and its unnormalized density at t."""
    cond = _condition_one(g, axis, t)
    return Marginal1D(mu_t=float(cond.mu_t[0]), var_t=float(cond.var_t[0])), float(cond.marginal_density[0])


def condition_on_depth(g: Gaussian3D, axis: Axis, t: float) -> Conditional2D:
    """In-plane conditional Gaussian p(u, v | t)."""
    cond = _condition_one(g, axis, t)
    return Conditional2D(mu_uv=cond.mu_uv[0].copy(), cov_uv=cond.cov_uv[0].copy())


def factorized_density(g: Gaussian3D, u: float, v: float, t: float, axis: Axis) -> float:
    """p(t) · p(u, v | t), equal to the direct 3D density at the unpermuted point."""
    cond = _condition_one(g, axis, t)
    density, _, _ = conditional_densities(cond, np.array([0]), np.array([float(u)]), np.array([float(v)]))
    return float(density[0, 0])


# ==========================================
# CANDIDATE BOXES
# ==========================================

def _pixel_ranges(
    lo: np.ndarray, hi: np.ndarray, origin: float, pitch: float, size: int
) -> tuple[np.ndarray, np.ndarray]:
    """Inclusive pixel-center index range covered by world intervals [lo, hi]."""
    first = np.ceil((lo - origin) / pitch - PIXEL_TOL)
    last = np.floor((hi - origin) / pitch + PIXEL_TOL)
    first = np.clip(first, 0, size).astype(np.int64)
    last = np.clip(last, -1, size - 1).astype(np.int64)
    return first, last


def _boxes_from_extent(
    center: np.ndarray,
    half: np.ndarray,
    dilation: float,
    empty: np.ndarray,
    spec: SliceSpec,
) -> np.ndarray:
    """(N, 4) integer boxes [u_min, u_max, v_min, v_max]; empty rows get u_min > u_max."""
    u0, u1 = _pixel_ranges(center[:, 0] - half[:, 0] - dilation, center[:, 0] + half[:, 0] + dilation,
                           spec.origin[0], spec.pitch, spec.width)
    v0, v1 = _pixel_ranges(center[:, 1] - half[:, 1] - dilation, center[:, 1] + half[:, 1] + dilation,
                           spec.origin[1], spec.pitch, spec.height)
    boxes = np.stack([u0, u1, v0, v1], axis=1)
    none = empty | (u0 > u1) | (v0 > v1)
    boxes[none] = (0, -1, 0, -1)
    return boxes


def method1_extents(
    means: np.ndarray, covs: np.ndarray, spec: SliceSpec, sigma_cutoff: float = 3.0
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cube radius, projected center and emptiness for every Gaussian."""
    radius = sigma_cutoff * np.sqrt(max_eigenvalues(covs))
    _, mean_p = permute_for_axis(covs, means, spec.axis)
    empty = np.abs(spec.t - mean_p[:, 2]) > radius
    return radius, mean_p[:, :2], empty


def boxes_method1(
    means: np.ndarray, covs: np.ndarray, spec: SliceSpec, sigma_cutoff: float = 3.0
) -> np.ndarray:
    """Method 1 boxes for a whole cloud on one slice, always dilated by half a pixel."""
    radius, center, empty = method1_extents(means, covs, spec, sigma_cutoff)
    half = np.stack([radius, radius], axis=1)
    return _boxes_from_extent(center, half, 0.5 * spec.pitch, empty, spec)


def method2_extents(
    cond: SliceConditionals, epsilon: float, mode: BoxMode = BoxMode.EXACT
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Half-widths of the epsilon-level ellipse's bounding box, its center, emptiness."""
    if not 0.0 < epsilon < 1.0:
        raise InvalidConfigError(f"epsilon must lie in (0, 1), got {epsilon}")
    m = cond.marginal_density
    empty = m <= epsilon
    ratio = np.where(empty, 1.0, m / epsilon)
    radius = np.sqrt(2.0 * np.log(ratio))
    if BoxMode(mode) == BoxMode.CAPPED:
        radius = np.minimum(radius, CAPPED_RADIUS)
    sd = np.sqrt(np.maximum(np.stack([cond.cov_uv[:, 0, 0], cond.cov_uv[:, 1, 1]], axis=1), 0.0))
    half = radius[:, None] * sd
    return half, cond.mu_uv, empty


def boxes_method2(
    cond: SliceConditionals, spec: SliceSpec, epsilon: float, mode: BoxMode = BoxMode.EXACT
) -> np.ndarray:
    """Method 2 boxes; exact mode is dilated by half a pixel, capped mode is not."""
    half, center, empty = method2_extents(cond, epsilon, mode)
    dilation = 0.5 * spec.pitch if BoxMode(mode) == BoxMode.EXACT else 0.0
    return _boxes_from_extent(center, half, dilation, empty, spec)


def _as_candidate_box(row: np.ndarray, center: np.ndarray, half: np.ndarray, empty: bool) -> CandidateBox:
    is_empty = bool(empty or row[0] > row[1] or row[2] > row[3])
    return CandidateBox(
        u_min=int(row[0]),
        u_max=int(row[1]),
        v_min=int(row[2]),
        v_max=int(row[3]),
        empty=is_empty,
        center=(float(center[0]), float(center[1])),
        half_extent=(0.0, 0.0) if is_empty else (float(half[0]), float(half[1])),
    )


def bbox_method1(g: Gaussian3D, spec: SliceSpec, sigma_cutoff: float = 3.0) -> CandidateBox:
    """Orthographic footprint of the cube of half-width sigma_cutoff·√λ_max."""
    means = g.mean[None, :]
    covs = build_covariance(g)[None, :, :]
    radius, center, empty = method1_extents(means, covs, spec, sigma_cutoff)
    row = boxes_method1(means, covs, spec, sigma_cutoff)[0]
    return _as_candidate_box(row, center[0], np.array([radius[0], radius[0]]), bool(empty[0]))


def bbox_method2(
    g: Gaussian3D, spec: SliceSpec, epsilon: float, mode: BoxMode = BoxMode.EXACT
) -> CandidateBox:
    """Per-slice box around {p(u, v, t) >= epsilon}."""
    cond = _condition_one(g, spec.axis, spec.t)
    half, center, empty = method2_extents(cond, epsilon, mode)
    row = boxes_method2(cond, spec, epsilon, mode)[0]
    return _as_candidate_box(row, center[0], half[0], bool(empty[0]))
