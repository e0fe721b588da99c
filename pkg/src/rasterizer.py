"""Tile-based slice rasterizer with an analytic backward pass.

Pixels composite their tile's candidates front-to-back:
I = Σ_i T_i p_i α_i c_i,  T_i = Π_{j<i} (1 - p_j α_j),
where p_i is the conditional-splatting density on the slice plane.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .conditional import (
    SliceConditionals,
    boxes_method1,
    boxes_method2,
    condition_batch,
    conditional_densities,
    unpermute_for_axis,
)
from .errors import ContractViolationError
from .scene.gaussians import cloud_covariances, normalize_quaternions, rotation_jacobians, rotation_matrices
from .scene.models import (
    SCALE_FLOOR,
    BoxMode,
    GaussianCloud,
    RenderedSlice,
    SelectionMethod,
    SliceSpec,
    TileBins,
)

logger = logging.getLogger(__name__)

DEFAULT_TILE = 16
EARLY_STOP_TRANSMITTANCE = 1e-4


@dataclass
class CloudGradients:
    """dL/d(raw parameter) for every Gaussian, float64."""
    means: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_raw: np.ndarray
    intensity_raw: np.ndarray
    visible: np.ndarray  # (N,) bool, Gaussian was a candidate somewhere on the slice

    @classmethod
    def zeros(cls, count: int) -> "CloudGradients":
        return cls(
            means=np.zeros((count, 3)),
            log_scales=np.zeros((count, 3)),
            rotations=np.zeros((count, 4)),
            opacity_raw=np.zeros(count),
            intensity_raw=np.zeros(count),
            visible=np.zeros(count, dtype=bool),
        )

    @property
    def mean_grad_norm(self) -> np.ndarray:
        return np.linalg.norm(self.means, axis=1)

    def add(self, other: "CloudGradients") -> None:
        self.means += other.means
        self.log_scales += other.log_scales
        self.rotations += other.rotations
        self.opacity_raw += other.opacity_raw
        self.intensity_raw += other.intensity_raw
        self.visible |= other.visible

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            "means": self.means,
            "log_scales": self.log_scales,
            "rotations": self.rotations,
            "opacity_raw": self.opacity_raw,
            "intensity_raw": self.intensity_raw,
        }


@dataclass
class SliceContext:
    """Per-slice quantities shared by binning, forward and backward."""
    spec: SliceSpec
    covs: np.ndarray  # (N, 3, 3)
    cond: SliceConditionals
    opacity: np.ndarray  # (N,)
    intensity: np.ndarray  # (N,)


def prepare_slice(cloud: GaussianCloud, spec: SliceSpec, covs: Optional[np.ndarray] = None) -> SliceContext:
    """Condition the whole cloud on the slice plane."""
    if covs is None:
        covs = cloud_covariances(cloud)
    means = cloud.means.astype(np.float64)
    return SliceContext(
        spec=spec,
        covs=covs,
        cond=condition_batch(means, covs, spec.axis, spec.t),
        opacity=cloud.opacities(),
        intensity=cloud.intensities(),
    )


# ==========================================
# BINNING
# ==========================================

def candidate_boxes(
    cloud: GaussianCloud,
    spec: SliceSpec,
    method: SelectionMethod,
    epsilon: float,
    box_mode: BoxMode = BoxMode.EXACT,
    sigma_cutoff: float = 3.0,
    context: Optional[SliceContext] = None,
) -> np.ndarray:
    """(N, 4) pixel boxes from the selected candidate method."""
    context = context or prepare_slice(cloud, spec)
    if SelectionMethod(method) == SelectionMethod.M1:
        return boxes_method1(cloud.means.astype(np.float64), context.covs, spec, sigma_cutoff)
    return boxes_method2(context.cond, spec, epsilon, box_mode)


def bin_gaussians(
    cloud: GaussianCloud,
    spec: SliceSpec,
    method: SelectionMethod = SelectionMethod.M2,
    epsilon: float = 0.01,
    tile: int = DEFAULT_TILE,
    box_mode: BoxMode = BoxMode.EXACT,
    sigma_cutoff: float = 3.0,
    context: Optional[SliceContext] = None,
) -> TileBins:
    """Assign Gaussians to tiles, each list sorted by distance to the plane."""
    if tile < 1:
        raise ContractViolationError(f"tile size must be >= 1, got {tile}")
    context = context or prepare_slice(cloud, spec)
    boxes = candidate_boxes(cloud, spec, method, epsilon, box_mode, sigma_cutoff, context)

    n = cloud.count
    order = np.lexsort((np.arange(n), np.abs(context.cond.offset)))
    sorted_boxes = boxes[order]
    nonempty = sorted_boxes[:, 0] <= sorted_boxes[:, 1]

    tiles_x = -(-spec.width // tile)
    tiles_y = -(-spec.height // tile)
    lists = []
    for ty in range(tiles_y):
        v0, v1 = ty * tile, min((ty + 1) * tile, spec.height) - 1
        in_row = nonempty & (sorted_boxes[:, 2] <= v1) & (sorted_boxes[:, 3] >= v0)
        for tx in range(tiles_x):
            u0, u1 = tx * tile, min((tx + 1) * tile, spec.width) - 1
            hit = in_row & (sorted_boxes[:, 0] <= u1) & (sorted_boxes[:, 1] >= u0)
            lists.append(order[hit])

    return TileBins(tile_size=tile, tiles_x=tiles_x, tiles_y=tiles_y, lists=lists, boxes=boxes)


# ==========================================
# FORWARD
# ==========================================

@dataclass
class _TileState:
    """Recomputed per-tile compositing terms (K candidates × P pixels)."""
    density: np.ndarray
    eu: np.ndarray
    ev: np.ndarray
    alpha: np.ndarray  # p·α after early-stop masking
    transmittance: np.ndarray  # T before each Gaussian
    final_transmittance: np.ndarray  # (P,)


def _tile_pixels(spec: SliceSpec, bins: TileBins, tx: int, ty: int) -> tuple[tuple[slice, slice], np.ndarray, np.ndarray]:
    u0, u1, v0, v1 = bins.tile_bounds(tx, ty, spec.width, spec.height)
    uu, vv = np.meshgrid(spec.u_coords()[u0:u1], spec.v_coords()[v0:v1])
    return (slice(v0, v1), slice(u0, u1)), uu.ravel(), vv.ravel()


def _composite(
    context: SliceContext, idx: np.ndarray, u: np.ndarray, v: np.ndarray, min_transmittance: float
) -> _TileState:
    density, eu, ev = conditional_densities(context.cond, idx, u, v)
    alpha = density * context.opacity[idx][:, None]

    trans = np.cumprod(1.0 - alpha, axis=0)
    before = np.vstack([np.ones((1, u.size)), trans[:-1]])
    if min_transmittance > 0.0:
        alpha = np.where(before >= min_transmittance, alpha, 0.0)
        trans = np.cumprod(1.0 - alpha, axis=0)
        before = np.vstack([np.ones((1, u.size)), trans[:-1]])

    return _TileState(
        density=density,
        eu=eu,
        ev=ev,
        alpha=alpha,
        transmittance=before,
        final_transmittance=trans[-1],
    )


def render_slice(
    cloud: GaussianCloud,
    spec: SliceSpec,
    bins: TileBins,
    min_transmittance: float = EARLY_STOP_TRANSMITTANCE,
    context: Optional[SliceContext] = None,
) -> RenderedSlice:
    """Composite every pixel over its tile's sorted candidate list."""
    context = context or prepare_slice(cloud, spec)
    image = np.zeros(spec.shape)
    final = np.ones(spec.shape)

    for ty in range(bins.tiles_y):
        for tx in range(bins.tiles_x):
            idx = bins.tile(tx, ty)
            if idx.size == 0:
                continue
            region, u, v = _tile_pixels(spec, bins, tx, ty)
            state = _composite(context, idx, u, v, min_transmittance)
            weights = state.transmittance * state.alpha
            values = context.intensity[idx] @ weights
            shape = (region[0].stop - region[0].start, region[1].stop - region[1].start)
            image[region] = values.reshape(shape)
            final[region] = state.final_transmittance.reshape(shape)

    return RenderedSlice(image=image, final_transmittance=final)


def render_reference(cloud: GaussianCloud, spec: SliceSpec) -> RenderedSlice:
    """Brute-force compositing of every Gaussian at every pixel, no early stop.

    Densities come from a direct 3×3 solve of the quadratic form; ordering
    uses the same (|t - μ_t|, index) key as the binned renderer.
    """
    n = cloud.count
    points = spec.world_points().reshape(-1, 3)
    image = np.zeros(points.shape[0])
    trans = np.ones(points.shape[0])
    if n == 0:
        return RenderedSlice(image=image.reshape(spec.shape), final_transmittance=trans.reshape(spec.shape))

    covs = cloud_covariances(cloud)
    means = cloud.means.astype(np.float64)
    depth = np.abs(spec.t - means[:, spec.axis.index])
    order = np.lexsort((np.arange(n), depth))
    opac = cloud.opacities()
    inten = cloud.intensities()

    for i in order:
        d = points - means[i]
        sol = np.linalg.solve(covs[i], d.T).T
        p = np.exp(-0.5 * np.einsum("ij,ij->i", d, sol))
        a = p * opac[i]
        image += trans * a * inten[i]
        trans *= 1.0 - a

    return RenderedSlice(image=image.reshape(spec.shape), final_transmittance=trans.reshape(spec.shape))


# ==========================================
# BACKWARD
# ==========================================

def render_backward(
    cloud: GaussianCloud,
    spec: SliceSpec,
    bins: TileBins,
    dl_dimage: np.ndarray,
    min_transmittance: float = EARLY_STOP_TRANSMITTANCE,
    context: Optional[SliceContext] = None,
    update_stats: bool = True,
) -> CloudGradients:
    """Gradients of a scalar loss w.r.t. all raw Gaussian parameters.

    The forward state is recomputed tile by tile. The depth sort and the
    early-stop mask are treated as constants.
    """
    dl_dimage = np.asarray(dl_dimage, dtype=np.float64)
    if dl_dimage.shape != spec.shape:
        raise ContractViolationError(f"dL/dimage has shape {dl_dimage.shape}, slice is {spec.shape}")

    context = context or prepare_slice(cloud, spec)
    n = cloud.count
    grads = CloudGradients.zeros(n)
    grad_mean_p = np.zeros((n, 3))
    grad_cov_p = np.zeros((n, 3, 3))

    for ty in range(bins.tiles_y):
        for tx in range(bins.tiles_x):
            idx = bins.tile(tx, ty)
            if idx.size == 0:
                continue
            grads.visible[idx] = True
            region, u, v = _tile_pixels(spec, bins, tx, ty)
            g_pix = dl_dimage[region].ravel()
            if not np.any(g_pix):
                continue
            state = _composite(context, idx, u, v, min_transmittance)
            _accumulate_tile(context, idx, state, g_pix, grads, grad_mean_p, grad_cov_p)

    cov_world, mean_world = unpermute_for_axis(grad_cov_p, grad_mean_p, spec.axis)
    grads.means = mean_world
    _chain_covariance(cloud, cov_world, grads)

    if update_stats:
        cloud.add_densification_stats(grads.mean_grad_norm, grads.visible)
    return grads


def _accumulate_tile(
    context: SliceContext,
    idx: np.ndarray,
    state: _TileState,
    g_pix: np.ndarray,
    grads: CloudGradients,
    grad_mean_p: np.ndarray,
    grad_cov_p: np.ndarray,
) -> None:
    cond = context.cond
    opac = context.opacity[idx]
    inten = context.intensity[idx]
    alpha, trans = state.alpha, state.transmittance

    contrib = trans * alpha * inten[:, None]
    suffix = contrib.sum(axis=0, keepdims=True) - np.cumsum(contrib, axis=0)
    active = alpha > 0.0
    di_dalpha = np.where(active, trans * inten[:, None] - suffix / (1.0 - alpha), 0.0)

    dl_dalpha = g_pix[None, :] * di_dalpha
    grads.intensity_raw[idx] += (g_pix[None, :] * trans * alpha).sum(axis=1) * inten * (1.0 - inten)
    grads.opacity_raw[idx] += (dl_dalpha * state.density).sum(axis=1) * opac * (1.0 - opac)

    # d ln p terms, weighted by dL/dp · p
    weight = dl_dalpha * opac[:, None] * state.density
    weight[cond.singular[idx]] = 0.0

    ci = cond.cov_inv[idx]
    gu = ci[:, 0, 0, None] * state.eu + ci[:, 0, 1, None] * state.ev
    gv = ci[:, 1, 0, None] * state.eu + ci[:, 1, 1, None] * state.ev
    var_t = cond.var_t[idx][:, None]
    delta = cond.offset[idx][:, None]
    cross_u = cond.cross[idx, 0][:, None]
    cross_v = cond.cross[idx, 1][:, None]
    s = gu * cross_u + gv * cross_v
    resid = (delta - s) / var_t

    grad_mean_p[idx, 0] += (weight * gu).sum(axis=1)
    grad_mean_p[idx, 1] += (weight * gv).sum(axis=1)
    grad_mean_p[idx, 2] += (weight * (delta - s) / var_t).sum(axis=1)

    g_uu = 0.5 * (weight * gu * gu).sum(axis=1)
    g_uv = 0.5 * (weight * gu * gv).sum(axis=1)
    g_vv = 0.5 * (weight * gv * gv).sum(axis=1)
    g_ut = 0.5 * (weight * resid * gu).sum(axis=1)
    g_vt = 0.5 * (weight * resid * gv).sum(axis=1)
    g_tt = 0.5 * (weight * resid * resid).sum(axis=1)

    grad_cov_p[idx, 0, 0] += g_uu
    grad_cov_p[idx, 1, 1] += g_vv
    grad_cov_p[idx, 0, 1] += g_uv
    grad_cov_p[idx, 1, 0] += g_uv
    grad_cov_p[idx, 0, 2] += g_ut
    grad_cov_p[idx, 2, 0] += g_ut
    grad_cov_p[idx, 1, 2] += g_vt
    grad_cov_p[idx, 2, 1] += g_vt
    grad_cov_p[idx, 2, 2] += g_tt


def _chain_covariance(cloud: GaussianCloud, grad_cov: np.ndarray, grads: CloudGradients) -> None:
    """Propagate dL/dΣ through Σ = (R S)(R S)ᵀ to log-scales and quaternions."""
    raw_scales = np.exp(cloud.log_scales.astype(np.float64))
    scales = np.maximum(raw_scales, SCALE_FLOOR)
    qn, qnorm = normalize_quaternions(cloud.rotations)
    rot = rotation_matrices(qn)
    m = rot * scales[:, None, :]
    grad_m = 2.0 * grad_cov @ m

    grad_scales = np.einsum("nij,nij->nj", grad_m, rot)
    grads.log_scales = np.where(raw_scales >= SCALE_FLOOR, grad_scales * scales, 0.0)

    grad_rot = grad_m * scales[:, None, :]
    grad_qn = np.einsum("nij,nkij->nk", grad_rot, rotation_jacobians(qn))
    radial = np.einsum("nk,nk->n", grad_qn, qn)
    grads.rotations = (grad_qn - qn * radial[:, None]) / qnorm[:, None]


# ==========================================
# MULTI-SLICE HELPERS
# ==========================================

def render_many(
    cloud: GaussianCloud,
    specs: Sequence[SliceSpec],
    method: SelectionMethod = SelectionMethod.M2,
    epsilon: float = 0.01,
    tile: int = DEFAULT_TILE,
    box_mode: BoxMode = BoxMode.EXACT,
    min_transmittance: float = EARLY_STOP_TRANSMITTANCE,
    threads: int = 1,
) -> list[RenderedSlice]:
    """Render slices concurrently from a shared read-only cloud."""
    covs = cloud_covariances(cloud)
    cutoff = _cutoff_for(epsilon)

    def _one(spec: SliceSpec) -> RenderedSlice:
        context = prepare_slice(cloud, spec, covs)
        bins = bin_gaussians(cloud, spec, method, epsilon, tile, box_mode, cutoff, context)
        return render_slice(cloud, spec, bins, min_transmittance, context)

    if threads <= 1:
        return [_one(spec) for spec in specs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_one, specs))


def _cutoff_for(epsilon: float) -> float:
    from .config import method1_cutoff
    return method1_cutoff(epsilon)
