"""Dataclasses and enums describing Gaussians, slices and volumes."""

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from src.errors import ContractViolationError

# Smallest allowed per-axis standard deviation (world units).
SCALE_FLOOR = 1e-4

# Order of the optimizable arrays; also the IGS1 payload order.
PARAM_FIELDS = ("means", "log_scales", "rotations", "opacity_raw", "intensity_raw")
PARAM_WIDTHS = {"means": 3, "log_scales": 3, "rotations": 4, "opacity_raw": 1, "intensity_raw": 1}


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    return np.exp(-np.logaddexp(0.0, -np.asarray(x, dtype=np.float64)))


def inverse_sigmoid(y: float) -> float:
    """Logit of y in (0, 1)."""
    return float(np.log(y / (1.0 - y)))


class Axis(str, Enum):
    """Slicing axis; the in-plane (u, v) axes follow cyclically."""
    X = "x"
    Y = "y"
    Z = "z"

    @property
    def index(self) -> int:
        return "xyz".index(self.value)

    @property
    def permutation(self) -> tuple[int, int, int]:
        """World indices of (u, v, t) for this slicing axis."""
        k = self.index
        return ((k + 1) % 3, (k + 2) % 3, k)


class SelectionMethod(str, Enum):
    """Candidate-region strategy used for binning."""
    M1 = "m1"  # 3D ellipsoid projection (slice-independent cube)
    M2 = "m2"  # conditional splatting (per-slice box)


class BoxMode(str, Enum):
    """Extent rule for Method 2 boxes."""
    EXACT = "exact"
    CAPPED = "capped3sigma"


class SplitLabel(str, Enum):
    """Dataset role of a slice."""
    TRAIN = "train"
    TEST = "test"


@dataclass
class Gaussian3D:
    """A single anisotropic Gaussian in raw (pre-activation) parameters."""
    mean: np.ndarray  # (3,) voxel coordinates
    log_scale: np.ndarray  # (3,) log standard deviations
    rotation: np.ndarray  # (4,) quaternion, w first
    opacity_raw: float = 0.0
    intensity_raw: float = 0.0

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)

    @property
    def scales(self) -> np.ndarray:
        return np.maximum(np.exp(self.log_scale), SCALE_FLOOR)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_raw))

    @property
    def intensity(self) -> float:
        return float(sigmoid(self.intensity_raw))


@dataclass
class GaussianCloud:
    """The optimizable scene as parallel parameter arrays."""
    means: np.ndarray  # (N, 3)
    log_scales: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4)
    opacity_raw: np.ndarray  # (N,)
    intensity_raw: np.ndarray  # (N,)
    world_bounds: np.ndarray  # (2, 3): lower corner, upper corner
    grad_accum_norm: Optional[np.ndarray] = None  # running mean of |dL/dmean|
    grad_accum_count: Optional[np.ndarray] = None

    def __post_init__(self):
        self.world_bounds = np.asarray(self.world_bounds, dtype=np.float64).reshape(2, 3)
        if self.grad_accum_norm is None:
            self.grad_accum_norm = np.zeros(self.count, dtype=np.float64)
        if self.grad_accum_count is None:
            self.grad_accum_count = np.zeros(self.count, dtype=np.int64)
        self.check_consistency()

    @property
    def count(self) -> int:
        return int(self.means.shape[0])

    @property
    def dtype(self) -> np.dtype:
        return self.means.dtype

    @property
    def extent(self) -> float:
        """Largest side of the world box."""
        return float(np.max(self.world_bounds[1] - self.world_bounds[0]))

    def check_consistency(self) -> None:
        """Raise if any array disagrees with the Gaussian count."""
        n = self.count
        for name in PARAM_FIELDS:
            arr = getattr(self, name)
            width = PARAM_WIDTHS[name]
            expected = (n,) if width == 1 else (n, width)
            if arr.shape != expected:
                raise ContractViolationError(f"{name} has shape {arr.shape}, expected {expected}")
        if self.grad_accum_norm.shape != (n,) or self.grad_accum_count.shape != (n,):
            raise ContractViolationError("densification statistics out of sync with cloud")

    # ==========================================
    # ACTIVATED VIEWS (float64)
    # ==========================================

    def scales(self) -> np.ndarray:
        return np.maximum(np.exp(self.log_scales.astype(np.float64)), SCALE_FLOOR)

    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_raw)

    def intensities(self) -> np.ndarray:
        return sigmoid(self.intensity_raw)

    def gaussian(self, index: int) -> Gaussian3D:
        """Extract one Gaussian as float64 values."""
        return Gaussian3D(
            mean=self.means[index].astype(np.float64),
            log_scale=self.log_scales[index].astype(np.float64),
            rotation=self.rotations[index].astype(np.float64),
            opacity_raw=float(self.opacity_raw[index]),
            intensity_raw=float(self.intensity_raw[index]),
        )

    # ==========================================
    # STRUCTURAL EDITS
    # ==========================================

    def parameters(self) -> dict[str, np.ndarray]:
        """Live references to the optimizable arrays."""
        return {name: getattr(self, name) for name in PARAM_FIELDS}

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            means=self.means.copy(),
            log_scales=self.log_scales.copy(),
            rotations=self.rotations.copy(),
            opacity_raw=self.opacity_raw.copy(),
            intensity_raw=self.intensity_raw.copy(),
            world_bounds=self.world_bounds.copy(),
            grad_accum_norm=self.grad_accum_norm.copy(),
            grad_accum_count=self.grad_accum_count.copy(),
        )

    def keep(self, mask: np.ndarray) -> None:
        """Retain only the Gaussians where mask is True."""
        for name in PARAM_FIELDS:
            setattr(self, name, getattr(self, name)[mask])
        self.grad_accum_norm = self.grad_accum_norm[mask]
        self.grad_accum_count = self.grad_accum_count[mask]

    def extend(self, new_params: dict[str, np.ndarray]) -> None:
        """Append Gaussians; densification statistics start at zero."""
        added = new_params["means"].shape[0]
        for name in PARAM_FIELDS:
            current = getattr(self, name)
            setattr(self, name, np.concatenate([current, new_params[name].astype(current.dtype)]))
        self.grad_accum_norm = np.concatenate([self.grad_accum_norm, np.zeros(added)])
        self.grad_accum_count = np.concatenate([self.grad_accum_count, np.zeros(added, dtype=np.int64)])

    def add_densification_stats(self, mean_grad_norm: np.ndarray, visible: np.ndarray) -> None:
        """Fold one slice's |dL/dmean| into the running mean of visible Gaussians."""
        self.grad_accum_count[visible] += 1
        counts = self.grad_accum_count[visible]
        current = self.grad_accum_norm[visible]
        self.grad_accum_norm[visible] = current + (mean_grad_norm[visible] - current) / counts

    def reset_densification_stats(self) -> None:
        self.grad_accum_norm = np.zeros(self.count, dtype=np.float64)
        self.grad_accum_count = np.zeros(self.count, dtype=np.int64)

    def inside_margin(self, margin: float = 0.1) -> np.ndarray:
        """Mask of Gaussians whose mean lies in the bounds grown by margin × size."""
        lo, hi = self.world_bounds
        pad = (hi - lo) * margin
        means = self.means.astype(np.float64)
        return np.all((means >= lo - pad) & (means <= hi + pad), axis=1)


@dataclass
class SliceSpec:
    """An axis-aligned plane sampled on a regular pixel grid.

    Pixel (iu, iv) has its center at world (u, v) =
    (origin[0] + iu * pitch, origin[1] + iv * pitch) on the plane at depth t.
    Images are indexed [iv, iu] (height × width).
    """
    axis: Axis
    t: float
    width: int
    height: int
    origin: tuple[float, float] = (0.5, 0.5)
    pitch: float = 1.0

    def __post_init__(self):
        self.axis = Axis(self.axis)
        if self.width < 1 or self.height < 1:
            raise ContractViolationError("slice needs at least one pixel")
        if self.pitch <= 0:
            raise ContractViolationError("pixel pitch must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def u_coords(self) -> np.ndarray:
        return self.origin[0] + np.arange(self.width, dtype=np.float64) * self.pitch

    def v_coords(self) -> np.ndarray:
        return self.origin[1] + np.arange(self.height, dtype=np.float64) * self.pitch

    def world_points(self) -> np.ndarray:
        """(height, width, 3) world coordinates of every pixel center."""
        uu, vv = np.meshgrid(self.u_coords(), self.v_coords())
        pts = np.empty(uu.shape + (3,), dtype=np.float64)
        iu, iv, it = self.axis.permutation
        pts[..., iu] = uu
        pts[..., iv] = vv
        pts[..., it] = self.t
        return pts


@dataclass
class Marginal1D:
    """Distribution of a Gaussian along the slicing axis."""
    mu_t: float
    var_t: float


@dataclass
class Conditional2D:
    """In-plane Gaussian conditioned on depth t."""
    mu_uv: np.ndarray  # (2,)
    cov_uv: np.ndarray  # (2, 2)


@dataclass
class CandidateBox:
    """Inclusive pixel-index box; world-unit extent kept for inspection."""
    u_min: int = 0
    u_max: int = -1
    v_min: int = 0
    v_max: int = -1
    empty: bool = True
    center: tuple[float, float] = (0.0, 0.0)  # undilated, world units
    half_extent: tuple[float, float] = (0.0, 0.0)

    @property
    def area(self) -> int:
        if self.empty:
            return 0
        return (self.u_max - self.u_min + 1) * (self.v_max - self.v_min + 1)

    def contains(self, iu: int, iv: int) -> bool:
        return not self.empty and self.u_min <= iu <= self.u_max and self.v_min <= iv <= self.v_max


@dataclass
class RenderedSlice:
    """Composited image and the residual transmittance per pixel."""
    image: np.ndarray  # (height, width)
    final_transmittance: np.ndarray  # (height, width)


@dataclass
class TileBins:
    """Per-tile candidate lists sorted front-to-back."""
    tile_size: int
    tiles_x: int
    tiles_y: int
    lists: list[np.ndarray]  # row-major tiles, each an int array of Gaussian indices
    boxes: np.ndarray  # (N, 4) u_min, u_max, v_min, v_max; empty rows have u_min > u_max

    def tile(self, tx: int, ty: int) -> np.ndarray:
        return self.lists[ty * self.tiles_x + tx]

    def tile_bounds(self, tx: int, ty: int, width: int, height: int) -> tuple[int, int, int, int]:
        """Pixel ranges [u0, u1) × [v0, v1) of a tile."""
        u0 = tx * self.tile_size
        v0 = ty * self.tile_size
        return u0, min(u0 + self.tile_size, width), v0, min(v0 + self.tile_size, height)


@dataclass
class Volume:
    """Scalar voxel grid stored x-fastest: data[k, j, i] is voxel (i, j, k)."""
    data: np.ndarray  # (nz, ny, nx) float32
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.data.ndim != 3 or min(self.data.shape) < 2:
            raise ContractViolationError("volume must be 3D with at least 2 voxels per axis")

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    @property
    def bounds(self) -> np.ndarray:
        return np.array([[0.0, 0.0, 0.0], list(map(float, self.dims))])


@dataclass
class SliceDataset:
    """Slices with their images and train/test roles."""
    specs: list[SliceSpec]
    images: list[np.ndarray]
    labels: list[SplitLabel]
    indices: list[int]  # voxel index along the slicing axis
    volume_dims: tuple[int, int, int] = (0, 0, 0)

    def __len__(self) -> int:
        return len(self.specs)

    @property
    def axis_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for spec in self.specs:
            counts[spec.axis.value] = counts.get(spec.axis.value, 0) + 1
        return counts

    def ids(self, label: Optional[SplitLabel] = None) -> list[int]:
        """Positions of slices with the given label (all if None)."""
        return [i for i, lab in enumerate(self.labels) if label is None or lab == label]
