"""Analytic phantom volumes with nested ellipsoidal shells."""

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from ..errors import InvalidConfigError
from ..scene.models import Volume

logger = logging.getLogger(__name__)

MIN_DIM = 16
GRADIENT_AMPLITUDE = 0.05
CHECKER_AMPLITUDE = 0.15
CHECKER_PERIOD = 4.0


class PhantomKind(str, Enum):
    NESTED_ELLIPSOIDS = "nested_ellipsoids"
    CHECKER_SHELLS = "checker_shells"


@dataclass
class PhantomShells:
    """Everything needed to evaluate a phantom at any point."""
    kind: PhantomKind
    dims: tuple[int, int, int]
    center: np.ndarray  # (3,)
    radii: np.ndarray  # (S, 3), outermost first
    intensities: np.ndarray  # (S,)
    gradient: np.ndarray  # (3,), per unit of normalized offset
    checker_period: float = CHECKER_PERIOD
    checker_amplitude: float = 0.0


def phantom_shells(kind: PhantomKind, dims: tuple[int, int, int], seed: int = 0) -> PhantomShells:
    """Draw the shell layout of a phantom deterministically from seed."""
    kind = PhantomKind(kind)
    if min(dims) < MIN_DIM:
        raise InvalidConfigError(f"phantom dims must be >= {MIN_DIM} per axis, got {tuple(dims)}")

    rng = np.random.default_rng(seed)
    size = np.array(dims, dtype=np.float64)
    center = np.array([d // 2 + 0.5 for d in dims])
    count = int(rng.integers(3, 7))

    outer = rng.uniform(0.7, 0.9, size=3) * (size / 2.0)
    radii = [outer]
    for _ in range(count - 1):
        radii.append(radii[-1] * rng.uniform(0.55, 0.85, size=3))
    intensities = rng.permutation(np.linspace(0.25, 0.9, count))

    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)

    return PhantomShells(
        kind=kind,
        dims=tuple(int(d) for d in dims),
        center=center,
        radii=np.array(radii),
        intensities=intensities,
        gradient=GRADIENT_AMPLITUDE * direction,
        checker_amplitude=CHECKER_AMPLITUDE if kind == PhantomKind.CHECKER_SHELLS else 0.0,
    )


def evaluate_phantom(shells: PhantomShells, points: np.ndarray) -> np.ndarray:
    """Phantom value at world points (..., 3)."""
    points = np.asarray(points, dtype=np.float64)
    offset = points - shells.center
    half = np.array(shells.dims, dtype=np.float64) / 2.0

    values = np.zeros(points.shape[:-1])
    inside_any = np.zeros(points.shape[:-1], dtype=bool)
    for radii, intensity in zip(shells.radii, shells.intensities):
        inside = np.sum((offset / radii) ** 2, axis=-1) <= 1.0
        values = np.where(inside, intensity, values)
        inside_any |= inside

    values = values + (offset / half) @ shells.gradient
    if shells.checker_amplitude:
        cells = np.floor(points / shells.checker_period).astype(np.int64).sum(axis=-1)
        values = values * (1.0 + shells.checker_amplitude * np.where(cells % 2 == 0, 1.0, -1.0))
    return np.clip(np.where(inside_any, values, 0.0), 0.0, 1.0)


def make_phantom(kind: PhantomKind, dims: tuple[int, int, int], seed: int = 0) -> Volume:
    """Voxelize a phantom at voxel centers (i + 0.5)."""
    shells = phantom_shells(kind, dims, seed)
    nx, ny, nz = shells.dims
    zz, yy, xx = np.meshgrid(
        np.arange(nz) + 0.5, np.arange(ny) + 0.5, np.arange(nx) + 0.5, indexing="ij"
    )
    points = np.stack([xx, yy, zz], axis=-1)
    data = evaluate_phantom(shells, points).astype(np.float32)
    logger.info("Built %s phantom %s with %d shells", shells.kind.value, shells.dims, len(shells.intensities))
    return Volume(
        data=data,
        metadata={"phantom": shells.kind.value, "seed": str(seed), "shells": str(len(shells.intensities))},
    )
