"""Shared fixtures and numerical helpers."""

from typing import Callable

import numpy as np
import pytest

from src.scene.models import PARAM_FIELDS, GaussianCloud, Gaussian3D


def central_difference(func: Callable[[], float], array: np.ndarray, index: tuple, h: float = 1e-4) -> float:
    """(f(x + h) - f(x - h)) / 2h for one entry of array, restored afterwards."""
    original = array[index]
    array[index] = original + h
    plus = func()
    array[index] = original - h
    minus = func()
    array[index] = original
    return (plus - minus) / (2.0 * h)


def numerical_gradients(func: Callable[[], float], cloud: GaussianCloud, h: float = 1e-4) -> dict[str, np.ndarray]:
    """Central differences of func over every raw parameter of cloud."""
    grads = {}
    for name in PARAM_FIELDS:
        array = getattr(cloud, name)
        out = np.zeros(array.shape)
        for index in np.ndindex(array.shape):
            out[index] = central_difference(func, array, index, h)
        grads[name] = out
    return grads


def assert_gradients_close(analytic: np.ndarray, numeric: np.ndarray, rtol: float = 1e-3, atol: float = 1e-6):
    diff = np.abs(analytic - numeric)
    bound = atol + rtol * np.maximum(np.abs(analytic), np.abs(numeric))
    assert np.all(diff <= bound), f"max violation {np.max(diff - bound):.3e}\nanalytic={analytic}\nnumeric={numeric}"


def random_rotations(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def make_cloud(
    rng: np.random.Generator,
    n: int,
    low: float = 2.0,
    high: float = 6.0,
    scale_range: tuple[float, float] = (0.6, 1.6),
    size: float = 8.0,
) -> GaussianCloud:
    """float64 cloud with random anisotropic Gaussians inside [0, size]³."""
    return GaussianCloud(
        means=rng.uniform(low, high, size=(n, 3)),
        log_scales=np.log(rng.uniform(*scale_range, size=(n, 3))),
        rotations=random_rotations(rng, n),
        opacity_raw=rng.uniform(-1.5, 1.5, size=n),
        intensity_raw=rng.uniform(-1.5, 1.5, size=n),
        world_bounds=np.array([[0.0] * 3, [size] * 3]),
    )


def single_gaussian_cloud(
    mean, scales=(1.0, 1.0, 1.0), opacity_raw: float = 0.0, intensity_raw: float = 0.0, size: float = 16.0
) -> GaussianCloud:
    return GaussianCloud(
        means=np.array([mean], dtype=np.float64),
        log_scales=np.log(np.array([scales], dtype=np.float64)),
        rotations=np.array([[1.0, 0.0, 0.0, 0.0]]),
        opacity_raw=np.array([opacity_raw], dtype=np.float64),
        intensity_raw=np.array([intensity_raw], dtype=np.float64),
        world_bounds=np.array([[0.0] * 3, [size] * 3]),
    )


def random_gaussian(rng: np.random.Generator) -> Gaussian3D:
    return Gaussian3D(
        mean=rng.uniform(-2.0, 2.0, size=3),
        log_scale=np.log(rng.uniform(0.3, 2.0, size=3)),
        rotation=random_rotations(rng, 1)[0],
        opacity_raw=float(rng.normal()),
        intensity_raw=float(rng.normal()),
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
