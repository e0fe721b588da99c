"""Inner Gaussian Splatting - volumetric reconstruction from pose-free slices."""

__version__ = "0.1.0"
