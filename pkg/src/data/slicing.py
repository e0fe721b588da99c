"""Slice extraction, train/test splitting and image export."""

import json
import logging
from pathlib import Path
from typing import Iterable, Union

import numpy as np
from PIL import Image

from ..errors import ContractViolationError, InvalidConfigError
from ..scene.models import Axis, SliceDataset, SliceSpec, SplitLabel, Volume

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def slice_spec_for(volume_dims: tuple[int, int, int], axis: Axis, t: float) -> SliceSpec:
    """Pixel grid of a plane at depth t, one pixel per voxel column."""
    axis = Axis(axis)
    iu, iv, _ = axis.permutation
    return SliceSpec(axis=axis, t=float(t), width=int(volume_dims[iu]), height=int(volume_dims[iv]))


def slice_image(volume: Volume, axis: Axis, index: int) -> np.ndarray:
    """Image of voxel layer `index` along axis, indexed [v, u]."""
    data = volume.data
    axis = Axis(axis)
    if axis == Axis.Z:
        image = data[index]
    elif axis == Axis.X:
        image = data[:, :, index]
    else:
        image = data[:, index, :].T
    return np.ascontiguousarray(image, dtype=np.float32)


def extract_slices(volume: Volume, axes: Iterable[Axis]) -> SliceDataset:
    """One slice per voxel layer along every requested axis, all labelled TRAIN."""
    requested = {Axis(a) for a in axes}
    if not requested:
        raise ContractViolationError("at least one axis is required")

    specs, images, indices = [], [], []
    for axis in (a for a in Axis if a in requested):
        for index in range(volume.dims[axis.index]):
            specs.append(slice_spec_for(volume.dims, axis, index + 0.5))
            images.append(slice_image(volume, axis, index))
            indices.append(index)

    dataset = SliceDataset(
        specs=specs,
        images=images,
        labels=[SplitLabel.TRAIN] * len(specs),
        indices=indices,
        volume_dims=volume.dims,
    )
    logger.debug("Extracted %d slices %s", len(dataset), dataset.axis_counts)
    return dataset


def reassemble_volume(dataset: SliceDataset, axis: Axis) -> np.ndarray:
    """Stack the slices of one axis back into a (nz, ny, nx) array."""
    axis = Axis(axis)
    nx, ny, nz = dataset.volume_dims
    out = np.zeros((nz, ny, nx), dtype=np.float32)
    seen = 0
    for spec, image, index in zip(dataset.specs, dataset.images, dataset.indices):
        if spec.axis != axis:
            continue
        seen += 1
        if axis == Axis.Z:
            out[index] = image
        elif axis == Axis.X:
            out[:, :, index] = image
        else:
            out[:, index, :] = image.T
    if seen != dataset.volume_dims[axis.index]:
        raise ContractViolationError(f"dataset holds {seen} {axis.value}-slices, volume needs {dataset.volume_dims[axis.index]}")
    return out


def split_dataset(dataset: SliceDataset, test_fraction: float, seed: int = 0) -> SliceDataset:
    """Label evenly spaced slices per axis as TEST; the stride phase is seeded."""
    if not 0.0 < test_fraction < 0.5:
        raise InvalidConfigError(f"test_fraction must lie in (0, 0.5), got {test_fraction}")

    rng = np.random.default_rng(seed)
    labels = [SplitLabel.TRAIN] * len(dataset)
    for axis in Axis:
        positions = sorted(
            (i for i, spec in enumerate(dataset.specs) if spec.axis == axis),
            key=lambda i: dataset.indices[i],
        )
        n = len(positions)
        if n == 0:
            continue
        count = max(1, int(np.floor(n * test_fraction)))
        stride = n // count
        phase = int(rng.integers(stride))
        for k in range(count):
            labels[positions[phase + k * stride]] = SplitLabel.TEST

    split = SliceDataset(
        specs=dataset.specs,
        images=dataset.images,
        labels=labels,
        indices=dataset.indices,
        volume_dims=dataset.volume_dims,
    )
    logger.info(
        "Split %d slices: %d train, %d test",
        len(split), len(split.ids(SplitLabel.TRAIN)), len(split.ids(SplitLabel.TEST)),
    )
    return split


# ==========================================
# EXPORT
# ==========================================

def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def export_png(image: np.ndarray, path: PathLike) -> None:
    """8-bit grayscale PNG of an image in [0, 1]."""
    Image.fromarray(to_uint8(image)).save(path, format="PNG")


def export_raw(image: np.ndarray, path: PathLike) -> None:
    """Row-major little-endian f32 dump."""
    Path(path).write_bytes(np.ascontiguousarray(image, dtype="<f4").tobytes())


def write_dataset(dataset: SliceDataset, out_dir: PathLike) -> Path:
    """Write one PNG per slice plus a manifest.json describing the split."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for sid, (spec, image, label, index) in enumerate(
        zip(dataset.specs, dataset.images, dataset.labels, dataset.indices)
    ):
        name = f"{spec.axis.value}_{index:04d}.png"
        export_png(image, out_dir / name)
        entries.append({
            "id": sid,
            "axis": spec.axis.value,
            "index": index,
            "t": spec.t,
            "width": spec.width,
            "height": spec.height,
            "label": label.value,
            "image": name,
        })
    manifest = out_dir / "manifest.json"
    manifest.write_text(
        json.dumps({"volume_dims": list(dataset.volume_dims), "slices": entries}, indent=2),
        encoding="utf-8",
    )
    logger.info("Wrote %d slice images to %s", len(entries), out_dir)
    return manifest
