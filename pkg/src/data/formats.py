"""IGV1 volume and IGS1 checkpoint readers and writers.

IGV1: b"IGV1" | u32 header length | JSON header | f32 LE payload (x fastest)
IGS1: b"IGS" + version byte | u64 count | 6 × f64 bounds | f32 LE parameter arrays
"""

import json
import logging
import struct
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from ..errors import FormatError
from ..scene.models import PARAM_FIELDS, PARAM_WIDTHS, GaussianCloud, Volume

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

VOLUME_MAGIC = b"IGV1"
CHECKPOINT_PREFIX = b"IGS"
CHECKPOINT_VERSION = b"1"
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_BOUNDS = struct.Struct("<6d")


def _read_bytes(path: PathLike) -> bytes:
    with open(path, "rb") as f:
        return f.read()


# ==========================================
# VOLUMES
# ==========================================

def encode_volume(volume: Volume, raw: bool = False) -> bytes:
    header = {
        "dims": list(volume.dims),
        "dtype": "f32",
        "order": "x-fastest",
        "raw": raw,
        "metadata": {str(k): str(v) for k, v in volume.metadata.items()},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(volume.data, dtype="<f4").tobytes()
    return VOLUME_MAGIC + _U32.pack(len(header_bytes)) + header_bytes + payload


def write_volume(volume: Volume, path: PathLike, raw: bool = False) -> None:
    """Write an IGV1 file; raw=True marks intensities for min/max rescaling on load."""
    Path(path).write_bytes(encode_volume(volume, raw))
    logger.debug("Wrote volume %s to %s", volume.dims, path)


def decode_volume(blob: bytes) -> Volume:
    """Parse IGV1 bytes; every failure raises FormatError with a byte offset."""
    if len(blob) < 8:
        raise FormatError("file too short for IGV1 preamble", offset=len(blob))
    if blob[:4] != VOLUME_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {VOLUME_MAGIC!r}", offset=0)
    (header_len,) = _U32.unpack_from(blob, 4)
    header_end = 8 + header_len
    if header_end > len(blob):
        raise FormatError(f"header length {header_len} runs past end of file", offset=4)

    header = _parse_header(blob[8:header_end])
    dims = _parse_dims(header.get("dims"))
    if header.get("dtype") != "f32":
        raise FormatError(f"unsupported dtype {header.get('dtype')!r}", offset=8)
    if header.get("order") != "x-fastest":
        raise FormatError(f"unsupported order {header.get('order')!r}", offset=8)
    raw = header.get("raw", False)
    metadata = header.get("metadata", {})
    if not isinstance(raw, bool) or not isinstance(metadata, dict):
        raise FormatError("header fields raw/metadata have the wrong type", offset=8)

    nx, ny, nz = dims
    expected = nx * ny * nz * 4
    actual = len(blob) - header_end
    if actual < expected:
        raise FormatError(f"payload truncated: {actual} of {expected} bytes", offset=len(blob))
    if actual > expected:
        raise FormatError(f"{actual - expected} trailing bytes after payload", offset=header_end + expected)

    data = np.frombuffer(blob, dtype="<f4", count=nx * ny * nz, offset=header_end)
    data = data.astype(np.float32).reshape(nz, ny, nx)
    if not np.all(np.isfinite(data)):
        bad = int(np.argmax(~np.isfinite(data.ravel())))
        raise FormatError("payload holds a non-finite value", offset=header_end + 4 * bad)

    metadata = {str(k): str(v) for k, v in metadata.items()}
    if raw:
        data, metadata = _rescale(data, metadata)
    elif data.size and (data.min() < 0.0 or data.max() > 1.0):
        raise FormatError("normalized volume has values outside [0, 1]", offset=header_end)
    return Volume(data=data, metadata=metadata)


def load_volume(path: PathLike) -> Volume:
    """Read an IGV1 file."""
    volume = decode_volume(_read_bytes(path))
    logger.info("Loaded volume %s from %s", volume.dims, path)
    return volume


def _parse_header(raw: bytes) -> dict[str, Any]:
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"header is not valid JSON: {e}", offset=8) from e
    if not isinstance(header, dict):
        raise FormatError("header must be a JSON object", offset=8)
    return header


def _parse_dims(dims: Any) -> tuple[int, int, int]:
    if (
        not isinstance(dims, list)
        or len(dims) != 3
        or not all(isinstance(d, int) and not isinstance(d, bool) for d in dims)
    ):
        raise FormatError(f"dims must be three integers, got {dims!r}", offset=8)
    if min(dims) < 2:
        raise FormatError(f"every dimension must be >= 2, got {dims}", offset=8)
    return dims[0], dims[1], dims[2]


def _rescale(data: np.ndarray, metadata: dict[str, str]) -> tuple[np.ndarray, dict[str, str]]:
    lo, hi = float(data.min()), float(data.max())
    metadata = {**metadata, "raw_min": repr(lo), "raw_max": repr(hi)}
    if hi == lo:
        return np.zeros_like(data), metadata
    scaled = (data.astype(np.float64) - lo) / (hi - lo)
    return np.clip(scaled, 0.0, 1.0).astype(np.float32), metadata


# ==========================================
# CHECKPOINTS
# ==========================================

def encode_checkpoint(cloud: GaussianCloud) -> bytes:
    parts = [
        CHECKPOINT_PREFIX + CHECKPOINT_VERSION,
        _U64.pack(cloud.count),
        _BOUNDS.pack(*cloud.world_bounds.ravel().tolist()),
    ]
    for name in PARAM_FIELDS:
        parts.append(np.ascontiguousarray(getattr(cloud, name), dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(cloud: GaussianCloud, path: PathLike, metadata: Optional[dict[str, Any]] = None) -> None:
    """Write an IGS1 checkpoint plus a JSON sidecar at path + '.json'."""
    path = Path(path)
    path.write_bytes(encode_checkpoint(cloud))
    sidecar = {
        "format": "IGS1",
        "count": cloud.count,
        "world_bounds": cloud.world_bounds.tolist(),
        "fields": list(PARAM_FIELDS),
        **(metadata or {}),
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2), encoding="utf-8")
    logger.info("Saved checkpoint with %d Gaussians to %s", cloud.count, path)


def decode_checkpoint(blob: bytes) -> GaussianCloud:
    header_size = 4 + _U64.size + _BOUNDS.size
    if len(blob) < 4:
        raise FormatError("file too short for IGS magic", offset=len(blob))
    if blob[:3] != CHECKPOINT_PREFIX:
        raise FormatError(f"bad magic {blob[:4]!r}", offset=0)
    if blob[3:4] != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {blob[3:4]!r}", offset=3)
    if len(blob) < header_size:
        raise FormatError("checkpoint header truncated", offset=len(blob))

    (count,) = _U64.unpack_from(blob, 4)
    bounds = np.array(_BOUNDS.unpack_from(blob, 12), dtype=np.float64).reshape(2, 3)
    if not np.all(np.isfinite(bounds)) or np.any(bounds[1] <= bounds[0]):
        raise FormatError("world bounds must be finite with positive extent", offset=12)

    per_gaussian = sum(PARAM_WIDTHS[name] for name in PARAM_FIELDS)
    expected = count * per_gaussian * 4
    actual = len(blob) - header_size
    if actual < expected:
        raise FormatError(f"parameter block truncated: {actual} of {expected} bytes", offset=len(blob))
    if actual > expected:
        raise FormatError(f"{actual - expected} trailing bytes", offset=header_size + expected)

    arrays = {}
    offset = header_size
    for name in PARAM_FIELDS:
        width = PARAM_WIDTHS[name]
        values = np.frombuffer(blob, dtype="<f4", count=count * width, offset=offset).astype(np.float32)
        if not np.all(np.isfinite(values)):
            raise FormatError(f"non-finite value in {name}", offset=offset)
        arrays[name] = values.reshape(count, width) if width > 1 else values
        offset += count * width * 4

    if count and np.any(np.linalg.norm(arrays["rotations"], axis=1) == 0.0):
        raise FormatError("zero quaternion in rotations", offset=header_size)
    return GaussianCloud(world_bounds=bounds, **arrays)


def load_checkpoint(path: PathLike) -> GaussianCloud:
    """Read an IGS1 checkpoint (the sidecar is informational only)."""
    cloud = decode_checkpoint(_read_bytes(path))
    logger.info("Loaded checkpoint with %d Gaussians from %s", cloud.count, path)
    return cloud
