"""Volume I/O, slicing and phantoms."""

from .formats import decode_checkpoint, decode_volume, load_checkpoint, load_volume, save_checkpoint, write_volume
from .phantom import PhantomKind, PhantomShells, evaluate_phantom, make_phantom, phantom_shells
from .slicing import (
    export_png,
    export_raw,
    extract_slices,
    reassemble_volume,
    slice_image,
    slice_spec_for,
    split_dataset,
    write_dataset,
)

__all__ = [
    "decode_checkpoint",
    "decode_volume",
    "load_checkpoint",
    "load_volume",
    "save_checkpoint",
    "write_volume",
    "PhantomKind",
    "PhantomShells",
    "evaluate_phantom",
    "make_phantom",
    "phantom_shells",
    "export_png",
    "export_raw",
    "extract_slices",
    "reassemble_volume",
    "slice_image",
    "slice_spec_for",
    "split_dataset",
    "write_dataset",
]
