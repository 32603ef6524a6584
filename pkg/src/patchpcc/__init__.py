"""Patch-based learned point cloud geometry compression."""

from patchpcc.geometry import (
    ScaleParams,
    ShapeSpec,
    denormalize,
    load_off_and_sample,
    load_ply,
    normalize_to_box,
    save_ply,
    synth_shape,
)
from patchpcc.patching import (
    PatchConfig,
    assemble,
    extract_patches,
    farthest_point_sample,
    knn,
)
from patchpcc.network import (
    ModelConfig,
    PatchAutoencoder,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from patchpcc.codec import Bitstream, CodecSettings, decode, encode

__version__ = "0.1.0"

__all__ = [
    "Bitstream",
    "CodecSettings",
    "ModelConfig",
    "PatchAutoencoder",
    "PatchConfig",
    "ScaleParams",
    "ShapeSpec",
    "assemble",
    "decode",
    "denormalize",
    "encode",
    "extract_patches",
    "farthest_point_sample",
    "init_params",
    "knn",
    "load_checkpoint",
    "load_off_and_sample",
    "load_ply",
    "normalize_to_box",
    "save_checkpoint",
    "save_ply",
    "synth_shape",
]
