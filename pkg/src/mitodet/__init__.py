"""Mitotic-figure detection and dataset-curation toolkit."""

__version__ = "0.1.0"

from .core import (  # noqa: F401
    BinaryMask,
    Detection,
    Label,
    ObjectRecord,
    PixelGrid,
    Provenance,
    Species,
    decode_mask,
    encode_mask,
    mask_area_um2,
    read_manifest,
    write_manifest,
)
