"""Shared domain types: pixel grids, run-length masks, object records, manifests.

Conventions used throughout the toolkit:

* pixel coordinates are (x, y) with x = column, y = row, origin at the
  image top-left; slide coordinates are micrometres with the same origin
* bounding boxes are half-open integer rectangles (x0, y0, x1, y1)
* run-length masks are row-major, alternating background/foreground run
  lengths, starting with a possibly-zero background run

All types here are immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import (
    CorruptMaskError,
    ManifestError,
    RecordValidationError,
    RejectedInputError,
)

MANIFEST_SCHEMA = "omg/1"

# Physical pixel size sanity window (micrometres per pixel); source data is
# scanned at roughly 0.25 um/px, so anything outside this window is a unit bug.
MPP_MIN = 0.05
MPP_MAX = 2.0


class Label(str, Enum):
    MF = "MF"
    MLF = "MLF"
    OTHER = "OTHER"


class Species(str, Enum):
    HUMAN = "human"
    CANINE = "canine"


class Provenance(str, Enum):
    PHH3 = "phh3"
    ACTIVE_LEARNING = "active_learning"
    OPEN_SOURCE = "open_source"


@dataclass(frozen=True)
class PixelGrid:
    """Dimensions and physical scale of one raster."""

    width: int
    height: int
    mpp: float

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise RejectedInputError(
                f"grid dimensions must be >= 1, got {self.width}x{self.height}"
            )
        if not (MPP_MIN < self.mpp < MPP_MAX):
            raise RejectedInputError(
                f"mpp {self.mpp} outside plausible range ({MPP_MIN}, {MPP_MAX})"
            )

    @property
    def n_pixels(self) -> int:
        return self.width * self.height


@dataclass(frozen=True)
class BinaryMask:
    """Run-length encoded binary raster tied to a :class:`PixelGrid`."""

    grid: PixelGrid
    runs: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "runs", tuple(int(r) for r in self.runs))
        if any(r < 0 for r in self.runs):
            raise CorruptMaskError(f"negative run length in {self.runs[:8]}...")
        total = sum(self.runs)
        if total != self.grid.n_pixels:
            raise CorruptMaskError(
                f"runs sum to {total}, grid has {self.grid.n_pixels} pixels"
            )

    @property
    def foreground_pixels(self) -> int:
        return sum(self.runs[1::2])


def encode_mask(raster: np.ndarray, grid: PixelGrid) -> BinaryMask:
    """Run-length encode a binary raster.

    The raster must be shaped (grid.height, grid.width); any nonzero entry
    counts as foreground. decode_mask(encode_mask(r)) reproduces r exactly.
    """
    raster = np.asarray(raster)
    if raster.shape != (grid.height, grid.width):
        raise RejectedInputError(
            f"raster shape {raster.shape} does not match grid "
            f"{grid.height}x{grid.width}"
        )
    flat = raster.astype(bool).ravel()
    if flat.size == 0:
        return BinaryMask(grid, (0,))
    switch = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    starts = np.concatenate(([0], switch, [flat.size]))
    lengths = np.diff(starts)
    runs = [int(n) for n in lengths]
    if flat[0]:
        runs.insert(0, 0)
    return BinaryMask(grid, tuple(runs))


def decode_mask(mask: BinaryMask) -> np.ndarray:
    """Expand a run-length mask into a (height, width) boolean array."""
    values = np.zeros(len(mask.runs), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, mask.runs)
    if flat.size != mask.grid.n_pixels:
        raise CorruptMaskError(
            f"decoded {flat.size} pixels, expected {mask.grid.n_pixels}"
        )
    return flat.reshape(mask.grid.height, mask.grid.width)


def mask_area_um2(mask: BinaryMask) -> float:
    """Physical foreground area: pixel count times mpp squared."""
    return mask.foreground_pixels * mask.grid.mpp**2


def tight_bbox(raster: np.ndarray) -> tuple[int, int, int, int] | None:
    """Half-open (x0, y0, x1, y1) bounding box of the foreground, or None if empty."""
    raster = np.asarray(raster, dtype=bool)
    rows = np.flatnonzero(raster.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(raster.any(axis=0))
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1


def foreground_centroid(raster: np.ndarray) -> tuple[float, float]:
    """(x, y) mean of foreground pixel indices. Raster must be nonempty."""
    ys, xs = np.nonzero(np.asarray(raster, dtype=bool))
    if xs.size == 0:
        raise RejectedInputError("centroid of an empty mask is undefined")
    return float(xs.mean()), float(ys.mean())


def crop_patch(arr: np.ndarray, cx: float, cy: float, size: int) -> np.ndarray:
    """Crop a size x size patch centered on (cx, cy), reflect-padding at the
    array border. Works for HxW and HxWxC arrays."""
    if size < 1:
        raise RejectedInputError(f"patch size must be >= 1, got {size}")
    h, w = arr.shape[:2]
    x0 = int(np.floor(cx)) - size // 2
    y0 = int(np.floor(cy)) - size // 2
    x1, y1 = x0 + size, y0 + size
    sx0, sy0 = max(0, x0), max(0, y0)
    sx1, sy1 = min(w, x1), min(h, y1)
    if sx0 >= sx1 or sy0 >= sy1:
        raise RejectedInputError(f"patch center ({cx}, {cy}) outside array {w}x{h}")
    window = arr[sy0:sy1, sx0:sx1]
    pads = ((sy0 - y0, y1 - sy1), (sx0 - x0, x1 - sx1))
    pads += ((0, 0),) * (arr.ndim - 2)
    if any(p for pair in pads for p in pair):
        window = np.pad(window, pads, mode="symmetric")
    return window


@dataclass(frozen=True)
class ObjectRecord:
    """One annotated cell-scale object in the unified dataset.

    The mask is cropped to the bounding box; bbox and centroid are in the
    coordinates of the image referenced by image_path.
    """

    id: str
    dataset: str
    image_path: str
    grid: PixelGrid
    label: Label
    centroid_px: tuple[float, float]
    bbox_px: tuple[int, int, int, int]
    mask: BinaryMask
    species: Species
    tumour_type: str
    provenance: Provenance
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        x0, y0, x1, y1 = self.bbox_px
        if not (0 <= x0 < x1 <= self.grid.width and 0 <= y0 < y1 <= self.grid.height):
            raise RecordValidationError(
                f"bbox {self.bbox_px} outside grid "
                f"{self.grid.width}x{self.grid.height}",
                record_id=self.id,
            )
        cx, cy = self.centroid_px
        if not (x0 <= cx < x1 and y0 <= cy < y1):
            raise RecordValidationError(
                f"centroid {self.centroid_px} outside bbox {self.bbox_px}",
                record_id=self.id,
            )
        if self.mask.grid.width != x1 - x0 or self.mask.grid.height != y1 - y0:
            raise RecordValidationError(
                f"mask is {self.mask.grid.width}x{self.mask.grid.height}, "
                f"bbox is {x1 - x0}x{y1 - y0}",
                record_id=self.id,
            )


def record_from_raster(
    raster: np.ndarray,
    grid: PixelGrid,
    *,
    id: str,
    dataset: str,
    image_path: str,
    label: Label,
    species: Species,
    tumour_type: str,
    provenance: Provenance,
    extras: dict | None = None,
) -> ObjectRecord:
    """Build an ObjectRecord from a full-image binary raster.

    Computes centroid and tight bbox and crops the mask to the bbox. The
    raster must contain at least one foreground pixel.
    """
    raster = np.asarray(raster, dtype=bool)
    if raster.shape != (grid.height, grid.width):
        raise RejectedInputError(
            f"raster shape {raster.shape} does not match grid"
        )
    bbox = tight_bbox(raster)
    if bbox is None:
        raise RejectedInputError("cannot build a record from an empty mask")
    x0, y0, x1, y1 = bbox
    crop = raster[y0:y1, x0:x1]
    crop_grid = PixelGrid(x1 - x0, y1 - y0, grid.mpp)
    return ObjectRecord(
        id=id,
        dataset=dataset,
        image_path=image_path,
        grid=grid,
        label=label,
        centroid_px=foreground_centroid(raster),
        bbox_px=bbox,
        mask=encode_mask(crop, crop_grid),
        species=species,
        tumour_type=tumour_type,
        provenance=provenance,
        extras=dict(extras or {}),
    )


@dataclass(frozen=True)
class Detection:
    """One classifier output in slide space (micrometres)."""

    centroid_um: tuple[float, float]
    score: float
    mask: BinaryMask | None = None
    source_tile: str = ""

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise RejectedInputError(f"score {self.score} outside [0, 1]")


_RECORD_KEYS = (
    "schema",
    "id",
    "dataset",
    "image_path",
    "grid",
    "label",
    "centroid_px",
    "bbox_px",
    "mask",
    "species",
    "tumour_type",
    "provenance",
)


def record_to_json(record: ObjectRecord) -> dict:
    obj = {
        "schema": MANIFEST_SCHEMA,
        "id": record.id,
        "dataset": record.dataset,
        "image_path": record.image_path,
        "grid": {
            "width": record.grid.width,
            "height": record.grid.height,
            "mpp": record.grid.mpp,
        },
        "label": record.label.value,
        "centroid_px": [float(record.centroid_px[0]), float(record.centroid_px[1])],
        "bbox_px": [int(v) for v in record.bbox_px],
        "mask": {
            "width": record.mask.grid.width,
            "height": record.mask.grid.height,
            "runs": list(record.mask.runs),
        },
        "species": record.species.value,
        "tumour_type": record.tumour_type,
        "provenance": record.provenance.value,
    }
    for key, value in record.extras.items():
        if key not in obj:
            obj[key] = value
    return obj


def record_from_json(obj: dict) -> ObjectRecord:
    schema = obj.get("schema")
    if schema != MANIFEST_SCHEMA:
        raise ManifestError(f"unsupported schema {schema!r}, expected {MANIFEST_SCHEMA!r}")
    missing = [k for k in _RECORD_KEYS if k not in obj]
    if missing:
        raise ManifestError(f"missing keys {missing}")
    record_id = str(obj["id"])
    try:
        grid = PixelGrid(
            int(obj["grid"]["width"]), int(obj["grid"]["height"]), float(obj["grid"]["mpp"])
        )
        mask_obj = obj["mask"]
        mask = BinaryMask(
            PixelGrid(int(mask_obj["width"]), int(mask_obj["height"]), grid.mpp),
            tuple(mask_obj["runs"]),
        )
    except (RejectedInputError, CorruptMaskError) as exc:
        raise RecordValidationError(str(exc), record_id=record_id) from exc
    extras = {k: v for k, v in obj.items() if k not in _RECORD_KEYS}
    return ObjectRecord(
        id=record_id,
        dataset=str(obj["dataset"]),
        image_path=str(obj["image_path"]),
        grid=grid,
        label=Label(obj["label"]),
        centroid_px=(float(obj["centroid_px"][0]), float(obj["centroid_px"][1])),
        bbox_px=tuple(int(v) for v in obj["bbox_px"]),
        mask=mask,
        species=Species(obj["species"]),
        tumour_type=str(obj["tumour_type"]),
        provenance=Provenance(obj["provenance"]),
        extras=extras,
    )


def read_manifest(path: str | Path) -> list[ObjectRecord]:
    """Read a line-oriented manifest. Raises with the line number on bad input."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"invalid JSON ({exc.msg})", line=lineno) from exc
            if not isinstance(obj, dict):
                raise ManifestError("record is not an object", line=lineno)
            try:
                records.append(record_from_json(obj))
            except RecordValidationError:
                raise
            except ManifestError as exc:
                if exc.line is None:
                    raise ManifestError(str(exc), line=lineno) from exc
                raise
            except (KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"malformed record ({exc})", line=lineno) from exc
    return records


def write_manifest(records: Iterable[ObjectRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record_to_json(record)) + "\n")
