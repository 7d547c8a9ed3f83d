"""End-to-end inference over an ROI raster.

Tiles the ROI with enough overlap that every cell-scale object is fully
contained in at least one tile, runs stage-one proposals and stage-two
classification per tile, maps detections into slide micrometre coordinates,
and removes the cross-tile duplicates the overlap necessarily creates.

Output is independent of worker count: tiles are merged in plan order and
the final list is sorted by score (ties by coordinates).
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .core import BinaryMask, Detection, PixelGrid, crop_patch
from .errors import BackendError, ManifestError, RejectedInputError
from .proposal import (
    MaskProposal,
    ProposalBackend,
    ProposalFilterConfig,
    propose_tile,
)

log = logging.getLogger(__name__)

DETECTIONS_SCHEMA = "omg-det/1"

# Scores a batch: (N,H,W,3) rgb patches + (N,H,W) object masks -> (N,) in [0,1].
PatchScorer = Callable[[np.ndarray, np.ndarray], np.ndarray]

DEFAULT_TILE_SIZE = 1024
DEFAULT_OVERLAP = 128
DEFAULT_DEDUPE_RADIUS_UM = 7.5


@dataclass(frozen=True)
class TilePlan:
    tile_size_px: int
    overlap_px: int
    origins: tuple[tuple[int, int], ...]


def _axis_origins(dim: int, tile: int, overlap: int) -> list[int]:
    if dim <= tile:
        return [0]
    stride = tile - overlap
    origins = list(range(0, dim - tile, stride))
    origins.append(dim - tile)
    return origins


def plan_tiles(
    width: int,
    height: int,
    tile_size: int = DEFAULT_TILE_SIZE,
    overlap: int = DEFAULT_OVERLAP,
) -> TilePlan:
    """Tile origins at stride (tile_size - overlap), last row/column clamped
    inside the ROI. An ROI smaller than one tile gets a single tile."""
    if overlap < 0 or tile_size <= overlap:
        raise RejectedInputError(
            f"need tile_size > overlap >= 0, got tile={tile_size} overlap={overlap}"
        )
    xs = _axis_origins(width, tile_size, overlap)
    ys = _axis_origins(height, tile_size, overlap)
    origins = tuple((x, y) for y in ys for x in xs)
    return TilePlan(tile_size_px=tile_size, overlap_px=overlap, origins=origins)


def dedupe(detections: Sequence[Detection], radius_um: float) -> list[Detection]:
    """Greedy score-descending suppression of detections closer than
    radius_um to an already-kept one. Ties break on coordinates."""
    if radius_um <= 0:
        raise RejectedInputError(f"radius_um must be > 0, got {radius_um}")
    ranked = sorted(detections, key=lambda d: (-d.score, d.centroid_um))
    kept: list[Detection] = []
    for det in ranked:
        dx, dy = det.centroid_um
        close = any(
            (dx - kx) ** 2 + (dy - ky) ** 2 < radius_um**2
            for kx, ky in (k.centroid_um for k in kept)
        )
        if not close:
            kept.append(det)
    return kept


def _tile_proposals(
    roi: np.ndarray,
    grid: PixelGrid,
    backend: ProposalBackend,
    config: ProposalFilterConfig,
    origin: tuple[int, int],
    tile_size: int,
    on_backend_error: str,
) -> list[tuple[tuple[int, int], MaskProposal]]:
    ox, oy = origin
    tile = roi[oy : oy + tile_size, ox : ox + tile_size]
    tile_grid = PixelGrid(tile.shape[1], tile.shape[0], grid.mpp)
    tile_id = f"tile_{ox}_{oy}"
    try:
        proposals = propose_tile(backend, tile, tile_grid, config, tile_id=tile_id)
    except BackendError:
        if on_backend_error == "raise":
            raise
        log.warning("skipping failed tile %s", tile_id, exc_info=True)
        return []
    return [(origin, p) for p in proposals]


def _paint_mask_patch(
    proposal: MaskProposal,
    tile_origin: tuple[int, int],
    roi_shape: tuple[int, int],
    cx: float,
    cy: float,
    patch_size: int,
) -> np.ndarray:
    """Place the proposal's windowed mask into a full-ROI-aligned patch frame,
    using the same crop-and-reflect geometry as the RGB patch."""
    frame = np.zeros(roi_shape, dtype=bool)
    window = proposal.window_mask()
    gx0 = tile_origin[0] + proposal.origin_px[0]
    gy0 = tile_origin[1] + proposal.origin_px[1]
    gx1 = min(gx0 + window.shape[1], roi_shape[1])
    gy1 = min(gy0 + window.shape[0], roi_shape[0])
    frame[gy0:gy1, gx0:gx1] = window[: gy1 - gy0, : gx1 - gx0]
    return crop_patch(frame, cx, cy, patch_size)


def run_roi(
    roi: np.ndarray,
    grid: PixelGrid,
    backend: ProposalBackend,
    scorer: PatchScorer,
    *,
    proposal_config: ProposalFilterConfig | None = None,
    patch_size: int = 64,
    score_threshold: float = 0.5,
    dedupe_radius_um: float = DEFAULT_DEDUPE_RADIUS_UM,
    tile_plan: TilePlan | None = None,
    workers: int = 1,
    on_backend_error: str = "skip",
) -> list[Detection]:
    """Detect mitotic figures on one ROI raster.

    Per tile: stage-one proposals, then candidate patches (RGB plus object
    mask, centered on each proposal centroid) scored by the stage-two
    classifier. Detections at or above score_threshold are mapped to slide
    micrometres and deduplicated across tile overlaps.
    """
    roi = np.asarray(roi)
    if roi.shape[:2] != (grid.height, grid.width):
        raise RejectedInputError(f"roi shape {roi.shape} does not match grid")
    if on_backend_error not in ("skip", "raise"):
        raise RejectedInputError(f"unknown backend error policy {on_backend_error!r}")
    config = proposal_config or ProposalFilterConfig()
    plan = tile_plan or plan_tiles(grid.width, grid.height)

    def process(origin):
        return _tile_proposals(
            roi, grid, backend, config, origin, plan.tile_size_px, on_backend_error
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_tile = list(pool.map(process, plan.origins))
    else:
        per_tile = [process(origin) for origin in plan.origins]

    candidates = [item for tile_items in per_tile for item in tile_items]
    if not candidates:
        return []

    rgb_patches = []
    mask_patches = []
    centroids = []
    tile_ids = []
    for origin, proposal in candidates:
        tx, ty = proposal.centroid_in_tile()
        cx, cy = origin[0] + tx, origin[1] + ty
        rgb_patches.append(crop_patch(roi, cx, cy, patch_size))
        mask_patches.append(
            _paint_mask_patch(proposal, origin, roi.shape[:2], cx, cy, patch_size)
        )
        centroids.append((cx, cy))
        tile_ids.append(f"tile_{origin[0]}_{origin[1]}")

    scores = np.asarray(scorer(np.stack(rgb_patches), np.stack(mask_patches)), dtype=float)
    if scores.shape != (len(candidates),):
        raise RejectedInputError(
            f"scorer returned shape {scores.shape}, expected ({len(candidates)},)"
        )

    detections = []
    for (origin, proposal), (cx, cy), tile_id, score in zip(
        candidates, centroids, tile_ids, scores
    ):
        if score < score_threshold:
            continue
        detections.append(
            Detection(
                centroid_um=(cx * grid.mpp, cy * grid.mpp),
                score=float(np.clip(score, 0.0, 1.0)),
                mask=proposal.binary,
                source_tile=tile_id,
            )
        )
    return dedupe(detections, dedupe_radius_um)


def write_detections(
    path: str | Path, detections: Iterable[Detection], image: str
) -> None:
    """Write a line-oriented, schema-versioned detection file for one image."""
    with open(path, "w", encoding="utf-8") as fh:
        for det in detections:
            obj = {
                "schema": DETECTIONS_SCHEMA,
                "image": image,
                "centroid_um": [det.centroid_um[0], det.centroid_um[1]],
                "score": det.score,
                "source_tile": det.source_tile,
                "mask": None,
            }
            if det.mask is not None:
                obj["mask"] = {
                    "width": det.mask.grid.width,
                    "height": det.mask.grid.height,
                    "mpp": det.mask.grid.mpp,
                    "runs": list(det.mask.runs),
                }
            fh.write(json.dumps(obj) + "\n")


def read_detections(path: str | Path) -> list[tuple[str, Detection]]:
    """Read a detection file; returns (image, detection) pairs."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"invalid JSON ({exc.msg})", line=lineno) from exc
            if obj.get("schema") != DETECTIONS_SCHEMA:
                raise ManifestError(
                    f"unsupported schema {obj.get('schema')!r}", line=lineno
                )
            mask = None
            if obj.get("mask"):
                m = obj["mask"]
                mask = BinaryMask(
                    PixelGrid(int(m["width"]), int(m["height"]), float(m["mpp"])),
                    tuple(m["runs"]),
                )
            out.append(
                (
                    str(obj["image"]),
                    Detection(
                        centroid_um=(float(obj["centroid_um"][0]), float(obj["centroid_um"][1])),
                        score=float(obj["score"]),
                        mask=mask,
                        source_tile=str(obj.get("source_tile", "")),
                    ),
                )
            )
    return out
