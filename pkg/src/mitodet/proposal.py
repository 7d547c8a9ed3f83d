"""Stage one: cell-scale mask proposals, quality filtering, and mask NMS.

A proposal backend turns an RGB tile into candidate object masks with soft
logits and a self-estimated mask quality (predicted IoU). This module owns
everything downstream of the backend: the stability score, the quality/area
filter chain, and greedy mask NMS. Stability is always recomputed here from
the backend's logits so the filter does not depend on backend internals.

Proposals store their logits and mask on a small window cut out of the tile
(origin_px is the window origin in tile coordinates); overlap computations
intersect windows, which keeps memory linear in object size rather than
tile size.
"""

from __future__ import annotations

import base64
import json
import socket
import socketserver
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy import ndimage

from .core import BinaryMask, PixelGrid, decode_mask, encode_mask, tight_bbox
from .errors import BackendError, ConfigurationError, NoObjectError, RejectedInputError
from .stain import rgb_to_od


@dataclass(frozen=True)
class ProposalFilterConfig:
    """Thresholds for the proposal filter chain and NMS."""

    min_predicted_iou: float = 0.8
    min_stability: float = 0.8
    area_min_um2: float = 2.25
    area_max_um2: float = 225.0
    nms_iou_threshold: float = 0.5
    stability_offset: float = 1.0
    tau0: float = 0.0

    def __post_init__(self):
        for name in ("min_predicted_iou", "min_stability", "nms_iou_threshold"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise ConfigurationError(f"{name} must be in [0, 1], got {value}")
        if not (0.0 <= self.area_min_um2 < self.area_max_um2):
            raise ConfigurationError(
                f"need 0 <= area_min < area_max, got "
                f"[{self.area_min_um2}, {self.area_max_um2}]"
            )
        if self.stability_offset <= 0:
            raise ConfigurationError(
                f"stability_offset must be > 0, got {self.stability_offset}"
            )


@dataclass(frozen=True, eq=False)
class MaskProposal:
    """One candidate object on a tile.

    logits and binary live on a window whose top-left corner in the tile is
    origin_px; bbox_px is the tight foreground box in tile coordinates.
    """

    logits: np.ndarray
    binary: BinaryMask
    predicted_iou: float
    stability: float
    area_um2: float
    bbox_px: tuple[int, int, int, int]
    origin_px: tuple[int, int]

    def __post_init__(self):
        if not (0.0 <= self.predicted_iou <= 1.0):
            raise RejectedInputError(f"predicted_iou {self.predicted_iou} outside [0, 1]")
        if not (0.0 <= self.stability <= 1.0):
            raise RejectedInputError(f"stability {self.stability} outside [0, 1]")
        if self.logits.shape != (self.binary.grid.height, self.binary.grid.width):
            raise RejectedInputError(
                f"logits {self.logits.shape} do not match mask window "
                f"{self.binary.grid.height}x{self.binary.grid.width}"
            )

    @property
    def foreground_pixels(self) -> int:
        return self.binary.foreground_pixels

    def centroid_in_tile(self) -> tuple[float, float]:
        """Foreground centroid in tile pixel coordinates."""
        window = decode_mask(self.binary)
        ys, xs = np.nonzero(window)
        ox, oy = self.origin_px
        return ox + float(xs.mean()), oy + float(ys.mean())

    def window_mask(self) -> np.ndarray:
        return decode_mask(self.binary)


def stability_score(logits: np.ndarray, delta: float, tau0: float = 0.0) -> float:
    """IoU between the masks thresholded at tau0 + delta and tau0 - delta.

    1.0 by convention when both masks are empty. The high mask is a subset
    of the low mask, so this reduces to |high| / |low|.
    """
    if delta <= 0:
        raise RejectedInputError(f"delta must be > 0, got {delta}")
    logits = np.asarray(logits)
    high = int(np.count_nonzero(logits > tau0 + delta))
    low = int(np.count_nonzero(logits > tau0 - delta))
    if low == 0:
        return 1.0
    return high / low


def mask_iou(a: BinaryMask, b: BinaryMask) -> float:
    """Pixel IoU of two masks on the same grid; 1.0 for two empty masks."""
    if a.grid != b.grid:
        raise RejectedInputError(f"grid mismatch: {a.grid} vs {b.grid}")
    ra = decode_mask(a)
    rb = decode_mask(b)
    inter = int(np.count_nonzero(ra & rb))
    union = int(np.count_nonzero(ra | rb))
    if union == 0:
        return 1.0
    return inter / union


def window_iou(
    mask_a: np.ndarray,
    origin_a: tuple[int, int],
    mask_b: np.ndarray,
    origin_b: tuple[int, int],
) -> float:
    """IoU of two windowed masks placed in a common (tile) frame."""
    ax, ay = origin_a
    bx, by = origin_b
    ah, aw = mask_a.shape
    bh, bw = mask_b.shape
    x0, x1 = max(ax, bx), min(ax + aw, bx + bw)
    y0, y1 = max(ay, by), min(ay + ah, by + bh)
    count_a = int(np.count_nonzero(mask_a))
    count_b = int(np.count_nonzero(mask_b))
    if x0 >= x1 or y0 >= y1:
        inter = 0
    else:
        sub_a = mask_a[y0 - ay : y1 - ay, x0 - ax : x1 - ax]
        sub_b = mask_b[y0 - by : y1 - by, x0 - bx : x1 - bx]
        inter = int(np.count_nonzero(sub_a & sub_b))
    union = count_a + count_b - inter
    if union == 0:
        return 1.0
    return inter / union


def proposal_iou(a: MaskProposal, b: MaskProposal) -> float:
    """Mask IoU of two proposals in their shared tile frame."""
    return window_iou(a.window_mask(), a.origin_px, b.window_mask(), b.origin_px)


def proposal_from_logits(
    logits: np.ndarray,
    origin_px: tuple[int, int],
    mpp: float,
    predicted_iou: float,
    config: ProposalFilterConfig | None = None,
) -> MaskProposal | None:
    """Build a proposal from a logits window, deriving everything else locally.

    Thresholds at config.tau0 for the binary mask, computes the stability
    score at tau0 +/- stability_offset, the physical area, and the tight
    bbox in tile coordinates. Returns None when the thresholded mask is
    empty (no object).
    """
    if config is None:
        config = ProposalFilterConfig()
    logits = np.asarray(logits, dtype=np.float32)
    window = logits > config.tau0
    bbox_local = tight_bbox(window)
    if bbox_local is None:
        return None
    ox, oy = int(origin_px[0]), int(origin_px[1])
    x0, y0, x1, y1 = bbox_local
    grid = PixelGrid(window.shape[1], window.shape[0], mpp)
    binary = encode_mask(window, grid)
    return MaskProposal(
        logits=logits,
        binary=binary,
        predicted_iou=float(np.clip(predicted_iou, 0.0, 1.0)),
        stability=float(stability_score(logits, config.stability_offset, config.tau0)),
        area_um2=binary.foreground_pixels * mpp**2,
        bbox_px=(ox + x0, oy + y0, ox + x1, oy + y1),
        origin_px=(ox, oy),
    )


def filter_proposals(
    proposals: Sequence[MaskProposal],
    config: ProposalFilterConfig,
    mpp: float | None = None,
) -> list[MaskProposal]:
    """Keep proposals with predicted_iou and stability strictly above their
    thresholds and area inside [area_min, area_max] (inclusive). Order is
    preserved; the pass is idempotent.

    When mpp is given, areas are recomputed from pixel counts instead of
    trusting the stored value.
    """
    kept = []
    for p in proposals:
        area = p.area_um2 if mpp is None else p.foreground_pixels * mpp**2
        if p.predicted_iou <= config.min_predicted_iou:
            continue
        if p.stability <= config.min_stability:
            continue
        if not (config.area_min_um2 <= area <= config.area_max_um2):
            continue
        kept.append(p)
    return kept


def _nms_order_key(p: MaskProposal):
    # Descending predicted IoU; ties broken by bbox origin then pixel area so
    # the result never depends on input order.
    x0, y0, _, _ = p.bbox_px
    return (-p.predicted_iou, x0, y0, p.foreground_pixels)


def nms(proposals: Sequence[MaskProposal], iou_threshold: float) -> list[MaskProposal]:
    """Greedy mask NMS: keep the best-scoring proposal, drop overlaps above
    the threshold, repeat. Returns survivors in rank order."""
    ranked = sorted(proposals, key=_nms_order_key)
    kept: list[MaskProposal] = []
    kept_windows: list[tuple[np.ndarray, tuple[int, int]]] = []
    for p in ranked:
        window = p.window_mask()
        duplicate = any(
            window_iou(window, p.origin_px, kw, ko) > iou_threshold
            for kw, ko in kept_windows
        )
        if not duplicate:
            kept.append(p)
            kept_windows.append((window, p.origin_px))
    return kept


class ProposalBackend(Protocol):
    """Behavioral contract for mask-proposal backends.

    Backends must be deterministic for a fixed tile, prompt, and backend
    version. Stateful backends should be instantiated once per worker unless
    they set a truthy `shareable` attribute.
    """

    def generate(self, rgb: np.ndarray, grid: PixelGrid) -> list[MaskProposal]:
        ...

    def propose_box(
        self, rgb: np.ndarray, grid: PixelGrid, box: tuple[int, int, int, int]
    ) -> MaskProposal | None:
        ...


def propose_tile(
    backend: ProposalBackend,
    rgb: np.ndarray,
    grid: PixelGrid,
    config: ProposalFilterConfig | None = None,
    tile_id: str = "",
) -> list[MaskProposal]:
    """Run the full stage-one chain on a tile: backend, local stability,
    quality/area filter, then NMS."""
    if config is None:
        config = ProposalFilterConfig()
    try:
        raw = backend.generate(rgb, grid)
    except Exception as exc:
        raise BackendError(str(exc), tile_id=tile_id) from exc
    rebuilt = []
    for p in raw:
        q = proposal_from_logits(p.logits, p.origin_px, grid.mpp, p.predicted_iou, config)
        if q is not None:
            rebuilt.append(q)
    return nms(filter_proposals(rebuilt, config), config.nms_iou_threshold)


def propose_box(
    backend: ProposalBackend,
    rgb: np.ndarray,
    grid: PixelGrid,
    box: tuple[int, int, int, int],
    config: ProposalFilterConfig | None = None,
) -> MaskProposal:
    """Ask the backend for its best mask under a box prompt.

    Used by curation to convert legacy box/circle/point annotations into
    masks. Raises NoObjectError when the backend finds nothing.
    """
    if config is None:
        config = ProposalFilterConfig()
    x0, y0, x1, y1 = (int(v) for v in box)
    if x0 >= x1 or y0 >= y1:
        raise RejectedInputError(f"degenerate box {box}")
    if x0 < 0 or y0 < 0 or x1 > grid.width or y1 > grid.height:
        raise RejectedInputError(f"box {box} outside tile {grid.width}x{grid.height}")
    raw = backend.propose_box(rgb, grid, (x0, y0, x1, y1))
    if raw is None:
        raise NoObjectError(f"no mask for box prompt {box}")
    rebuilt = proposal_from_logits(
        raw.logits, raw.origin_px, grid.mpp, raw.predicted_iou, config
    )
    if rebuilt is None:
        raise NoObjectError(f"box prompt {box} produced an empty mask")
    return rebuilt


def _disk(radius: int) -> np.ndarray:
    span = np.arange(-radius, radius + 1)
    return (span[:, None] ** 2 + span[None, :] ** 2) <= radius**2


class StubBackend:
    """Deterministic reference backend used as the test oracle substrate.

    Segments dark blobs: smoothed luminance optical density is thresholded,
    connected components become proposals, logits are a scaled signed
    distance to each component boundary, and predicted IoU is one minus a
    boundary-roughness score (IoU of the component with a morphologically
    smoothed copy of itself).
    """

    shareable = True  # pure function of the tile

    def __init__(
        self,
        od_threshold: float = 0.25,
        smooth_sigma: float = 1.0,
        logit_sharpness: float = 4.0,
        roughness_radius: int = 1,
        background_intensity: float = 255.0,
        window_pad: int = 4,
    ):
        self.od_threshold = od_threshold
        self.smooth_sigma = smooth_sigma
        self.logit_sharpness = logit_sharpness
        self.roughness_radius = roughness_radius
        self.background_intensity = background_intensity
        self.window_pad = window_pad

    def _segment(self, rgb: np.ndarray) -> tuple[np.ndarray, int]:
        lum = np.asarray(rgb, dtype=np.float64).mean(axis=-1)
        od = rgb_to_od(lum, self.background_intensity)
        od = ndimage.gaussian_filter(od, self.smooth_sigma)
        foreground = od > self.od_threshold
        labels, count = ndimage.label(foreground, structure=np.ones((3, 3), dtype=bool))
        return labels, count

    def _component_proposal(
        self, labels: np.ndarray, index: int, grid: PixelGrid
    ) -> MaskProposal | None:
        component = labels == index
        bbox = tight_bbox(component)
        if bbox is None:
            return None
        x0, y0, x1, y1 = bbox
        pad = self.window_pad
        wx0, wy0 = max(0, x0 - pad), max(0, y0 - pad)
        wx1 = min(labels.shape[1], x1 + pad)
        wy1 = min(labels.shape[0], y1 + pad)
        window = component[wy0:wy1, wx0:wx1]

        inside = ndimage.distance_transform_edt(window)
        outside = ndimage.distance_transform_edt(~window)
        logits = self.logit_sharpness * (inside - outside)

        structure = _disk(self.roughness_radius)
        smoothed = ndimage.binary_closing(
            ndimage.binary_opening(window, structure=structure), structure=structure
        )
        union = int(np.count_nonzero(window | smoothed))
        inter = int(np.count_nonzero(window & smoothed))
        predicted_iou = inter / union if union else 0.0

        return proposal_from_logits(
            logits.astype(np.float32), (wx0, wy0), grid.mpp, predicted_iou
        )

    def generate(self, rgb: np.ndarray, grid: PixelGrid) -> list[MaskProposal]:
        labels, count = self._segment(rgb)
        proposals = []
        for index in range(1, count + 1):
            p = self._component_proposal(labels, index, grid)
            if p is not None:
                proposals.append(p)
        return proposals

    def propose_box(
        self, rgb: np.ndarray, grid: PixelGrid, box: tuple[int, int, int, int]
    ) -> MaskProposal | None:
        labels, count = self._segment(rgb)
        x0, y0, x1, y1 = box
        region = labels[y0:y1, x0:x1]
        best_index, best_overlap = 0, 0
        for index in range(1, count + 1):
            overlap = int(np.count_nonzero(region == index))
            if overlap > best_overlap:
                best_index, best_overlap = index, overlap
        if best_index == 0:
            return None
        return self._component_proposal(labels, best_index, grid)


# --- optional out-of-process adapter ---------------------------------------
#
# Line-delimited JSON over a local TCP socket so a heavyweight segmenter can
# run in its own process. Requests carry a tile *path* (same machine, shared
# filesystem); responses carry minimal proposal records (logits window,
# origin, predicted IoU) and everything else is recomputed client-side by
# propose_tile, exactly as for an in-process backend.

PROTOCOL_VERSION = "omg-proposal/1"


def _proposal_wire_record(p: MaskProposal) -> dict:
    logits = np.asarray(p.logits, dtype=np.float32)
    return {
        "origin_px": list(p.origin_px),
        "predicted_iou": p.predicted_iou,
        "shape": list(logits.shape),
        "logits_b64": base64.b64encode(logits.tobytes()).decode("ascii"),
    }


def _proposal_from_wire(obj: dict, mpp: float) -> MaskProposal | None:
    shape = tuple(int(v) for v in obj["shape"])
    logits = np.frombuffer(
        base64.b64decode(obj["logits_b64"]), dtype=np.float32
    ).reshape(shape)
    return proposal_from_logits(
        logits, tuple(int(v) for v in obj["origin_px"]), mpp, float(obj["predicted_iou"])
    )


class BackendServer(socketserver.ThreadingTCPServer):
    """Serves a ProposalBackend over a local socket."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: tuple[str, int], backend: ProposalBackend):
        self.backend = backend
        super().__init__(address, _BackendRequestHandler)


class _BackendRequestHandler(socketserver.StreamRequestHandler):
    def handle(self):
        for raw_line in self.rfile:
            line = raw_line.strip()
            if not line:
                continue
            try:
                response = self._dispatch(json.loads(line))
            except Exception as exc:  # report, do not kill the server
                response = {"protocol": PROTOCOL_VERSION, "error": str(exc)}
            self.wfile.write((json.dumps(response) + "\n").encode("utf-8"))
            self.wfile.flush()

    def _dispatch(self, request: dict) -> dict:
        from PIL import Image

        tile_path = request["tile_path"]
        mpp = float(request["mpp"])
        rgb = np.asarray(Image.open(tile_path).convert("RGB"))
        grid = PixelGrid(rgb.shape[1], rgb.shape[0], mpp)
        backend = self.server.backend
        if request["op"] == "generate":
            proposals = backend.generate(rgb, grid)
        elif request["op"] == "propose_box":
            box = tuple(int(v) for v in request["box"])
            result = backend.propose_box(rgb, grid, box)
            proposals = [result] if result is not None else []
        else:
            raise ValueError(f"unknown op {request['op']!r}")
        return {
            "protocol": PROTOCOL_VERSION,
            "proposals": [_proposal_wire_record(p) for p in proposals],
        }


class RemoteBackend:
    """ProposalBackend adapter speaking the line-delimited socket protocol.

    Tiles handed in as arrays are staged to a temporary PNG so the wire
    format stays path-based.
    """

    shareable = False  # one socket per worker

    def __init__(self, host: str, port: int, timeout: float = 30.0):
        self.address = (host, port)
        self.timeout = timeout

    def _roundtrip(self, request: dict) -> list[dict]:
        with socket.create_connection(self.address, timeout=self.timeout) as conn:
            conn.sendall((json.dumps(request) + "\n").encode("utf-8"))
            fh = conn.makefile("r", encoding="utf-8")
            line = fh.readline()
        if not line:
            raise BackendError("backend service closed the connection")
        response = json.loads(line)
        if "error" in response:
            raise BackendError(f"backend service error: {response['error']}")
        return response["proposals"]

    def _with_tile(self, rgb: np.ndarray, grid: PixelGrid, request: dict) -> list[MaskProposal]:
        from PIL import Image

        with tempfile.TemporaryDirectory(prefix="mitodet-tile-") as tmp:
            tile_path = Path(tmp) / "tile.png"
            Image.fromarray(np.asarray(rgb, dtype=np.uint8)).save(tile_path)
            request = {**request, "tile_path": str(tile_path), "mpp": grid.mpp}
            records = self._roundtrip(request)
        proposals = []
        for obj in records:
            p = _proposal_from_wire(obj, grid.mpp)
            if p is not None:
                proposals.append(p)
        return proposals

    def generate(self, rgb: np.ndarray, grid: PixelGrid) -> list[MaskProposal]:
        return self._with_tile(rgb, grid, {"op": "generate"})

    def propose_box(
        self, rgb: np.ndarray, grid: PixelGrid, box: tuple[int, int, int, int]
    ) -> MaskProposal | None:
        proposals = self._with_tile(rgb, grid, {"op": "propose_box", "box": list(box)})
        return proposals[0] if proposals else None
