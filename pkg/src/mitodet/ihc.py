"""pHH3-to-H&E mask transfer.

Mitotic nuclei are strongly immunolabelled on the pHH3 slide, so they can be
picked up by simple per-channel RGB thresholding. The pHH3 and H&E rasters
come from the same physical section (destained and restained), so they
differ mostly by rigid motion plus slight local distortion: a similarity
transform is fit at slide level and, optionally, per-region affine
corrections are composed on top. All fitting is RANSAC over point
correspondences from a pluggable provider.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage, signal

from .core import (
    BinaryMask,
    Label,
    ObjectRecord,
    PixelGrid,
    Provenance,
    Species,
    encode_mask,
    foreground_centroid,
    tight_bbox,
)
from .errors import RegistrationError, RejectedInputError
from .stain import rgb_to_od

log = logging.getLogger(__name__)

# Similarity-mode scale sanity window: restained sections should never
# rescale meaningfully, so anything outside this is a bogus fit.
SIMILARITY_SCALE_RANGE = (0.8, 1.25)


@dataclass(frozen=True)
class RgbThreshold:
    """Per-channel inclusive (low, high) bounds plus component cleanup."""

    low: tuple[int, int, int]
    high: tuple[int, int, int]
    min_component_px: int = 36
    morphology_radius: int = 1

    def __post_init__(self):
        for lo, hi in zip(self.low, self.high):
            if not (0 <= lo <= hi <= 255):
                raise RejectedInputError(
                    f"need 0 <= low <= high <= 255 per channel, got {self.low}/{self.high}"
                )


# Starting point for DAB-brown nuclei on an eosin counterstain. Every
# deployment should calibrate on its own staining; tests never rely on it.
PRESET_DAB_BROWN = RgbThreshold(low=(40, 10, 0), high=(170, 120, 110))


def _disk(radius: int) -> np.ndarray:
    span = np.arange(-radius, radius + 1)
    return (span[:, None] ** 2 + span[None, :] ** 2) <= radius**2


def extract_phh3_masks(
    rgb: np.ndarray, threshold: RgbThreshold, grid: PixelGrid
) -> list[BinaryMask]:
    """Threshold an 8-bit RGB raster and return one full-grid mask per
    surviving connected component."""
    rgb = np.asarray(rgb)
    if rgb.shape != (grid.height, grid.width, 3):
        raise RejectedInputError(f"raster shape {rgb.shape} does not match grid")
    low = np.asarray(threshold.low)
    high = np.asarray(threshold.high)
    fg = np.all((rgb >= low) & (rgb <= high), axis=-1)
    if threshold.morphology_radius > 0:
        structure = _disk(threshold.morphology_radius)
        fg = ndimage.binary_opening(fg, structure=structure)
        fg = ndimage.binary_closing(fg, structure=structure)
    labels, count = ndimage.label(fg, structure=np.ones((3, 3), dtype=bool))
    masks = []
    for index in range(1, count + 1):
        component = labels == index
        if np.count_nonzero(component) < threshold.min_component_px:
            continue
        masks.append(encode_mask(component, grid))
    return masks


@dataclass(frozen=True, eq=False)
class AffineTransform:
    """2x3 matrix mapping source pixel (x, y) to target pixel coordinates."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (2, 3):
            raise RejectedInputError(f"affine matrix must be 2x3, got {m.shape}")
        if abs(np.linalg.det(m[:, :2])) < 1e-12:
            raise RejectedInputError("linear part of the transform is singular")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))

    @classmethod
    def similarity(
        cls, scale: float, theta_rad: float, tx: float, ty: float
    ) -> "AffineTransform":
        c, s = scale * np.cos(theta_rad), scale * np.sin(theta_rad)
        return cls(np.array([[c, -s, tx], [s, c, ty]]))

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return pts @ self.matrix[:, :2].T + self.matrix[:, 2]

    def compose(self, inner: "AffineTransform") -> "AffineTransform":
        """Transform equal to applying `inner` first, then this one."""
        a, b = self.matrix[:, :2], self.matrix[:, 2]
        c, d = inner.matrix[:, :2], inner.matrix[:, 2]
        return AffineTransform(np.column_stack([a @ c, a @ d + b]))

    def invert(self) -> "AffineTransform":
        a = self.matrix[:, :2]
        inv = np.linalg.inv(a)
        return AffineTransform(np.column_stack([inv, -inv @ self.matrix[:, 2]]))

    @property
    def scale(self) -> float:
        return float(np.sqrt(abs(np.linalg.det(self.matrix[:, :2]))))


@dataclass(frozen=True)
class RansacConfig:
    model: str = "similarity"  # or "affine"
    inlier_tolerance_px: float = 3.0
    max_iterations: int = 2000
    min_inlier_fraction: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        if self.model not in ("similarity", "affine"):
            raise RejectedInputError(f"unknown model {self.model!r}")
        if self.inlier_tolerance_px <= 0:
            raise RejectedInputError("inlier tolerance must be > 0")
        if not (0.0 < self.min_inlier_fraction <= 1.0):
            raise RejectedInputError("min_inlier_fraction must be in (0, 1]")

    @property
    def minimal_samples(self) -> int:
        return 2 if self.model == "similarity" else 3


def _fit_similarity(src: np.ndarray, dst: np.ndarray) -> AffineTransform:
    zs = src[:, 0] + 1j * src[:, 1]
    zd = dst[:, 0] + 1j * dst[:, 1]
    design = np.column_stack([zs, np.ones_like(zs)])
    (a, b), *_ = np.linalg.lstsq(design, zd, rcond=None)
    return AffineTransform(
        np.array([[a.real, -a.imag, b.real], [a.imag, a.real, b.imag]])
    )


def _fit_affine(src: np.ndarray, dst: np.ndarray) -> AffineTransform:
    design = np.column_stack([src, np.ones(len(src))])
    params, *_ = np.linalg.lstsq(design, dst, rcond=None)
    return AffineTransform(params.T)


def _fit(model: str, src: np.ndarray, dst: np.ndarray) -> AffineTransform:
    return _fit_similarity(src, dst) if model == "similarity" else _fit_affine(src, dst)


def _degenerate_sample(model: str, pts: np.ndarray) -> bool:
    if model == "similarity":
        return bool(np.allclose(pts[0], pts[1]))
    # affine: collinear or coincident points give a rank-deficient system
    area = abs(
        (pts[1, 0] - pts[0, 0]) * (pts[2, 1] - pts[0, 1])
        - (pts[2, 0] - pts[0, 0]) * (pts[1, 1] - pts[0, 1])
    )
    return area < 1e-9


def ransac_fit(
    src_points: np.ndarray,
    dst_points: np.ndarray,
    config: RansacConfig,
) -> tuple[AffineTransform, np.ndarray]:
    """Robustly fit a transform from src to dst point correspondences.

    Samples minimal sets, keeps the candidate with the most inliers (first
    seen wins ties, so the result is deterministic for a seed), then refits
    by least squares on the inlier set. Returns (transform, inlier indices).

    Raises RegistrationError when there are not enough correspondences or
    the best inlier fraction is below config.min_inlier_fraction.
    """
    src = np.asarray(src_points, dtype=np.float64)
    dst = np.asarray(dst_points, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise RejectedInputError(
            f"point arrays must both be (N, 2), got {src.shape} and {dst.shape}"
        )
    n = len(src)
    k = config.minimal_samples
    if n < k:
        raise RegistrationError(
            f"need at least {k} correspondences for a {config.model} fit, got {n}",
            diagnostics={"n_points": n, "model": config.model},
        )

    rng = np.random.default_rng(config.rng_seed)
    scale_lo, scale_hi = SIMILARITY_SCALE_RANGE
    best_inliers: np.ndarray | None = None
    best_count = -1
    for _ in range(config.max_iterations):
        sample = rng.choice(n, size=k, replace=False)
        if _degenerate_sample(config.model, src[sample]):
            continue
        try:
            candidate = _fit(config.model, src[sample], dst[sample])
        except RejectedInputError:
            continue
        if config.model == "similarity" and not (
            scale_lo <= candidate.scale <= scale_hi
        ):
            continue
        residuals = np.linalg.norm(candidate.apply(src) - dst, axis=1)
        inliers = residuals <= config.inlier_tolerance_px
        count = int(np.count_nonzero(inliers))
        if count > best_count:
            best_count = count
            best_inliers = inliers
            if count == n:
                break

    fraction = best_count / n if n else 0.0
    if best_inliers is None or fraction < config.min_inlier_fraction:
        raise RegistrationError(
            f"best inlier fraction {fraction:.2f} below "
            f"{config.min_inlier_fraction:.2f}",
            diagnostics={
                "n_points": n,
                "best_inlier_count": max(best_count, 0),
                "model": config.model,
            },
        )
    indices = np.flatnonzero(best_inliers)
    refined = _fit(config.model, src[indices], dst[indices])
    if config.model == "similarity" and not (
        scale_lo <= refined.scale <= scale_hi
    ):
        raise RegistrationError(
            f"refined similarity scale {refined.scale:.3f} outside "
            f"[{scale_lo}, {scale_hi}]",
            diagnostics={"scale": refined.scale},
        )
    return refined, indices


# A correspondence provider returns (src_points, dst_points) arrays; when a
# region (x0, y0, x1, y1) in target coordinates is given, the dst points
# should lie inside it.
CorrespondenceProvider = Callable[
    [np.ndarray, np.ndarray, "tuple[int, int, int, int] | None"],
    tuple[np.ndarray, np.ndarray],
]


@dataclass(frozen=True)
class RegionTransform:
    bbox: tuple[int, int, int, int]
    transform: AffineTransform
    refined: bool


@dataclass(frozen=True)
class RegisterResult:
    coarse: AffineTransform
    regions: tuple[RegionTransform, ...]

    def for_point(self, x: float, y: float) -> AffineTransform:
        """Transform for a target-space location (falls back to coarse)."""
        for region in self.regions:
            x0, y0, x1, y1 = region.bbox
            if x0 <= x < x1 and y0 <= y < y1:
                return region.transform
        return self.coarse


def register(
    phh3: np.ndarray,
    he: np.ndarray,
    config: RansacConfig,
    provider: CorrespondenceProvider,
    *,
    downsample: int = 4,
    region_grid: tuple[int, int] = (2, 2),
    patch_model: str = "affine",
    workers: int = 1,
) -> RegisterResult:
    """Two-stage registration: slide-level similarity, then independent
    per-region affine corrections composed onto the coarse transform.

    Stage-1 failure aborts; a stage-2 failure leaves that region on the
    coarse transform with a warning.
    """
    phh3 = np.asarray(phh3)
    he = np.asarray(he)
    # Cap the coarse-stage downsample so small rasters keep enough pixels for
    # the correspondence provider to work with.
    min_dim = min(phh3.shape[0], phh3.shape[1], he.shape[0], he.shape[1])
    ds = max(1, min(int(downsample), min_dim // 256))
    src_pts, dst_pts = provider(phh3[::ds, ::ds], he[::ds, ::ds], None)
    coarse, _ = ransac_fit(
        np.asarray(src_pts, dtype=float) * ds,
        np.asarray(dst_pts, dtype=float) * ds,
        config,
    )

    height, width = he.shape[:2]
    nx, ny = region_grid
    xs = np.linspace(0, width, nx + 1).astype(int)
    ys = np.linspace(0, height, ny + 1).astype(int)
    boxes = [
        (int(xs[i]), int(ys[j]), int(xs[i + 1]), int(ys[j + 1]))
        for j in range(ny)
        for i in range(nx)
    ]

    patch_config = RansacConfig(
        model=patch_model,
        inlier_tolerance_px=config.inlier_tolerance_px,
        max_iterations=config.max_iterations,
        min_inlier_fraction=config.min_inlier_fraction,
        rng_seed=config.rng_seed,
    )

    def refine(box):
        try:
            src_r, dst_r = provider(phh3, he, box)
            src_r = np.asarray(src_r, dtype=float)
            dst_r = np.asarray(dst_r, dtype=float)
            if len(src_r) < patch_config.minimal_samples:
                raise RegistrationError(
                    f"only {len(src_r)} correspondences in region {box}"
                )
            correction, _ = ransac_fit(coarse.apply(src_r), dst_r, patch_config)
            return RegionTransform(box, correction.compose(coarse), refined=True)
        except RegistrationError as exc:
            log.warning("region %s fell back to the coarse transform: %s", box, exc)
            return RegionTransform(box, coarse, refined=False)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            regions = tuple(pool.map(refine, boxes))
    else:
        regions = tuple(refine(box) for box in boxes)
    return RegisterResult(coarse=coarse, regions=regions)


def _warp_mask_window(
    raster: np.ndarray, transform: AffineTransform, target_grid: PixelGrid
) -> tuple[np.ndarray, int, int] | None:
    """Nearest-neighbor warp of a source mask; returns (window, x0, y0) in
    target coordinates, or None when nothing lands inside the target."""
    bbox = tight_bbox(raster)
    if bbox is None:
        return None
    x0, y0, x1, y1 = bbox
    corners = np.array(
        [[x0, y0], [x1 - 1, y0], [x0, y1 - 1], [x1 - 1, y1 - 1]], dtype=float
    )
    mapped = transform.apply(corners)
    pad = 2
    tx0 = max(0, int(np.floor(mapped[:, 0].min())) - pad)
    ty0 = max(0, int(np.floor(mapped[:, 1].min())) - pad)
    tx1 = min(target_grid.width, int(np.ceil(mapped[:, 0].max())) + pad + 1)
    ty1 = min(target_grid.height, int(np.ceil(mapped[:, 1].max())) + pad + 1)
    if tx0 >= tx1 or ty0 >= ty1:
        return None
    inv = transform.invert()
    yy, xx = np.mgrid[ty0:ty1, tx0:tx1]
    pts = np.column_stack([xx.ravel(), yy.ravel()]).astype(float)
    src = np.rint(inv.apply(pts)).astype(int)
    valid = (
        (src[:, 0] >= 0)
        & (src[:, 0] < raster.shape[1])
        & (src[:, 1] >= 0)
        & (src[:, 1] < raster.shape[0])
    )
    values = np.zeros(len(pts), dtype=bool)
    values[valid] = raster[src[valid, 1], src[valid, 0]]
    window = values.reshape(yy.shape)
    if not window.any():
        return None
    return window, tx0, ty0


def transfer_masks(
    masks: Sequence[BinaryMask],
    transform: AffineTransform,
    target_grid: PixelGrid,
    *,
    dataset: str = "stmf",
    image_path: str = "",
    species: Species = Species.HUMAN,
    tumour_type: str = "soft tissue tumour",
    id_prefix: str = "phh3",
) -> list[ObjectRecord]:
    """Warp pHH3 masks onto the H&E grid and wrap them as MF records.

    Masks that land entirely outside the target raster are dropped with a
    log line; centroid and bbox are recomputed from the warped pixels.
    """
    from .core import decode_mask

    records = []
    for index, mask in enumerate(masks):
        raster = decode_mask(mask)
        warped = _warp_mask_window(raster, transform, target_grid)
        if warped is None:
            log.warning("mask %d fell outside the target raster; dropped", index)
            continue
        window, ox, oy = warped
        wx0, wy0, wx1, wy1 = tight_bbox(window)
        crop = window[wy0:wy1, wx0:wx1]
        cx, cy = foreground_centroid(window)
        bbox = (ox + wx0, oy + wy0, ox + wx1, oy + wy1)
        records.append(
            ObjectRecord(
                id=f"{id_prefix}:{index}",
                dataset=dataset,
                image_path=image_path,
                grid=target_grid,
                label=Label.MF,
                centroid_px=(ox + cx, oy + cy),
                bbox_px=bbox,
                mask=encode_mask(
                    crop, PixelGrid(wx1 - wx0, wy1 - wy0, target_grid.mpp)
                ),
                species=species,
                tumour_type=tumour_type,
                provenance=Provenance.PHH3,
            )
        )
    return records


# --- correspondence providers ----------------------------------------------


class KnownTransformProvider:
    """Synthetic provider for tests: correspondences drawn from a known
    transform plus Gaussian noise, with a fraction of uniform outliers."""

    def __init__(
        self,
        true_transform: AffineTransform,
        n_points: int = 100,
        noise_px: float = 0.0,
        outlier_fraction: float = 0.0,
        rng_seed: int = 0,
    ):
        self.true_transform = true_transform
        self.n_points = n_points
        self.noise_px = noise_px
        self.outlier_fraction = outlier_fraction
        self.rng_seed = rng_seed

    def __call__(self, src_img, dst_img, region=None):
        rng = np.random.default_rng(self.rng_seed)
        h, w = np.asarray(src_img).shape[:2]
        src = rng.uniform([0, 0], [w, h], size=(self.n_points, 2))
        dst = self.true_transform.apply(src)
        if self.noise_px > 0:
            dst = dst + rng.normal(0.0, self.noise_px, size=dst.shape)
        n_out = int(round(self.outlier_fraction * self.n_points))
        if n_out:
            th, tw = np.asarray(dst_img).shape[:2]
            dst[:n_out] = rng.uniform([0, 0], [tw, th], size=(n_out, 2))
        if region is not None:
            x0, y0, x1, y1 = region
            keep = (
                (dst[:, 0] >= x0)
                & (dst[:, 0] < x1)
                & (dst[:, 1] >= y0)
                & (dst[:, 1] < y1)
            )
            return src[keep], dst[keep]
        return src, dst


def _normxcorr(template: np.ndarray, image: np.ndarray) -> np.ndarray:
    """Normalized cross-correlation of a template over an image (valid mode)."""
    template = template - template.mean()
    t_norm = np.sqrt((template**2).sum())
    if t_norm == 0:
        return np.zeros((1, 1))
    corr = signal.fftconvolve(image, template[::-1, ::-1], mode="valid")
    ones = np.ones_like(template)
    local_sum = signal.fftconvolve(image, ones, mode="valid")
    local_sq = signal.fftconvolve(image**2, ones, mode="valid")
    n = template.size
    local_var = np.maximum(local_sq - local_sum**2 / n, 0.0)
    denom = np.sqrt(local_var) * t_norm
    with np.errstate(invalid="ignore", divide="ignore"):
        ncc = np.where(denom > 1e-9, corr / denom, 0.0)
    return ncc


class TemplateMatchProvider:
    """Correspondences via normalized cross-correlation of tissue patches.

    Keypoints are grid samples of the source OD image with enough local
    contrast; each is matched inside a search window at the same location
    in the target. Intended for near-rigid restained-section pairs.
    """

    def __init__(
        self,
        patch: int = 24,
        grid_step: int = 48,
        search_margin: int = 32,
        min_std: float = 0.05,
        min_ncc: float = 0.5,
    ):
        self.patch = patch
        self.grid_step = grid_step
        self.search_margin = search_margin
        self.min_std = min_std
        self.min_ncc = min_ncc

    def _od(self, img: np.ndarray) -> np.ndarray:
        img = np.asarray(img, dtype=np.float64)
        if img.ndim == 3:
            img = img.mean(axis=-1)
        return rgb_to_od(img)

    def __call__(self, src_img, dst_img, region=None):
        src = self._od(src_img)
        dst = self._od(dst_img)
        half = self.patch // 2
        margin = self.search_margin
        if region is None:
            x_range = (0, src.shape[1])
            y_range = (0, src.shape[0])
        else:
            x0, y0, x1, y1 = region
            x_range = (max(0, x0), min(src.shape[1], x1))
            y_range = (max(0, y0), min(src.shape[0], y1))
        src_pts, dst_pts = [], []
        for cy in range(y_range[0] + half + margin, y_range[1] - half - margin, self.grid_step):
            for cx in range(x_range[0] + half + margin, x_range[1] - half - margin, self.grid_step):
                template = src[cy - half : cy + half, cx - half : cx + half]
                if template.std() < self.min_std:
                    continue
                sy0 = max(0, cy - half - margin)
                sx0 = max(0, cx - half - margin)
                search = dst[sy0 : cy + half + margin, sx0 : cx + half + margin]
                if search.shape[0] < template.shape[0] or search.shape[1] < template.shape[1]:
                    continue
                ncc = _normxcorr(template, search)
                peak = np.unravel_index(np.argmax(ncc), ncc.shape)
                if ncc[peak] < self.min_ncc:
                    continue
                dst_pts.append((sx0 + peak[1] + half, sy0 + peak[0] + half))
                src_pts.append((cx, cy))
        return np.asarray(src_pts, dtype=float).reshape(-1, 2), np.asarray(
            dst_pts, dtype=float
        ).reshape(-1, 2)
