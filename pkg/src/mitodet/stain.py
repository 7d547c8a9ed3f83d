"""Optical-density stain deconvolution and colour/spatial patch augmentation.

The colour pipeline is: RGB -> optical density (Beer-Lambert) -> per-stain
concentrations through an invertible 3x3 basis -> per-channel affine jitter
-> reconstruction back to RGB. Spatial augmentation is a paired horizontal
flip of image and mask. Everything is a pure function of its inputs plus an
explicit numpy Generator, so a worker is reproducible from its seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, RejectedInputError

# Largest acceptable condition number for a stain matrix; beyond this the
# deconvolution is numerically meaningless.
MAX_BASIS_CONDITION = 1e6

_UNIT_NORM_TOL = 1e-6


@dataclass(frozen=True)
class StainBasis:
    """Three unit vectors in OD space: two stains plus a residual direction."""

    vectors: tuple[tuple[float, float, float], ...]
    labels: tuple[str, str, str] = ("hematoxylin", "eosin", "residual")

    def __post_init__(self):
        m = np.asarray(self.vectors, dtype=float)
        if m.shape != (3, 3):
            raise ConfigurationError(f"basis must be 3x3, got {m.shape}")
        norms = np.linalg.norm(m, axis=1)
        if np.any(np.abs(norms - 1.0) > _UNIT_NORM_TOL):
            raise ConfigurationError(f"basis vectors must have unit norm, got {norms}")
        cond = np.linalg.cond(m)
        if not np.isfinite(cond) or cond > MAX_BASIS_CONDITION:
            raise ConfigurationError(f"basis matrix is ill-conditioned (cond={cond:.3g})")

    @property
    def matrix(self) -> np.ndarray:
        """Rows are stain vectors; OD = concentrations @ matrix."""
        return np.asarray(self.vectors, dtype=float)

    @property
    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.matrix)


def load_basis(path: str | Path) -> StainBasis:
    """Load and validate a stain-basis config file (JSON, three named 3-vectors)."""
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    try:
        vectors = tuple(tuple(float(x) for x in v) for v in obj["vectors"])
        labels = tuple(str(s) for s in obj["labels"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigurationError(f"bad stain basis file {path}: {exc}") from exc
    if len(labels) != 3:
        raise ConfigurationError(f"expected 3 stain labels, got {len(labels)}")
    return StainBasis(vectors=vectors, labels=labels)


def default_basis() -> StainBasis:
    """The H&E basis shipped with the package (Ruifrok-Johnston style vectors)."""
    ref = resources.files("mitodet").joinpath("data/stain_basis.json")
    with resources.as_file(ref) as path:
        return load_basis(path)


@dataclass(frozen=True)
class AugmentConfig:
    """Colour/spatial augmentation parameters.

    sigma is the half-width of both the multiplicative (alpha ~ U(1-s, 1+s))
    and additive (beta ~ U(-s, s)) concentration jitter; either term can be
    switched off independently.
    """

    sigma: float = 0.14
    flip_probability: float = 0.4
    rng_seed: int = 0
    scale_jitter: bool = True
    shift_jitter: bool = True

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigurationError(f"sigma must be >= 0, got {self.sigma}")
        if not (0.0 <= self.flip_probability <= 1.0):
            raise ConfigurationError(
                f"flip_probability must be in [0, 1], got {self.flip_probability}"
            )

    def make_rng(self) -> np.random.Generator:
        return np.random.default_rng(self.rng_seed)


def _epsilon(background_intensity: float) -> float:
    # 1/256 of background, added to numerator and denominator so OD(background)
    # is exactly zero and OD stays non-negative for in-range input.
    return background_intensity / 256.0


def rgb_to_od(rgb: np.ndarray, background_intensity: float = 255.0) -> np.ndarray:
    """Beer-Lambert transform: od = -log((rgb + eps) / (background + eps))."""
    if background_intensity <= 0:
        raise RejectedInputError(
            f"background intensity must be positive, got {background_intensity}"
        )
    eps = _epsilon(background_intensity)
    rgb = np.asarray(rgb, dtype=np.float64)
    return -np.log((rgb + eps) / (background_intensity + eps))


def od_to_rgb(od: np.ndarray, background_intensity: float = 255.0) -> np.ndarray:
    """Inverse of rgb_to_od, clamped to [0, background_intensity]."""
    if background_intensity <= 0:
        raise RejectedInputError(
            f"background intensity must be positive, got {background_intensity}"
        )
    eps = _epsilon(background_intensity)
    rgb = (background_intensity + eps) * np.exp(-np.asarray(od, dtype=np.float64)) - eps
    return np.clip(rgb, 0.0, background_intensity)


def deconvolve(od: np.ndarray, basis: StainBasis) -> np.ndarray:
    """Project OD pixels (..., 3) onto per-stain concentrations (..., 3)."""
    od = np.asarray(od, dtype=np.float64)
    if od.shape[-1] != 3:
        raise RejectedInputError(f"od last axis must be 3, got {od.shape}")
    return od @ basis.inverse


def reconstruct(concentrations: np.ndarray, basis: StainBasis) -> np.ndarray:
    """Mix concentrations (..., 3) back into OD space."""
    return np.asarray(concentrations, dtype=np.float64) @ basis.matrix


def perturb_concentrations(
    concentrations: np.ndarray, config: AugmentConfig, rng: np.random.Generator
) -> np.ndarray:
    """Per-channel affine jitter: c' = alpha * c + beta.

    One (alpha, beta) pair is drawn per stain channel per call; draws are
    consumed even when a jitter term is disabled so the stream layout does
    not depend on the flags.
    """
    conc = np.asarray(concentrations, dtype=np.float64)
    n = conc.shape[-1]
    s = config.sigma
    alphas = rng.uniform(1.0 - s, 1.0 + s, size=n)
    betas = rng.uniform(-s, s, size=n)
    if not config.scale_jitter:
        alphas = np.ones(n)
    if not config.shift_jitter:
        betas = np.zeros(n)
    return conc * alphas + betas


def augment_patch(
    rgb: np.ndarray,
    mask: np.ndarray,
    config: AugmentConfig,
    rng: np.random.Generator,
    basis: StainBasis | None = None,
    background_intensity: float = 255.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Colour-jitter an RGB patch and flip patch and mask together.

    Draw order is fixed (stain jitter first, then the flip coin) so a run is
    reproducible from (config, rng seed). Returns (rgb', mask'); rgb' keeps
    the input dtype, the mask is returned as a boolean array.
    """
    rgb = np.asarray(rgb)
    mask_arr = np.asarray(mask, dtype=bool)
    if rgb.ndim != 3 or rgb.shape[-1] != 3:
        raise RejectedInputError(f"rgb patch must be HxWx3, got {rgb.shape}")
    if mask_arr.shape != rgb.shape[:2]:
        raise RejectedInputError(
            f"mask {mask_arr.shape} does not match patch {rgb.shape[:2]}"
        )
    if basis is None:
        basis = default_basis()

    od = rgb_to_od(rgb, background_intensity)
    conc = deconvolve(od, basis)
    conc = perturb_concentrations(conc, config, rng)
    out = od_to_rgb(reconstruct(conc, basis), background_intensity)

    if rng.uniform() < config.flip_probability:
        out = out[:, ::-1]
        mask_arr = mask_arr[:, ::-1]

    if np.issubdtype(rgb.dtype, np.integer):
        out = np.rint(out).astype(rgb.dtype)
    return np.ascontiguousarray(out), np.ascontiguousarray(mask_arr)
