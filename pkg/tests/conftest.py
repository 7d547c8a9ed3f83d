import numpy as np
import pytest

from mitodet.core import (
    BinaryMask,
    Label,
    ObjectRecord,
    PixelGrid,
    Provenance,
    Species,
    encode_mask,
)


def draw_disk(img, cx, cy, r, value):
    ys, xs = np.ogrid[: img.shape[0], : img.shape[1]]
    img[(xs - cx) ** 2 + (ys - cy) ** 2 <= r * r] = value


def draw_ring(img, cx, cy, r_out, r_in, value):
    ys, xs = np.ogrid[: img.shape[0], : img.shape[1]]
    d2 = (xs - cx) ** 2 + (ys - cy) ** 2
    img[(d2 <= r_out * r_out) & (d2 >= r_in * r_in)] = value


def make_record(
    record_id="r0",
    dataset="test",
    image_path="img.png",
    grid=None,
    label=Label.MF,
    bbox=(2, 2, 6, 6),
    species=Species.HUMAN,
    tumour_type="breast carcinoma",
    provenance=Provenance.OPEN_SOURCE,
    extras=None,
):
    grid = grid or PixelGrid(16, 16, 0.25)
    x0, y0, x1, y1 = bbox
    mask_grid = PixelGrid(x1 - x0, y1 - y0, grid.mpp)
    raster = np.ones((y1 - y0, x1 - x0), dtype=bool)
    return ObjectRecord(
        id=record_id,
        dataset=dataset,
        image_path=image_path,
        grid=grid,
        label=label,
        centroid_px=((x0 + x1 - 1) / 2, (y0 + y1 - 1) / 2),
        bbox_px=bbox,
        mask=encode_mask(raster, mask_grid),
        species=species,
        tumour_type=tumour_type,
        provenance=provenance,
        extras=extras or {},
    )


def center_scorer(rgb_batch, mask_batch):
    """Reference stage-two scorer for fixtures: fraction of the patch's
    central 7x7 window covered by the object mask. Solid blobs centered on
    their centroid score ~1, rings (centroid in the hole) score ~0."""
    n, h, w = mask_batch.shape[:3]
    cy, cx = h // 2, w // 2
    center = mask_batch[:, cy - 3 : cy + 4, cx - 3 : cx + 4]
    return center.reshape(n, -1).mean(axis=1)


def make_separable_patches(n_per_class=100, size=64, seed=1234):
    """Separable two-class patch set: dark solid disks (positives) vs
    ring-shaped structures (negatives), light noisy background."""
    from mitodet.classifier import ClassifierInput, LabeledPatch

    rng = np.random.default_rng(seed)
    patches = []
    for k in range(n_per_class):
        for label in (1, 0):
            rgb = rng.normal(235, 6, size=(size, size, 3)).clip(180, 255)
            mask = np.zeros((size, size), dtype=bool)
            cx = size // 2 + int(rng.integers(-3, 4))
            cy = size // 2 + int(rng.integers(-3, 4))
            if label == 1:
                draw_disk(rgb, cx, cy, 10, rng.integers(40, 80))
                draw_disk(mask, cx, cy, 10, True)
            else:
                draw_ring(rgb, cx, cy, 13, 9, rng.integers(40, 80))
                draw_ring(mask, cx, cy, 13, 9, True)
            patches.append(
                LabeledPatch(
                    id=f"{'p' if label else 'n'}{k}",
                    input=ClassifierInput(rgb=rgb.astype(np.uint8), mask=mask),
                    label=label,
                )
            )
    return patches


@pytest.fixture
def grid16():
    return PixelGrid(16, 16, 0.25)
