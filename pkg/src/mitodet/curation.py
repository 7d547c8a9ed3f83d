"""Unify heterogeneous source annotations into the manifest format.

Source datasets label mitoses in incompatible ways (full pixel masks,
circles, bounding boxes, bare centroids). Adapters normalize each layout
into raw annotations; `standardize` then either encodes precise masks
directly or refines the looser geometries into masks through a box prompt
to the proposal backend. Nothing is ever silently dropped: every input
annotation ends up either as a manifest record or as a reported failure.
"""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Protocol, Sequence, Union

import numpy as np

from .core import (
    BinaryMask,
    Label,
    ObjectRecord,
    PixelGrid,
    Provenance,
    Species,
    decode_mask,
    encode_mask,
    record_from_raster,
    tight_bbox,
)
from .errors import NoObjectError, RejectedInputError
from .proposal import (
    MaskProposal,
    ProposalBackend,
    ProposalFilterConfig,
    propose_box,
    propose_tile,
    window_iou,
)

log = logging.getLogger(__name__)

# Point annotations become square prompts of this many pixels (about 7.5 um
# at 0.25 um/px, the evaluation matching radius).
POINT_BOX_PX = 30

# A harvested proposal overlapping a labelled object above this IoU is the
# labelled object, not a surrounding one.
EXCLUSION_IOU = 0.25


@dataclass(frozen=True, eq=False)
class MaskGeometry:
    raster: np.ndarray  # full-image binary raster


@dataclass(frozen=True)
class CircleGeometry:
    cx: float
    cy: float
    radius: float


@dataclass(frozen=True)
class BoxGeometry:
    x0: int
    y0: int
    x1: int
    y1: int


@dataclass(frozen=True)
class PointGeometry:
    x: float
    y: float


Geometry = Union[MaskGeometry, CircleGeometry, BoxGeometry, PointGeometry]


@dataclass(frozen=True, eq=False)
class RawAnnotation:
    label: Label
    geometry: Geometry


@dataclass(frozen=True, eq=False)
class AnnotatedImage:
    image_id: str
    rgb: np.ndarray
    grid: PixelGrid
    annotations: tuple[RawAnnotation, ...]
    species: Species = Species.HUMAN
    tumour_type: str = ""


class SourceAdapter(Protocol):
    """Yields one AnnotatedImage per source image. `name` is the dataset name."""

    name: str

    def __iter__(self) -> Iterator[AnnotatedImage]:
        ...


@dataclass
class Failure:
    image_id: str
    annotation_index: int
    reason: str
    prompt: tuple[int, int, int, int] | None = None


@dataclass
class DatasetCounts:
    n_images: int = 0
    n_mf: int = 0
    n_mlf: int = 0
    n_other: int = 0
    tumour_types: Counter = field(default_factory=Counter)
    species: Counter = field(default_factory=Counter)
    provenance: Counter = field(default_factory=Counter)

    def add_record(self, record: ObjectRecord) -> None:
        if record.label == Label.MF:
            self.n_mf += 1
        elif record.label == Label.MLF:
            self.n_mlf += 1
        else:
            self.n_other += 1
        self.tumour_types[record.tumour_type] += 1
        self.species[record.species.value] += 1
        self.provenance[record.provenance.value] += 1


@dataclass
class CurationReport:
    per_dataset: dict[str, DatasetCounts] = field(default_factory=dict)
    failures: list[Failure] = field(default_factory=list)

    def counts(self, dataset: str) -> DatasetCounts:
        return self.per_dataset.setdefault(dataset, DatasetCounts())

    @property
    def totals(self) -> DatasetCounts:
        total = DatasetCounts()
        for counts in self.per_dataset.values():
            total.n_images += counts.n_images
            total.n_mf += counts.n_mf
            total.n_mlf += counts.n_mlf
            total.n_other += counts.n_other
            total.tumour_types.update(counts.tumour_types)
            total.species.update(counts.species)
            total.provenance.update(counts.provenance)
        return total

    def render(self) -> str:
        header = (
            f"{'Dataset':<14}{'Tumour types':<28}{'Images':>8}"
            f"{'MFs':>10}{'MLFs':>10}{'Non-MF':>10}"
        )
        lines = [header, "-" * len(header)]
        for dataset in sorted(self.per_dataset):
            c = self.per_dataset[dataset]
            types = ", ".join(sorted(t for t in c.tumour_types if t)) or "-"
            lines.append(
                f"{dataset:<14}{types:<28}{c.n_images:>8}"
                f"{c.n_mf:>10}{c.n_mlf:>10}{c.n_other:>10}"
            )
        t = self.totals
        lines.append(
            f"{'Total':<14}{'':<28}{t.n_images:>8}{t.n_mf:>10}{t.n_mlf:>10}{t.n_other:>10}"
        )
        if self.failures:
            lines.append(f"\nFailures ({len(self.failures)}):")
            for f in self.failures:
                lines.append(
                    f"  {f.image_id}[{f.annotation_index}]: {f.reason}"
                    + (f" prompt={f.prompt}" if f.prompt else "")
                )
        return "\n".join(lines)

    def to_json(self) -> dict:
        return {
            "schema": "omg-report/1",
            "datasets": {
                name: {
                    "images": c.n_images,
                    "mf": c.n_mf,
                    "mlf": c.n_mlf,
                    "other": c.n_other,
                    "tumour_types": dict(c.tumour_types),
                    "species": dict(c.species),
                    "provenance": dict(c.provenance),
                }
                for name, c in self.per_dataset.items()
            },
            "failures": [
                {
                    "image": f.image_id,
                    "annotation": f.annotation_index,
                    "reason": f.reason,
                    "prompt": list(f.prompt) if f.prompt else None,
                }
                for f in self.failures
            ],
        }


def _prompt_box(
    geometry: Geometry, grid: PixelGrid, point_box_px: int
) -> tuple[int, int, int, int]:
    if isinstance(geometry, BoxGeometry):
        x0, y0, x1, y1 = geometry.x0, geometry.y0, geometry.x1, geometry.y1
    elif isinstance(geometry, CircleGeometry):
        x0 = int(np.floor(geometry.cx - geometry.radius))
        y0 = int(np.floor(geometry.cy - geometry.radius))
        x1 = int(np.ceil(geometry.cx + geometry.radius))
        y1 = int(np.ceil(geometry.cy + geometry.radius))
    elif isinstance(geometry, PointGeometry):
        half = point_box_px // 2
        x0 = int(round(geometry.x)) - half
        y0 = int(round(geometry.y)) - half
        x1, y1 = x0 + point_box_px, y0 + point_box_px
    else:
        raise RejectedInputError(f"no box prompt for geometry {type(geometry).__name__}")
    x0, y0 = max(0, x0), max(0, y0)
    x1, y1 = min(grid.width, x1), min(grid.height, y1)
    return x0, y0, x1, y1


def proposal_to_record(
    proposal: MaskProposal,
    grid: PixelGrid,
    *,
    id: str,
    dataset: str,
    image_path: str,
    label: Label,
    species: Species,
    tumour_type: str,
    provenance: Provenance,
) -> ObjectRecord:
    """Wrap a proposal (window mask + tile origin) as a manifest record."""
    window = proposal.window_mask()
    bbox = tight_bbox(window)
    x0, y0, x1, y1 = bbox
    crop = window[y0:y1, x0:x1]
    ys, xs = np.nonzero(window)
    ox, oy = proposal.origin_px
    return ObjectRecord(
        id=id,
        dataset=dataset,
        image_path=image_path,
        grid=grid,
        label=label,
        centroid_px=(ox + float(xs.mean()), oy + float(ys.mean())),
        bbox_px=(ox + x0, oy + y0, ox + x1, oy + y1),
        mask=encode_mask(crop, PixelGrid(x1 - x0, y1 - y0, grid.mpp)),
        species=species,
        tumour_type=tumour_type,
        provenance=provenance,
    )


def standardize(
    adapter: SourceAdapter,
    backend: ProposalBackend,
    filter_config: ProposalFilterConfig | None = None,
    *,
    point_box_px: int = POINT_BOX_PX,
    provenance: Provenance = Provenance.OPEN_SOURCE,
) -> tuple[list[ObjectRecord], CurationReport]:
    """Convert every source annotation into a mask-backed manifest record.

    Precise masks are encoded as-is; circles, boxes, and points become box
    prompts refined through the backend. Refinement failures (no object, or
    a mask outside the configured area bounds) are recorded in the report
    and excluded from the manifest, never silently dropped.
    """
    config = filter_config or ProposalFilterConfig()
    records: list[ObjectRecord] = []
    report = CurationReport()
    for item in adapter:
        counts = report.counts(adapter.name)
        counts.n_images += 1
        for index, annotation in enumerate(item.annotations):
            record_id = f"{adapter.name}:{item.image_id}:{index}"
            try:
                record = _standardize_one(
                    item, annotation, record_id, adapter.name, backend, config,
                    point_box_px, provenance,
                )
            except (NoObjectError, RejectedInputError) as exc:
                prompt = None
                if not isinstance(annotation.geometry, MaskGeometry):
                    try:
                        prompt = _prompt_box(annotation.geometry, item.grid, point_box_px)
                    except RejectedInputError:
                        prompt = None
                report.failures.append(
                    Failure(item.image_id, index, str(exc), prompt=prompt)
                )
                continue
            counts.add_record(record)
            records.append(record)
    return records, report


def _standardize_one(
    item: AnnotatedImage,
    annotation: RawAnnotation,
    record_id: str,
    dataset: str,
    backend: ProposalBackend,
    config: ProposalFilterConfig,
    point_box_px: int,
    provenance: Provenance,
) -> ObjectRecord:
    if isinstance(annotation.geometry, MaskGeometry):
        return record_from_raster(
            annotation.geometry.raster,
            item.grid,
            id=record_id,
            dataset=dataset,
            image_path=item.image_id,
            label=annotation.label,
            species=item.species,
            tumour_type=item.tumour_type,
            provenance=provenance,
        )
    box = _prompt_box(annotation.geometry, item.grid, point_box_px)
    proposal = propose_box(backend, item.rgb, item.grid, box, config)
    if not (config.area_min_um2 <= proposal.area_um2 <= config.area_max_um2):
        raise NoObjectError(
            f"refined mask area {proposal.area_um2:.2f} um^2 outside "
            f"[{config.area_min_um2}, {config.area_max_um2}]"
        )
    return proposal_to_record(
        proposal,
        item.grid,
        id=record_id,
        dataset=dataset,
        image_path=item.image_id,
        label=annotation.label,
        species=item.species,
        tumour_type=item.tumour_type,
        provenance=provenance,
    )


def _record_window(record: ObjectRecord) -> tuple[np.ndarray, tuple[int, int]]:
    return decode_mask(record.mask), (record.bbox_px[0], record.bbox_px[1])


def harvest_negatives(
    images: Iterable[AnnotatedImage],
    backend: ProposalBackend,
    filter_config: ProposalFilterConfig | None = None,
    exclusions: Sequence[ObjectRecord] = (),
    *,
    exclusion_iou: float = EXCLUSION_IOU,
    dataset: str | None = None,
    provenance: Provenance = Provenance.OPEN_SOURCE,
) -> list[ObjectRecord]:
    """Segment everything on each image and keep what is not a labelled object.

    Proposals overlapping any exclusion record (same image) above
    exclusion_iou are discarded; the rest become OTHER records.
    """
    config = filter_config or ProposalFilterConfig()
    by_image: dict[str, list[ObjectRecord]] = {}
    for record in exclusions:
        by_image.setdefault(record.image_path, []).append(record)

    out: list[ObjectRecord] = []
    for item in images:
        name = dataset or getattr(item, "dataset", None) or "harvest"
        excluded = [_record_window(r) for r in by_image.get(item.image_id, [])]
        proposals = propose_tile(backend, item.rgb, item.grid, config, tile_id=item.image_id)
        kept = 0
        for proposal in proposals:
            window = proposal.window_mask()
            overlaps = any(
                window_iou(window, proposal.origin_px, ew, eo) > exclusion_iou
                for ew, eo in excluded
            )
            if overlaps:
                continue
            out.append(
                proposal_to_record(
                    proposal,
                    item.grid,
                    id=f"{name}:{item.image_id}:other:{kept}",
                    dataset=name,
                    image_path=item.image_id,
                    label=Label.OTHER,
                    species=item.species,
                    tumour_type=item.tumour_type,
                    provenance=provenance,
                )
            )
            kept += 1
    return out


def accounting(manifests: Iterable[Sequence[ObjectRecord]]) -> CurationReport:
    """Tally manifests into per-dataset and total counts by label, species,
    tumour type, and provenance."""
    report = CurationReport()
    for records in manifests:
        seen_images: dict[str, set[str]] = {}
        for record in records:
            counts = report.counts(record.dataset)
            counts.add_record(record)
            seen_images.setdefault(record.dataset, set()).add(record.image_path)
        for dataset, images in seen_images.items():
            report.counts(dataset).n_images += len(images)
    return report


# --- file-layout adapters ---------------------------------------------------


def _load_rgb(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


class InMemoryAdapter:
    """Adapter over already-constructed AnnotatedImage items (tests, APIs)."""

    def __init__(self, name: str, items: Sequence[AnnotatedImage]):
        self.name = name
        self.items = list(items)

    def __iter__(self) -> Iterator[AnnotatedImage]:
        return iter(self.items)


class PixelCsvAdapter:
    """Pixel-label layout: for each `<stem>.png` image a `<stem>.csv` where
    every row lists one object's labelled pixels as x1,y1,x2,y2,...

    This is the layout used by datasets that label each pixel within a
    mitotic figure.
    """

    def __init__(
        self,
        root: str | Path,
        mpp: float = 0.25,
        name: str = "icpr",
        species: Species = Species.HUMAN,
        tumour_type: str = "breast carcinoma",
    ):
        self.root = Path(root)
        self.mpp = mpp
        self.name = name
        self.species = species
        self.tumour_type = tumour_type

    def __iter__(self) -> Iterator[AnnotatedImage]:
        for image_path in sorted(self.root.glob("*.png")):
            rgb = _load_rgb(image_path)
            grid = PixelGrid(rgb.shape[1], rgb.shape[0], self.mpp)
            annotations = []
            csv_path = image_path.with_suffix(".csv")
            if csv_path.exists():
                with open(csv_path, newline="") as fh:
                    for row in csv.reader(fh):
                        values = [int(float(v)) for v in row if v.strip() != ""]
                        raster = np.zeros((grid.height, grid.width), dtype=bool)
                        xs = np.clip(values[0::2], 0, grid.width - 1)
                        ys = np.clip(values[1::2], 0, grid.height - 1)
                        raster[ys, xs] = True
                        annotations.append(
                            RawAnnotation(Label.MF, MaskGeometry(raster))
                        )
            yield AnnotatedImage(
                image_id=image_path.name,
                rgb=rgb,
                grid=grid,
                annotations=tuple(annotations),
                species=self.species,
                tumour_type=self.tumour_type,
            )


class CentroidCsvAdapter:
    """Centroid layout: for each `<stem>.png` a `<stem>.csv` of `row,col`
    object centers (encircled-only annotation styles reduce to this)."""

    def __init__(
        self,
        root: str | Path,
        mpp: float = 0.25,
        name: str = "tupac",
        species: Species = Species.HUMAN,
        tumour_type: str = "breast carcinoma",
    ):
        self.root = Path(root)
        self.mpp = mpp
        self.name = name
        self.species = species
        self.tumour_type = tumour_type

    def __iter__(self) -> Iterator[AnnotatedImage]:
        for image_path in sorted(self.root.glob("*.png")):
            rgb = _load_rgb(image_path)
            grid = PixelGrid(rgb.shape[1], rgb.shape[0], self.mpp)
            annotations = []
            csv_path = image_path.with_suffix(".csv")
            if csv_path.exists():
                with open(csv_path, newline="") as fh:
                    for row in csv.reader(fh):
                        if not row or not row[0].strip():
                            continue
                        y, x = float(row[0]), float(row[1])
                        annotations.append(
                            RawAnnotation(Label.MF, PointGeometry(x=x, y=y))
                        )
            yield AnnotatedImage(
                image_id=image_path.name,
                rgb=rgb,
                grid=grid,
                annotations=tuple(annotations),
                species=self.species,
                tumour_type=self.tumour_type,
            )


class BoxJsonAdapter:
    """COCO-style box layout: one JSON with images / annotations / categories;
    category name containing "mitotic figure" maps to MF (a leading "non" or
    "not" makes it MLF), boxes are [x0, y0, x1, y1] by default."""

    def __init__(
        self,
        json_path: str | Path,
        images_root: str | Path,
        mpp: float = 0.25,
        name: str = "midog",
        species: Species = Species.HUMAN,
        bbox_format: str = "xyxy",
        tumour_type_key: str = "tumour_type",
    ):
        self.json_path = Path(json_path)
        self.images_root = Path(images_root)
        self.mpp = mpp
        self.name = name
        self.species = species
        if bbox_format not in ("xyxy", "xywh"):
            raise RejectedInputError(f"unknown bbox format {bbox_format!r}")
        self.bbox_format = bbox_format
        self.tumour_type_key = tumour_type_key

    def _label(self, category_name: str) -> Label:
        lowered = category_name.lower()
        if "mitotic" in lowered and not lowered.startswith(("non", "not", "hard")):
            return Label.MF
        return Label.MLF

    def __iter__(self) -> Iterator[AnnotatedImage]:
        spec = json.loads(self.json_path.read_text())
        categories = {c["id"]: c["name"] for c in spec.get("categories", [])}
        by_image: dict = {}
        for ann in spec.get("annotations", []):
            by_image.setdefault(ann["image_id"], []).append(ann)
        for image in spec.get("images", []):
            rgb = _load_rgb(self.images_root / image["file_name"])
            grid = PixelGrid(rgb.shape[1], rgb.shape[0], self.mpp)
            annotations = []
            for ann in by_image.get(image["id"], []):
                box = [int(round(v)) for v in ann["bbox"]]
                if self.bbox_format == "xywh":
                    box = [box[0], box[1], box[0] + box[2], box[1] + box[3]]
                label = self._label(categories.get(ann.get("category_id"), "mitotic figure"))
                annotations.append(RawAnnotation(label, BoxGeometry(*box)))
            yield AnnotatedImage(
                image_id=image["file_name"],
                rgb=rgb,
                grid=grid,
                annotations=tuple(annotations),
                species=self.species,
                tumour_type=image.get(self.tumour_type_key, ""),
            )


ADAPTERS = {
    "pixel_csv": PixelCsvAdapter,
    "centroid_csv": CentroidCsvAdapter,
    "box_json": BoxJsonAdapter,
}
