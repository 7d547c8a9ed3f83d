"""Command-line entry points for the toolkit."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np


def _load_rgb(path: str | Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def _make_backend(spec: str):
    from .proposal import RemoteBackend, StubBackend

    if spec == "stub":
        return StubBackend()
    if spec.startswith("external:"):
        _, host, port = spec.split(":")
        return RemoteBackend(host, int(port))
    raise SystemExit(f"unknown backend {spec!r} (use 'stub' or 'external:HOST:PORT')")


def _cmd_train(args) -> int:
    from .classifier import TrainConfig, make_training_set, save_models, train
    from .core import read_manifest
    from .stain import AugmentConfig

    config_obj = {}
    if args.config:
        config_obj = json.loads(Path(args.config).read_text())
    augment_obj = config_obj.pop("augment", "default")
    if augment_obj == "default":
        augment = AugmentConfig()
    elif augment_obj is None:
        augment = None
    else:
        augment = AugmentConfig(**augment_obj)
    config = TrainConfig(augment=augment, **config_obj)

    records = read_manifest(args.manifest)
    dataset = make_training_set(records, args.images, config.patch_size_px)
    print(f"training on {len(dataset)} patches, seeds {list(config.seeds)}")
    handles = train(config, dataset)
    save_models(handles, args.out, config=config)
    for handle in handles:
        best = max((h["val_f1"] for h in handle.history), default=0.0)
        print(f"seed {handle.seed}: best val F1 {best:.3f}")
    return 0


def _cmd_infer(args) -> int:
    from .classifier import load_models, make_scorer
    from .core import PixelGrid
    from .pipeline import plan_tiles, run_roi, write_detections

    roi = _load_rgb(args.roi)
    grid = PixelGrid(roi.shape[1], roi.shape[0], args.mpp)
    backend = _make_backend(args.backend)
    scorer = make_scorer(load_models(args.models))
    plan = plan_tiles(grid.width, grid.height, args.tile_size, args.overlap)
    detections = run_roi(
        roi,
        grid,
        backend,
        scorer,
        tile_plan=plan,
        patch_size=args.patch_size,
        score_threshold=args.score_threshold,
        workers=args.workers,
    )
    image_id = args.image_id or Path(args.roi).name
    write_detections(args.out, detections, image=image_id)
    print(f"{len(detections)} detections -> {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    from .evaluation import evaluate_run, render_metrics_table

    table = evaluate_run(args.detections, args.truth, radius_um=args.radius_um)
    text = render_metrics_table(table)
    print(text)
    if args.out:
        Path(args.out).write_text(json.dumps(table.to_json(), indent=2))
        print(f"metrics -> {args.out}")
    return 0


def _cmd_register(args) -> int:
    from .ihc import RansacConfig, TemplateMatchProvider, register

    config_obj = json.loads(Path(args.config).read_text()) if args.config else {}
    config = RansacConfig(**config_obj)
    phh3 = _load_rgb(args.phh3)
    he = _load_rgb(args.he)
    result = register(phh3, he, config, TemplateMatchProvider(), workers=args.workers)
    payload = {
        "schema": "omg-transform/1",
        "coarse": result.coarse.matrix.tolist(),
        "regions": [
            {
                "bbox": list(r.bbox),
                "matrix": r.transform.matrix.tolist(),
                "refined": r.refined,
            }
            for r in result.regions
        ],
    }
    Path(args.out).write_text(json.dumps(payload, indent=2))
    print(f"transform -> {args.out}")
    return 0


def _cmd_extract_phh3(args) -> int:
    from .core import PixelGrid, write_manifest
    from .ihc import PRESET_DAB_BROWN, AffineTransform, RgbThreshold, transfer_masks, extract_phh3_masks

    if args.threshold == "dab_brown":
        threshold = PRESET_DAB_BROWN
    else:
        obj = json.loads(Path(args.threshold).read_text())
        threshold = RgbThreshold(
            low=tuple(obj["low"]),
            high=tuple(obj["high"]),
            min_component_px=obj.get("min_component_px", 36),
            morphology_radius=obj.get("morphology_radius", 1),
        )
    rgb = _load_rgb(args.image)
    grid = PixelGrid(rgb.shape[1], rgb.shape[0], args.mpp)
    masks = extract_phh3_masks(rgb, threshold, grid)
    records = transfer_masks(
        masks,
        AffineTransform.identity(),
        grid,
        image_path=Path(args.image).name,
        tumour_type=args.tumour_type,
    )
    write_manifest(records, args.out)
    print(f"{len(records)} masks -> {args.out}")
    return 0


def _cmd_curate(args) -> int:
    from .core import write_manifest
    from .curation import ADAPTERS, standardize

    if args.adapter not in ADAPTERS:
        raise SystemExit(f"unknown adapter {args.adapter!r} (have {sorted(ADAPTERS)})")
    if args.adapter == "box_json":
        adapter = ADAPTERS[args.adapter](args.input, args.images or ".", mpp=args.mpp)
    else:
        adapter = ADAPTERS[args.adapter](args.input, mpp=args.mpp)
    backend = _make_backend(args.backend)
    records, report = standardize(adapter, backend)
    write_manifest(records, args.out)
    print(report.render())
    if args.report:
        Path(args.report).write_text(json.dumps(report.to_json(), indent=2))
    print(f"{len(records)} records -> {args.out}")
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .review import ReviewStore, Role
    from .review_api import create_app

    store = ReviewStore(args.store)
    for annotator in args.junior or []:
        if annotator not in store.annotators:
            store.register_annotator(annotator, Role.JUNIOR)
    for annotator in args.senior or []:
        if annotator not in store.annotators:
            store.register_annotator(annotator, Role.SENIOR)
    app = create_app(store)
    if args.ui:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=args.ui, html=True), name="ui")
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def _cmd_export(args) -> int:
    from .core import write_manifest
    from .review import ReviewStore

    store = ReviewStore(args.store)
    records = store.export_training()
    write_manifest(records, args.out)
    print(f"{len(records)} records -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mitodet")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the patch classifier")
    p.add_argument("--config", help="JSON TrainConfig overrides")
    p.add_argument("--manifest", required=True)
    p.add_argument("--images", required=True, help="root directory for image_path")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="run the two-stage pipeline on an ROI image")
    p.add_argument("--roi", required=True)
    p.add_argument("--mpp", type=float, required=True)
    p.add_argument("--backend", default="stub")
    p.add_argument("--models", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--image-id", default=None)
    p.add_argument("--tile-size", type=int, default=1024)
    p.add_argument("--overlap", type=int, default=128)
    p.add_argument("--patch-size", type=int, default=64)
    p.add_argument("--score-threshold", type=float, default=0.5)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("evaluate", help="score detection files against a truth manifest")
    p.add_argument("--detections", nargs="+", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--radius-um", type=float, default=7.5)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("register", help="register a pHH3 raster onto an H&E raster")
    p.add_argument("--phh3", required=True)
    p.add_argument("--he", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_register)

    p = sub.add_parser("extract-phh3", help="threshold pHH3 nuclei into a manifest")
    p.add_argument("--image", required=True)
    p.add_argument("--threshold", default="dab_brown", help="JSON file or 'dab_brown'")
    p.add_argument("--mpp", type=float, default=0.25)
    p.add_argument("--tumour-type", default="soft tissue tumour")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_extract_phh3)

    p = sub.add_parser("curate", help="standardize a source dataset into the manifest")
    p.add_argument("--adapter", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--images", help="images root (box_json adapter)")
    p.add_argument("--mpp", type=float, default=0.25)
    p.add_argument("--backend", default="stub")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.set_defaults(func=_cmd_curate)

    p = sub.add_parser("serve", help="serve the review API")
    p.add_argument("--store", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8008)
    p.add_argument("--junior", nargs="*", help="junior annotator ids to register")
    p.add_argument("--senior", nargs="*", help="senior annotator ids to register")
    p.add_argument("--ui", help="directory with the built review UI to serve at /")
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("export", help="export resolved review labels to a manifest")
    p.add_argument("--store", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
