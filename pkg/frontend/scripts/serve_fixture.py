#!/usr/bin/env python3
"""Build a demo review store (N tasks with crop images) and serve the API.

Used by the frontend test suite and `npm run serve-demo`. Pass --ui to also
mount the built frontend at / (run `npm run build` first).
"""

import argparse
from pathlib import Path

import numpy as np
import uvicorn
from PIL import Image

from mitodet.core import PixelGrid, encode_mask
from mitodet.review import ReviewCandidate, ReviewStore, Role
from mitodet.review_api import create_app

JUNIORS = [f"path{i}" for i in range(6)]
SENIORS = ["sen0", "sen1"]


def build_store(store_dir: Path, n_tasks: int) -> ReviewStore:
    store = ReviewStore(store_dir)
    for junior in JUNIORS:
        if junior not in store.annotators:
            store.register_annotator(junior, Role.JUNIOR)
    for senior in SENIORS:
        if senior not in store.annotators:
            store.register_annotator(senior, Role.SENIOR)
    if store.tasks:
        return store

    crops = store_dir / "crops"
    crops.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(0)
    grid = PixelGrid(64, 64, 0.25)
    candidates = []
    for k in range(n_tasks):
        rgb = rng.normal(235, 6, size=(64, 64, 3)).clip(180, 255).astype(np.uint8)
        raster = np.zeros((64, 64), dtype=bool)
        yy, xx = np.ogrid[:64, :64]
        r = 6 + (k % 4)
        raster[(xx - 32) ** 2 + (yy - 32) ** 2 <= r * r] = True
        rgb[raster] = (70, 40, 90)
        Image.fromarray(rgb).save(crops / f"c{k}.png")
        candidates.append(
            ReviewCandidate(
                image_path=f"crops/c{k}.png",
                grid=grid,
                mask=encode_mask(raster, grid),
                score=float(rng.uniform(0.5, 1.0)),
                tumour_type="breast carcinoma",
            )
        )
    store.enqueue(candidates, seed=0)
    return store


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("--store", required=True)
    parser.add_argument("--port", type=int, default=8008)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--n-tasks", type=int, default=10)
    parser.add_argument("--ui", action="store_true", help="mount ../index.html at /")
    args = parser.parse_args()

    store = build_store(Path(args.store), args.n_tasks)
    app = create_app(store)
    if args.ui:
        from fastapi.staticfiles import StaticFiles

        root = Path(__file__).resolve().parent.parent
        app.mount("/", StaticFiles(directory=root, html=True), name="ui")
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")


if __name__ == "__main__":
    main()
