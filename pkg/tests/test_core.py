import dataclasses
import json
from importlib import resources

import numpy as np
import pytest

from mitodet.core import (
    BinaryMask,
    Detection,
    Label,
    PixelGrid,
    crop_patch,
    decode_mask,
    encode_mask,
    mask_area_um2,
    read_manifest,
    record_from_raster,
    tight_bbox,
    write_manifest,
)
from mitodet.errors import (
    CorruptMaskError,
    ManifestError,
    RecordValidationError,
    RejectedInputError,
)

from conftest import make_record


class TestRle:
    def test_all_background(self, grid16):
        grid = PixelGrid(2, 2, 0.25)
        mask = encode_mask(np.zeros((2, 2)), grid)
        assert mask.runs == (4,)

    def test_all_foreground(self):
        grid = PixelGrid(2, 2, 0.25)
        mask = encode_mask(np.ones((2, 2)), grid)
        assert mask.runs == (0, 4)

    def test_hand_decodable(self):
        grid = PixelGrid(2, 2, 0.25)
        raster = decode_mask(BinaryMask(grid, (1, 2, 1)))
        assert raster.ravel().astype(int).tolist() == [0, 1, 1, 0]

    def test_round_trip_fuzz(self):
        grid = PixelGrid(16, 16, 0.25)
        for seed in range(1000):
            rng = np.random.default_rng(seed)
            raster = rng.random((16, 16)) < rng.uniform(0.05, 0.95)
            assert np.array_equal(decode_mask(encode_mask(raster, grid)), raster)

    def test_encode_shape_mismatch(self):
        with pytest.raises(RejectedInputError):
            encode_mask(np.zeros((3, 2)), PixelGrid(2, 2, 0.25))

    def test_corrupt_runs(self):
        with pytest.raises(CorruptMaskError):
            BinaryMask(PixelGrid(2, 2, 0.25), (3,))
        with pytest.raises(CorruptMaskError):
            BinaryMask(PixelGrid(2, 2, 0.25), (5, -1))

    def test_conformance_vectors(self):
        ref = resources.files("mitodet").joinpath("data/rle_conformance.json")
        spec = json.loads(ref.read_text())
        assert spec["schema"] == "omg-rle-vectors/1"
        for vector in spec["vectors"]:
            grid = PixelGrid(vector["width"], vector["height"], 0.25)
            raster = np.array(vector["pixels"], dtype=bool).reshape(
                vector["height"], vector["width"]
            )
            assert list(encode_mask(raster, grid).runs) == vector["runs"], vector["name"]
            decoded = decode_mask(BinaryMask(grid, tuple(vector["runs"])))
            assert np.array_equal(decoded, raster), vector["name"]


class TestArea:
    def test_filter_bounds_in_pixels(self):
        grid = PixelGrid(60, 60, 0.25)
        raster = np.zeros((60, 60), dtype=bool)
        raster.ravel()[:36] = True
        assert mask_area_um2(encode_mask(raster, grid)) == pytest.approx(2.25)
        raster = np.zeros((60, 60), dtype=bool)
        raster.ravel()[:3600] = True
        assert mask_area_um2(encode_mask(raster, grid)) == pytest.approx(225.0)

    def test_empty(self):
        grid = PixelGrid(4, 4, 0.25)
        assert mask_area_um2(encode_mask(np.zeros((4, 4)), grid)) == 0.0

    def test_linear_in_count_quadratic_in_mpp(self):
        for count in (1, 7, 50):
            for mpp in (0.1, 0.25, 0.5):
                grid = PixelGrid(10, 10, mpp)
                raster = np.zeros((10, 10), dtype=bool)
                raster.ravel()[:count] = True
                assert mask_area_um2(encode_mask(raster, grid)) == pytest.approx(
                    count * mpp**2
                )


class TestGrid:
    def test_dimension_invariants(self):
        with pytest.raises(RejectedInputError):
            PixelGrid(0, 4, 0.25)
        with pytest.raises(RejectedInputError):
            PixelGrid(4, 4, 3.0)
        with pytest.raises(RejectedInputError):
            PixelGrid(4, 4, 0.05)


class TestManifest:
    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        assert read_manifest(path) == []

    def test_round_trip(self, tmp_path):
        record = make_record(extras={"note": "kept", "quality": 3})
        path = tmp_path / "m.jsonl"
        write_manifest([record], path)
        (loaded,) = read_manifest(path)
        assert loaded == record
        assert loaded.extras == {"note": "kept", "quality": 3}

    def test_unknown_fields_preserved(self, tmp_path):
        record = make_record()
        path = tmp_path / "m.jsonl"
        write_manifest([record], path)
        obj = json.loads(path.read_text())
        obj["custom_field"] = [1, 2, 3]
        path.write_text(json.dumps(obj) + "\n")
        (loaded,) = read_manifest(path)
        assert loaded.extras["custom_field"] == [1, 2, 3]
        path2 = tmp_path / "m2.jsonl"
        write_manifest([loaded], path2)
        assert json.loads(path2.read_text())["custom_field"] == [1, 2, 3]

    def test_malformed_line_names_line_number(self, tmp_path):
        record = make_record()
        path = tmp_path / "m.jsonl"
        write_manifest([record], path)
        with open(path, "a") as fh:
            fh.write("{not json\n")
        with pytest.raises(ManifestError, match="line 2"):
            read_manifest(path)

    def test_missing_key_names_line_number(self, tmp_path):
        path = tmp_path / "m.jsonl"
        obj = json.loads(json.dumps(_record_json()))
        del obj["label"]
        path.write_text(json.dumps(obj) + "\n")
        with pytest.raises(ManifestError, match="line 1"):
            read_manifest(path)

    def test_centroid_outside_bbox_is_validation_error(self, tmp_path):
        path = tmp_path / "m.jsonl"
        obj = _record_json()
        obj["centroid_px"] = [15.0, 15.0]
        path.write_text(json.dumps(obj) + "\n")
        with pytest.raises(RecordValidationError, match="r0"):
            read_manifest(path)

    def test_wrong_schema(self, tmp_path):
        path = tmp_path / "m.jsonl"
        obj = _record_json()
        obj["schema"] = "other/9"
        path.write_text(json.dumps(obj) + "\n")
        with pytest.raises(ManifestError, match="schema"):
            read_manifest(path)


def _record_json():
    from mitodet.core import record_to_json

    return record_to_json(make_record())


class TestRecord:
    def test_mask_must_match_bbox(self, grid16):
        record = make_record()
        with pytest.raises(RecordValidationError, match="r0"):
            dataclasses.replace(record, bbox_px=(2, 2, 7, 6))

    def test_bbox_inside_grid(self):
        with pytest.raises(RecordValidationError):
            make_record(bbox=(10, 10, 20, 20))

    def test_record_from_raster(self, grid16):
        raster = np.zeros((16, 16), dtype=bool)
        raster[4:7, 5:9] = True
        record = record_from_raster(
            raster,
            grid16,
            id="x",
            dataset="d",
            image_path="i.png",
            label=Label.MF,
            species=make_record().species,
            tumour_type="t",
            provenance=make_record().provenance,
        )
        assert record.bbox_px == (5, 4, 9, 7)
        assert record.centroid_px == (6.5, 5.0)
        assert record.mask.foreground_pixels == 12

    def test_record_from_empty_raster(self, grid16):
        with pytest.raises(RejectedInputError):
            record_from_raster(
                np.zeros((16, 16), dtype=bool),
                grid16,
                id="x",
                dataset="d",
                image_path="i",
                label=Label.MF,
                species=make_record().species,
                tumour_type="t",
                provenance=make_record().provenance,
            )


class TestDetection:
    def test_score_range(self):
        with pytest.raises(RejectedInputError):
            Detection(centroid_um=(0, 0), score=1.5)


class TestHelpers:
    def test_tight_bbox(self):
        raster = np.zeros((5, 6), dtype=bool)
        assert tight_bbox(raster) is None
        raster[2, 3] = True
        raster[4, 1] = True
        assert tight_bbox(raster) == (1, 2, 4, 5)

    def test_crop_patch_interior(self):
        arr = np.arange(100).reshape(10, 10)
        patch = crop_patch(arr, 5, 5, 4)
        assert patch.shape == (4, 4)
        assert patch[0, 0] == arr[3, 3]

    def test_crop_patch_reflects_at_border(self):
        arr = np.arange(36).reshape(6, 6)
        patch = crop_patch(arr, 0, 0, 4)
        assert patch.shape == (4, 4)
        # symmetric padding mirrors the edge rows/columns
        assert patch[2, 2] == arr[0, 0]
        assert patch[0, 0] == arr[1, 1]
