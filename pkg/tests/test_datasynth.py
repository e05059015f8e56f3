import hashlib
from pathlib import Path

import numpy as np
import numpy.testing as npt
import pytest

from swpnet.binning import LOCATION_BINS, SIZE_BINS, BoundingBox
from swpnet.datasynth import (
    DataSynthError,
    DatasetManifest,
    PreprocessConfig,
    bin_histogram,
    center_crop_transform,
    crop_dataset_to_boxes,
    generate_dataset,
    load_image,
    load_manifest,
    make_class_specs,
    preprocess_eval_center,
    preprocess_train,
    save_histograms,
    subset_classes,
    synthesize,
    transform_box,
)


def tree_digest(root) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


class TestClassSpecs:
    def test_rejects_single_class(self):
        with pytest.raises(DataSynthError):
            make_class_specs(1)

    def test_specs_pairwise_distinct(self):
        specs = make_class_specs(8, similarity_margin=0.25)
        seen = {(s.body_aspect, s.cabin_offset, s.wheel_radius, s.body_rgb) for s in specs}
        assert len(seen) == 8

    def test_margin_too_large(self):
        with pytest.raises(DataSynthError):
            make_class_specs(1000, similarity_margin=1.0)


class TestGeneration:
    def test_bit_reproducible(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        generate_dataset(4, 10, 256, a, seed=7)
        generate_dataset(4, 10, 256, b, seed=7)
        assert tree_digest(a) == tree_digest(b)

    def test_seed_changes_output(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        generate_dataset(2, 2, 64, a, seed=1)
        generate_dataset(2, 2, 64, b, seed=2)
        assert tree_digest(a) != tree_digest(b)

    def test_record_count(self, tmp_path):
        manifest = generate_dataset(4, 10, 128, tmp_path, seed=3)
        assert len(manifest) == 40
        assert manifest.n_classes == 4

    def test_box_contains_every_glyph_pixel(self):
        samples = synthesize(3, 4, 96, seed=5)
        for s in samples:
            rows = np.flatnonzero(s.glyph_mask.any(axis=1))
            cols = np.flatnonzero(s.glyph_mask.any(axis=0))
            assert s.box.cx - s.box.w / 2 <= cols[0]
            assert cols[-1] + 1 <= s.box.cx + s.box.w / 2
            assert s.box.cy - s.box.h / 2 <= rows[0]
            assert rows[-1] + 1 <= s.box.cy + s.box.h / 2

    def test_single_class_rejected(self, tmp_path):
        with pytest.raises(DataSynthError):
            generate_dataset(1, 5, 64, tmp_path)

    def test_canvas_too_small(self, tmp_path):
        with pytest.raises(DataSynthError):
            generate_dataset(2, 1, 16, tmp_path)


class TestManifests:
    def test_roundtrip(self, tmp_path):
        manifest = generate_dataset(3, 2, 64, tmp_path, seed=1)
        loaded = load_manifest(tmp_path / "train.txt")
        assert len(loaded) == len(manifest)
        for a, b in zip(loaded.records, manifest.records):
            assert a.class_id == b.class_id
            assert a.box == b.box
            assert Path(a.path) == Path(b.path)

    def test_missing_image_rejected(self, tmp_path):
        manifest = generate_dataset(2, 1, 64, tmp_path, seed=1)
        Path(manifest.records[0].path).unlink()
        with pytest.raises(DataSynthError):
            load_manifest(tmp_path / "train.txt")

    def test_subset_remaps_ids(self, tmp_path):
        manifest = generate_dataset(8, 2, 64, tmp_path, seed=2, similarity_margin=0.2)
        sub = subset_classes(manifest, [2, 5])
        assert sub.n_classes == 2
        assert {r.class_id for r in sub.records} == {0, 1}
        assert sub.id_mapping == {2: 0, 5: 1}

    def test_subset_of_everything_is_identity(self, tmp_path):
        manifest = generate_dataset(3, 2, 64, tmp_path, seed=2)
        sub = subset_classes(manifest, range(3))
        assert len(sub) == len(manifest)
        assert [r.class_id for r in sub.records] == [r.class_id for r in manifest.records]

    def test_complementary_subsets_partition(self, tmp_path):
        manifest = generate_dataset(4, 3, 64, tmp_path, seed=2)
        left = subset_classes(manifest, [0, 1])
        right = subset_classes(manifest, [2, 3])
        assert len(left) + len(right) == len(manifest)
        assert {r.path for r in left.records}.isdisjoint({r.path for r in right.records})

    def test_empty_subset_rejected(self, tmp_path):
        manifest = generate_dataset(2, 1, 64, tmp_path, seed=2)
        with pytest.raises(DataSynthError):
            subset_classes(manifest, [])


class TestPreprocessTrain:
    def test_identity_transform(self):
        box = BoundingBox(10, 12, 6, 4)
        out = transform_box(box, 1.0, 1.0, 0.0, 0.0)
        assert out == box

    def test_scale_doubles_box(self):
        box = BoundingBox(10, 12, 6, 4)
        out = transform_box(box, 2.0, 2.0, 0.0, 0.0)
        assert (out.cx, out.cy, out.w, out.h) == (20, 24, 12, 8)

    def test_box_rides_crop(self):
        samples = synthesize(2, 2, 96, seed=8)
        cfg = PreprocessConfig(crop_size=64, eval_scale=72, scale_range=(0.8, 1.1), seed=0)
        rng = np.random.default_rng(0)
        for s in samples:
            crop, box = preprocess_train(s.image, s.box, cfg, rng)
            assert crop.shape == (64, 64, 3)
            assert 0 <= box.cx <= 64 and 0 <= box.cy <= 64
            assert box.w > 0 and box.h > 0

    def test_box_transform_consistent_with_pixels(self):
        # glyph pixels found inside the crop must lie within the adjusted box
        samples = synthesize(2, 3, 96, seed=9)
        cfg = PreprocessConfig(crop_size=64, eval_scale=72, scale_range=(1.0, 1.0), seed=0)
        rng = np.random.default_rng(1)
        for s in samples:
            crop, box = preprocess_train(s.image, s.box, cfg, rng)
            mask = s.glyph_mask  # scale 1.0 keeps pixel identity; recover offset by matching
            # with scale fixed at 1.0 the crop is a pure translation
            # find the wheel colour to locate glyph pixels inside the crop
            glyph_px = np.argwhere((crop == (28, 28, 34)).all(axis=2))
            if glyph_px.size == 0:
                continue
            ys, xs = glyph_px[:, 0], glyph_px[:, 1]
            tol = 1.0
            assert xs.min() >= box.cx - box.w / 2 - tol
            assert xs.max() <= box.cx + box.w / 2 + tol
            assert ys.min() >= box.cy - box.h / 2 - tol
            assert ys.max() <= box.cy + box.h / 2 + tol

    def test_degenerate_crops_resampled_to_validity(self):
        # glyph tucked in a corner of a large canvas: random 32-crops of the
        # 128-canvas mostly miss it, the guard must still return a live box
        from swpnet.datasynth import render_glyph
        spec = make_class_specs(2)[0]
        for seed in range(12):
            img = np.full((128, 128, 3), 190, dtype=np.uint8)
            box, _ = render_glyph(img, spec, 18.0, 14.0, 16.0)
            cfg = PreprocessConfig(crop_size=32, eval_scale=32, scale_range=(1.0, 1.0), seed=0)
            crop, adj = preprocess_train(img, box, cfg, np.random.default_rng(seed))
            assert adj.w >= 2 and adj.h >= 2

    def test_rescale_below_crop_rejected(self):
        img = np.zeros((64, 64, 3), dtype=np.uint8)
        cfg = PreprocessConfig(crop_size=60, eval_scale=64, scale_range=(0.5, 0.5), seed=0)
        with pytest.raises(DataSynthError):
            preprocess_train(img, BoundingBox(32, 32, 10, 10), cfg, np.random.default_rng(0))


class TestPreprocessEval:
    def test_central_crop_of_256(self):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 255, size=(256, 256, 3), dtype=np.uint8)
        out = preprocess_eval_center(img, PreprocessConfig())
        npt.assert_array_equal(out, img[16:240, 16:240])

    def test_shortest_side_rule_wide_image(self):
        img = np.zeros((256, 512, 3), dtype=np.uint8)
        crop, sx, sy, ox, oy = center_crop_transform(img, PreprocessConfig())
        assert crop.shape == (224, 224, 3)
        assert sy == pytest.approx(1.0)
        assert sx == pytest.approx(1.0)
        assert (ox, oy) == (144.0, 16.0)

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        img = rng.integers(0, 255, size=(300, 270, 3), dtype=np.uint8)
        a = preprocess_eval_center(img, PreprocessConfig())
        b = preprocess_eval_center(img, PreprocessConfig())
        assert a.tobytes() == b.tobytes()


class TestHistograms:
    def test_each_histogram_sums_to_record_count(self, tmp_path):
        manifest = generate_dataset(3, 4, 128, tmp_path, seed=4)
        counts = bin_histogram(manifest, LOCATION_BINS, SIZE_BINS)
        for key in ("cx", "cy", "w", "h"):
            assert counts[key].sum() == len(manifest)

    def test_constant_boxes_single_bin(self):
        records = [type("R", (), {"path": f"p{i}", "class_id": 0,
                                  "box": BoundingBox(84, 84, 140, 140)})() for i in range(5)]
        manifest = DatasetManifest(records, 1, "eval")
        counts = bin_histogram(manifest, LOCATION_BINS, SIZE_BINS)
        assert counts["cx"][12] == 5 and (counts["cx"] > 0).sum() == 1
        assert counts["w"][20] == 5 and (counts["w"] > 0).sum() == 1

    def test_overflow_lands_in_last_bin(self):
        records = [type("R", (), {"path": "p", "class_id": 0,
                                  "box": BoundingBox(84, 84, 300, 140)})()]
        manifest = DatasetManifest(records, 1, "eval")
        counts = bin_histogram(manifest, LOCATION_BINS, SIZE_BINS)
        assert counts["w"][39] == 1

    def test_reorder_invariance_with_preprocess(self, tmp_path):
        manifest = generate_dataset(2, 4, 96, tmp_path, seed=5)
        cfg = PreprocessConfig(crop_size=64, eval_scale=72, scale_range=(0.8, 1.0), seed=3)
        fwd = bin_histogram(manifest, LOCATION_BINS, SIZE_BINS, preprocess=cfg)
        rev = DatasetManifest(list(reversed(manifest.records)), manifest.n_classes, manifest.split)
        bwd = bin_histogram(rev, LOCATION_BINS, SIZE_BINS, preprocess=cfg)
        for key in fwd:
            npt.assert_array_equal(fwd[key], bwd[key])

    def test_csv_export(self, tmp_path):
        manifest = generate_dataset(2, 2, 96, tmp_path, seed=6)
        counts = bin_histogram(manifest, LOCATION_BINS, SIZE_BINS)
        paths = save_histograms(counts, tmp_path / "hist")
        assert [p.name for p in paths] == ["hist_cx.csv", "hist_cy.csv", "hist_w.csv", "hist_h.csv"]
        body = paths[0].read_text().splitlines()
        assert body[0] == "bin,count"
        assert sum(int(line.split(",")[1]) for line in body[1:]) == len(manifest)


class TestBoxCropDataset:
    def test_derived_images_have_target_size(self, tmp_path):
        manifest = generate_dataset(2, 2, 96, tmp_path / "src", seed=7)
        derived = crop_dataset_to_boxes(manifest, tmp_path / "dst", target_size=64)
        assert len(derived) == len(manifest)
        img = load_image(derived.records[0])
        assert img.shape == (64, 64, 3)
