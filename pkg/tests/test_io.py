import numpy as np
import pytest
from PIL import Image as PILImage

from cxrkit.errors import FormatError
from cxrkit.fileio import (
    AnnotationRecord,
    AnnotationSet,
    load_annotations,
    load_class_info,
    load_image,
    save_annotations,
    save_image,
    split_patients,
)
from cxrkit.image import BBox, Image
from cxrkit.phantom import PhantomSpec, generate_phantom_pool, synth_phantom


class TestImageFiles:
    def test_pgm16_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        img = Image(rng.random((16, 16)))
        path = tmp_path / "a.pgm"
        save_image(img, path, bits=16)
        back = load_image(path)
        assert np.abs(back.pixels - img.pixels).max() <= 1.0 / 65535

    def test_pgm8_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        img = Image(rng.random((12, 9)))
        path = tmp_path / "a.pgm"
        save_image(img, path, bits=8)
        back = load_image(path)
        assert np.abs(back.pixels - img.pixels).max() <= 1.0 / 255

    def test_pgm_header_comments(self, tmp_path):
        path = tmp_path / "c.pgm"
        path.write_bytes(b"P5 # comment\n# another\n2 2\n255\n\x00\x7f\xff\x40")
        img = load_image(path)
        assert img.width == 2 and img.height == 2
        assert img.pixels[0, 1] == pytest.approx(127 / 255)

    def test_truncated_pgm(self, tmp_path):
        path = tmp_path / "t.pgm"
        path.write_bytes(b"P5\n4 4\n255\n\x00\x01")
        with pytest.raises(FormatError, match="truncated"):
            load_image(path)

    def test_unsupported_format(self, tmp_path):
        path = tmp_path / "x.img"
        path.write_bytes(b"GIF89a............")
        with pytest.raises(FormatError, match="unsupported"):
            load_image(path)

    def test_png_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        img = Image(rng.random((10, 14)))
        path = tmp_path / "a.png"
        save_image(img, path)
        back = load_image(path)
        assert np.abs(back.pixels - img.pixels).max() <= 1.0 / 255

    def test_non_grayscale_png_rejected(self, tmp_path):
        path = tmp_path / "rgb.png"
        PILImage.new("RGB", (4, 4), (10, 20, 30)).save(path)
        with pytest.raises(FormatError, match="grayscale"):
            load_image(path)

    def test_missing_file_is_oserror(self, tmp_path):
        with pytest.raises(OSError):
            load_image(tmp_path / "absent.pgm")


class TestAnnotations:
    HEADER = "patientId,x,y,width,height,Target\n"

    def write(self, tmp_path, body):
        path = tmp_path / "ann.csv"
        path.write_text(self.HEADER + body, encoding="utf-8")
        return path

    def test_grouping_by_patient(self, tmp_path):
        path = self.write(tmp_path,
                          "p1,10,20,30,40,1\np1,50,60,70,80,1\np1,90,10,20,30,1\n")
        aset = load_annotations(path)
        assert len(aset.records["p1"].boxes) == 3
        assert aset.records["p1"].label == "abnormal"

    def test_normal_row(self, tmp_path):
        aset = load_annotations(self.write(tmp_path, "p1,,,,,0\n"))
        assert aset.records["p1"].label == "normal"
        assert aset.records["p1"].boxes == ()

    def test_zero_width_rejected(self, tmp_path):
        path = self.write(tmp_path, "p2,10,20,0,30,1\n")
        with pytest.raises(FormatError):
            load_annotations(path)

    def test_duplicate_box_rejected(self, tmp_path):
        path = self.write(tmp_path, "p1,1,2,3,4,1\np1,1,2,3,4,1\n")
        with pytest.raises(FormatError, match="duplicate"):
            load_annotations(path)

    def test_conflicting_target_rejected(self, tmp_path):
        path = self.write(tmp_path, "p1,1,2,3,4,1\np1,,,,,0\n")
        with pytest.raises(FormatError, match="conflicting"):
            load_annotations(path)

    def test_target0_with_coordinates_rejected(self, tmp_path):
        path = self.write(tmp_path, "p1,5,,,,0\n")
        with pytest.raises(FormatError):
            load_annotations(path)

    def test_non_numeric_rejected(self, tmp_path):
        path = self.write(tmp_path, "p1,a,2,3,4,1\n")
        with pytest.raises(FormatError, match="non-numeric"):
            load_annotations(path)

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("patient,x,y,w,h,t\n", encoding="utf-8")
        with pytest.raises(FormatError, match="header"):
            load_annotations(path)

    def test_scale_applied(self, tmp_path):
        path = self.write(tmp_path, "p1,10,20,30,40,1\n")
        aset = load_annotations(path, scale=0.5)
        box = aset.records["p1"].boxes[0]
        assert (box.x, box.y, box.w, box.h) == (5.0, 10.0, 15.0, 20.0)

    def test_round_trip(self, tmp_path):
        aset = AnnotationSet({
            "p1": AnnotationRecord("abnormal", (BBox(1, 2, 3, 4), BBox(5.5, 6, 7, 8))),
            "p2": AnnotationRecord("normal"),
        })
        path = tmp_path / "out.csv"
        save_annotations(aset, path)
        assert load_annotations(path) == aset

    def test_round_trip_with_class_info(self, tmp_path):
        aset = AnnotationSet({
            "p1": AnnotationRecord("abnormal", (BBox(1, 2, 3, 4),)),
            "p2": AnnotationRecord("normal"),
            "p3": AnnotationRecord("no_opacity_not_normal"),
        })
        ann = tmp_path / "ann.csv"
        cls = tmp_path / "cls.csv"
        save_annotations(aset, ann, class_info_path=cls)
        assert load_annotations(ann, class_info_path=cls) == aset
        info = load_class_info(cls)
        assert info["p3"] == "no_opacity_not_normal"

    def test_abnormal_record_requires_boxes(self):
        with pytest.raises(ValueError):
            AnnotationRecord("abnormal", ())
        with pytest.raises(ValueError):
            AnnotationRecord("normal", (BBox(1, 1, 2, 2),))


class TestSplitPatients:
    def test_disjoint_and_covering(self):
        ids = [f"p{i}" for i in range(20)]
        train, val = split_patients(ids, 0.25, seed=3)
        assert len(val) == 5
        assert sorted(train + val) == sorted(ids)
        assert not set(train) & set(val)

    def test_deterministic(self):
        ids = [f"p{i}" for i in range(15)]
        assert split_patients(ids, 0.4, seed=9) == split_patients(ids, 0.4, seed=9)
        assert split_patients(ids, 0.4, seed=9) != split_patients(ids, 0.4, seed=10)

    def test_boundary_fractions(self):
        ids = ["a", "b", "c"]
        train, val = split_patients(ids, 0.0, seed=1)
        assert train == ["a", "b", "c"] and val == []
        train, val = split_patients(ids, 1.0, seed=1)
        assert train == [] and val == ["a", "b", "c"]

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ValueError):
            split_patients(["a", "a"], 0.5, seed=0)


class TestPhantom:
    def test_deterministic(self):
        spec = PhantomSpec(seed=42, size=64, class_="abnormal", opacity_count=2)
        img1, boxes1 = synth_phantom(spec)
        img2, boxes2 = synth_phantom(spec)
        assert np.array_equal(img1.pixels, img2.pixels)
        assert boxes1 == boxes2

    def test_normal_has_no_boxes(self):
        img, boxes = synth_phantom(PhantomSpec(seed=1, size=64))
        assert boxes == []
        assert img.width == 64

    def test_opacities_and_boxes(self):
        # the abnormal/normal twin pair isolates the added opacity signal
        spec_a = PhantomSpec(seed=9, size=96, class_="abnormal", opacity_count=2)
        spec_n = PhantomSpec(seed=9, size=96)
        abn, boxes = synth_phantom(spec_a)
        nor, _ = synth_phantom(spec_n)
        assert len(boxes) == 2
        diff = abn.pixels - nor.pixels
        outside = np.ones(diff.shape, dtype=bool)
        for b in boxes:
            x, y, w, h = b.to_int()
            assert b.fits_within(96, 96)
            assert diff[y:y + h, x:x + w].max() >= 0.25
            outside[y:y + h, x:x + w] = False
        assert diff[outside].max() <= 0.06

    def test_boxes_inside_image(self):
        for seed in range(10):
            img, boxes = synth_phantom(
                PhantomSpec(seed=seed, size=64, class_="abnormal", opacity_count=2))
            for b in boxes:
                assert b.fits_within(64, 64)

    def test_size_floor(self):
        with pytest.raises(ValueError):
            PhantomSpec(seed=0, size=32)

    def test_abnormal_needs_opacities(self):
        with pytest.raises(ValueError):
            PhantomSpec(seed=0, size=64, class_="abnormal", opacity_count=0)


class TestPhantomPool:
    def test_counts(self):
        pool, aset = generate_phantom_pool(10, seed=3, abnormal_fraction=0.5, size=64)
        abnormal = [e for e in pool.entries if e.label == "abnormal"]
        assert len(pool) == 10 and len(abnormal) == 5
        assert len(aset.ids_with_label("abnormal")) == 5

    def test_all_normal(self):
        pool, aset = generate_phantom_pool(6, seed=3, abnormal_fraction=0.0, size=64)
        assert all(e.label == "normal" for e in pool.entries)

    def test_deterministic(self):
        p1, a1 = generate_phantom_pool(5, seed=11, abnormal_fraction=0.4, size=64)
        p2, a2 = generate_phantom_pool(5, seed=11, abnormal_fraction=0.4, size=64)
        assert a1 == a2
        for e1, e2 in zip(p1.entries, p2.entries):
            assert e1.id == e2.id and np.array_equal(e1.image.pixels, e2.image.pixels)

    def test_annotations_match_entries(self):
        pool, aset = generate_phantom_pool(8, seed=5, abnormal_fraction=0.5, size=64)
        for e in pool.entries:
            rec = aset.records[e.id]
            assert rec.label == e.label
            assert rec.boxes == e.boxes
