import csv
import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from cgmoe_ad.pipeline import (LOCATIONS, AnnotationRecord, CategoryRecord, DatasetManifest,
                               PipelineError, SampleRecord, SourceDescriptor, balance,
                               convert, format_stats, grid_location, materialize, save_mask,
                               scan_mvtec, split_normals, stats, tile, validate_annotation)


def _normals(n, split="train", prefix="n"):
    return [SampleRecord(f"c/{prefix}{i:04d}.png", split, "normal") for i in range(n)]


def _anoms(n, defect):
    return [SampleRecord(f"c/{defect}{i:04d}.png", "test", "anomalous", defect,
                         f"c/gt/{defect}{i:04d}_mask.png") for i in range(n)]


# records ------------------------------------------------------------------

def test_record_invariants():
    with pytest.raises(PipelineError):
        SampleRecord("a.png", "train", "anomalous", "crack", "m.png")
    with pytest.raises(PipelineError):
        CategoryRecord("x", "Space")
    assert SampleRecord("a.png", "test", "normal", "scratch").defect_type == "good"
    with pytest.raises(PipelineError):
        DatasetManifest([CategoryRecord("a"), CategoryRecord("a")])


def test_manifest_json_round_trip(tmp_path):
    m = DatasetManifest([CategoryRecord("c", "Medical", _normals(3) + _anoms(2, "hole"))],
                        ["src"])
    m.save(tmp_path / "manifest.json")
    assert DatasetManifest.load(tmp_path) == m


# split / balance ----------------------------------------------------------

@pytest.mark.parametrize("n,expect", [(100, (90, 10)), (10, (9, 1)), (2, (1, 1)), (3, (2, 1))])
def test_split_sizes(n, expect):
    tr, te = split_normals(list(range(n)), seed=0)
    assert (len(tr), len(te)) == expect
    assert sorted(tr + te) == list(range(n))


def test_split_seeding():
    a = split_normals(list(range(50)), 1)
    assert a == split_normals(list(range(50)), 1)
    assert a != split_normals(list(range(50)), 2)
    with pytest.raises(PipelineError):
        split_normals([1], 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 2000), st.integers(0, 2**31))
def test_split_is_exact_partition(n, seed):
    tr, te = split_normals(list(range(n)), seed)
    assert len(tr) == min(max(int(0.9 * n), 1), n - 1)
    assert set(tr).isdisjoint(te) and set(tr) | set(te) == set(range(n))


def test_balance_examples():
    cat = CategoryRecord("c", "Industry", _normals(900) + _normals(30, "test", "t")
                         + _anoms(40, "hole"))
    out = balance(cat, 0)
    assert len(out.select("train")) == 500
    assert len(out.select("test", "normal")) == 30
    assert len(out.select("test", "anomalous")) == 40
    cat = CategoryRecord("c", "Industry", _normals(10) + _anoms(150, "a") + _anoms(150, "b")
                         + _anoms(150, "c"))
    out = balance(cat, 0)
    assert [len(out.select(defect_type=d)) for d in "abc"] == [100, 100, 100]
    assert len(out.select("test", "anomalous")) == 300


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 1200), st.integers(0, 300), st.lists(st.integers(1, 250), max_size=4),
       st.integers(0, 1000))
def test_balance_caps_and_idempotence(n_normal, n_test, per_defect, seed):
    samples = _normals(n_normal) + _normals(n_test, "test", "t")
    for i, k in enumerate(per_defect):
        samples += _anoms(k, f"d{i}")
    cat = CategoryRecord("c", "Industry", samples)
    out = balance(cat, seed)
    s = stats(DatasetManifest([out]))["categories"]["c"]
    assert len(out.select("train")) == min(n_normal, 500)
    assert len(out.select("test", "normal")) == min(n_test, 100)
    for i, k in enumerate(per_defect):
        assert len(out.select(defect_type=f"d{i}")) == min(k, 100)
    assert s["images"] <= len(samples)
    assert balance(out, seed) == out
    assert {x.image for x in out.samples} <= {x.image for x in samples}


# tiling -------------------------------------------------------------------

def _coverage(tiles, H, W, size):
    cov = np.zeros((H, W), dtype=int)
    for t in tiles:
        y, x = t.origin
        cov[y:y + size, x:x + size] += 1
    return cov


def test_tile_512_gives_four():
    img = np.zeros((512, 512, 3), np.uint8)
    tiles = tile(img)
    assert len(tiles) == 4 and (_coverage(tiles, 512, 512, 256) == 1).all()


def test_tile_600_gives_nine_edge_anchored():
    img = np.arange(600 * 600 * 3, dtype=np.uint32).reshape(600, 600, 3)
    tiles = tile(img)
    assert len(tiles) == 9
    assert sorted({t.origin[0] for t in tiles}) == [0, 256, 344]
    cov = _coverage(tiles, 600, 600, 256)
    assert cov.min() >= 1
    # cells overlapped by the edge tiles are counted twice (or four times at the corner)
    assert cov[400, 400] == 4 and cov[400, 100] == 2 and cov[300, 300] == 1
    for t in tiles:
        y, x = t.origin
        np.testing.assert_array_equal(t.image, img[y:y + 256, x:x + 256])


def test_tile_conserves_defect_pixels():
    img = np.zeros((512, 512), np.uint8)
    mask = np.zeros((512, 512), bool)
    mask[300:320, 40:50] = True
    tiles = tile(img, mask)
    anom = [t for t in tiles if t.label == "anomalous"]
    assert len(anom) == 1 and anom[0].mask.sum() == mask.sum()


def test_tile_drops_tiny_defect_slivers():
    mask = np.zeros((512, 512), bool)
    mask[250:262, 100:110] = True  # 6 rows fall in the top tile, 6 in the bottom
    tiles = tile(np.zeros((512, 512), np.uint8), mask, min_defect_px=61)
    assert len(tiles) == 2 and all(t.label == "normal" for t in tiles)


def test_tile_pads_small_images():
    img = np.full((100, 200, 3), 7, np.uint8)
    (t,) = tile(img)
    assert t.image.shape == (256, 256, 3)
    assert t.image.sum() == img.sum()
    assert (t.image[78:178, 28:228] == 7).all()


# grid location ------------------------------------------------------------

@pytest.mark.parametrize("H,W", [(90, 90), (100, 130), (256, 256)])
def test_grid_location_canonical_cells(H, W):
    for r, rname in enumerate(("top", "middle", "bottom")):
        for c, cname in enumerate(("left", "center", "right")):
            m = np.zeros((H, W), bool)
            cy, cx = int(H * (2 * r + 1) / 6), int(W * (2 * c + 1) / 6)
            m[cy - 2:cy + 3, cx - 2:cx + 3] = True
            assert grid_location(m) == [f"{rname}-{cname}"]


def test_grid_location_center_and_two_blobs():
    m = np.zeros((99, 99), bool)
    m[49, 49] = True
    assert grid_location(m) == ["middle-center"]
    m = np.zeros((120, 120), bool)
    m[5:20, 5:20] = True
    m[100:110, 100:110] = True
    assert grid_location(m) == ["top-left", "bottom-right"]
    m[100:118, 98:118] = True
    m[5:20, 5:20] = False
    m[5:8, 5:8] = True
    assert grid_location(m) == ["bottom-right", "top-left"]


def test_grid_location_diagonal_pixels_are_one_component():
    m = np.zeros((60, 60), bool)
    for i in range(10):
        m[i, i] = True
    assert grid_location(m) == ["top-left"]


def test_grid_location_errors_and_vocabulary():
    with pytest.raises(PipelineError):
        grid_location(np.zeros((9, 9), bool))
    r = np.random.default_rng(0)
    for _ in range(50):
        m = r.random((40, 37)) < 0.02
        m[r.integers(40), r.integers(37)] = True
        assert set(grid_location(m)) <= set(LOCATIONS)


# annotation validation ----------------------------------------------------

GOOD = dict(location="top-left", color="dark", shape="round", area_size="small",
            quantity=1, reason="a dark spot that should not be there")


def test_validate_good_record():
    assert validate_annotation(GOOD).ok
    assert validate_annotation(AnnotationRecord(**GOOD)).ok


def test_validate_missing_field():
    rec = dict(GOOD)
    del rec["reason"]
    assert validate_annotation(rec).violations == ["missing: reason"]


def test_validate_bad_values():
    res = validate_annotation({**GOOD, "location": "centre-left", "quantity": 0, "color": " "})
    text = " | ".join(res.violations)
    assert "unknown location token" in text and "quantity" in text and "color" in text


def test_validate_cross_check_warns_only():
    m = np.zeros((90, 90), bool)
    m[70:80, 70:80] = True
    res = validate_annotation(GOOD, m)
    assert res.ok and res.warnings
    assert not validate_annotation({**GOOD, "location": ["bottom-right"]}, m).warnings


# conversion ---------------------------------------------------------------

def _png(path, arr):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def _mvtec_tree(root, r):
    for cat in ("bottle", "screw"):
        for i in range(4):
            _png(root / cat / "train" / "good" / f"{i:03d}.png",
                 r.integers(0, 255, (24, 24, 3), dtype=np.uint8))
        _png(root / cat / "test" / "good" / "000.png",
             r.integers(0, 255, (24, 24, 3), dtype=np.uint8))
        for d in ("crack", "hole"):
            for i in range(2):
                _png(root / cat / "test" / d / f"{i:03d}.png",
                     r.integers(0, 255, (24, 24, 3), dtype=np.uint8))
                m = np.zeros((24, 24), np.uint8)
                m[3 + i:9, 4:12] = 255
                _png(root / cat / "ground_truth" / d / f"{i:03d}_mask.png", m)


def _files(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(Path(root).rglob("*"))
            if p.is_file() and p.name != "manifest.json"}


def test_mvtec_input_is_a_fixed_point(tmp_path):
    src = tmp_path / "src"
    _mvtec_tree(src, np.random.default_rng(0))
    out = convert(SourceDescriptor("mv", str(src)), tmp_path / "out")
    assert not out.failures
    assert _files(src) == _files(tmp_path / "out")
    s = stats(out.manifest)["totals"]
    assert (s["images"], s["train"], s["test"], s["anomalous"]) == (18, 8, 10, 8)
    again = convert(SourceDescriptor("mv", str(tmp_path / "out")), tmp_path / "again")
    assert _files(tmp_path / "out") == _files(tmp_path / "again")
    assert stats(again.manifest) == stats(out.manifest)


def test_flat_source_round_trip(tmp_path):
    r = np.random.default_rng(1)
    src = tmp_path / "flat"
    rows = []
    for i in range(10):
        _png(src / f"img{i}.png", r.integers(0, 255, (20, 20, 3), dtype=np.uint8))
        rows.append([f"img{i}.png", "widget", "normal", "", ""])
    for i in range(3):
        _png(src / f"bad{i}.jpg", r.integers(0, 255, (20, 20, 3), dtype=np.uint8))
        m = np.zeros((20, 20), np.uint8)
        m[2:6, 2:6] = 1  # non-canonical mask values get rewritten as 0/255
        _png(src / f"bad{i}_m.png", m)
        rows.append([f"bad{i}.jpg", "widget", "anomalous", "dent", f"bad{i}_m.png"])
    with open(src / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "category", "label", "defect_type", "mask"])
        w.writerows(rows)
    res = convert(SourceDescriptor("flat", str(src), "flat", "labels.csv",
                                   domains={"widget": "Electronics"}), tmp_path / "out")
    assert not res.failures
    scanned = scan_mvtec(tmp_path / "out", "widget")
    assert sum(r_["split"] == "train" for r_ in scanned) == 9
    assert sum(r_["label"] == "anomalous" for r_ in scanned) == 3
    for r_ in scanned:
        if r_["mask"] is not None:
            assert set(np.unique(np.asarray(Image.open(r_["mask"]))).tolist()) == {0, 255}
    assert res.manifest.category("widget").domain == "Electronics"
    man = DatasetManifest.load(tmp_path / "out")
    for s in man.categories[0].samples:
        assert (tmp_path / "out" / s.image).exists()


def test_empty_mask_is_rejected_but_conversion_continues(tmp_path):
    src = tmp_path / "src"
    _mvtec_tree(src, np.random.default_rng(2))
    save_mask(src / "bottle" / "ground_truth" / "crack" / "000_mask.png",
              np.zeros((24, 24), bool))
    (src / "screw" / "ground_truth" / "hole" / "001_mask.png").unlink()
    res = convert(SourceDescriptor("mv", str(src)), tmp_path / "out")
    assert len(res.failures) == 2
    assert any("empty mask" in f for f in res.failures)
    assert any("without mask" in f for f in res.failures)
    assert stats(res.manifest)["totals"]["anomalous"] == 6


def test_duplicate_categories_are_prefixed(tmp_path):
    _mvtec_tree(tmp_path / "a", np.random.default_rng(3))
    _mvtec_tree(tmp_path / "b", np.random.default_rng(4))
    res = convert([SourceDescriptor("a", str(tmp_path / "a")),
                   SourceDescriptor("b", str(tmp_path / "b"))], tmp_path / "out")
    names = [c.name for c in res.manifest.categories]
    assert names == ["bottle", "screw", "b_bottle", "b_screw"]


def test_tiling_during_conversion(tmp_path):
    src = tmp_path / "src"
    r = np.random.default_rng(5)
    for i in range(2):
        _png(src / "big" / "train" / "good" / f"{i}.png",
             r.integers(0, 255, (64, 96, 3), dtype=np.uint8))
    _png(src / "big" / "test" / "scratch" / "0.png",
         r.integers(0, 255, (64, 96, 3), dtype=np.uint8))
    m = np.zeros((64, 96), np.uint8)
    m[5:15, 5:15] = 255
    _png(src / "big" / "ground_truth" / "scratch" / "0_mask.png", m)
    res = convert(SourceDescriptor("s", str(src), tile_size=32), tmp_path / "out")
    cat = res.manifest.category("big")
    assert len(cat.select(label="anomalous")) == 1
    # 2 train images x 6 tiles, plus 5 defect-free tiles of the test image
    assert len(cat.select(label="normal")) == 17
    for s in cat.samples:
        assert np.asarray(Image.open(tmp_path / "out" / s.image)).shape[:2] == (32, 32)


def test_materialize_balanced_manifest(tmp_path):
    src = tmp_path / "src"
    _mvtec_tree(src, np.random.default_rng(6))
    man = convert(SourceDescriptor("mv", str(src)), tmp_path / "conv").manifest
    capped = DatasetManifest([balance(c, 0, train_cap=2, defect_cap=1)
                              for c in man.categories], man.provenance)
    out = materialize(capped, tmp_path / "conv", tmp_path / "bal")
    t = stats(out)["totals"]
    assert (t["train"], t["anomalous"]) == (4, 4)
    assert all((tmp_path / "bal" / s.image).exists() for c in out.categories for s in c.samples)


# stats --------------------------------------------------------------------

def test_stats_toy_manifest():
    cats = [CategoryRecord(f"c{i}", "Industry" if i else "Medical",
                           _normals(9) + _normals(1, "test", "t") + _anoms(2, "scratch"))
            for i in range(2)]
    rep = stats(DatasetManifest(cats))
    t = rep["totals"]
    assert (t["images"], t["train"], t["test"], t["anomalous"]) == (24, 18, 6, 4)
    assert rep["domains"]["Medical"]["images"] == 12
    assert rep["defect_types"] == {"scratch": 4}
    assert "TOTAL" in format_stats(rep)


@pytest.mark.skipif(not os.environ.get("MVTEC_AD_ROOT"),
                    reason="set MVTEC_AD_ROOT to a local MVTec-AD copy")
def test_mvtec_ad_counts(tmp_path):
    res = convert(SourceDescriptor("mvtec", os.environ["MVTEC_AD_ROOT"]), tmp_path)
    t = stats(res.manifest)["totals"]
    assert (t["images"], t["train"], t["test"], t["anomalous"]) == (5354, 3629, 1725, 1258)
