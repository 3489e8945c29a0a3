"""Standardize heterogeneous anomaly-detection sources into the MVTec layout.

Output tree per category::

    <root>/<category>/train/good/*
    <root>/<category>/test/good/*
    <root>/<category>/test/<defect_type>/*
    <root>/<category>/ground_truth/<defect_type>/<stem>_mask.png

A ``manifest.json`` at the root lists every emitted file.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DOMAINS = ("Electronics", "Industry", "Agrifood", "Infrastructure", "Medical")
RASTER_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
ROWS = ("top", "middle", "bottom")
COLS = ("left", "center", "right")
LOCATIONS = tuple(f"{r}-{c}" for r in ROWS for c in COLS)
ANNOTATION_KEYS = ("location", "color", "shape", "area_size", "quantity", "reason")

TRAIN_CAP = 500
NORMAL_TEST_CAP = 100
DEFECT_CAP = 100


class PipelineError(ValueError):
    pass


@dataclass
class AnnotationRecord:
    location: str | list[str]
    color: str
    shape: str
    area_size: str
    quantity: int
    reason: str


@dataclass
class SampleRecord:
    image: str
    split: str
    label: str
    defect_type: str = "good"
    mask: str | None = None
    annotation: dict | None = None

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise PipelineError(f"bad split {self.split!r}")
        if self.label not in ("normal", "anomalous"):
            raise PipelineError(f"bad label {self.label!r}")
        if self.label == "normal":
            self.defect_type = "good"
        elif self.split == "train":
            raise PipelineError(f"anomalous sample {self.image} in train split")

    @property
    def anomalous(self) -> bool:
        return self.label == "anomalous"


@dataclass
class CategoryRecord:
    name: str
    domain: str = "Industry"
    samples: list[SampleRecord] = field(default_factory=list)

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise PipelineError(f"domain {self.domain!r} not one of {DOMAINS}")
        self.samples = [s if isinstance(s, SampleRecord) else SampleRecord(**s)
                        for s in self.samples]

    def select(self, split=None, label=None, defect_type=None) -> list[SampleRecord]:
        return [s for s in self.samples
                if (split is None or s.split == split)
                and (label is None or s.label == label)
                and (defect_type is None or s.defect_type == defect_type)]

    def defect_types(self) -> list[str]:
        return sorted({s.defect_type for s in self.samples if s.anomalous})


@dataclass
class DatasetManifest:
    categories: list[CategoryRecord] = field(default_factory=list)
    provenance: list[str] = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        self.categories = [c if isinstance(c, CategoryRecord) else CategoryRecord(**c)
                           for c in self.categories]
        names = [c.name for c in self.categories]
        if len(names) != len(set(names)):
            raise PipelineError("duplicate category names in manifest")

    def category(self, name: str) -> CategoryRecord:
        for c in self.categories:
            if c.name == name:
                return c
        raise KeyError(name)

    def domains(self) -> dict[str, str]:
        return {c.name: c.domain for c in self.categories}

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        data = json.loads(path.read_text())
        if data.get("schema_version") != SCHEMA_VERSION:
            raise PipelineError(f"unsupported manifest schema {data.get('schema_version')}")
        return cls(**data)


# ---------------------------------------------------------------------------
# image io

def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 0


def save_mask(path, mask: np.ndarray):
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


def _is_canonical_mask(path) -> bool:
    if Path(path).suffix.lower() != ".png":
        return False
    with Image.open(path) as im:
        if im.mode != "L":
            return False
        vals = np.unique(np.asarray(im))
    return set(vals.tolist()) <= {0, 255}


def scan_mvtec(root, category: str) -> list[dict]:
    """List (relative image path, split, label, defect, mask) for one MVTec category."""
    base = Path(root) / category
    rows = []
    for split in ("train", "test"):
        sdir = base / split
        if not sdir.is_dir():
            continue
        for ddir in sorted(p for p in sdir.iterdir() if p.is_dir()):
            for img in sorted(ddir.iterdir()):
                if img.suffix.lower() not in RASTER_SUFFIXES:
                    continue
                good = ddir.name == "good"
                mask = None
                if not good:
                    cand = base / "ground_truth" / ddir.name / f"{img.stem}_mask.png"
                    mask = cand if cand.exists() else None
                rows.append({"path": img, "split": split,
                             "label": "normal" if good else "anomalous",
                             "defect_type": ddir.name, "mask": mask})
    return rows


def resize(arr: np.ndarray, size: int, nearest: bool = False) -> np.ndarray:
    """Square resize; bool masks always use nearest neighbour."""
    if arr.shape[0] == size and arr.shape[1] == size:
        return arr
    if arr.dtype == bool:
        im = Image.fromarray(arr.astype(np.uint8) * 255).resize((size, size), Image.NEAREST)
        return np.asarray(im) > 0
    mode = Image.NEAREST if nearest else Image.BILINEAR
    return np.asarray(Image.fromarray(arr).resize((size, size), mode))


def load_train_images(manifest: "DatasetManifest", root, categories=None,
                      shots: int | None = None, size: int | None = None) -> np.ndarray:
    """Normal training images of the selected categories as float [0, 1].

    ``shots`` keeps the first N training images per category.
    """
    out = []
    for cat in manifest.categories:
        if categories is not None and cat.name not in categories:
            continue
        train = cat.select(split="train")
        if shots is not None:
            train = train[:shots]
        for s in train:
            img = load_image(Path(root) / s.image)
            if size is not None:
                img = resize(img, size)
            out.append(img.astype(np.float32) / 255.0)
    if not out:
        raise PipelineError("no training images selected")
    return np.stack(out)


# ---------------------------------------------------------------------------
# tiling

@dataclass
class Tile:
    image: np.ndarray
    mask: np.ndarray
    label: str
    origin: tuple[int, int]


def _tile_starts(n: int, size: int) -> list[int]:
    starts = list(range(0, n - size + 1, size))
    if starts[-1] + size < n:
        starts.append(n - size)
    return starts


def tile(image: np.ndarray, mask: np.ndarray | None = None, tile_size: int = 256,
         min_defect_px: int = 10) -> list[Tile]:
    """Cut ``image`` into ``tile_size`` squares from the top-left.

    Remainders on the right/bottom are covered by tiles anchored to the image
    edge. Tiles with 0 < defect pixels < ``min_defect_px`` are dropped. Images
    smaller than a tile are centre-padded to one tile.
    """
    H, W = image.shape[:2]
    if mask is None:
        mask = np.zeros((H, W), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (H, W):
        raise PipelineError(f"mask shape {mask.shape} != image shape {(H, W)}")
    if H < tile_size or W < tile_size:
        ph, pw = max(tile_size - H, 0), max(tile_size - W, 0)
        pads = ((ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2))
        image = np.pad(image, pads + ((0, 0),) * (image.ndim - 2))
        mask = np.pad(mask, pads)
        H, W = mask.shape
    tiles = []
    for y in _tile_starts(H, tile_size):
        for x in _tile_starts(W, tile_size):
            tm = mask[y:y + tile_size, x:x + tile_size]
            n = int(tm.sum())
            if 0 < n < min_defect_px:
                continue
            tiles.append(Tile(image[y:y + tile_size, x:x + tile_size].copy(), tm.copy(),
                              "anomalous" if n else "normal", (y, x)))
    return tiles


# ---------------------------------------------------------------------------
# split / balance

def _stable_seed(root_seed: int, key: str) -> int:
    h = hashlib.sha256(f"{root_seed}:{key}".encode()).digest()
    return int.from_bytes(h[:8], "little")


def split_normals(samples: list, seed: int) -> tuple[list, list]:
    """Seeded 9:1 partition: floor(0.9 n) to train, at least one on each side."""
    n = len(samples)
    if n < 2:
        raise PipelineError("need at least 2 normal samples to split")
    order = np.random.default_rng(seed).permutation(n)
    n_train = min(max(int(np.floor(0.9 * n)), 1), n - 1)
    return [samples[i] for i in order[:n_train]], [samples[i] for i in order[n_train:]]


def _cap(items: list, cap: int, seed: int) -> list:
    if len(items) <= cap:
        return list(items)
    keep = np.sort(np.random.default_rng(seed).choice(len(items), cap, replace=False))
    return [items[i] for i in keep]


def balance(category: CategoryRecord, seed: int, train_cap: int = TRAIN_CAP,
            normal_test_cap: int = NORMAL_TEST_CAP, defect_cap: int = DEFECT_CAP
            ) -> CategoryRecord:
    """Seeded uniform subsampling to the per-category caps, applied independently."""
    key = category.name
    kept = _cap(category.select("train"), train_cap, _stable_seed(seed, key + "/train"))
    kept += _cap(category.select("test", "normal"), normal_test_cap,
                 _stable_seed(seed, key + "/test/good"))
    for dt in category.defect_types():
        kept += _cap(category.select("test", "anomalous", dt), defect_cap,
                     _stable_seed(seed, f"{key}/test/{dt}"))
    return CategoryRecord(category.name, category.domain, kept)


def resplit(category: CategoryRecord, seed: int) -> CategoryRecord:
    """Pool all normal samples of a category and redo the 9:1 split."""
    normals = category.select(label="normal")
    train, test = split_normals(normals, _stable_seed(seed, category.name))
    out = [SampleRecord(**{**asdict(s), "split": "train"}) for s in train]
    out += [SampleRecord(**{**asdict(s), "split": "test"}) for s in test]
    out += category.select(label="anomalous")
    return CategoryRecord(category.name, category.domain, out)


# ---------------------------------------------------------------------------
# locations and annotations

def _cell(coord: float, n: int) -> int:
    size = max(n // 3, 1)
    return min(int(coord // size), 2)


def grid_location(mask: np.ndarray) -> list[str]:
    """3x3-grid descriptor of each 8-connected defect, by component centroid.

    Cells are equal thirds with remainder pixels in the last row/column.
    Duplicates collapse; order follows component size, largest first.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise PipelineError("grid_location of an empty mask")
    H, W = mask.shape
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    idx = np.arange(1, n + 1)
    sizes = ndimage.sum(mask, labels, idx)
    centroids = ndimage.center_of_mass(mask, labels, idx)
    order = sorted(range(n), key=lambda i: (-sizes[i], i))
    out = []
    for i in order:
        cy, cx = centroids[i]
        loc = f"{ROWS[_cell(cy, H)]}-{COLS[_cell(cx, W)]}"
        if loc not in out:
            out.append(loc)
    return out


@dataclass
class ValidationResult:
    violations: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_annotation(record, mask: np.ndarray | None = None) -> ValidationResult:
    """Check a six-attribute annotation; violations are returned, never raised."""
    res = ValidationResult()
    if isinstance(record, AnnotationRecord):
        record = asdict(record)
    if not isinstance(record, dict):
        res.violations.append("record is not a mapping")
        return res
    for key in ANNOTATION_KEYS:
        if key not in record or record[key] is None:
            res.violations.append(f"missing: {key}")
    for key in sorted(set(record) - set(ANNOTATION_KEYS)):
        res.violations.append(f"unexpected field: {key}")
    loc = record.get("location")
    locs = []
    if loc is not None:
        locs = [loc] if isinstance(loc, str) else list(loc)
        if not locs:
            res.violations.append("empty location")
        for token in locs:
            if token not in LOCATIONS:
                res.violations.append(f"unknown location token: {token!r}")
    for key in ("color", "shape", "area_size", "reason"):
        val = record.get(key)
        if val is not None and (not isinstance(val, str) or not val.strip()):
            res.violations.append(f"empty or non-string: {key}")
    qty = record.get("quantity")
    if qty is not None and (isinstance(qty, bool) or not isinstance(qty, int) or qty < 1):
        res.violations.append("quantity must be a positive integer")
    if mask is not None and locs and all(t in LOCATIONS for t in locs):
        expected = grid_location(mask)
        if set(locs) != set(expected):
            res.warnings.append(f"location {locs} disagrees with mask cells {expected}")
    return res


# ---------------------------------------------------------------------------
# conversion

@dataclass
class SourceDescriptor:
    """How to read one source dataset.

    ``format`` is ``"mvtec"`` (already in the target layout) or ``"flat"`` (a
    folder of images plus ``labels_csv`` with columns ``path, category, label,
    defect_type, mask`` and optional ``split``). Normals without a split are
    divided 9:1 with ``seed``.
    """

    name: str
    root: str
    format: str = "mvtec"
    labels_csv: str | None = None
    categories: list[str] | None = None
    domains: dict[str, str] = field(default_factory=dict)
    default_domain: str = "Industry"
    tile_size: int | None = None
    min_defect_px: int = 10
    seed: int = 0


@dataclass
class ConversionSummary:
    manifest: DatasetManifest
    failures: list[str] = field(default_factory=list)


def _read_rows(src: SourceDescriptor) -> dict[str, list[dict]]:
    root = Path(src.root)
    by_cat: dict[str, list[dict]] = {}
    if src.format == "mvtec":
        cats = src.categories or sorted(
            p.name for p in root.iterdir() if p.is_dir() and (p / "train").is_dir())
        for cat in cats:
            by_cat[cat] = scan_mvtec(root, cat)
    elif src.format == "flat":
        if src.labels_csv is None:
            raise PipelineError(f"flat source {src.name} needs labels_csv")
        csv_path = Path(src.labels_csv)
        if not csv_path.is_absolute():
            csv_path = root / csv_path
        with open(csv_path, newline="") as fh:
            for row in csv.DictReader(fh):
                label = row["label"].strip()
                mask = (row.get("mask") or "").strip()
                by_cat.setdefault(row["category"].strip(), []).append({
                    "path": root / row["path"].strip(),
                    "split": (row.get("split") or "").strip() or None,
                    "label": label,
                    "defect_type": (row.get("defect_type") or "").strip() or "good",
                    "mask": root / mask if mask else None,
                })
    else:
        raise PipelineError(f"unknown source format {src.format!r}")
    return by_cat


class _Writer:
    def __init__(self, out_root: Path, category: str):
        self.base = out_root / category
        self.category = category
        self.used: set[str] = set()

    def _unique(self, rel: str) -> str:
        stem, suffix = rel.rsplit(".", 1)
        cand, i = rel, 1
        while cand in self.used:
            cand = f"{stem}_{i}.{suffix}"
            i += 1
        self.used.add(cand)
        return cand

    def emit(self, split, defect, name, src_path=None, array=None, mask_src=None,
             mask_array=None) -> SampleRecord:
        sub = "good" if defect == "good" else defect
        rel = self._unique(f"{split}/{sub}/{name}")
        dst = self.base / rel
        dst.parent.mkdir(parents=True, exist_ok=True)
        if array is not None:
            Image.fromarray(array).save(dst)
        else:
            shutil.copyfile(src_path, dst)
        mask_rel = None
        if defect != "good":
            mask_rel = f"ground_truth/{sub}/{Path(rel).stem}_mask.png"
            mdst = self.base / mask_rel
            mdst.parent.mkdir(parents=True, exist_ok=True)
            if mask_array is not None:
                save_mask(mdst, mask_array)
            elif _is_canonical_mask(mask_src):
                shutil.copyfile(mask_src, mdst)
            else:
                save_mask(mdst, load_mask(mask_src))
            mask_rel = f"{self.category}/{mask_rel}"
        label = "normal" if defect == "good" else "anomalous"
        return SampleRecord(f"{self.category}/{rel}", split, label, defect, mask_rel)


def convert(sources, out_root) -> ConversionSummary:
    """Relayout one or more sources into an MVTec-style tree with a manifest.

    Per-file failures (missing or empty masks, unreadable images) are collected
    and conversion continues.
    """
    if isinstance(sources, SourceDescriptor):
        sources = [sources]
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    categories: list[CategoryRecord] = []
    taken: set[str] = set()
    failures: list[str] = []
    for src in sources:
        for cat, rows in _read_rows(src).items():
            name = cat if cat not in taken else f"{src.name}_{cat}"
            if name in taken:
                raise PipelineError(f"cannot disambiguate category {cat!r}")
            taken.add(name)
            domain = src.domains.get(cat, src.default_domain)
            writer = _Writer(out_root, name)
            samples = _convert_category(src, rows, writer, failures)
            categories.append(CategoryRecord(name, domain, samples))
    manifest = DatasetManifest(categories, [s.name for s in sources])
    manifest.save(out_root / "manifest.json")
    for f in failures:
        log.warning("conversion failure: %s", f)
    return ConversionSummary(manifest, failures)


def _convert_category(src, rows, writer: _Writer, failures) -> list[SampleRecord]:
    samples: list[SampleRecord] = []
    pending_normals = []
    for row in rows:
        path = Path(row["path"])
        if path.suffix.lower() not in RASTER_SUFFIXES:
            failures.append(f"{path}: unsupported format")
            continue
        if not path.exists():
            failures.append(f"{path}: missing image")
            continue
        anomalous = row["label"] == "anomalous"
        mask = None
        if anomalous:
            if row["mask"] is None or not Path(row["mask"]).exists():
                failures.append(f"{path}: anomalous sample without mask")
                continue
            mask = load_mask(row["mask"])
            if not mask.any():
                failures.append(f"{path}: empty mask for anomalous sample")
                continue
        if src.tile_size:
            img = load_image(path)
            if mask is not None and mask.shape != img.shape[:2]:
                failures.append(f"{path}: mask/image size mismatch")
                continue
            for t in tile(img, mask, src.tile_size, src.min_defect_px):
                name = f"{path.stem}_y{t.origin[0]}_x{t.origin[1]}.png"
                if t.label == "anomalous":
                    samples.append(writer.emit("test", row["defect_type"], name,
                                               array=t.image, mask_array=t.mask))
                else:
                    pending_normals.append((row.get("split"), name, None, t.image))
            continue
        if anomalous:
            samples.append(writer.emit("test", row["defect_type"], path.name, src_path=path,
                                       mask_src=row["mask"]))
        else:
            pending_normals.append((row.get("split"), path.name, path, None))
    unsplit = [p for p in pending_normals if p[0] is None]
    assigned = [p for p in pending_normals if p[0] is not None]
    if unsplit:
        if len(unsplit) >= 2:
            tr, te = split_normals(unsplit, _stable_seed(src.seed, writer.category))
        else:
            tr, te = unsplit, []
        assigned += [("train",) + p[1:] for p in tr] + [("test",) + p[1:] for p in te]
    for split, name, path, arr in assigned:
        samples.append(writer.emit(split, "good", name, src_path=path, array=arr))
    return samples


def materialize(manifest: DatasetManifest, src_root, out_root) -> DatasetManifest:
    """Write the files a (rebalanced) manifest refers to into a fresh tree."""
    src_root, out_root = Path(src_root), Path(out_root)
    cats = []
    for cat in manifest.categories:
        writer = _Writer(out_root, cat.name)
        samples = []
        for s in cat.samples:
            name = Path(s.image).name
            mask = src_root / s.mask if s.mask else None
            samples.append(writer.emit(s.split, s.defect_type, name, src_path=src_root / s.image,
                                       mask_src=mask))
            samples[-1].annotation = s.annotation
        cats.append(CategoryRecord(cat.name, cat.domain, samples))
    out = DatasetManifest(cats, list(manifest.provenance))
    out.save(out_root / "manifest.json")
    return out


# ---------------------------------------------------------------------------
# stats

def stats(manifest: DatasetManifest) -> dict:
    """Image/train/test/anomalous totals with per-domain and per-category breakdowns."""

    def count(samples):
        train = sum(s.split == "train" for s in samples)
        test = sum(s.split == "test" for s in samples)
        return {"images": len(samples), "train": train, "test": test,
                "anomalous": sum(s.anomalous for s in samples)}

    per_cat = {c.name: {"domain": c.domain, **count(c.samples)} for c in manifest.categories}
    per_dom = {}
    for dom in DOMAINS:
        members = [c for c in manifest.categories if c.domain == dom]
        if members:
            per_dom[dom] = {"categories": len(members),
                            **count([s for c in members for s in c.samples])}
    hist: dict[str, int] = {}
    for c in manifest.categories:
        for s in c.samples:
            if s.anomalous:
                hist[s.defect_type] = hist.get(s.defect_type, 0) + 1
    totals = {"categories": len(manifest.categories),
              **count([s for c in manifest.categories for s in c.samples])}
    return {"totals": totals, "domains": per_dom, "categories": per_cat,
            "defect_types": dict(sorted(hist.items(), key=lambda kv: (-kv[1], kv[0])))}


def format_stats(report: dict) -> str:
    cols = ("images", "train", "test", "anomalous")
    lines = [f"{'name':<28}" + "".join(f"{c:>11}" for c in cols)]
    lines.append("-" * len(lines[0]))
    for name, row in report["categories"].items():
        lines.append(f"{name:<28}" + "".join(f"{row[c]:>11,}" for c in cols))
    lines.append("-" * len(lines[0]))
    for name, row in report["domains"].items():
        lines.append(f"{name:<28}" + "".join(f"{row[c]:>11,}" for c in cols))
    t = report["totals"]
    lines.append(f"{'TOTAL':<28}" + "".join(f"{t[c]:>11,}" for c in cols))
    return "\n".join(lines)
