"""Deterministic multi-category texture benchmark with exact defect masks.

Each category has a texture family and palette. Defects are drawn in colours
outside the texture value range, so the mask of changed pixels equals the drawn
footprint. One pair of categories shares a "spots" pattern: spots are part of
the normal appearance of the first and a defect in the second.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .pipeline import DOMAINS, CategoryRecord, DatasetManifest, _stable_seed, _Writer

PATTERNS = ("stripes", "checker", "noise", "gradient")
DEFECTS = ("scratch", "spot", "missing")
TEXTURE_RANGE = (30, 220)
SPOT_COLOR = (236, 64, 24)
SCRATCH_COLOR = (250, 250, 250)
MISSING_COLOR = (6, 6, 6)


@dataclass
class DefectRecipe:
    kind: str
    strength: float = 1.0
    width: int = 2
    length: tuple[int, int] = (14, 26)
    radius: tuple[int, int] = (3, 5)
    count: tuple[int, int] = (1, 2)
    size: tuple[int, int] = (8, 16)

    def __post_init__(self):
        if self.kind not in DEFECTS:
            raise ValueError(f"unknown defect kind {self.kind!r}")
        if not 0.0 < self.strength <= 1.0:
            raise ValueError("defect strength must lie in (0, 1]; a defect must alter pixels")


@dataclass
class CategorySpec:
    name: str
    pattern: str
    palette: tuple[tuple[int, int, int], tuple[int, int, int]]
    defects: tuple[str, ...] = ("scratch", "missing")
    domain: str = "Industry"
    normal_spots: bool = False

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown pattern {self.pattern!r}")
        self.palette = tuple(tuple(int(v) for v in c) for c in self.palette)
        self.defects = tuple(self.defects)
        lo, hi = TEXTURE_RANGE
        for c in self.palette:
            if any(not lo <= v <= hi for v in c):
                raise ValueError(f"palette colour {c} outside texture range {TEXTURE_RANGE}")


def default_categories(n: int = 8) -> list[CategorySpec]:
    """Eight categories; ``mint`` (spots normal) and ``pill`` (spots defective) pair up."""
    base = [
        CategorySpec("mint", "noise", ((60, 170, 120), (90, 200, 150)),
                     ("scratch", "missing"), "Agrifood", normal_spots=True),
        CategorySpec("pill", "noise", ((200, 200, 190), (215, 215, 205)),
                     ("spot", "missing"), "Medical"),
        CategorySpec("fabric", "stripes", ((40, 40, 120), (90, 90, 180)),
                     ("scratch", "spot"), "Industry"),
        CategorySpec("tile", "checker", ((180, 150, 60), (120, 90, 30)),
                     ("missing", "scratch"), "Infrastructure"),
        CategorySpec("wafer", "gradient", ((40, 60, 70), (70, 100, 110)),
                     ("scratch", "spot"), "Electronics"),
        CategorySpec("wood", "stripes", ((150, 90, 50), (190, 120, 70)),
                     ("spot", "missing"), "Agrifood"),
        CategorySpec("pcb", "checker", ((30, 110, 40), (60, 150, 70)),
                     ("scratch", "missing"), "Electronics"),
        CategorySpec("concrete", "noise", ((120, 120, 125), (160, 160, 165)),
                     ("spot", "scratch"), "Infrastructure"),
    ]
    if n > len(base):
        raise ValueError(f"at most {len(base)} default categories")
    return base[:n]


@dataclass
class SynthSpec:
    categories: list[CategorySpec] = field(default_factory=default_categories)
    train_normals: int = 50
    test_normals: int = 10
    anomalies_per_defect: int = 10
    image_size: int = 64
    seed: int = 0

    def __post_init__(self):
        self.categories = [c if isinstance(c, CategorySpec) else CategorySpec(**c)
                           for c in self.categories]
        for c in self.categories:
            if c.domain not in DOMAINS:
                raise ValueError(f"domain {c.domain!r} unknown")

    def context_pairs(self) -> list[tuple[str, str]]:
        normal = [c.name for c in self.categories if c.normal_spots]
        bad = [c.name for c in self.categories if "spot" in c.defects and not c.normal_spots]
        return [(a, bad[0]) for a in normal] if bad else []

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SynthSpec":
        return cls(**json.loads(text))


# ---------------------------------------------------------------------------
# textures

def texture(cat: CategorySpec, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if cat.pattern == "stripes":
        period = 8.0 + rng.uniform(-0.5, 0.5)
        angle = np.deg2rad(30.0 + rng.uniform(-4, 4))
        t = 0.5 + 0.5 * np.sin(2 * np.pi * (xx * np.cos(angle) + yy * np.sin(angle)) / period
                               + rng.uniform(0, 2 * np.pi))
    elif cat.pattern == "checker":
        cell = 8
        oy, ox = rng.integers(0, 2 * cell, 2)
        t = (((yy + oy) // cell + (xx + ox) // cell) % 2).astype(np.float64)
    elif cat.pattern == "noise":
        t = ndimage.gaussian_filter(rng.normal(size=(size, size)), 3.0, mode="wrap")
        t = (t - t.min()) / (np.ptp(t) + 1e-12)
    else:
        angle = rng.uniform(0, 2 * np.pi)
        t = (xx * np.cos(angle) + yy * np.sin(angle)) / size
        t = (t - t.min()) / (np.ptp(t) + 1e-12)
    c0, c1 = (np.array(c, dtype=np.float64) for c in cat.palette)
    img = c0 + t[..., None] * (c1 - c0) + rng.normal(0.0, 3.0, (size, size, 1))
    lo, hi = TEXTURE_RANGE
    return np.clip(np.round(img), lo, hi).astype(np.uint8)


def _disc(size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def draw_spots(image: np.ndarray, rng: np.random.Generator, count: tuple[int, int],
               radius: tuple[int, int], strength: float = 1.0) -> np.ndarray:
    """Spot blobs in the shared context colour; identical drawing for both pair roles."""
    size = image.shape[0]
    fp = np.zeros(image.shape[:2], dtype=bool)
    for _ in range(int(rng.integers(count[0], count[1] + 1))):
        r = int(rng.integers(radius[0], radius[1] + 1))
        cy, cx = rng.integers(r + 1, size - r - 1, 2)
        fp |= _disc(size, cy, cx, r)
    return _paint(image, fp, SPOT_COLOR, strength)


def _paint(image, footprint, color, strength):
    out = image.astype(np.float64)
    out[footprint] = (1 - strength) * out[footprint] + strength * np.asarray(color, np.float64)
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def _segment_distance(yy, xx, p, q):
    d = q - p
    L2 = float(d @ d)
    t = np.clip(((yy - p[0]) * d[0] + (xx - p[1]) * d[1]) / max(L2, 1e-12), 0.0, 1.0)
    return np.hypot(yy - (p[0] + t * d[0]), xx - (p[1] + t * d[1]))


def scratch_footprint(size: int, points: np.ndarray, width: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dist = np.full((size, size), np.inf)
    for p, q in zip(points[:-1], points[1:]):
        dist = np.minimum(dist, _segment_distance(yy, xx, p, q))
    return dist <= (width + 1) / 2.0


def polyline_length(points: np.ndarray) -> float:
    return float(np.sum(np.linalg.norm(np.diff(points, axis=0), axis=1)))


def inject_defect(image: np.ndarray, recipe: DefectRecipe,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Return the defective image and the mask of exactly the modified pixels."""
    if recipe.strength <= 0:
        raise ValueError("zero-strength defect does not alter pixels")
    size = image.shape[0]
    if recipe.kind == "missing":
        h, w = rng.integers(recipe.size[0], recipe.size[1] + 1, 2)
        y, x = rng.integers(2, size - h - 1), rng.integers(2, size - w - 1)
        fp = np.zeros((size, size), dtype=bool)
        fp[y:y + h, x:x + w] = True
        out = _paint(image, fp, MISSING_COLOR, recipe.strength)
    elif recipe.kind == "scratch":
        length = rng.uniform(*recipe.length)
        n_seg = int(rng.integers(1, 3))
        start = rng.uniform(size * 0.25, size * 0.75, 2)
        pts = [start]
        heading = rng.uniform(0, 2 * np.pi)
        for _ in range(n_seg):
            heading += rng.uniform(-0.6, 0.6)
            step = length / n_seg
            nxt = pts[-1] + step * np.array([np.sin(heading), np.cos(heading)])
            pts.append(np.clip(nxt, 3, size - 4))
        pts = np.array(pts)
        fp = scratch_footprint(size, pts, recipe.width)
        out = _paint(image, fp, SCRATCH_COLOR, recipe.strength)
    else:
        out = draw_spots(image, rng, recipe.count, recipe.radius, recipe.strength)
    mask = np.any(out != image, axis=-1)
    if not mask.any():
        raise ValueError("defect left the image unchanged")
    return out, mask


# ---------------------------------------------------------------------------
# generation

def _normal_image(cat: CategorySpec, size: int, rng) -> np.ndarray:
    img = texture(cat, size, rng)
    if cat.normal_spots:
        img = draw_spots(img, rng, (2, 4), (3, 5))
    return img


def generate(spec: SynthSpec, out_root) -> DatasetManifest:
    """Write an MVTec-style tree (plus ``manifest.json`` and ``synth_spec.json``)."""
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    cats = []
    for cat in spec.categories:
        writer = _Writer(out_root, cat.name)
        samples = []
        size = spec.image_size

        def rng_for(key):
            return np.random.default_rng(_stable_seed(spec.seed, f"{cat.name}/{key}"))

        for i in range(spec.train_normals):
            img = _normal_image(cat, size, rng_for(f"train/{i}"))
            samples.append(writer.emit("train", "good", f"{i:03d}.png", array=img))
        for i in range(spec.test_normals):
            img = _normal_image(cat, size, rng_for(f"test/good/{i}"))
            samples.append(writer.emit("test", "good", f"{i:03d}.png", array=img))
        for kind in cat.defects:
            recipe = DefectRecipe(kind)
            for i in range(spec.anomalies_per_defect):
                rng = rng_for(f"test/{kind}/{i}")
                clean = _normal_image(cat, size, rng)
                img, mask = inject_defect(clean, recipe, rng)
                samples.append(writer.emit("test", kind, f"{i:03d}.png", array=img,
                                           mask_array=mask))
        cats.append(CategoryRecord(cat.name, cat.domain, samples))
    manifest = DatasetManifest(cats, ["synthetic"])
    manifest.save(out_root / "manifest.json")
    (out_root / "synth_spec.json").write_text(spec.to_json())
    return manifest
