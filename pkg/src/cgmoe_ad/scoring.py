"""Anomaly maps, image scores, and the evaluation metrics (I-AUROC, P-AUROC, P-AP)."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image
from scipy import ndimage

from . import tensor as T
from .model import ModelBundle, forward
from .pipeline import DOMAINS, DatasetManifest, load_image, load_mask, resize

log = logging.getLogger(__name__)

METRICS = ("I-AUROC", "P-AUROC", "P-AP")


class UndefinedMetric(ValueError):
    pass


@dataclass
class ScoringConfig:
    sigma: float = 4.0
    statistic: str = "topk_mean"  # or "max"
    top_fraction: float = 0.001


@dataclass
class AnomalyResult:
    map: np.ndarray
    image_score: float
    category: str = ""
    sample_id: str = ""


# ---------------------------------------------------------------------------
# maps and scores

def _as_array(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, T.Tensor) else x, dtype=np.float64)


def upsample_bilinear(grid: np.ndarray, out_size: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of the last two axes to ``out_size``."""
    n = grid.shape[-1]
    zoom = [1.0] * (grid.ndim - 2) + [out_size / n, out_size / n]
    return ndimage.zoom(grid, zoom, order=1, mode="nearest", grid_mode=True)


def distance_maps(f_E, f_D) -> np.ndarray:
    """Per-level cosine-distance token grids, shape (levels, B, g, g)."""
    if len(f_E) != len(f_D) or not f_E:
        raise ValueError("feature lists misaligned")
    out = []
    for e, d in zip(f_E, f_D):
        e, d = _as_array(e), _as_array(d)
        if e.shape != d.shape:
            raise ValueError(f"level shapes differ: {e.shape} vs {d.shape}")
        if e.ndim == 2:
            e, d = e[None], d[None]
        B, N, _ = e.shape
        g = int(round(np.sqrt(N)))
        if g * g != N:
            raise ValueError(f"{N} tokens do not form a square grid")
        with T.no_grad():
            dist = T.cosine_distance(T.Tensor(e), T.Tensor(d)).data
        out.append(dist.reshape(B, g, g))
    return np.stack(out)


def anomaly_map(f_E, f_D, out_size: int, sigma: float = 4.0) -> np.ndarray:
    """Upsampled, level-averaged, Gaussian-smoothed cosine-distance map.

    Returns (H, W) for unbatched features, (B, H, W) otherwise.
    """
    single = _as_array(f_E[0]).ndim == 2
    grids = distance_maps(f_E, f_D)
    maps = upsample_bilinear(grids, out_size).mean(axis=0)
    if sigma > 0:
        maps = np.stack([ndimage.gaussian_filter(m, sigma, mode="reflect") for m in maps])
    return maps[0] if single else maps


def image_score(amap: np.ndarray, statistic: str = "topk_mean",
                top_fraction: float = 0.001) -> float:
    """Mean of the top ``top_fraction`` pixels (at least one), or the max."""
    flat = np.asarray(amap, dtype=np.float64).ravel()
    if flat.size == 0:
        raise ValueError("empty anomaly map")
    if statistic == "max":
        return float(flat.max())
    if statistic != "topk_mean":
        raise ValueError(f"unknown statistic {statistic!r}")
    k = max(1, int(flat.size * top_fraction))
    return float(np.partition(flat, flat.size - k)[-k:].mean())


# ---------------------------------------------------------------------------
# metrics

def _check_binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    return s, y


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: P(s+ > s-) + 0.5 P(s+ == s-), via midranks."""
    s, y = _check_binary(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUROC needs both positive and negative samples")
    order = np.argsort(s, kind="mergesort")
    ss = s[order]
    # midranks for tied blocks
    starts = np.flatnonzero(np.r_[True, ss[1:] != ss[:-1]])
    ends = np.r_[starts[1:], ss.size]
    mid = (starts + ends + 1) / 2.0
    ranks = np.empty(s.size)
    ranks[order] = np.repeat(mid, ends - starts)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Sum of (R_i - R_{i-1}) P_i over a descending sweep; tied scores form one step."""
    s, y = _check_binary(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetric("average precision needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    ss, yy = s[order], y[order]
    tp = np.cumsum(yy)
    last = np.r_[ss[1:] != ss[:-1], True]
    tp = tp[last]
    seen = np.flatnonzero(last) + 1
    precision = tp / seen
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class MetricReport:
    categories: dict[str, dict[str, float]] = field(default_factory=dict)
    domains_of: dict[str, str] = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)

    @property
    def per_domain(self) -> dict[str, dict[str, float]]:
        out = {}
        for dom in DOMAINS:
            rows = [v for k, v in self.categories.items() if self.domains_of.get(k) == dom]
            if rows:
                out[dom] = {m: float(np.mean([r[m] for r in rows])) for m in METRICS}
        return out

    @property
    def overall(self) -> dict[str, float]:
        rows = list(self.categories.values())
        return {m: float(np.mean([r[m] for r in rows])) for m in METRICS} if rows else {}

    @property
    def mean_of_domains(self) -> dict[str, float]:
        doms = list(self.per_domain.values())
        return {m: float(np.mean([d[m] for d in doms])) for m in METRICS} if doms else {}

    def to_dict(self) -> dict:
        return {
            "metrics": list(METRICS),
            "domains": self.per_domain,
            "overall_mean_over_categories": self.overall,
            "mean_of_domain_means": self.mean_of_domains,
            "categories": {k: {"domain": self.domains_of.get(k), **v}
                           for k, v in self.categories.items()},
            "skipped": self.skipped,
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    def table(self) -> str:
        head = f"{'':<16}" + "".join(f"{m:>10}" for m in METRICS)
        lines = [head, "-" * len(head)]
        for dom, row in self.per_domain.items():
            lines.append(f"{dom:<16}" + "".join(f"{100 * row[m]:>10.1f}" for m in METRICS))
        if self.categories:
            lines.append(f"{'Average':<16}"
                         + "".join(f"{100 * self.overall[m]:>10.1f}" for m in METRICS))
        return "\n".join(lines)


def model_predictor(model: ModelBundle, scoring: ScoringConfig | None = None,
                    batch_size: int = 32) -> Callable[[np.ndarray], np.ndarray]:
    """Wrap a model as ``images (B, H, W, 3) in [0, 1] -> maps (B, H, W)``."""
    scoring = scoring or ScoringConfig()
    size = model.config.encoder.image_size

    def predict(images):
        maps = []
        with T.no_grad():
            for s in range(0, len(images), batch_size):
                out = forward(images[s:s + batch_size], model, training=False)
                maps.append(anomaly_map(out.f_E, out.f_D, size, scoring.sigma))
        return np.concatenate(maps)

    predict.image_size = size
    return predict


def load_test_split(manifest: DatasetManifest, root, category: str, size: int):
    cat = manifest.category(category)
    imgs, masks, labels, ids = [], [], [], []
    for s in cat.select(split="test"):
        img = resize(load_image(Path(root) / s.image), size)
        imgs.append(img.astype(np.float32) / 255.0)
        if s.mask:
            masks.append(resize(load_mask(Path(root) / s.mask), size, nearest=True))
        else:
            masks.append(np.zeros((size, size), dtype=bool))
        labels.append(int(s.anomalous))
        ids.append(s.image)
    return np.stack(imgs), np.stack(masks), np.array(labels), ids


def score_category(maps: np.ndarray, masks: np.ndarray, labels: np.ndarray,
                   scoring: ScoringConfig | None = None) -> tuple[dict[str, float], np.ndarray]:
    scoring = scoring or ScoringConfig()
    img_scores = np.array([image_score(m, scoring.statistic, scoring.top_fraction)
                           for m in maps])
    row = {
        "I-AUROC": auroc(img_scores, labels),
        "P-AUROC": auroc(maps.ravel(), masks.ravel()),
        "P-AP": average_precision(maps.ravel(), masks.ravel()),
    }
    return row, img_scores


def evaluate(predictor, manifest: DatasetManifest, root, domains: dict[str, str] | None = None,
             scoring: ScoringConfig | None = None, categories: list[str] | None = None,
             score_dump=None) -> MetricReport:
    """Per-category metrics, pixels pooled within a category, unweighted aggregation.

    ``predictor`` is a ``ModelBundle`` or a callable mapping a float image batch
    to anomaly maps of the same spatial size.
    """
    scoring = scoring or ScoringConfig()
    if isinstance(predictor, ModelBundle):
        predictor = model_predictor(predictor, scoring)
    size = getattr(predictor, "image_size", None)
    domains = domains or manifest.domains()
    report = MetricReport(domains_of=dict(domains))
    dump_rows = []
    for cat in manifest.categories:
        if categories is not None and cat.name not in categories:
            continue
        test = cat.select(split="test")
        if not test:
            raise ValueError(f"category {cat.name} has an empty test split")
        if not any(s.anomalous for s in test) or all(s.anomalous for s in test):
            log.warning("skipping %s: test split lacks one of the two classes", cat.name)
            report.skipped.append(cat.name)
            continue
        if size is None:
            size = load_image(Path(root) / test[0].image).shape[0]
        imgs, masks, labels, ids = load_test_split(manifest, root, cat.name, size)
        maps = np.asarray(predictor(imgs), dtype=np.float64)
        if maps.shape != masks.shape:
            raise ValueError(f"predictor maps {maps.shape} != masks {masks.shape}")
        row, img_scores = score_category(maps, masks, labels, scoring)
        report.categories[cat.name] = row
        dump_rows += [(i, int(l), float(s)) for i, l, s in zip(ids, labels, img_scores)]
    if score_dump is not None:
        with open(score_dump, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "label", "score"])
            w.writerows(dump_rows)
    return report


def save_map_png(path, amap: np.ndarray, vmax: float = 2.0):
    """Export a map as 16-bit grayscale, scaling [0, vmax] to [0, 65535]."""
    arr = np.clip(np.asarray(amap, dtype=np.float64) / vmax, 0.0, 1.0)
    Image.fromarray((arr * 65535).round().astype(np.uint16)).save(path)
