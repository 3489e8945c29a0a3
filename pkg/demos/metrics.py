"""
Anomaly maps and evaluation metrics
===================================

Cosine-distance maps from feature residuals, top-0.1% image scores, and the
exact rank metrics.
"""
import numpy as np

from cgmoe_ad.scoring import anomaly_map, auroc, average_precision, image_score

rng = np.random.default_rng(0)

# Corrupt one token of a 4x4 grid and watch the map light up over its footprint.
f_E = [rng.normal(size=(16, 32)) for _ in range(2)]
f_D = [f.copy() for f in f_E]
for f in f_D:
    f[6] = rng.normal(size=32)
amap = anomaly_map(f_E, f_D, out_size=64)
r, c = (int(v) for v in np.unravel_index(np.argmax(amap), amap.shape))
print(f"peak at pixel ({r}, {c}), token cell {(r // 16, c // 16)}; image score {image_score(amap):.3f}")

# AUROC counts tied pairs as half; AP treats tied scores as one step.
scores = np.array([0.9, 0.8, 0.8, 0.4, 0.3, 0.3, 0.1])
labels = np.array([1, 1, 0, 1, 0, 0, 0])
print("AUROC", auroc(scores, labels), "AP", round(average_precision(scores, labels), 4))
