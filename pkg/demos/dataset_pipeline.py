"""
Standardising anomaly datasets
==============================

Tiling, the 9:1 split, per-category caps, grid locations from masks, and
annotation validation, on small in-memory inputs.
"""
import numpy as np

from cgmoe_ad.pipeline import (CategoryRecord, DatasetManifest, SampleRecord, balance,
                               grid_location, split_normals, stats, tile, validate_annotation)

# Tiling a 600x600 image: three rows and columns, the last anchored to the edge.
image = np.zeros((600, 600, 3), np.uint8)
mask = np.zeros((600, 600), bool)
mask[100:130, 400:420] = True
for t in tile(image, mask, tile_size=256):
    print("tile at", t.origin, t.label, int(t.mask.sum()))

# Normal samples are split 9:1 and each category is capped.
normals = [SampleRecord(f"good/{i:04d}.png", "train", "normal") for i in range(1100)]
train, test = split_normals(normals, seed=0)
print("split", len(train), len(test))
samples = [SampleRecord(s.image, "train", "normal") for s in train]
samples += [SampleRecord(s.image, "test", "normal") for s in test]
samples += [SampleRecord(f"crack/{i}.png", "test", "anomalous", "crack", f"gt/{i}.png")
            for i in range(180)]
cat = balance(CategoryRecord("widget", "Industry", samples), seed=0)
print("after caps", stats(DatasetManifest([cat]))["totals"])

# Locations come from the centroid of each 8-connected defect on a 3x3 grid.
m = np.zeros((90, 90), bool)
m[5:20, 5:25] = True
m[70:75, 80:85] = True
print("locations", grid_location(m))

record = {"location": "top-left", "color": "dark", "shape": "elongated", "area_size": "small",
          "quantity": 2, "reason": "a dark scuff and a dent"}
res = validate_annotation(record, m)
print("valid:", res.ok, "warnings:", res.warnings)
print(validate_annotation({**record, "location": "centre-left"}).violations)
