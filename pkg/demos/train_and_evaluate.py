"""
Training one model for many categories
======================================

A short run on a small synthetic benchmark: the encoder is frozen, the decoder
learns to reconstruct its features, and reconstruction error becomes the
anomaly score. Pass ``--iterations 5000`` for a full-length run.
"""
import argparse
import tempfile
from pathlib import Path

from cgmoe_ad.model import EncoderConfig, ModelBundle, ModelConfig
from cgmoe_ad.pipeline import load_train_images
from cgmoe_ad.scoring import evaluate, load_test_split, model_predictor, save_map_png
from cgmoe_ad.synthetic import SynthSpec, default_categories, generate
from cgmoe_ad.training import TrainConfig, train

ap = argparse.ArgumentParser()
ap.add_argument("--iterations", type=int, default=300)
ap.add_argument("--experts", type=int, default=8)
args = ap.parse_args()

work = Path(tempfile.mkdtemp())
spec = SynthSpec(categories=default_categories(4), train_normals=20, test_normals=6,
                 anomalies_per_defect=5, image_size=32, seed=0)
manifest = generate(spec, work / "data")
images = load_train_images(manifest, work / "data")
print("training images", images.shape)

cfg = ModelConfig(encoder=EncoderConfig(image_size=32, d=32, depth=4), experts=args.experts,
                  hidden=64, bottleneck_hidden=64)
model = ModelBundle(cfg)
result = train(images, TrainConfig(iterations=args.iterations, log_every=100, lr=1e-3),
               model, work / "run")
for rec in result.history:
    print(f"iter {rec['iteration']:5d}  loss {rec['loss']:.4f}  masked {rec['masked_fraction']:.2f}")

report = evaluate(model, manifest, work / "data")
print(report.table())

# Save one anomaly map as a 16-bit PNG next to the checkpoint.
imgs, masks, labels, ids = load_test_split(manifest, work / "data", "pill", 32)
amap = model_predictor(model)(imgs[labels == 1][:1])[0]
save_map_png(work / "run" / "pill_map.png", amap)
print("outputs in", work)
