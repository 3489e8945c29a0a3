"""
Category-guided expert mixing
=============================

The frozen encoder's class token picks a soft mixture over K expert FFNs.
The experts are blended in weight space once per image, so each token pays for
exactly one FFN whatever K is.
"""
import numpy as np

from cgmoe_ad import tensor as T
from cgmoe_ad.model import (EncoderConfig, ModelBundle, ModelConfig, cgmoe_forward, encode,
                            ffn, forward, mix_experts, route)
from cgmoe_ad.tensor import Tensor

rng = np.random.default_rng(0)

# Routing is a softmax of a linear map of the class token.
W_g = Tensor(rng.normal(size=(4, 16)))
print("g(z)   =", route(Tensor(rng.normal(size=16)), W_g).data.round(3))
print("g(0)   =", route(Tensor(np.zeros(16)), W_g).data)  # exactly uniform

# A one-hot mixture reproduces the chosen expert; a soft one blends them.
W1, W2 = Tensor(rng.normal(size=(4, 32, 16))), Tensor(rng.normal(size=(4, 16, 32)))
x = Tensor(rng.normal(size=(10, 16)))
solo = cgmoe_forward(x, Tensor(np.eye(4)[1]), W1, W2).data
blend = cgmoe_forward(x, Tensor([0.1, 0.6, 0.2, 0.1]), W1, W2).data
print("one-hot vs blended output differ by", float(np.abs(solo - blend).max().round(3)))

# Per-token work does not grow with K.
for K in (1, 8):
    m1, m2 = mix_experts(Tensor(np.full((1, K), 1 / K)), Tensor(rng.normal(size=(K, 32, 16))),
                         Tensor(rng.normal(size=(K, 16, 32))))
    with T.count_ops() as ops:
        ffn(Tensor(rng.normal(size=(1, 64, 16))), m1, m2)
    print(f"K={K}: token path flops {ops.total_flops}")

# The whole model: frozen ViT features, noisy bottleneck, routed decoder.
cfg = ModelConfig(encoder=EncoderConfig(image_size=32, d=32, depth=4), experts=4, hidden=64,
                  bottleneck_hidden=64)
model = ModelBundle(cfg)
images = rng.random((3, 32, 32, 3))
enc = encode(images, model)
print("feature levels", [f.shape for f in enc.features], "class token", enc.z_cls.shape)
out = forward(enc, model)
print("routing weights per image\n", out.g.data.round(3))
