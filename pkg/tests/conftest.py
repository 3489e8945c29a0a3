import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cgmoe_ad.model import EncoderConfig, ModelBundle, ModelConfig  # noqa: E402
from cgmoe_ad.synthetic import SynthSpec, default_categories, generate  # noqa: E402


def desk_config(experts=4, routing="encoder_cls", dtype="float64", seed=0) -> ModelConfig:
    """d=16, h=32, depth=2, N=16 tokens (32x32 image, 8px patches)."""
    enc = EncoderConfig(image_size=32, patch_size=8, d=16, depth=2, heads=4, seed=seed)
    return ModelConfig(encoder=enc, experts=experts, hidden=32, decoder_depth=2,
                       decoder_heads=4, bottleneck_hidden=32, routing_source=routing,
                       dtype=dtype, seed=seed, init_std=0.2)


@pytest.fixture
def desk_model():
    return ModelBundle(desk_config())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth_small")
    spec = SynthSpec(categories=default_categories(3), train_normals=8, test_normals=3,
                     anomalies_per_defect=2, image_size=32, seed=3)
    manifest = generate(spec, root)
    return root, manifest
