"""Category-guided mixture-of-experts reconstruction for multi-domain anomaly detection."""
from .model import EncoderConfig, ModelBundle, ModelConfig, encode, forward
from .scoring import ScoringConfig, anomaly_map, auroc, average_precision, evaluate
from .synthetic import SynthSpec, generate
from .training import TrainConfig, train

__all__ = [
    "EncoderConfig", "ModelBundle", "ModelConfig", "ScoringConfig", "SynthSpec",
    "TrainConfig", "anomaly_map", "auroc", "average_precision", "encode", "evaluate",
    "forward", "generate", "train",
]
__version__ = "0.1.0"
