"""Context-guided mixture-of-experts reconstruction network.

A frozen ViT-style encoder produces layer features and a global [CLS] token.
A noisy bottleneck compresses the features, and a transformer decoder whose
feed-forward layers are replaced by cgMoE layers reconstructs them. Routing
weights ``g = softmax(W_g z_cls)`` are computed once per image and shared by
every decoder block; experts are mixed in weight space so the per-token cost
does not grow with the number of experts.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .tensor import ContractError, DimensionError, Tensor

ROUTING_SOURCES = ("encoder_cls", "decoder_cls")


class ConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    d: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    feature_layers: tuple[int, ...] | None = None  # 1-based; None -> middle half
    levels: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.feature_layers is not None:
            self.feature_layers = tuple(int(i) for i in self.feature_layers)
        self.validate()

    def validate(self):
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.d % self.heads:
            raise ConfigError("d must be divisible by heads")
        layers = self.resolved_layers()
        if any(not 1 <= i <= self.depth for i in layers):
            raise ConfigError(f"feature_layers {layers} outside [1, {self.depth}]")
        if not 1 <= self.levels <= len(layers) or len(layers) % self.levels:
            raise ConfigError("feature_layers must split evenly into levels")

    @property
    def num_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    def resolved_layers(self) -> tuple[int, ...]:
        if self.feature_layers is not None:
            return self.feature_layers
        n = max(self.depth // 2, min(2, self.depth))
        start = (self.depth - n) // 2
        return tuple(range(start + 1, start + n + 1))

    def layer_groups(self) -> list[tuple[int, ...]]:
        layers = self.resolved_layers()
        size = len(layers) // self.levels
        return [layers[i * size:(i + 1) * size] for i in range(self.levels)]


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    experts: int = 8
    hidden: int = 128
    decoder_depth: int = 2
    decoder_heads: int = 4
    bottleneck_hidden: int = 128
    drop_rate: float = 0.2
    routing_source: str = "encoder_cls"
    init_std: float = 0.02
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        self.validate()

    def validate(self):
        if self.experts < 1:
            raise ConfigError("experts must be >= 1")
        if self.routing_source not in ROUTING_SOURCES:
            raise ConfigError(f"routing_source must be one of {ROUTING_SOURCES}")
        if self.decoder_depth % self.encoder.levels:
            raise ConfigError(
                f"decoder_depth {self.decoder_depth} does not split into "
                f"{self.encoder.levels} feature levels")
        if self.encoder.d % self.decoder_heads:
            raise ConfigError("d must be divisible by decoder_heads")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ConfigError("drop_rate must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    def to_dict(self) -> dict:
        out = asdict(self)
        fl = out["encoder"]["feature_layers"]
        out["encoder"]["feature_layers"] = None if fl is None else list(fl)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        data["encoder"] = EncoderConfig(**data.get("encoder", {}))
        return cls(**data)


class Encoded(NamedTuple):
    features: list[np.ndarray]  # per level, (B, N, d)
    z_cls: np.ndarray  # (B, d)


class Output(NamedTuple):
    f_E: list[Tensor]
    f_D: list[Tensor]
    z_cls: Tensor
    g: Tensor


# ---------------------------------------------------------------------------
# parameters

def _init_encoder(cfg: EncoderConfig, dtype) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    d, p = cfg.d, cfg.patch_size
    pin = p * p * 3

    def w(out_dim, in_dim):
        return rng.normal(0.0, 1.0 / np.sqrt(in_dim), (out_dim, in_dim))

    P = {
        "encoder.patch.weight": w(d, pin),
        "encoder.patch.bias": np.zeros(d),
        "encoder.cls": rng.normal(0.0, 1.0, d),
        "encoder.pos": rng.normal(0.0, 0.5, (cfg.num_tokens + 1, d)),
        "encoder.norm.gain": np.ones(d),
        "encoder.norm.bias": np.zeros(d),
    }
    for i in range(cfg.depth):
        pre = f"encoder.blocks.{i}."
        P[pre + "ln1.gain"] = np.ones(d)
        P[pre + "ln1.bias"] = np.zeros(d)
        for name in ("q", "k", "v", "o"):
            P[pre + f"attn.{name}.weight"] = w(d, d)
            P[pre + f"attn.{name}.bias"] = np.zeros(d)
        P[pre + "ln2.gain"] = np.ones(d)
        P[pre + "ln2.bias"] = np.zeros(d)
        P[pre + "mlp.fc1.weight"] = w(cfg.mlp_ratio * d, d)
        P[pre + "mlp.fc1.bias"] = np.zeros(cfg.mlp_ratio * d)
        P[pre + "mlp.fc2.weight"] = w(d, cfg.mlp_ratio * d) * 0.5
        P[pre + "mlp.fc2.bias"] = np.zeros(d)
    return {k: v.astype(dtype) for k, v in P.items()}


def _init_trainable(cfg: ModelConfig, dtype) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([cfg.seed, 1])
    d, h, K = cfg.encoder.d, cfg.hidden, cfg.experts
    s = cfg.init_std

    def w(*shape):
        return rng.normal(0.0, s, shape)

    P = {
        "bottleneck.fc1.weight": w(cfg.bottleneck_hidden, d),
        "bottleneck.fc1.bias": np.zeros(cfg.bottleneck_hidden),
        "bottleneck.fc2.weight": w(d, cfg.bottleneck_hidden),
        "bottleneck.fc2.bias": np.zeros(d),
        "gate.weight": rng.normal(0.0, 1.0 / np.sqrt(d), (K, d)),
    }
    if cfg.routing_source == "decoder_cls":
        P["decoder.cls"] = rng.normal(0.0, 1.0, d)
    for i in range(cfg.decoder_depth):
        pre = f"decoder.blocks.{i}."
        P[pre + "ln1.gain"] = np.ones(d)
        P[pre + "ln1.bias"] = np.zeros(d)
        for name in ("q", "k", "v", "o"):
            P[pre + f"attn.{name}.weight"] = w(d, d)
            P[pre + f"attn.{name}.bias"] = np.zeros(d)
        P[pre + "ln2.gain"] = np.ones(d)
        P[pre + "ln2.bias"] = np.zeros(d)
        P[pre + "experts.w1"] = w(K, h, d)
        P[pre + "experts.w2"] = w(K, d, h)
    return {k: v.astype(dtype) for k, v in P.items()}


class ModelBundle:
    """Frozen encoder parameters plus every trainable tensor, keyed by name."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None):
        self.config = config
        dtype = np.dtype(config.dtype)
        if params is None:
            params = {**_init_encoder(config.encoder, dtype), **_init_trainable(config, dtype)}
        self.params: dict[str, Tensor] = {}
        for name, arr in params.items():
            frozen = name.startswith("encoder.")
            self.params[name] = Tensor(np.array(arr, dtype=dtype), requires_grad=not frozen)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def trainable(self) -> dict[str, Tensor]:
        return {k: p for k, p in self.params.items() if p.requires_grad}

    def encoder_params(self) -> dict[str, Tensor]:
        return {k: p for k, p in self.params.items() if k.startswith("encoder.")}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_encoder_weights(self, blobs: dict[str, np.ndarray]):
        """Import external encoder weights; names and shapes must match exactly."""
        mine = self.encoder_params()
        if set(blobs) != set(mine):
            missing = sorted(set(mine) - set(blobs))
            extra = sorted(set(blobs) - set(mine))
            raise ConfigError(f"encoder topology mismatch: missing={missing} extra={extra}")
        for name, arr in blobs.items():
            if tuple(arr.shape) != mine[name].shape:
                raise DimensionError(f"{name}: shape {arr.shape} != {mine[name].shape}")
            self.params[name] = Tensor(np.array(arr, dtype=self.dtype), requires_grad=False)


# ---------------------------------------------------------------------------
# building blocks

def attention(x: Tensor, P: ModelBundle, pre: str, heads: int) -> Tensor:
    B, N, d = x.shape
    dh = d // heads

    def proj(name):
        y = T.linear(x, P[pre + f"{name}.weight"], P[pre + f"{name}.bias"])
        return T.transpose(y.reshape(B, N, heads, dh), (0, 2, 1, 3))

    q, k, v = proj("q"), proj("k"), proj("v")
    scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
    att = T.matmul(T.softmax(scores, axis=-1), v)
    att = T.transpose(att, (0, 2, 1, 3)).reshape(B, N, d)
    return T.linear(att, P[pre + "o.weight"], P[pre + "o.bias"])


def route(z_cls: Tensor, gate_weight: Tensor) -> Tensor:
    """Softmax routing weights over experts; ``z_cls`` is (d,) or (B, d)."""
    if z_cls.shape[-1] != gate_weight.shape[-1]:
        raise DimensionError(f"z_cls dim {z_cls.shape[-1]} != gate dim {gate_weight.shape[-1]}")
    single = z_cls.ndim == 1
    z = z_cls.reshape(1, -1) if single else z_cls
    g = T.softmax(T.linear(z, gate_weight), axis=-1)
    return g.reshape(-1) if single else g


def mix_experts(g: Tensor, w1: Tensor, w2: Tensor) -> tuple[Tensor, Tensor]:
    """Per-image weighted sums of the stacked expert matrices.

    ``g`` is (B, K); ``w1`` is (K, h, d), ``w2`` is (K, d, h). Returns the
    mixed (B, h, d) and (B, d, h) matrices.
    """
    K, h, d = w1.shape
    if g.shape[-1] != K or w2.shape != (K, d, h):
        raise DimensionError("routing weights and expert bank disagree on K or (h, d)")
    B = g.shape[0]
    m1 = T.matmul(g, w1.reshape(K, h * d)).reshape(B, h, d)
    m2 = T.matmul(g, w2.reshape(K, d * h)).reshape(B, d, h)
    return m1, m2


def ffn(x: Tensor, m1: Tensor, m2: Tensor) -> Tensor:
    """Bias-free two-layer FFN with per-image weights: ``m2 GELU(m1 x)`` per token."""
    hid = T.gelu(T.matmul(x, T.swapaxes(m1, -1, -2)))
    return T.matmul(hid, T.swapaxes(m2, -1, -2))


def cgmoe_forward(x: Tensor, g: Tensor, w1: Tensor, w2: Tensor, tol: float = 1e-6) -> Tensor:
    """cgMoE layer on tokens ``x`` (B, N, d) or (N, d) with weights ``g`` (B, K) or (K,)."""
    gd = g.data
    if np.any(gd < -tol) or np.any(np.abs(gd.sum(axis=-1) - 1.0) > tol):
        raise ContractError("routing weights are not on the simplex")
    single = x.ndim == 2
    if single:
        x = x.reshape(1, *x.shape)
        g = g.reshape(1, -1)
    m1, m2 = mix_experts(g, w1, w2)
    out = ffn(x, m1, m2)
    return out.reshape(out.shape[1:]) if single else out


def noisy_bottleneck(f: Tensor, P: ModelBundle, training: bool, drop_rate: float,
                     rng: np.random.Generator | None = None) -> Tensor:
    if not 0.0 <= drop_rate < 1.0:
        raise ContractError("drop_rate must lie in [0, 1)")
    if training and drop_rate > 0.0:
        if rng is None:
            raise ContractError("training-mode bottleneck noise needs an rng")
        keep = rng.random(f.shape) >= drop_rate
        f = f * Tensor((keep / (1.0 - drop_rate)).astype(f.dtype))
    hid = T.gelu(T.linear(f, P["bottleneck.fc1.weight"], P["bottleneck.fc1.bias"]))
    return T.linear(hid, P["bottleneck.fc2.weight"], P["bottleneck.fc2.bias"])


def _layer_norm(x, P, name):
    return T.layer_norm(x, P[name + ".gain"], P[name + ".bias"])


# ---------------------------------------------------------------------------
# encoder

def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    B, H, W, C = images.shape
    x = images.reshape(B, H // patch, patch, W // patch, patch, C)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(B, (H // patch) * (W // patch), patch * patch * C)


def encode(images, model: ModelBundle) -> Encoded:
    """Frozen encoder pass; ``images`` is (H, W, 3) or (B, H, W, 3) in [0, 1]."""
    cfg = model.config.encoder
    images = np.asarray(images, dtype=model.dtype)
    if images.ndim == 3:
        images = images[None]
    if images.shape[1:] != (cfg.image_size, cfg.image_size, 3):
        raise DimensionError(
            f"image shape {images.shape[1:]} != ({cfg.image_size}, {cfg.image_size}, 3)")
    B = images.shape[0]
    P = model
    with T.no_grad():
        x = Tensor((patchify(images, cfg.patch_size) - 0.5) / 0.25)
        x = T.linear(x, P["encoder.patch.weight"], P["encoder.patch.bias"])
        cls = Tensor(np.broadcast_to(P["encoder.cls"].data, (B, 1, cfg.d)))
        x = T.concat([cls, x], axis=1) + P["encoder.pos"]
        outs = []
        for i in range(cfg.depth):
            pre = f"encoder.blocks.{i}."
            x = x + attention(_layer_norm(x, P, pre + "ln1"), P, pre + "attn.", cfg.heads)
            h = _layer_norm(x, P, pre + "ln2")
            h = T.gelu(T.linear(h, P[pre + "mlp.fc1.weight"], P[pre + "mlp.fc1.bias"]))
            x = x + T.linear(h, P[pre + "mlp.fc2.weight"], P[pre + "mlp.fc2.bias"])
            outs.append(x.data)
        z = _layer_norm(x, P, "encoder.norm").data[:, 0]
    feats = [np.mean([outs[i - 1][:, 1:] for i in group], axis=0)
             for group in cfg.layer_groups()]
    return Encoded([f.astype(model.dtype) for f in feats], z.astype(model.dtype))


# ---------------------------------------------------------------------------
# decoder

def decoder_block(x: Tensor, g: Tensor, P: ModelBundle, i: int) -> Tensor:
    cfg = P.config
    pre = f"decoder.blocks.{i}."
    x = x + attention(_layer_norm(x, P, pre + "ln1"), P, pre + "attn.", cfg.decoder_heads)
    h = _layer_norm(x, P, pre + "ln2")
    return x + cgmoe_forward(h, g, P[pre + "experts.w1"], P[pre + "experts.w2"])


def _group_outputs(outs: list[Tensor], levels: int) -> list[Tensor]:
    size = len(outs) // levels
    groups = []
    for lvl in range(levels):
        chunk = outs[lvl * size:(lvl + 1) * size]
        acc = chunk[0]
        for o in chunk[1:]:
            acc = acc + o
        groups.append(acc * (1.0 / len(chunk)) if len(chunk) > 1 else acc)
    return groups


def decode(f_bn: Tensor, g: Tensor, model: ModelBundle) -> list[Tensor]:
    """Decoder with routing ``g`` shared by every block; one output per feature level."""
    cfg = model.config
    if cfg.decoder_depth % cfg.encoder.levels:
        raise ConfigError("decoder depth does not split into feature levels")
    x = f_bn
    outs = []
    for i in range(cfg.decoder_depth):
        x = decoder_block(x, g, model, i)
        outs.append(x)
    return _group_outputs(outs, cfg.encoder.levels)


def _decode_decoder_cls(f_bn: Tensor, model: ModelBundle) -> tuple[list[Tensor], Tensor]:
    # Learned token prepended to the decoder input. The first block routes on the
    # token's initial value; every later block routes on its state after block one.
    cfg = model.config
    B, N, d = f_bn.shape
    tok = model["decoder.cls"]
    x = T.concat([T.reshape(tok, (1, 1, d)) + Tensor(np.zeros((B, 1, d), model.dtype)), f_bn],
                 axis=1)
    g = route(T.reshape(tok, (1, d)) + Tensor(np.zeros((B, d), model.dtype)),
              model["gate.weight"])
    outs = []
    for i in range(cfg.decoder_depth):
        x = decoder_block(x, g, model, i)
        if i == 0:
            g = route(x[:, 0], model["gate.weight"])
        outs.append(x[:, 1:])
    return _group_outputs(outs, cfg.encoder.levels), g


def forward(images_or_encoded, model: ModelBundle, training: bool = False,
            rng: np.random.Generator | None = None) -> Output:
    """encode -> bottleneck -> route -> decode for a batch of images."""
    enc = images_or_encoded
    if not isinstance(enc, Encoded):
        enc = encode(enc, model)
    cfg = model.config
    f_E = [Tensor(f) for f in enc.features]
    z_cls = Tensor(enc.z_cls)
    fused = f_E[0]
    for f in f_E[1:]:
        fused = fused + f
    fused = fused * (1.0 / len(f_E)) if len(f_E) > 1 else fused
    f_bn = noisy_bottleneck(fused, model, training, cfg.drop_rate, rng)
    if cfg.routing_source == "encoder_cls":
        g = route(z_cls, model["gate.weight"])
        f_D = decode(f_bn, g, model)
    else:
        f_D, g = _decode_decoder_cls(f_bn, model)
    return Output(f_E, f_D, z_cls, g)
