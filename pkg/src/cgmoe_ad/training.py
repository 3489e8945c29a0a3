"""Reconstruction training with hard-mined cosine loss."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .model import Encoded, ModelBundle, encode, forward
from .tensor import ContractError, Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    iterations: int = 5000
    batch_size: int = 8
    lr: float = 2e-4
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    warmup: int = 100
    q_start: float = 0.0
    q_end: float = 0.9
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 0  # 0 -> only the final checkpoint

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if not 0.0 <= self.q_start <= self.q_end < 1.0:
            raise ValueError("need 0 <= q_start <= q_end < 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be >= 1")

    def quantile(self, it: int) -> float:
        """Linear hard-mining schedule from q_start to q_end over the run."""
        frac = it / max(self.iterations - 1, 1)
        return self.q_start + (self.q_end - self.q_start) * min(frac, 1.0)

    def lr_at(self, it: int) -> float:
        if self.warmup > 0 and it < self.warmup:
            return self.lr * (it + 1) / self.warmup
        return self.lr


@dataclass
class LossReport:
    total: float
    per_level: list[float]
    masked_fraction: float


class TrainingDiverged(RuntimeError):
    pass


def hard_mining_mask(dist, q: float) -> np.ndarray:
    """Keep points at or above the q-quantile (linear interpolation) of ``dist``."""
    d = np.asarray(dist.data if isinstance(dist, Tensor) else dist).ravel()
    if d.size == 0:
        raise ContractError("hard_mining_mask of an empty distance vector")
    if not 0.0 <= q < 1.0:
        raise ContractError("quantile must lie in [0, 1)")
    if q == 0.0:
        return np.ones(d.shape, dtype=bool)
    thr = np.quantile(d, q, method="linear")
    return d >= thr


def reconstruction_loss(f_E: list, f_D: list, q: float) -> tuple[Tensor, LossReport]:
    """Mean cosine distance over the hard-mined rows, averaged across levels."""
    if len(f_E) != len(f_D) or not f_E:
        raise ContractError(f"feature lists misaligned: {len(f_E)} vs {len(f_D)}")
    total = None
    per_level, masked, count = [], 0, 0
    for e, dd in zip(f_E, f_D):
        e = T.as_tensor(e)
        dd = T.as_tensor(dd)
        if e.shape != dd.shape:
            raise ContractError(f"level shapes differ: {e.shape} vs {dd.shape}")
        d = e.shape[-1]
        dist = T.cosine_distance(e.reshape(-1, d), dd.reshape(-1, d))
        keep = hard_mining_mask(dist, q)
        kept = T.detach_mask(dist, keep) * Tensor(keep.astype(dist.dtype))
        level = kept.sum() * (1.0 / keep.sum())
        per_level.append(float(dist.data.mean()))
        masked += int((~keep).sum())
        count += keep.size
        total = level if total is None else total + level
    loss = total * (1.0 / len(f_E))
    return loss, LossReport(float(loss.data), per_level, masked / count)


class AdamW:
    """Adam with decoupled weight decay applied to matrix-shaped parameters."""

    def __init__(self, params: dict[str, Tensor], config: TrainConfig):
        self.params = params
        self.cfg = config
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float):
        b1, b2 = self.cfg.betas
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            upd = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + 1e-8)
            data = p.data
            if p.ndim >= 2 and self.cfg.weight_decay:
                data = data * (1.0 - lr * self.cfg.weight_decay)
            p.data = (data - lr * upd).astype(p.data.dtype)

    def state(self) -> dict:
        return {"t": self.t}


def train_step(batch, model: ModelBundle, optimizer: AdamW, q: float,
               rng: np.random.Generator, lr: float | None = None,
               iteration: int = 0) -> LossReport:
    """One forward/backward/update on ``batch`` (images or an ``Encoded``)."""
    lr = optimizer.cfg.lr if lr is None else lr
    model.zero_grad()
    out = forward(batch, model, training=True, rng=rng)
    loss, report = reconstruction_loss(out.f_E, out.f_D, q)
    if not np.isfinite(report.total):
        _abort(iteration, lr, model, "loss is not finite")
    loss.backward()
    grads = [p.grad for p in model.trainable().values() if p.grad is not None]
    gmax = max((float(np.abs(g).max()) for g in grads), default=0.0)
    if not np.isfinite(gmax):
        _abort(iteration, lr, model, "gradient is not finite")
    optimizer.step(lr)
    return report


def _abort(iteration, lr, model, reason):
    gmax = 0.0
    for p in model.trainable().values():
        if p.grad is not None:
            with np.errstate(invalid="ignore"):
                gmax = max(gmax, float(np.nanmax(np.abs(p.grad))))
    msg = f"{reason} at iteration {iteration} (lr={lr:g}, max|grad|={gmax:g})"
    log.error(msg)
    raise TrainingDiverged(msg)


def encode_dataset(images: np.ndarray, model: ModelBundle, chunk: int = 64) -> Encoded:
    feats, zs = None, []
    for s in range(0, len(images), chunk):
        enc = encode(images[s:s + chunk], model)
        feats = [[f] for f in enc.features] if feats is None else [
            acc + [f] for acc, f in zip(feats, enc.features)]
        zs.append(enc.z_cls)
    return Encoded([np.concatenate(f) for f in feats], np.concatenate(zs))


def _take(enc: Encoded, idx: np.ndarray) -> Encoded:
    return Encoded([f[idx] for f in enc.features], enc.z_cls[idx])


@dataclass
class TrainResult:
    model: ModelBundle
    history: list[dict] = field(default_factory=list)
    batch_hash: str = ""
    checkpoints: list[str] = field(default_factory=list)


def train(images: np.ndarray, config: TrainConfig, model: ModelBundle,
          out_dir=None, progress: bool = False) -> TrainResult:
    """Iterate ``train_step`` with the quantile schedule.

    ``images`` is the union of all categories' normal training images, float in
    [0, 1] of shape (n, H, W, 3). Batches are drawn uniformly with replacement.
    The frozen encoder is evaluated once per image up front.
    """
    images = np.asarray(images)
    if images.dtype == np.uint8:
        images = images.astype(model.dtype) / 255.0
    enc = encode_dataset(images, model)
    rng = np.random.default_rng(config.seed)
    noise_rng = np.random.default_rng([config.seed, 7])
    opt = AdamW(model.trainable(), config)
    hasher = hashlib.sha256()
    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "loss_log.jsonl", "w")
    result = TrainResult(model)
    try:
        for it in range(config.iterations):
            idx = rng.integers(0, len(images), config.batch_size)
            hasher.update(idx.astype("<i8").tobytes())
            q, lr = config.quantile(it), config.lr_at(it)
            rep = train_step(_take(enc, idx), model, opt, q, noise_rng, lr, it)
            rec = {"iteration": it, "loss": rep.total, "masked_fraction": rep.masked_fraction,
                   "lr": lr}
            if it % config.log_every == 0 or it == config.iterations - 1:
                result.history.append(rec)
                if log_fh is not None:
                    log_fh.write(json.dumps(rec) + "\n")
                if progress:
                    log.info("iter %d loss %.5f q %.3f", it, rep.total, q)
            if (out_dir is not None and config.checkpoint_every
                    and (it + 1) % config.checkpoint_every == 0
                    and it + 1 < config.iterations):
                path = out_dir / f"checkpoint_{it + 1:06d}.bin"
                save_checkpoint(path, model, {"iteration": it + 1})
                result.checkpoints.append(str(path))
    finally:
        if log_fh is not None:
            log_fh.close()
    result.batch_hash = hasher.hexdigest()
    if out_dir is not None:
        path = out_dir / "checkpoint.bin"
        save_checkpoint(path, model, {"iteration": config.iterations,
                                      "batch_hash": result.batch_hash,
                                      "train": asdict(config)})
        result.checkpoints.append(str(path))
    return result
