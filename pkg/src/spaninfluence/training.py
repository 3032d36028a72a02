"""Deterministic mini-batch training, checkpoint files and one-step variants.

Checkpoint file layout (all integers little-endian)::

    8 bytes   magic  b"SPINCKPT"
    2 bytes   format version (uint16, currently 1)
    4 bytes   header length N (uint32)
    N bytes   UTF-8 JSON header: config_hash, step, kind, epoch, dim,
              params_sha256, provenance
    dim * 8   parameters as little-endian float64
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import jax
import jax.numpy as jnp
import numpy as np

from .data import Dataset
from .model import Instance, ModelConfig, TextClassifier
from .seeding import substream

log = logging.getLogger(__name__)

MAGIC = b"SPINCKPT"
CKPT_VERSION = 1
KINDS = ("epoch", "final", "delta_variant")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; ``checkpoint`` is the last finite state."""

    def __init__(self, message: str, checkpoint: "Checkpoint | None", history: list):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.history = history


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 30
    weight_decay: float = 0.01
    seed: int = 0
    checkpoint_stride: int = 1
    keep_checkpoints: int = 3
    optimizer: str = "adamw"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.max_epochs < 1 or self.checkpoint_stride < 1:
            raise ValueError("max_epochs and checkpoint_stride must be at least 1")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def config_hash(*parts) -> str:
    payload = json.dumps([_plain(p) for p in parts], sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return dataclasses.asdict(obj)
    return obj


@dataclass(frozen=True)
class Checkpoint:
    params: np.ndarray = field(repr=False)
    step: int
    kind: str
    epoch: int | None = None
    config_hash: str = ""
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown checkpoint kind {self.kind!r}")
        p = np.asarray(self.params, dtype=np.float64)
        if p.ndim != 1 or not np.all(np.isfinite(p)):
            raise ValueError("checkpoint parameters must be a finite flat vector")
        p.setflags(write=False)
        object.__setattr__(self, "params", p)

    @property
    def params_hash(self) -> str:
        return hashlib.sha256(self.params.astype("<f8").tobytes()).hexdigest()

    def header(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "step": self.step,
            "kind": self.kind,
            "epoch": self.epoch,
            "dim": int(self.params.size),
            "params_sha256": self.params_hash,
            "provenance": self.provenance,
        }

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        return MAGIC + struct.pack("<HI", CKPT_VERSION, len(head)) + head + self.params.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if blob[:8] != MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        version, n = struct.unpack("<HI", blob[8:14])
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        head = json.loads(blob[14:14 + n].decode("utf-8"))
        params = np.frombuffer(blob[14 + n:], dtype="<f8").astype(np.float64)
        if params.size != head["dim"]:
            raise ValueError(f"checkpoint payload has {params.size} values, header says {head['dim']}")
        ckpt = cls(params, head["step"], head["kind"], head["epoch"], head["config_hash"], head["provenance"])
        if ckpt.params_hash != head["params_sha256"]:
            raise ValueError("checkpoint payload hash mismatch")
        return ckpt

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass
class TrainResult:
    final: Checkpoint
    epochs: list[Checkpoint]
    history: list[dict]
    dev_accuracy: float


def build_model(dataset: Dataset, embed_dim: int = 32, hidden_dim: int = 64, seed: int = 0) -> TextClassifier:
    cfg = ModelConfig(len(dataset.vocab), embed_dim, hidden_dim, dataset.num_classes, seed)
    return TextClassifier(cfg, dataset.vocab)


def _pad_length(model: TextClassifier, instances: Sequence[Instance]) -> int:
    n = max(len(model.input_ids(z)) for z in instances)
    return max(8, -(-n // 8) * 8)


_steps: dict = {}


def _update_fn(model: TextClassifier, cfg: TrainConfig):
    key = (model, cfg.optimizer, cfg.beta1, cfg.beta2, cfg.eps)
    if key in _steps:
        return _steps[key]

    def batch_loss(theta, ids, labels):
        return jnp.mean(jax.vmap(model.ce_loss_fn, in_axes=(None, 0))(theta, (ids, labels)))

    def step(theta, m, v, t, ids, labels, lr, wd):
        loss, g = jax.value_and_grad(batch_loss)(theta, ids, labels)
        if cfg.optimizer == "sgd":
            return theta - lr * (g + wd * theta), m, v, loss
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        mhat = m / (1 - cfg.beta1 ** t)
        vhat = v / (1 - cfg.beta2 ** t)
        theta = theta - lr * (mhat / (jnp.sqrt(vhat) + cfg.eps) + wd * theta)
        return theta, m, v, loss

    fn = jax.jit(step)
    _steps[key] = fn
    return fn


def train(
    cfg: TrainConfig,
    data: Dataset,
    model: TextClassifier,
    *,
    init: np.ndarray | None = None,
    train_instances: Sequence[Instance] | None = None,
) -> TrainResult:
    """Train with dev-set model selection.

    Returns the dev-best parameters as the final checkpoint plus the last
    ``keep_checkpoints`` epoch checkpoints.
    """
    train_set = list(data.train if train_instances is None else train_instances)
    if not train_set:
        raise ValueError("empty training split")
    if not data.dev:
        raise ValueError("model selection needs a non-empty dev split")
    chash = config_hash(model.config, cfg)
    L = _pad_length(model, data.all())
    ids, labels = model.examples(train_set, L)
    theta = jnp.asarray(model.init_params() if init is None else init)
    m = jnp.zeros_like(theta)
    v = jnp.zeros_like(theta)
    update = _update_fn(model, cfg)
    lr, wd = jnp.float64(cfg.learning_rate), jnp.float64(cfg.weight_decay)

    history: list[dict] = []
    epochs: list[Checkpoint] = []
    best: tuple[float, float] | None = None
    final: Checkpoint | None = None
    last_good = Checkpoint(np.asarray(theta), 0, "epoch", 0, chash)
    step = 0
    n = len(train_set)
    for epoch in range(1, cfg.max_epochs + 1):
        order = substream(cfg.seed, "train", epoch).permutation(n)
        losses = []
        for a in range(0, n, cfg.batch_size):
            idx = order[a:a + cfg.batch_size]
            step += 1
            theta, m, v, loss = update(theta, m, v, jnp.float64(step), ids[idx], labels[idx], lr, wd)
            loss = float(loss)
            if not np.isfinite(loss) or not bool(jnp.all(jnp.isfinite(theta))):
                raise DivergenceError(f"non-finite training loss at step {step} (epoch {epoch})", last_good, history)
            losses.append(loss)
        params = np.asarray(theta)
        dev_acc = model.accuracy(params, data.dev)
        dev_loss = model.mean_ce(params, data.dev)
        record = {"epoch": epoch, "step": step, "train_loss": float(np.mean(losses)), "dev_acc": dev_acc, "dev_loss": dev_loss}
        history.append(record)
        log.info("epoch %d step %d train_loss %.4f dev_acc %.4f dev_loss %.4f", epoch, step, record["train_loss"], dev_acc, dev_loss)
        last_good = Checkpoint(params, step, "epoch", epoch, chash, {"dev_acc": dev_acc})
        if epoch % cfg.checkpoint_stride == 0 or epoch == cfg.max_epochs:
            epochs.append(last_good)
            epochs = epochs[-cfg.keep_checkpoints:]
        key = (dev_acc, -dev_loss)
        if best is None or key > best:
            best = key
            final = Checkpoint(params, step, "final", epoch, chash, {"dev_acc": dev_acc, "dev_loss": dev_loss})
    assert final is not None
    return TrainResult(final, epochs, history, final.provenance["dev_acc"])


def make_delta_variants(
    model: TextClassifier,
    checkpoint: Checkpoint,
    train_instances: Sequence[Instance],
    *,
    count: int = 3,
    eta: float = 1e-4,
    batch_size: int = 32,
    seed: int = 0,
) -> list[Checkpoint]:
    """One plain SGD step from ``checkpoint`` on each of ``count`` random mini-batches."""
    if checkpoint.kind != "final":
        raise ValueError(f"delta variants start from the final checkpoint, got kind {checkpoint.kind!r}")
    if not eta >= 0:
        raise ValueError("eta must be non-negative")
    if count < 1:
        raise ValueError("count must be at least 1")
    from . import autodiff

    train_instances = list(train_instances)
    bs = min(batch_size, len(train_instances))
    rng = substream(seed, "variants")
    L = _pad_length(model, train_instances)
    used: set[tuple[str, ...]] = set()
    out = []
    for i in range(count):
        while True:
            idx = np.sort(rng.choice(len(train_instances), size=bs, replace=False))
            ids = tuple(train_instances[k].id for k in idx)
            if ids not in used or len(used) >= _n_batches(len(train_instances), bs):
                break
        used.add(ids)
        batch = [train_instances[k] for k in idx]
        g = autodiff.mean_grad(model.ce_loss_fn, checkpoint.params, model.examples(batch, L))
        delta = -eta * g
        params = checkpoint.params + delta
        out.append(Checkpoint(
            params,
            checkpoint.step,
            "delta_variant",
            checkpoint.epoch,
            checkpoint.config_hash,
            {
                "seed": seed,
                "variant": i,
                "batch_ids": list(ids),
                "eta": eta,
                "grad_norm": float(np.linalg.norm(g)),
                "delta_norm": float(np.linalg.norm(params - checkpoint.params)),
            },
        ))
    return out


def _n_batches(n: int, k: int) -> int:
    from math import comb

    return comb(n, k)
