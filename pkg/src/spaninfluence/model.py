"""Token vocabulary, instances and spans, and the small text classifier.

The classifier reads ``[CLS] aspect [SEP] text``, looks every id up in an
embedding table, mean-pools the non-pad positions after the start slot and
concatenates the pooled vector with the start-slot embedding.  A two-layer
tanh MLP and a linear head follow.  All parameters live in one flat float64
vector laid out as ``[embeddings | W1 b1 W2 b2 W3 b3]`` so that the trailing
"head" block can be used on its own for influence computations.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import jax
import jax.numpy as jnp
import numpy as np

from . import autodiff  # noqa: F401  (enables float64 before any array is built)

PAD, MASK, CLS, UNK, SEP = "[PAD]", "[MASK]", "[CLS]", "[UNK]", "[SEP]"
RESERVED = (PAD, MASK, CLS, UNK, SEP)
PAD_ID, MASK_ID, CLS_ID, UNK_ID, SEP_ID = range(len(RESERVED))

VOCAB_FORMAT = "spaninfluence-vocab/1"
MODEL_FORMAT = "spaninfluence-model/1"

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def tokenize(text: str) -> list[tuple[str, int, int]]:
    """Lowercased word/punctuation tokens with their character offsets."""
    return [(m.group().lower(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


class Vocab:
    """Token <-> id map with the five reserved ids fixed at 0..4."""

    def __init__(self, tokens: Iterable[str] = ()):
        self._itos: list[str] = list(RESERVED)
        self._stoi: dict[str, int] = {t: i for i, t in enumerate(self._itos)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        idx = self._stoi.get(token)
        if idx is None:
            idx = len(self._itos)
            self._itos.append(token)
            self._stoi[token] = idx
        return idx

    def __len__(self) -> int:
        return len(self._itos)

    def __contains__(self, token: str) -> bool:
        return token in self._stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self._itos == other._itos

    def id(self, token: str) -> int:
        return self._stoi.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self._itos[idx]

    def encode(self, words: Iterable[str]) -> tuple[int, ...]:
        return tuple(self.id(w) for w in words)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self._itos[i] for i in ids]

    @property
    def tokens(self) -> list[str]:
        return list(self._itos)

    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(self._itos).encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {"format": VOCAB_FORMAT, "tokens": self._itos}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Vocab":
        if d.get("format") != VOCAB_FORMAT:
            raise ValueError(f"unsupported vocab format {d.get('format')!r}")
        toks = list(d["tokens"])
        if tuple(toks[: len(RESERVED)]) != RESERVED:
            raise ValueError("reserved tokens missing or reordered")
        return cls(toks[len(RESERVED):])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), ensure_ascii=False, indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True, order=True)
class Span:
    """Half-open token interval ``[start, end)`` over an instance's text tokens."""

    start: int
    end: int

    def __post_init__(self):
        if not (0 <= self.start <= self.end):
            raise ValueError(f"invalid span [{self.start}, {self.end})")

    def __len__(self) -> int:
        return self.end - self.start

    @property
    def empty(self) -> bool:
        return self.start == self.end

    def fits(self, length: int) -> bool:
        return self.end <= length

    def as_list(self) -> list[int]:
        return [self.start, self.end]


@dataclass(frozen=True)
class Instance:
    id: str
    tokens: tuple[int, ...]
    aspect: tuple[int, ...]
    label: int
    gold_span: Span | None = None
    text: str = ""
    offsets: tuple[tuple[int, int], ...] = ()
    meta: Mapping = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if len(self.tokens) == 0:
            raise ValueError(f"instance {self.id!r} has no tokens")
        if self.label < 0:
            raise ValueError(f"instance {self.id!r} has negative label")
        if self.gold_span is not None and not self.gold_span.fits(len(self.tokens)):
            raise ValueError(f"instance {self.id!r}: gold span {self.gold_span} exceeds {len(self.tokens)} tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    def replace(self, **changes) -> "Instance":
        return dataclasses.replace(self, **changes)


class SpanError(ValueError):
    pass


def check_span(z: Instance, s: Span) -> None:
    if not s.fits(len(z.tokens)):
        raise SpanError(f"span [{s.start}, {s.end}) out of bounds for instance {z.id!r} with {len(z.tokens)} tokens")


def mask_span(z: Instance, s: Span) -> Instance:
    """Copy of ``z`` with the tokens in ``s`` replaced by [MASK]."""
    check_span(z, s)
    if s.empty:
        return z
    toks = z.tokens[: s.start] + (MASK_ID,) * len(s) + z.tokens[s.end:]
    return z.replace(tokens=toks)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int = 32
    hidden_dim: int = 64
    num_classes: int = 2
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "embed_dim", "hidden_dim", "num_classes"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.vocab_size < len(RESERVED):
            raise ValueError("vocab_size smaller than the reserved token set")


def _round_up(n: int, k: int = 8) -> int:
    return max(k, int(math.ceil(n / k)) * k)


class TextClassifier:
    """Mean-pooled embedding classifier over a flat parameter vector."""

    def __init__(self, config: ModelConfig, vocab: Vocab | None = None):
        if vocab is not None and len(vocab) != config.vocab_size:
            raise ValueError(f"vocab has {len(vocab)} entries, config says {config.vocab_size}")
        self.config = config
        self.vocab = vocab
        V, D, H, C = config.vocab_size, config.embed_dim, config.hidden_dim, config.num_classes
        self.layout = [
            ("embedding", (V, D)),
            ("W1", (2 * D, H)),
            ("b1", (H,)),
            ("W2", (H, H)),
            ("b2", (H,)),
            ("W3", (H, C)),
            ("b3", (C,)),
        ]
        self._slices = {}
        off = 0
        for name, shape in self.layout:
            size = int(np.prod(shape))
            self._slices[name] = (off, off + size, shape)
            off += size
        self.dim = off
        self.head_start = self._slices["W1"][0]
        self.head_dim = self.dim - self.head_start
        self.feature_dim = 2 * D

        # jit-stable per-example losses; examples are (ids, label) or (features, label)
        self.ce_loss_fn = self._ce_loss
        self.neglogit_loss_fn = self._neglogit_loss
        self.head_ce_loss_fn = self._head_ce_loss
        self.head_neglogit_loss_fn = self._head_neglogit_loss
        self._batch_logits = jax.jit(jax.vmap(self._logits, in_axes=(None, 0)))
        self._batch_hidden = jax.jit(jax.vmap(self._hidden, in_axes=(None, 0)))
        self._batch_features = jax.jit(jax.vmap(self._features, in_axes=(None, 0)))

    # ----- parameters -------------------------------------------------------------
    def init_params(self, seed: int | None = None) -> np.ndarray:
        rng = np.random.default_rng(self.config.seed if seed is None else seed)
        parts = []
        for name, shape in self.layout:
            if name == "embedding":
                parts.append(rng.normal(0.0, 0.1, size=shape))
            elif name.startswith("W"):
                limit = math.sqrt(6.0 / (shape[0] + shape[1]))
                parts.append(rng.uniform(-limit, limit, size=shape))
            else:
                parts.append(np.zeros(shape))
        return np.concatenate([p.ravel() for p in parts])

    def unflatten(self, flat) -> dict:
        out = {}
        for name, (a, b, shape) in self._slices.items():
            out[name] = flat[a:b].reshape(shape)
        return out

    def _head_parts(self, head):
        out = {}
        for name, (a, b, shape) in self._slices.items():
            if name == "embedding":
                continue
            a, b = a - self.head_start, b - self.head_start
            out[name] = head[a:b].reshape(shape)
        return out

    # ----- pure forward functions (traced by jax) ----------------------------------
    def _features(self, flat, ids):
        V, D = self.config.vocab_size, self.config.embed_dim
        E = flat[: V * D].reshape(V, D)
        emb = E[ids]
        keep = (ids != PAD_ID) & (jnp.arange(ids.shape[0]) > 0)
        keep = keep.astype(emb.dtype)
        pooled = (emb * keep[:, None]).sum(axis=0) / jnp.maximum(keep.sum(), 1.0)
        return jnp.concatenate([pooled, emb[0]])

    def _head_forward(self, head, x):
        p = self._head_parts(head)
        h1 = jnp.tanh(x @ p["W1"] + p["b1"])
        h2 = jnp.tanh(h1 @ p["W2"] + p["b2"])
        return h2 @ p["W3"] + p["b3"], h2

    def _logits(self, flat, ids):
        return self._head_forward(flat[self.head_start:], self._features(flat, ids))[0]

    def _hidden(self, flat, ids):
        return self._head_forward(flat[self.head_start:], self._features(flat, ids))[1]

    def _ce_loss(self, flat, example):
        ids, label = example
        return -jax.nn.log_softmax(self._logits(flat, ids))[label]

    def _neglogit_loss(self, flat, example):
        ids, label = example
        return -self._logits(flat, ids)[label]

    def _head_ce_loss(self, head, example):
        x, label = example
        return -jax.nn.log_softmax(self._head_forward(head, x)[0])[label]

    def _head_neglogit_loss(self, head, example):
        x, label = example
        return -self._head_forward(head, x)[0][label]

    # ----- encoding ----------------------------------------------------------------
    def input_ids(self, z: Instance) -> list[int]:
        return [CLS_ID, *z.aspect, SEP_ID, *z.tokens]

    def text_offset(self, z: Instance) -> int:
        """Position of the first text token inside the model input."""
        return len(z.aspect) + 2

    def encode(self, instances: Sequence[Instance], length: int | None = None) -> np.ndarray:
        seqs = [self.input_ids(z) for z in instances]
        L = length or _round_up(max(len(s) for s in seqs))
        out = np.full((len(seqs), L), PAD_ID, dtype=np.int32)
        V = self.config.vocab_size
        for row, s in enumerate(seqs):
            if len(s) > L:
                raise ValueError(f"instance {instances[row].id!r} longer than pad length {L}")
            if max(s) >= V:
                raise ValueError(f"instance {instances[row].id!r} uses token ids outside the vocabulary ({V})")
            out[row, : len(s)] = s
        return out

    def labels(self, instances: Sequence[Instance]) -> np.ndarray:
        C = self.config.num_classes
        for z in instances:
            if z.label >= C:
                raise ValueError(f"instance {z.id!r} label {z.label} out of range for {C} classes")
        return np.array([z.label for z in instances], dtype=np.int32)

    def examples(self, instances: Sequence[Instance], length: int | None = None):
        """Stacked ``(ids, labels)`` batch for the full-parameter losses."""
        return self.encode(instances, length), self.labels(instances)

    def features(self, theta, instances: Sequence[Instance], length: int | None = None) -> np.ndarray:
        return np.asarray(self._batch_features(jnp.asarray(theta), self.encode(instances, length)))

    # ----- numpy-facing API ----------------------------------------------------------
    def batch_logits(self, theta, instances: Sequence[Instance], length: int | None = None) -> np.ndarray:
        self._check_theta(theta)
        out = np.asarray(self._batch_logits(jnp.asarray(theta), self.encode(instances, length)))
        if not np.all(np.isfinite(out)):
            raise autodiff.NonFiniteError("non-finite logits")
        return out

    def logits(self, theta, z: Instance) -> np.ndarray:
        return self.batch_logits(theta, [z])[0]

    def ce_loss(self, theta, z: Instance) -> float:
        lg = self.logits(theta, z)
        self.labels([z])
        m = lg.max()
        return float(m + np.log(np.exp(lg - m).sum()) - lg[z.label])

    def neglogit_loss(self, theta, z: Instance) -> float:
        self.labels([z])
        return float(-self.logits(theta, z)[z.label])

    def predict(self, theta, instances: Sequence[Instance]) -> np.ndarray:
        return self.batch_logits(theta, instances).argmax(axis=1)

    def accuracy(self, theta, instances: Sequence[Instance]) -> float:
        if not instances:
            return float("nan")
        return float(np.mean(self.predict(theta, instances) == self.labels(instances)))

    def mean_ce(self, theta, instances: Sequence[Instance]) -> float:
        lg = self.batch_logits(theta, instances)
        y = self.labels(instances)
        m = lg.max(axis=1, keepdims=True)
        lse = (m + np.log(np.exp(lg - m).sum(axis=1, keepdims=True)))[:, 0]
        return float(np.mean(lse - lg[np.arange(len(y)), y]))

    def importance(self, theta, z: Instance, s: Span) -> float:
        """Drop in the true-class logit when ``s`` is masked."""
        masked = mask_span(z, s)
        lg = self.batch_logits(theta, [z, masked])
        y = self.labels([z])[0]
        return float(lg[0, y] - lg[1, y])

    def batch_hidden(self, theta, instances: Sequence[Instance], length: int | None = None) -> np.ndarray:
        self._check_theta(theta)
        return np.asarray(self._batch_hidden(jnp.asarray(theta), self.encode(instances, length)))

    def batch_seq_embeddings(self, theta, instances: Sequence[Instance], length: int | None = None) -> np.ndarray:
        self._check_theta(theta)
        return self.features(theta, instances, length)[:, : self.config.embed_dim]

    def seq_embedding(self, theta, z: Instance) -> np.ndarray:
        """Pooled token representation that the start slot carries into the head (``embed_dim`` wide)."""
        return self.batch_seq_embeddings(theta, [z])[0]

    def span_embedding(self, theta, z: Instance, s: Span) -> np.ndarray:
        e = self.batch_seq_embeddings(theta, [z, mask_span(z, s)])
        return e[0] - e[1]

    def batch_span_embeddings(self, theta, instances: Sequence[Instance], spans: Sequence[Span]) -> np.ndarray:
        masked = [mask_span(z, s) for z, s in zip(instances, spans)]
        L = _round_up(max(len(self.input_ids(z)) for z in instances))
        return self.batch_seq_embeddings(theta, instances, L) - self.batch_seq_embeddings(theta, masked, L)

    def _check_theta(self, theta) -> None:
        if np.shape(theta) != (self.dim,):
            raise ValueError(f"parameter vector has shape {np.shape(theta)}, model expects ({self.dim},)")

    # ----- persistence --------------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "config": dataclasses.asdict(self.config),
            "vocab": self.vocab.to_dict() if self.vocab is not None else None,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TextClassifier":
        if d.get("format") != MODEL_FORMAT:
            raise ValueError(f"unsupported model format {d.get('format')!r}")
        vocab = Vocab.from_dict(d["vocab"]) if d.get("vocab") else None
        return cls(ModelConfig(**d["config"]), vocab)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), ensure_ascii=False, indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TextClassifier":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def softmax(logits) -> np.ndarray:
    lg = np.asarray(logits, dtype=np.float64)
    e = np.exp(lg - lg.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)
