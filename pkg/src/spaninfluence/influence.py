"""Influence estimators over training instances and training spans.

Seven scorers share one engine (:class:`Explainer`):

==================  ====================================================================
``if``              ``-<g(z'), H^-1 g(z)>``
``if_plus``         ``<g(z'), H^-1 (g(z) - g(z_-ij))>``
``if_plus_plus``    ``<g(z'_-kl) - g(z'), H^-1 (g(z) - g(z_-ij))>``
``tracin_checkpoint`` ``sum_i w_i <g_i(z), g_i(z')>`` over saved epoch checkpoints
``tracinf``         same sum over one-step variants of the final model
``tracin_plus``     ``sum_i w_i <g_i(z'), g_i(z) - g_i(z_-ij)>``
``tracin_plus_plus`` ``sum_i w_i <g_i(z'_-kl) - g_i(z'), g_i(z) - g_i(z_-ij)>``
==================  ====================================================================

``g`` is the gradient of the per-instance loss, ``z_-ij`` masks the span
``[i, j)``.  Raw formula values are kept on every entry; rankings sort by a
"support" score which is the raw value times :data:`SUPPORT_SIGN` so that the
top of every ranking holds the explanations that back the prediction.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import jax
import jax.numpy as jnp
import numpy as np

from . import autodiff
from .model import Instance, Span, TextClassifier, check_span, mask_span
from .seeding import derive_seed, substream
from .training import Checkpoint, make_delta_variants

log = logging.getLogger(__name__)

METHODS = ("if", "if_plus", "if_plus_plus", "tracinf", "tracin_plus", "tracin_plus_plus", "tracin_checkpoint")
SIX_METHODS = METHODS[:6]
IF_FAMILY = frozenset({"if", "if_plus", "if_plus_plus"})
NEEDS_TRAIN_SPAN = frozenset({"if_plus", "if_plus_plus", "tracin_plus", "tracin_plus_plus"})
NEEDS_TEST_SPAN = frozenset({"if_plus_plus", "tracin_plus_plus"})

# Raw value -> support score.  IF carries the leading minus of the up-weighting
# formula.  The two ``++`` forms difference the test side as (masked - unmasked)
# but the train side as (unmasked - masked), so their raw value is the negative
# of the alignment between the two span-importance gradients.
SUPPORT_SIGN = {
    "if": -1.0,
    "if_plus": 1.0,
    "if_plus_plus": -1.0,
    "tracinf": 1.0,
    "tracin_plus": 1.0,
    "tracin_plus_plus": -1.0,
    "tracin_checkpoint": 1.0,
}


class InfluenceError(RuntimeError):
    pass


class VHPExplosion(InfluenceError):
    """The LiSSA recursion norm blew past the explosion threshold."""

    def __init__(self, step: int, norm: float):
        super().__init__(f"VHP explosion at LiSSA step {step}: |r| = {norm:.3g}")
        self.step = step
        self.norm = norm


class MissingSpanError(InfluenceError):
    def __init__(self, method: str, ids: Sequence[str], side: str):
        shown = ", ".join(list(ids)[:10]) + (" ..." if len(ids) > 10 else "")
        super().__init__(f"method {method!r} needs a {side} span; missing for: {shown}")
        self.method = method
        self.ids = list(ids)
        self.side = side


@dataclass(frozen=True)
class InfluenceConfig:
    method: str = "tracin_plus_plus"
    ihvp: str = "lissa"
    lissa_depth: int = 1000
    lissa_damp: float = 0.99
    lissa_scale: float = 0.004
    grad_clip: float = 100.0
    lissa_tol: float = 1e-3
    lissa_window: int = 50
    explosion_threshold: float = 1e6
    exact_damping: float = 1e-3
    hessian_reduction: str = "mean"
    variant_count: int = 3
    variant_lr: float = 1e-4
    variant_batch_size: int = 32
    checkpoint_weights: tuple[float, ...] | None = None
    loss: str = "neglogit"
    include_embeddings: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.ihvp not in ("lissa", "exact"):
            raise ValueError(f"unknown ihvp solver {self.ihvp!r}")
        if self.lissa_depth < 1:
            raise ValueError("lissa_depth must be at least 1")
        if not (0 < self.lissa_damp <= 1):
            raise ValueError("lissa_damp must lie in (0, 1]")
        if not self.lissa_scale > 0:
            raise ValueError("lissa_scale must be positive")
        if not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive")
        if self.exact_damping < 0:
            raise ValueError("exact_damping must be non-negative")
        if self.hessian_reduction not in ("mean", "sum"):
            raise ValueError("hessian_reduction must be 'mean' or 'sum'")
        if self.variant_count < 1:
            raise ValueError("variant_count must be at least 1")
        if self.loss not in ("ce", "neglogit"):
            raise ValueError("loss must be 'ce' or 'neglogit'")
        if self.checkpoint_weights is not None:
            object.__setattr__(self, "checkpoint_weights", tuple(float(w) for w in self.checkpoint_weights))

    @property
    def lissa_ridge(self) -> float:
        """Ridge implied by the LiSSA fixed point: ``(1 - damp) / scale``."""
        return (1.0 - self.lissa_damp) / self.lissa_scale

    def replace(self, **changes) -> "InfluenceConfig":
        return dataclasses.replace(self, **changes)

    def solver_hash(self) -> str:
        keys = ("ihvp", "lissa_depth", "lissa_damp", "lissa_scale", "grad_clip", "lissa_tol", "lissa_window",
                "exact_damping", "hessian_reduction", "loss", "include_embeddings", "seed")
        blob = json.dumps({k: getattr(self, k) for k in keys}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class ScoredExplanation:
    train_id: str
    train_span: Span | None
    score: float
    raw: float
    method: str

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise InfluenceError(f"non-finite score for train instance {self.train_id!r}")


@dataclass
class Ranking:
    test_id: str
    test_span: Span | None
    method: str
    entries: list[ScoredExplanation]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.entries = sorted(self.entries, key=lambda e: (-e.score, e.train_id))
        ids = [e.train_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise InfluenceError(f"ranking for {self.test_id!r} contains duplicate train ids")

    def __len__(self) -> int:
        return len(self.entries)

    def top(self, k: int) -> list[ScoredExplanation]:
        return self.entries[:k]

    def ids(self) -> list[str]:
        return [e.train_id for e in self.entries]

    def scores(self) -> dict[str, float]:
        return {e.train_id: e.score for e in self.entries}

    def to_rows(self) -> list[dict]:
        rows = []
        for rank, e in enumerate(self.entries, 1):
            rows.append({
                "test_id": self.test_id,
                "rank": rank,
                "train_id": e.train_id,
                "span_start": "" if e.train_span is None else e.train_span.start,
                "span_end": "" if e.train_span is None else e.train_span.end,
                "score": f"{e.score:.6g}",
                "method": e.method,
            })
        return rows

    def to_dict(self) -> dict:
        return {
            "test_id": self.test_id,
            "test_span": None if self.test_span is None else self.test_span.as_list(),
            "method": self.method,
            "meta": self.meta,
            "entries": [
                {
                    "train_id": e.train_id,
                    "span": None if e.train_span is None else e.train_span.as_list(),
                    "score": e.score,
                    "raw": e.raw,
                }
                for e in self.entries
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Ranking":
        method = d["method"]
        entries = [
            ScoredExplanation(e["train_id"], None if e.get("span") is None else Span(*e["span"]), float(e["score"]),
                              float(e.get("raw", e["score"])), method)
            for e in d["entries"]
        ]
        span = None if d.get("test_span") is None else Span(*d["test_span"])
        return cls(d["test_id"], span, method, entries, dict(d.get("meta") or {}))


# ---------------------------------------------------------------------------------
# parameter spaces


class ParamSpace:
    """The parameters influence is taken with respect to.

    ``head`` (default) covers the MLP and output layer; the embedding table is
    held fixed, so each instance reduces to its pooled feature vector.
    ``full`` differentiates through every parameter including embeddings.
    """

    def __init__(self, model: TextClassifier, include_embeddings: bool = False, pad_length: int | None = None):
        self.model = model
        self.full = include_embeddings
        self.pad_length = pad_length
        self.dim = model.dim if self.full else model.head_dim
        if self.full:
            self.losses = {"ce": model.ce_loss_fn, "neglogit": model.neglogit_loss_fn}
        else:
            self.losses = {"ce": model.head_ce_loss_fn, "neglogit": model.head_neglogit_loss_fn}

    def params(self, theta) -> np.ndarray:
        theta = np.asarray(theta)
        return theta if self.full else theta[self.model.head_start:]

    def examples(self, theta, instances: Sequence[Instance]):
        L = self.pad_length
        if self.full:
            return self.model.examples(instances, L)
        return self.model.features(theta, instances, L), self.model.labels(instances)

    def grads(self, theta, instances: Sequence[Instance], loss: str) -> np.ndarray:
        if not instances:
            return np.zeros((0, self.dim))
        ex = self.examples(theta, instances)
        return autodiff.batch_grads(self.losses[loss], self.params(theta), ex, ids=[z.id for z in instances])


# ---------------------------------------------------------------------------------
# inverse Hessian-vector products

_lissa_blocks: dict = {}


def _lissa_block(loss_fn: Callable):
    fn = _lissa_blocks.get(loss_fn)
    if fn is not None:
        return fn

    def block(params, R, V, active, examples, order, damp, scale, clip, mult):
        def body(R, idx):
            ex = jax.tree_util.tree_map(lambda a: a[idx], examples)
            _, lin = jax.linearize(lambda p: jax.grad(loss_fn)(p, ex), params)
            HR = jax.vmap(lin)(R) * mult
            norms = jnp.linalg.norm(HR, axis=1, keepdims=True)
            HR = HR * jnp.minimum(1.0, clip / jnp.maximum(norms, 1e-300))
            Rn = V + damp * R - scale * HR
            Rn = jnp.where(active[:, None], Rn, R)
            return Rn, jnp.max(jnp.linalg.norm(Rn, axis=1))

        return jax.lax.scan(body, R, order)

    fn = jax.jit(block)
    _lissa_blocks[loss_fn] = fn
    return fn


def lissa(
    loss_fn: Callable,
    params,
    V,
    examples,
    *,
    depth: int = 1000,
    damp: float = 0.99,
    scale: float = 0.004,
    clip: float = 100.0,
    tol: float = 1e-3,
    window: int = 50,
    explosion_threshold: float = 1e6,
    reduction: str = "mean",
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, dict]:
    """Stochastic inverse-HVP for each row of ``V``.

    Runs ``r <- v + damp * r - scale * clip(H_t r)`` with ``H_t`` the Hessian of
    one shuffled training example per step, and returns ``scale * r``, an
    estimate of ``(H + (1 - damp) / scale * I)^-1 v``.  A row stops updating
    once its norm changes by less than ``tol`` (relative) over ``window``
    steps.  Each per-step Hessian-vector product is rescaled to norm at most
    ``clip``; while the clip is active the fixed point is biased towards a
    smaller curvature.
    """
    V = np.atleast_2d(np.asarray(V, dtype=np.float64))
    params = jnp.asarray(params)
    n = len(jax.tree_util.tree_leaves(examples)[0])
    rng = rng if rng is not None else np.random.default_rng(0)
    order = np.concatenate([rng.permutation(n) for _ in range(-(-depth // n))])[:depth].astype(np.int32)
    mult = float(n) if reduction == "sum" else 1.0
    block = _lissa_block(loss_fn)

    zero_rows = np.linalg.norm(V, axis=1) == 0
    R = jnp.asarray(V)
    Vj = jnp.asarray(V)
    active = ~zero_rows
    prev = np.linalg.norm(V, axis=1)
    steps_taken = np.zeros(len(V), dtype=int)
    done = 0
    while done < depth and active.any():
        k = min(window, depth - done)
        R, maxnorm = block(params, R, Vj, jnp.asarray(active), examples, jnp.asarray(order[done:done + k]),
                           damp, scale, clip, mult)
        maxnorm = np.asarray(maxnorm)
        if not np.all(np.isfinite(maxnorm)) or (maxnorm > explosion_threshold).any():
            bad = np.flatnonzero(~np.isfinite(maxnorm) | (maxnorm > explosion_threshold))[0]
            raise VHPExplosion(done + int(bad) + 1, float(maxnorm[bad]))
        steps_taken[active] += k
        done += k
        now = np.linalg.norm(np.asarray(R), axis=1)
        converged = np.abs(now - prev) < tol * np.maximum(prev, 1e-300)
        if k == window:
            active = active & ~converged
        prev = now
    X = scale * np.asarray(R)
    X[zero_rows] = 0.0
    return X, {"steps": steps_taken.tolist(), "depth": depth}


def _pairwise(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """``A @ B.T`` with a fixed summation order per entry, so a score does not
    depend on batch composition and identical rows give identical scores."""
    return np.einsum("id,kd->ik", A, B)


class ExactInverse:
    """Dense ``(H + ridge I)^-1`` via a symmetric eigendecomposition."""

    def __init__(self, H: np.ndarray, ridge: float):
        H = 0.5 * (H + H.T)
        w, Q = np.linalg.eigh(H + ridge * np.eye(len(H)))
        if np.min(np.abs(w)) < 1e-12 * max(1.0, np.max(np.abs(w))):
            raise InfluenceError("damped Hessian is singular; increase exact_damping")
        self.w = w
        self.Q = Q
        self.ridge = ridge

    def solve(self, V) -> np.ndarray:
        V = np.atleast_2d(V)
        return ((V @ self.Q) / self.w) @ self.Q.T


def ihvp(
    V,
    loss_fn: Callable,
    params,
    examples,
    cfg: InfluenceConfig,
    *,
    rng: np.random.Generator | None = None,
    hessian_loss_fn: Callable | None = None,
) -> np.ndarray:
    """Inverse-Hessian-vector products for the rows of ``V`` (one-off use).

    The Hessian is that of ``hessian_loss_fn`` (defaults to ``loss_fn``)
    averaged over ``examples``.
    """
    hl = hessian_loss_fn or loss_fn
    V = np.atleast_2d(np.asarray(V, dtype=np.float64))
    if cfg.ihvp == "exact":
        H = autodiff.exact_hessian(hl, params, examples, reduction=cfg.hessian_reduction)
        return ExactInverse(H, cfg.exact_damping).solve(V)
    X, _ = lissa(hl, params, V, examples, depth=cfg.lissa_depth, damp=cfg.lissa_damp, scale=cfg.lissa_scale,
                 clip=cfg.grad_clip, tol=cfg.lissa_tol, window=cfg.lissa_window,
                 explosion_threshold=cfg.explosion_threshold, reduction=cfg.hessian_reduction,
                 rng=rng if rng is not None else substream(cfg.seed, "lissa-shuffle"))
    return X


def if_matrix(
    loss_fn: Callable,
    params,
    train_examples,
    test_examples,
    cfg: InfluenceConfig = InfluenceConfig(ihvp="exact"),
    *,
    hessian_loss_fn: Callable | None = None,
) -> np.ndarray:
    """Raw IF values ``-<g(z'), H^-1 g(z)>`` for any per-example loss.

    Rows index test examples, columns training examples.  The Hessian is the
    mean over ``train_examples``.
    """
    G = autodiff.batch_grads(loss_fn, params, train_examples)
    T = autodiff.batch_grads(loss_fn, params, test_examples)
    S = ihvp(T, loss_fn, params, train_examples, cfg, hessian_loss_fn=hessian_loss_fn)
    return -_pairwise(S, G)


class IHVPCache:
    """Insert-or-get store for inverse-HVP vectors, optionally mirrored on disk."""

    def __init__(self, directory=None):
        self._mem: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()
        self.directory = Path(directory) if directory is not None else None
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
        self.hits = 0
        self.misses = 0

    @staticmethod
    def key(*parts) -> str:
        return hashlib.sha256("|".join(map(str, parts)).encode()).hexdigest()[:32]

    def get(self, key: str) -> np.ndarray | None:
        with self._lock:
            if key in self._mem:
                self.hits += 1
                return self._mem[key]
        if self.directory is not None:
            path = self.directory / f"{key}.npy"
            if path.exists():
                arr = np.load(path)
                with self._lock:
                    self._mem.setdefault(key, arr)
                    self.hits += 1
                    return self._mem[key]
        return None

    def put(self, key: str, value: np.ndarray) -> np.ndarray:
        value = np.asarray(value, dtype=np.float64)
        with self._lock:
            if key in self._mem:
                return self._mem[key]
            self._mem[key] = value
            self.misses += 1
        if self.directory is not None:
            tmp = self.directory / f"{key}.{threading.get_ident()}.tmp.npy"
            np.save(tmp, value)
            tmp.replace(self.directory / f"{key}.npy")
        return value

    def __len__(self) -> int:
        return len(self._mem)


# ---------------------------------------------------------------------------------
# the engine


def _pad_length(model: TextClassifier, instances: Iterable[Instance]) -> int:
    n = max(len(model.input_ids(z)) for z in instances)
    return max(8, -(-n // 8) * 8)


class Explainer:
    """Scores training instances (and their spans) against test instances.

    Holds the final model, the training set and the solver configuration, and
    caches everything reusable across test instances: training gradients per
    model, the exact Hessian factorization and test-side inverse-HVPs.
    """

    def __init__(
        self,
        model: TextClassifier,
        final: Checkpoint,
        train: Sequence[Instance],
        cfg: InfluenceConfig = InfluenceConfig(),
        *,
        epoch_checkpoints: Sequence[Checkpoint] = (),
        variants: Sequence[Checkpoint] | None = None,
        cache: IHVPCache | None = None,
        extra_instances: Iterable[Instance] = (),
    ):
        self.model = model
        self.final = final
        self.theta = np.asarray(final.params)
        self.train = list(train)
        if not self.train:
            raise InfluenceError("empty training set")
        self.cfg = cfg
        self.epoch_checkpoints = list(epoch_checkpoints)
        self._variants = list(variants) if variants is not None else None
        self.cache = cache if cache is not None else IHVPCache()
        pad = _pad_length(model, [*self.train, *extra_instances])
        self.space = ParamSpace(model, cfg.include_embeddings, pad)
        self.loss_fn = self.space.losses[cfg.loss]
        self.hessian_loss_fn = self.space.losses["ce"]
        self.grad_evals = 0
        self._lock = threading.Lock()
        self._init_lock = threading.Lock()
        self._train_grads: dict[tuple, np.ndarray] = {}
        self._exact: ExactInverse | None = None

    # ----- models ---------------------------------------------------------------------
    @property
    def variants(self) -> list[Checkpoint]:
        with self._init_lock:
            if self._variants is None:
                self._variants = make_delta_variants(
                    self.model, self.final, self.train, count=self.cfg.variant_count, eta=self.cfg.variant_lr,
                    batch_size=self.cfg.variant_batch_size, seed=self.cfg.seed)
        return self._variants

    def models_for(self, method: str) -> list[Checkpoint]:
        if method in IF_FAMILY:
            return [self.final]
        if method == "tracin_checkpoint":
            if not self.epoch_checkpoints:
                raise InfluenceError("tracin_checkpoint needs at least one epoch checkpoint")
            return self.epoch_checkpoints
        return self.variants

    def weights_for(self, models: Sequence[Checkpoint]) -> np.ndarray:
        w = self.cfg.checkpoint_weights
        if w is None:
            return np.ones(len(models))
        if len(w) != len(models):
            raise InfluenceError(f"{len(w)} checkpoint weights given for {len(models)} models")
        return np.asarray(w, dtype=np.float64)

    # ----- gradients ------------------------------------------------------------------
    def grad(self, theta, z: Instance) -> np.ndarray:
        """Gradient of the configured loss at ``theta`` for one instance."""
        with self._lock:
            self.grad_evals += 1
        ex = self.space.examples(theta, [z])
        ex = jax.tree_util.tree_map(lambda a: a[0], ex)
        return autodiff.grad(self.loss_fn, self.space.params(theta), ex, instance_id=z.id)

    def train_grads(self, ckpt: Checkpoint, masked: bool) -> np.ndarray:
        key = (ckpt.params_hash, masked, self.cfg.loss)
        with self._lock:
            G = self._train_grads.get(key)
        if G is not None:
            return G
        if masked:
            bad = [z.id for z in self.train if z.gold_span is None]
            if bad:
                raise MissingSpanError("span methods", bad, "train")
            inst = [mask_span(z, z.gold_span) for z in self.train]
        else:
            inst = self.train
        G = self.space.grads(ckpt.params, inst, self.cfg.loss)
        with self._lock:
            self._train_grads.setdefault(key, G)
        return G

    def _test_vectors(self, ckpt: Checkpoint, tests: Sequence[Instance], spans: Sequence[Span | None], kind: str) -> np.ndarray:
        g = self.space.grads(ckpt.params, tests, self.cfg.loss)
        if kind == "grad":
            return g
        masked = [mask_span(z, s) for z, s in zip(tests, spans)]
        return self.space.grads(ckpt.params, masked, self.cfg.loss) - g

    # ----- inverse HVP with caching -------------------------------------------------------
    def _exact_inverse(self) -> ExactInverse:
        with self._init_lock:
            if self._exact is None:
                ex = self.space.examples(self.theta, self.train)
                H = autodiff.exact_hessian(self.hessian_loss_fn, self.space.params(self.theta), ex,
                                           reduction=self.cfg.hessian_reduction)
                self._exact = ExactInverse(H, self.cfg.exact_damping)
        return self._exact

    def _solve(self, V: np.ndarray) -> np.ndarray:
        if self.cfg.ihvp == "exact":
            return self._exact_inverse().solve(V)
        ex = self.space.examples(self.theta, self.train)
        X, info = lissa(self.hessian_loss_fn, self.space.params(self.theta), V, ex, depth=self.cfg.lissa_depth,
                        damp=self.cfg.lissa_damp, scale=self.cfg.lissa_scale, clip=self.cfg.grad_clip,
                        tol=self.cfg.lissa_tol, window=self.cfg.lissa_window,
                        explosion_threshold=self.cfg.explosion_threshold, reduction=self.cfg.hessian_reduction,
                        rng=substream(self.cfg.seed, "lissa-shuffle"))
        log.debug("lissa steps per vector: %s", info["steps"])
        return X

    def inverse_hvps(self, tests: Sequence[Instance], spans: Sequence[Span | None], kind: str) -> np.ndarray:
        """Test-side ``H^-1 v`` with ``v = g(z')`` (kind "grad") or ``g(z'_-kl) - g(z')`` (kind "span")."""
        keys = []
        for z, s in zip(tests, spans):
            tag = "grad" if kind == "grad" else f"span:{s.start}:{s.end}"
            keys.append(IHVPCache.key(z.id, tuple(z.tokens), tag, self.final.params_hash, self.cfg.solver_hash()))
        out: list[np.ndarray | None] = [self.cache.get(k) for k in keys]
        todo = [i for i, x in enumerate(out) if x is None]
        if todo:
            V = self._test_vectors(self.final, [tests[i] for i in todo], [spans[i] for i in todo], kind)
            X = self._solve(V)
            for row, i in enumerate(todo):
                out[i] = self.cache.put(keys[i], X[row])
        return np.stack(out)

    # ----- single-pair scorers (raw formula values) ---------------------------------------
    def _span_diff(self, theta, z: Instance, s: Span, train_side: bool) -> np.ndarray:
        check_span(z, s)
        a = self.grad(theta, z)
        b = self.grad(theta, mask_span(z, s))
        return a - b if train_side else b - a

    def if_score(self, z: Instance, z_test: Instance) -> float:
        s_test = self.inverse_hvps([z_test], [None], "grad")[0]
        return float(-(s_test @ self.grad(self.theta, z)))

    def if_plus(self, z: Instance, s: Span, z_test: Instance) -> float:
        s_test = self.inverse_hvps([z_test], [None], "grad")[0]
        return float(s_test @ self._span_diff(self.theta, z, s, True))

    def if_plus_plus(self, z: Instance, s: Span, z_test: Instance, t: Span) -> float:
        check_span(z_test, t)
        s_test = self.inverse_hvps([z_test], [t], "span")[0]
        return float(s_test @ self._span_diff(self.theta, z, s, True))

    def _tracin_sum(self, models, weights, term) -> float:
        models = list(models)
        if not models:
            raise InfluenceError("at least one checkpoint is required")
        w = np.ones(len(models)) if weights is None else np.asarray(weights, dtype=np.float64)
        if len(w) != len(models):
            raise InfluenceError(f"{len(w)} weights given for {len(models)} checkpoints")
        return float(sum(wi * term(m.params) for wi, m in zip(w, models)))

    def tracin_checkpoint(self, z: Instance, z_test: Instance, checkpoints=None, weights=None) -> float:
        models = self.epoch_checkpoints if checkpoints is None else checkpoints
        return self._tracin_sum(models, weights, lambda th: self.grad(th, z) @ self.grad(th, z_test))

    def tracinf(self, z: Instance, z_test: Instance, variants=None, weights=None) -> float:
        models = self.variants if variants is None else variants
        return self._tracin_sum(models, weights, lambda th: self.grad(th, z) @ self.grad(th, z_test))

    def tracin_plus(self, z: Instance, s: Span, z_test: Instance, variants=None, weights=None) -> float:
        models = self.variants if variants is None else variants
        check_span(z, s)
        return self._tracin_sum(models, weights, lambda th: self.grad(th, z_test) @ self._span_diff(th, z, s, True))

    def tracin_plus_plus(self, z: Instance, s: Span, z_test: Instance, t: Span, variants=None, weights=None) -> float:
        """Four gradient evaluations per model: z, z_-ij, z', z'_-kl."""
        models = self.variants if variants is None else variants
        check_span(z, s)
        check_span(z_test, t)
        return self._tracin_sum(
            models, weights, lambda th: self._span_diff(th, z_test, t, False) @ self._span_diff(th, z, s, True))

    # ----- batched rankings -----------------------------------------------------------
    def check_requirements(self, method: str, tests: Sequence[Instance], test_spans: Sequence[Span | None]) -> None:
        if method in NEEDS_TRAIN_SPAN:
            bad = [z.id for z in self.train if z.gold_span is None]
            if bad:
                raise MissingSpanError(method, bad, "train")
        if method in NEEDS_TEST_SPAN:
            bad = [z.id for z, s in zip(tests, test_spans) if s is None]
            if bad:
                raise MissingSpanError(method, bad, "test")
        for z, s in zip(tests, test_spans):
            if s is not None:
                check_span(z, s)

    def raw_scores(self, method: str, tests: Sequence[Instance], test_spans: Sequence[Span | None]) -> np.ndarray:
        """Matrix of raw formula values, one row per test instance, one column per train instance."""
        self.check_requirements(method, tests, test_spans)
        if method in IF_FAMILY:
            if method == "if_plus_plus":
                S = self.inverse_hvps(tests, test_spans, "span")
            else:
                S = self.inverse_hvps(tests, [None] * len(tests), "grad")
            if method == "if":
                return -_pairwise(S, self.train_grads(self.final, False))
            D = self.train_grads(self.final, False) - self.train_grads(self.final, True)
            return _pairwise(S, D)
        models = self.models_for(method)
        w = self.weights_for(models)
        total = np.zeros((len(tests), len(self.train)))
        for wi, ckpt in zip(w, models):
            G = self.train_grads(ckpt, False)
            if method in ("tracinf", "tracin_checkpoint"):
                T = self._test_vectors(ckpt, tests, test_spans, "grad")
                total += wi * _pairwise(T, G)
                continue
            D = G - self.train_grads(ckpt, True)
            kind = "span" if method == "tracin_plus_plus" else "grad"
            T = self._test_vectors(ckpt, tests, test_spans, kind)
            total += wi * _pairwise(T, D)
        return total

    def explain_many(
        self,
        tests: Sequence[Instance],
        test_spans: Sequence[Span | None] | None = None,
        method: str | None = None,
    ) -> list[Ranking]:
        method = method or self.cfg.method
        tests = list(tests)
        if test_spans is None:
            test_spans = [z.gold_span for z in tests]
        t0 = time.perf_counter()
        raw = self.raw_scores(method, tests, test_spans)
        if not np.all(np.isfinite(raw)):
            raise autodiff.NonFiniteError(f"non-finite influence scores for method {method!r}")
        sign = SUPPORT_SIGN[method]
        use_span = method in NEEDS_TRAIN_SPAN
        out = []
        for row, (z, s) in enumerate(zip(tests, test_spans)):
            entries = [
                ScoredExplanation(tr.id, tr.gold_span if use_span else None, float(sign * raw[row, k]),
                                  float(raw[row, k]), method)
                for k, tr in enumerate(self.train)
            ]
            keep_span = s if method in NEEDS_TEST_SPAN or s is not None else None
            out.append(Ranking(z.id, keep_span, method, entries))
        elapsed = time.perf_counter() - t0
        for r in out:
            r.meta["runtime_s"] = elapsed / max(1, len(out))
        return out

    def explain(self, test: Instance, test_span: Span | None = None, method: str | None = None) -> Ranking:
        span = test_span if test_span is not None else test.gold_span
        return self.explain_many([test], [span], method)[0]


def lipschitz_check(
    model: TextClassifier,
    final: Checkpoint,
    variants: Sequence[Checkpoint],
    instances: Sequence[Instance],
    *,
    include_embeddings: bool = False,
    cap: int = autodiff.DEFAULT_HESSIAN_CAP,
    power_iters: int = 100,
) -> dict:
    """Measured gradient drift of each variant against the local curvature bound.

    For every instance the gradient moves by ``|g(theta + delta) - g(theta)|``;
    the mean value theorem bounds this by ``k * |delta|`` with ``k`` the
    largest Hessian spectral norm along the segment, estimated here at the
    segment's end points and midpoint.  Returns the per-run constant ``k_hat``
    (the maximum over instances and evaluation points) with every measurement.
    """
    space = ParamSpace(model, include_embeddings, _pad_length(model, instances))
    loss_fn = space.losses["ce"]
    rows = []
    k_hat = 0.0
    for v in variants:
        delta = np.asarray(v.params) - np.asarray(final.params)
        dn = float(np.linalg.norm(space.params(v.params) - space.params(final.params))) if not include_embeddings else float(np.linalg.norm(delta))
        G0 = space.grads(final.params, instances, "ce")
        G1 = space.grads(v.params, instances, "ce")
        drift = np.linalg.norm(G1 - G0, axis=1)
        for t in (0.0, 0.5, 1.0):
            theta = np.asarray(final.params) + t * delta
            ex = space.examples(theta, instances)
            p = space.params(theta)
            for i in range(len(instances)):
                one = jax.tree_util.tree_map(lambda a: a[i:i + 1], ex)
                k_hat = max(k_hat, _spectral_norm(loss_fn, p, one, cap, power_iters))
        for z, d in zip(instances, drift):
            rows.append({"variant": v.provenance.get("variant"), "instance": z.id, "drift": float(d), "delta_norm": dn})
    for r in rows:
        r["bound"] = k_hat * r["delta_norm"]
    log.info("empirical curvature constant k_hat = %.6g", k_hat)
    return {"k_hat": k_hat, "rows": rows}


def _spectral_norm(loss_fn, params, example, cap: int, iters: int) -> float:
    if params.size <= cap:
        H = autodiff.exact_hessian(loss_fn, params, example, cap=cap)
        return float(np.max(np.abs(np.linalg.eigvalsh(H))))
    v = np.random.default_rng(0).normal(size=params.size)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = autodiff.hvp(loss_fn, params, v, example)
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            return 0.0
        v = w / lam
    return lam
