"""Reverse-mode gradients, Hessian-vector products and dense Hessians.

Every differentiable quantity in the package is written as a per-example loss
``loss_fn(params, example) -> scalar`` where ``params`` is a flat float64
vector and ``example`` is a pytree of arrays.  Differentiation is delegated to
JAX (reverse mode for gradients, forward-over-reverse for Hessian-vector
products); this module pins the numerical contract around it: float64
everywhere, mean reduction over batches, finiteness checks and the dense
Hessian size cap.
"""

from __future__ import annotations

import threading
from typing import Any, Callable, Sequence

import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp  # noqa: E402
import numpy as np  # noqa: E402

LossFn = Callable[[Any, Any], Any]

DEFAULT_HESSIAN_CAP = 2000


class NonFiniteError(ArithmeticError):
    """A loss, gradient or curvature product came out NaN or infinite."""


class HessianTooLarge(ValueError):
    pass


_cache: dict[tuple, Callable] = {}
_cache_lock = threading.Lock()


def _compiled(loss_fn: LossFn, kind: str) -> Callable:
    key = (loss_fn, kind)
    with _cache_lock:
        fn = _cache.get(key)
        if fn is not None:
            return fn
    fn = _build(loss_fn, kind)
    with _cache_lock:
        _cache.setdefault(key, fn)
        return _cache[key]


def _mean_loss(loss_fn: LossFn, reduction: str = "mean") -> Callable:
    def total(params, batch):
        losses = jax.vmap(loss_fn, in_axes=(None, 0))(params, batch)
        return jnp.mean(losses) if reduction == "mean" else jnp.sum(losses)

    return total


def _build(loss_fn: LossFn, kind: str) -> Callable:
    if kind == "value_and_grad":
        return jax.jit(jax.value_and_grad(loss_fn))
    if kind == "batch_grads":
        return jax.jit(jax.vmap(jax.value_and_grad(loss_fn), in_axes=(None, 0)))
    if kind.startswith("hvp:"):
        total = _mean_loss(loss_fn, kind.split(":")[1])

        def hvp_fn(params, v, batch):
            g = lambda p: jax.grad(total)(p, batch)  # noqa: E731
            return jax.jvp(g, (params,), (v,))[1]

        return jax.jit(hvp_fn)
    if kind.startswith("grad_total:"):
        return jax.jit(jax.grad(_mean_loss(loss_fn, kind.split(":")[1])))
    if kind.startswith("hessian:"):
        return jax.jit(jax.hessian(_mean_loss(loss_fn, kind.split(":")[1])))
    raise KeyError(kind)


def as_params(params) -> np.ndarray:
    arr = np.asarray(params, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"parameters must be a nonempty flat vector, got shape {arr.shape}")
    return arr


def stack(examples: Sequence[Any]) -> Any:
    """Stack a list of example pytrees along a new leading axis."""
    if len(examples) == 0:
        raise ValueError("empty batch")
    return jax.tree_util.tree_map(lambda *xs: np.stack([np.asarray(x) for x in xs]), *examples)


def _as_batch(batch) -> Any:
    # lists are lists of examples; anything else is taken as already stacked
    if isinstance(batch, list):
        return stack(batch)
    return batch


def _check_finite(values, what: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(what)


def value_and_grad(loss_fn: LossFn, params, z, *, instance_id: str | None = None):
    value, g = _compiled(loss_fn, "value_and_grad")(jnp.asarray(as_params(params)), z)
    value = float(value)
    g = np.asarray(g)
    label = f"instance {instance_id!r}" if instance_id is not None else "example"
    _check_finite(value, f"non-finite loss for {label}")
    _check_finite(g, f"non-finite gradient for {label}")
    return value, g


def grad(loss_fn: LossFn, params, z, *, instance_id: str | None = None) -> np.ndarray:
    """Exact reverse-mode gradient of ``loss_fn(params, z)``."""
    return value_and_grad(loss_fn, params, z, instance_id=instance_id)[1]


def batch_grads(loss_fn: LossFn, params, batch, ids: Sequence[str] | None = None) -> np.ndarray:
    """Per-example gradients, one row per example of a stacked batch."""
    values, g = _compiled(loss_fn, "batch_grads")(jnp.asarray(as_params(params)), _as_batch(batch))
    values = np.asarray(values)
    g = np.asarray(g)
    bad = ~(np.isfinite(values) & np.all(np.isfinite(g), axis=1))
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        name = ids[idx] if ids is not None else f"#{idx}"
        raise NonFiniteError(f"non-finite loss or gradient for instance {name!r}")
    return g


def mean_grad(loss_fn: LossFn, params, batch, *, reduction: str = "mean") -> np.ndarray:
    g = np.asarray(_compiled(loss_fn, f"grad_total:{reduction}")(jnp.asarray(as_params(params)), _as_batch(batch)))
    _check_finite(g, "non-finite batch gradient")
    return g


def hvp(
    loss_fn: LossFn,
    params,
    v,
    batch,
    *,
    mode: str = "forward_over_reverse",
    reduction: str = "mean",
) -> np.ndarray:
    """Product of the batch Hessian with ``v``.

    ``mode="finite_difference"`` is the fallback for losses without
    second-order support: central differences of the batch gradient with a
    step of ``1e-5 * max(1, |params|)`` along ``v``.
    """
    params = as_params(params)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != params.shape:
        raise ValueError(f"vector has dim {v.shape}, parameters have {params.shape}")
    batch = _as_batch(batch)
    vnorm = np.linalg.norm(v)
    if vnorm == 0.0:
        return np.zeros_like(v)
    if mode == "forward_over_reverse":
        out = np.asarray(_compiled(loss_fn, f"hvp:{reduction}")(jnp.asarray(params), jnp.asarray(v), batch))
    elif mode == "finite_difference":
        h = 1e-5 * max(1.0, float(np.linalg.norm(params))) / vnorm
        plus = mean_grad(loss_fn, params + h * v, batch, reduction=reduction)
        minus = mean_grad(loss_fn, params - h * v, batch, reduction=reduction)
        out = (plus - minus) / (2 * h)
    else:
        raise ValueError(f"unknown hvp mode {mode!r}")
    _check_finite(out, "non-finite Hessian-vector product")
    return out


def exact_hessian(
    loss_fn: LossFn,
    params,
    dataset,
    *,
    cap: int = DEFAULT_HESSIAN_CAP,
    reduction: str = "mean",
    chunk_size: int = 256,
) -> np.ndarray:
    """Dense Hessian of the mean (or summed) loss, symmetrized.

    Intended for oracles and the exact inverse-HVP solver; refuses parameter
    counts above ``cap``.
    """
    params = as_params(params)
    d = params.size
    if d > cap:
        raise HessianTooLarge(
            f"exact Hessian requested for {d} parameters; the cap is {cap} "
            "(raise `cap` explicitly or use the LiSSA solver)"
        )
    batch = _as_batch(dataset)
    n = len(jax.tree_util.tree_leaves(batch)[0])
    fn = _compiled(loss_fn, "hessian:sum")
    H = np.zeros((d, d))
    for start in range(0, n, chunk_size):
        part = jax.tree_util.tree_map(lambda x: x[start:start + chunk_size], batch)
        H += np.asarray(fn(jnp.asarray(params), part))
    if reduction == "mean":
        H /= n
    _check_finite(H, "non-finite Hessian")
    return 0.5 * (H + H.T)
