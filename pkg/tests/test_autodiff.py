import jax
import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spaninfluence import autodiff


def quad_loss(p, ex):
    a, b = ex
    return 0.5 * jnp.sum(a * p * p) + jnp.sum(b * p) + jnp.sum(jnp.sin(p)) * jnp.sum(b)


def fd_grad(f, p, h=1e-6):
    g = np.zeros_like(p)
    for i in range(p.size):
        e = np.zeros_like(p)
        e[i] = h
        g[i] = (f(p + e) - f(p - e)) / (2 * h)
    return g


def test_grad_matches_finite_differences(rng):
    p = rng.normal(size=6)
    ex = (jnp.asarray(rng.uniform(0.5, 2, 6)), jnp.asarray(rng.normal(size=6)))
    g = autodiff.grad(quad_loss, p, ex)
    ref = fd_grad(lambda q: float(quad_loss(q, ex)), p)
    np.testing.assert_allclose(g, ref, rtol=1e-6, atol=1e-8)


def test_grad_of_tiny_model_every_coordinate(small_run, small_data):
    model, res = small_run
    z = small_data.train[0]
    ex = model.examples([z])
    ex = jax.tree_util.tree_map(lambda a: a[0], ex)
    p = res.final.params
    g = autodiff.grad(model.ce_loss_fn, p, ex)
    ref = fd_grad(lambda q: float(model.ce_loss_fn(q, ex)), np.array(p))
    np.testing.assert_allclose(g, ref, rtol=1e-5, atol=1e-8)


def test_batch_grads_rows_equal_single_grads(small_run, small_data):
    model, res = small_run
    batch = model.examples(small_data.train[:5])
    G = autodiff.batch_grads(model.ce_loss_fn, res.final.params, batch)
    for i in range(5):
        one = jax.tree_util.tree_map(lambda a: a[i], batch)
        np.testing.assert_allclose(G[i], autodiff.grad(model.ce_loss_fn, res.final.params, one), rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(autodiff.mean_grad(model.ce_loss_fn, res.final.params, batch), G.mean(0), rtol=1e-10, atol=1e-14)


def test_hvp_modes_agree_with_exact_hessian(rng):
    a = jnp.asarray(rng.uniform(0.5, 2, (10, 4)))
    b = jnp.asarray(rng.normal(size=(10, 4)))
    p = rng.normal(size=4)
    v = rng.normal(size=4)
    H = autodiff.exact_hessian(quad_loss, p, (a, b))
    exact = H @ v
    np.testing.assert_allclose(autodiff.hvp(quad_loss, p, v, (a, b)), exact, rtol=1e-10)
    np.testing.assert_allclose(autodiff.hvp(quad_loss, p, v, (a, b), mode="finite_difference"), exact, rtol=1e-5)


def test_sum_reduction_scales_by_n(rng):
    a = jnp.asarray(rng.uniform(0.5, 2, (7, 3)))
    b = jnp.asarray(rng.normal(size=(7, 3)))
    p, v = rng.normal(size=3), rng.normal(size=3)
    np.testing.assert_allclose(autodiff.hvp(quad_loss, p, v, (a, b), reduction="sum"),
                               7 * autodiff.hvp(quad_loss, p, v, (a, b)), rtol=1e-12)
    np.testing.assert_allclose(autodiff.exact_hessian(quad_loss, p, (a, b), reduction="sum"),
                               7 * autodiff.exact_hessian(quad_loss, p, (a, b)), rtol=1e-12)


def test_zero_vector_hvp_is_zero(rng):
    a = jnp.ones((3, 4))
    np.testing.assert_array_equal(autodiff.hvp(quad_loss, rng.normal(size=4), np.zeros(4), (a, a)), np.zeros(4))


def test_hvp_shape_mismatch_raises():
    with pytest.raises(ValueError):
        autodiff.hvp(quad_loss, np.zeros(3), np.zeros(4), (jnp.ones((1, 3)), jnp.ones((1, 3))))


def test_unknown_hvp_mode_raises():
    with pytest.raises(ValueError):
        autodiff.hvp(quad_loss, np.zeros(3), np.ones(3), (jnp.ones((1, 3)), jnp.ones((1, 3))), mode="magic")


def test_hessian_cap_enforced():
    with pytest.raises(autodiff.HessianTooLarge):
        autodiff.exact_hessian(quad_loss, np.zeros(30), (jnp.ones((1, 30)), jnp.ones((1, 30))), cap=20)


def test_non_finite_gradient_names_instance():
    def bad(p, ex):
        return jnp.sum(jnp.log(p)) * ex

    with pytest.raises(autodiff.NonFiniteError, match="z-7"):
        autodiff.grad(bad, -np.ones(2), jnp.float64(1.0), instance_id="z-7")
    with pytest.raises(autodiff.NonFiniteError, match="b"):
        autodiff.batch_grads(bad, np.ones(2) * np.array([1.0, 1.0]), jnp.asarray([1.0, np.nan]), ids=["a", "b"])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3), st.lists(st.floats(-3, 3), min_size=3, max_size=3))
def test_hessian_bilinear_symmetry(u, w):
    a = jnp.asarray([[1.0, 2.0, 0.5], [0.3, 1.0, 1.5]])
    b = jnp.asarray([[0.2, -1.0, 0.5], [1.0, 0.0, -0.3]])
    p = np.array([0.1, -0.4, 0.7])
    u, w = np.array(u), np.array(w)
    left = u @ autodiff.hvp(quad_loss, p, w, (a, b))
    right = w @ autodiff.hvp(quad_loss, p, u, (a, b))
    assert abs(left - right) <= 1e-9 * (1 + abs(left))
