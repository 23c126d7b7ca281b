import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stablab.stability import (
    LN_SITES,
    VARIANT_KINDS,
    ConfigError,
    StabilityVariant,
    assemble_block,
    attention_weights,
    cap_logits,
    capped_softmax,
    clipped_softmax,
    layer_scale_apply,
    make_variant,
    sigma_reparam_weight,
    softmax_temp,
)
from stablab.tensor import Tensor, finite_diff_grad, softmax

from helpers import TINY

rows = arrays(np.float64, (5, 8), elements=st.floats(-40, 40))


@settings(max_examples=40, deadline=None)
@given(rows)
def test_temperature_flattens(x):
    plain = softmax(Tensor(x)).data.max(axis=1)
    warm = softmax_temp(Tensor(x), 0.5).data.max(axis=1)
    assert np.all(warm <= plain + 1e-12)


@settings(max_examples=40, deadline=None)
@given(rows, st.floats(0.5, 100))
def test_capping_bounds_and_monotone(x, c):
    y = cap_logits(Tensor(x), c).data
    assert np.all(np.abs(y) <= c)
    order = np.argsort(x, axis=1, kind="stable")
    assert np.all(np.diff(np.take_along_axis(y, order, axis=1), axis=1) >= 0)


def test_capping_is_near_identity_for_small_logits():
    x = np.linspace(-0.5, 0.5, 11)
    np.testing.assert_allclose(cap_logits(Tensor(x), 50.0).data, x, atol=1e-4)  # cubic term x^3/(3c^2)


def test_capped_mask_applied_after_capping():
    mask = np.array([[0.0, -1e9]])
    p = capped_softmax(Tensor(np.array([[0.0, 1000.0]])), 5.0, mask).data
    np.testing.assert_allclose(p, [[1.0, 0.0]])


def test_clipped_softmax_reaches_exact_zero_and_one():
    p = clipped_softmax(Tensor(np.array([[0.0, -20.0, -20.0], [30.0, 0.0, 0.0]])), 1.03, -0.03).data
    assert p[0, 1] == 0.0 and p[1, 0] == 1.0


def test_clipped_softmax_gradient_matches_fd_inside():
    x = Tensor(np.array([[0.3, -0.2, 0.5, 0.1]]), requires_grad=True)
    w = np.array([[1.0, -2.0, 0.5, 3.0]])
    f = lambda t: (clipped_softmax(t, 1.03, -0.03) * w).sum()
    f(x).backward()
    np.testing.assert_allclose(x.grad, finite_diff_grad(f, x, h=1e-6), atol=1e-8)


def test_softmax_flavour_dispatch():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 6)) * 30)
    for kind, ref in (
        ("baseline", softmax(x)),
        ("soft_temp", softmax_temp(x, 0.5)),
        ("soft_cap", capped_softmax(x, 50.0)),
        ("qk_norm_cap", capped_softmax(x, 50.0)),
        ("soft_clip", clipped_softmax(x, 1.03, -0.03)),
    ):
        np.testing.assert_array_equal(attention_weights(x, StabilityVariant(kind)).data, ref.data)


def test_sigma_reparam_gradients_reach_weight_and_gamma():
    rng = np.random.default_rng(1)
    w = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
    gamma = Tensor(np.array(1.7), requires_grad=True)
    probe = rng.standard_normal((5, 4))
    # tight tolerance: u, v are exact singular vectors only at convergence
    f = lambda _: (sigma_reparam_weight(w, gamma, tol=1e-12) * probe).sum()
    f(None).backward()
    np.testing.assert_allclose(w.grad, finite_diff_grad(f, w, h=1e-5), atol=1e-7)
    np.testing.assert_allclose(gamma.grad, finite_diff_grad(f, gamma, h=1e-5), atol=1e-7)


def test_sigma_reparam_rejects_zero_matrix():
    with pytest.raises(ValueError):
        sigma_reparam_weight(Tensor(np.zeros((3, 3))), 1.0)


def test_layer_scale_shape_check():
    y = layer_scale_apply(Tensor(np.ones((2, 3))), Tensor(np.array([1.0, 2.0, 3.0])))
    np.testing.assert_array_equal(y.data[0], [1, 2, 3])
    with pytest.raises(ValueError):
        layer_scale_apply(Tensor(np.ones((2, 3))), Tensor(np.ones(2)))


@pytest.mark.parametrize(
    "kw",
    [{"kind": "nope"}, {"kind": "soft_temp", "beta": 0.0}, {"kind": "soft_cap", "capping": -1.0}, {"kind": "soft_clip", "zeta": 0.9}, {"kind": "soft_clip", "gamma_clip": 0.1}],
)
def test_variant_validation(kw):
    with pytest.raises(ConfigError):
        StabilityVariant(**kw)


def test_catalog_covers_all_kinds():
    assert set(LN_SITES) == set(VARIANT_KINDS) and len(VARIANT_KINDS) == 10
    assert make_variant("soft_cap", capping=7.0).capping == 7.0
    assert StabilityVariant("sigma_reparam").sigma_reparam and StabilityVariant("layer_scale").layer_scale


def test_assemble_block_follows_variant():
    blk = assemble_block(TINY, StabilityVariant("qkv_norm"))
    assert set(blk.ln) == {"ln_qkv", "ln_ff"}
    with pytest.raises(ConfigError):
        assemble_block(TINY, "qk_norm")
