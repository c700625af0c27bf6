import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hierattn import tensor as T
from hierattn.attention import (AttentionKind, attend, prune_backward, prune_renormalize,
                                prune_renormalize_forward, softmax, sparsemax, sparsemax_backward,
                                sparsemax_forward, transform)
from hierattn.errors import ContractError
from hierattn.tensor import Tensor, finite_diff_grad
from oracles import simplex_projection_kkt

KINDS = [AttentionKind.softmax(), AttentionKind.sparsemax(), AttentionKind.pruned(0.05)]
scores_strategy = arrays(np.float64, st.integers(1, 10), elements=st.floats(-20, 20))


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


# ------------------------------------------------------------------ softmax


def test_softmax_examples():
    np.testing.assert_array_equal(softmax([0.0, 0.0]).data, [0.5, 0.5])
    np.testing.assert_allclose(softmax(np.full(3, 7.3) + 100).data, np.full(3, 1 / 3), atol=1e-15)
    np.testing.assert_allclose(softmax([1.0, 2.0, 3.0]).data, [0.09003, 0.24473, 0.66524], atol=1e-5)


def test_softmax_masking():
    p = softmax(np.array([5.0, 1.0, 1.0, 9.0]), np.array([False, True, True, False])).data
    np.testing.assert_array_equal(p, [0.0, 0.5, 0.5, 0.0])
    with pytest.raises(ContractError):
        softmax(np.zeros(3), np.zeros(3, dtype=bool))


def test_softmax_gradient(rng):
    z, g = rng.normal(size=6), rng.normal(size=6)
    mask = np.array([True, True, False, True, True, False])
    t = Tensor(z, requires_grad=True)
    T.sum(softmax(t, mask) * Tensor(g)).backward()
    numeric = finite_diff_grad(lambda x: T.sum(softmax(x, mask) * Tensor(g)), z).data
    assert rel_err(t.grad, numeric) < 1e-7
    assert np.all(t.grad[~mask] == 0)


# ---------------------------------------------------------------- sparsemax


def test_sparsemax_examples():
    p, tau, k = sparsemax_forward(np.array([0.0, 0.0]))
    np.testing.assert_array_equal(p, [0.5, 0.5])
    assert tau == -0.5 and k == 2
    p, tau, k = sparsemax_forward(np.array([0.3, 0.7]))
    np.testing.assert_allclose(p, [0.3, 0.7], atol=1e-15)
    assert abs(tau) < 1e-15 and k == 2
    p, tau, k = sparsemax_forward(np.array([2.0, 0.0]))
    np.testing.assert_array_equal(p, [1.0, 0.0])
    assert tau == 1.0 and k == 1
    np.testing.assert_allclose(simplex_projection_kkt(np.array([2.0, 0.0])), [1.0, 0.0])


def test_sparsemax_matches_kkt_oracle(rng):
    for _ in range(300):
        z = rng.uniform(-3, 3, size=int(rng.integers(1, 9)))
        p, tau, k = sparsemax_forward(z)
        oracle = simplex_projection_kkt(z)
        assert np.max(np.abs(p - oracle)) < 1e-9
        assert k == np.count_nonzero(oracle)
        np.testing.assert_allclose(p, np.maximum(z - tau, 0.0), atol=1e-12)


def test_sparsemax_masked_rows_equal_cropped(rng):
    z = rng.normal(size=(4, 7))
    mask = rng.random((4, 7)) < 0.6
    mask[:, 0] = True
    p, tau, k = sparsemax_forward(z, mask)
    for i in range(4):
        pi, ti, ki = sparsemax_forward(z[i][mask[i]])
        np.testing.assert_allclose(p[i][mask[i]], pi, atol=1e-15)
        assert np.all(p[i][~mask[i]] == 0) and ki == k[i]
        assert abs(ti - tau[i]) < 1e-15


def test_sparsemax_backward_examples():
    res = sparsemax(np.array([0.0, 0.0]))
    np.testing.assert_array_equal(sparsemax_backward(res, np.array([1.0, 1.0])), [0.0, 0.0])
    res = sparsemax(np.array([5.0, 0.0]))
    np.testing.assert_array_equal(sparsemax_backward(res, np.array([5.0, 7.0])), [0.0, 0.0])


def test_sparsemax_backward_matches_finite_differences(rng):
    checked = 0
    while checked < 50:
        z = rng.normal(size=5)
        _, tau, _ = sparsemax_forward(z)
        if np.min(np.abs(z - tau)) < 1e-3:
            continue
        g = rng.normal(size=5)
        t = Tensor(z, requires_grad=True)
        T.sum(sparsemax(t).p * Tensor(g)).backward()
        numeric = finite_diff_grad(lambda x: T.sum(sparsemax(x).p * Tensor(g)), z).data
        assert rel_err(t.grad, numeric) < 1e-4
        checked += 1


@pytest.mark.parametrize("gamma", [2.0, 5.0, 10.0])
def test_sparsemax_support_monotone_under_scaling(rng, gamma):
    for _ in range(200):
        z = rng.normal(size=int(rng.integers(2, 10)))
        assert sparsemax_forward(gamma * z)[2] <= sparsemax_forward(z)[2]


# ------------------------------------------------------------------ pruning


def test_prune_examples():
    np.testing.assert_allclose(prune_renormalize_forward([0.6, 0.36, 0.04], 0.05), [0.625, 0.375, 0.0],
                               atol=1e-15)
    unchanged = np.array([0.5, 0.3, 0.15, 0.05])
    np.testing.assert_allclose(prune_renormalize_forward(unchanged, 0.05), unchanged, atol=1e-15)
    np.testing.assert_array_equal(prune_renormalize_forward(np.full(5, 0.2), 0.25), [1, 0, 0, 0, 0])


def test_prune_fallback_respects_mask():
    alpha = np.array([0.3, 0.2, 0.2, 0.3])
    mask = np.array([False, True, True, True])
    np.testing.assert_array_equal(prune_renormalize_forward(alpha, 0.5, mask), [0, 0, 0, 1])


def test_prune_backward_no_prune_regime(rng):
    alpha = softmax(rng.normal(size=4) * 0.2).data
    g = rng.normal(size=4)
    closed = g - np.dot(g, alpha)
    np.testing.assert_allclose(prune_backward(alpha, 0.05, g), closed, atol=1e-14)
    numeric = finite_diff_grad(lambda a: T.sum(prune_renormalize(a, 0.05) * Tensor(g)), alpha).data
    assert rel_err(closed, numeric) < 1e-5


def test_prune_backward_fallback_is_zero(rng):
    np.testing.assert_array_equal(prune_backward(np.full(5, 0.2), 0.25, rng.normal(size=5)), np.zeros(5))


def test_prune_backward_matches_finite_differences(rng):
    alpha = np.array([0.6, 0.36, 0.04])
    for _ in range(20):
        g = rng.normal(size=3)
        t = Tensor(alpha, requires_grad=True)
        T.sum(prune_renormalize(t, 0.05) * Tensor(g)).backward()
        numeric = finite_diff_grad(lambda a: T.sum(prune_renormalize(a, 0.05) * Tensor(g)), alpha).data
        assert rel_err(t.grad, numeric) < 1e-4


def test_prune_rejects_bad_threshold():
    with pytest.raises(ValueError):
        prune_renormalize(np.array([0.5, 0.5]), 0.0)
    with pytest.raises(ValueError):
        AttentionKind.pruned(1.0)


# ---------------------------------------------------------------- properties


@given(scores_strategy, st.floats(-50, 50))
@settings(max_examples=200, deadline=None)
def test_shift_invariance(z, c):
    np.testing.assert_allclose(softmax(z + c).data, softmax(z).data, atol=1e-12)
    np.testing.assert_allclose(sparsemax_forward(z + c)[0], sparsemax_forward(z)[0], atol=1e-12)


@given(scores_strategy, st.sampled_from(KINDS))
@settings(max_examples=300, deadline=None)
def test_transforms_return_simplex_points(z, kind):
    p = transform(z, kind).data
    assert np.all(p >= 0) and abs(p.sum() - 1.0) < 1e-9


@given(arrays(np.float64, st.integers(1, 10), elements=st.floats(0.001, 1.0)), st.floats(0.01, 0.5))
@settings(max_examples=300, deadline=None)
def test_prune_idempotent(raw, alpha_min):
    alpha = raw / raw.sum()
    once = prune_renormalize_forward(alpha, alpha_min)
    if once[once > 0].min() >= alpha_min:
        np.testing.assert_allclose(prune_renormalize_forward(once, alpha_min), once, atol=1e-15)


@given(arrays(np.float64, st.integers(1, 10), elements=st.floats(0.0, 1.0)))
@settings(max_examples=200, deadline=None)
def test_sparsemax_identity_on_simplex(raw):
    if raw.sum() == 0:
        raw = raw + 1.0
    p = raw / raw.sum()
    np.testing.assert_allclose(sparsemax_forward(p)[0], p, atol=1e-12)


@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-1e300, 1e300)), st.sampled_from(KINDS))
@settings(max_examples=200, deadline=None)
def test_no_nan_for_any_finite_input(z, kind):
    t = Tensor(z, requires_grad=True)
    out = transform(t, kind)
    T.sum(out * Tensor(np.arange(z.size, dtype=float))).backward()
    assert np.all(np.isfinite(out.data)) and np.all(np.isfinite(t.grad))


# ------------------------------------------------------------------- attend


def _attn_params(rng, D, A=4):
    return (Tensor(rng.normal(size=A) * 3), Tensor(rng.normal(size=(A, D))), Tensor(rng.normal(size=A)))


@pytest.mark.parametrize("kind", KINDS, ids=lambda k: k.variant)
def test_attend_single_and_identical_rows(rng, kind):
    ctx, W, b = _attn_params(rng, 3)
    h = rng.normal(size=(1, 3))
    out = attend(h, ctx, W, b, kind)
    np.testing.assert_array_equal(out.weights.data, [1.0])
    np.testing.assert_allclose(out.pooled.data, h[0], atol=1e-15)
    same = np.tile(rng.normal(size=3), (5, 1))
    np.testing.assert_allclose(attend(same, ctx, W, b, kind).pooled.data, same[0], atol=1e-14)


@pytest.mark.parametrize("kind", KINDS, ids=lambda k: k.variant)
def test_pooled_in_convex_hull(rng, kind):
    ctx, W, b = _attn_params(rng, 2)
    for _ in range(50):
        h = rng.normal(size=(6, 2))
        mask = rng.random(6) < 0.7
        mask[0] = True
        out = attend(h, ctx, W, b, kind, mask)
        a = out.weights.data
        assert np.all(a[~mask] == 0) and abs(a.sum() - 1) < 1e-9
        # pooled is exactly the a-weighted mean of the unmasked rows
        np.testing.assert_allclose(out.pooled.data, a[mask] @ h[mask], atol=1e-14)
        lo, hi = h[mask].min(axis=0), h[mask].max(axis=0)
        assert np.all(out.pooled.data >= lo - 1e-12) and np.all(out.pooled.data <= hi + 1e-12)


def test_softmax_and_sparsemax_agree_on_clear_winner(rng):
    seen = 0
    while seen < 200:
        z = rng.normal(size=6) * 2
        top = np.sort(z)
        if top[-1] - top[-2] < 1.0:
            continue
        assert np.argmax(softmax(z).data) == np.argmax(sparsemax_forward(z)[0])
        seen += 1


def test_attend_gradients(rng):
    h0 = rng.normal(size=(5, 3))
    ctx0, W0, b0 = (t.data for t in _attn_params(rng, 3))
    mask = np.array([True, True, True, False, True])
    for kind in KINDS:
        leaves = [Tensor(x, requires_grad=True) for x in (h0, ctx0, W0, b0)]

        def loss(h, c, W, b):
            return T.sum(T.tanh(attend(h, c, W, b, kind, mask).pooled))

        loss(*leaves).backward()
        for i, leaf in enumerate(leaves):
            def f(x, i=i):
                args = [Tensor(v) for v in (h0, ctx0, W0, b0)]
                args[i] = x
                return loss(*args)
            assert rel_err(leaf.grad, finite_diff_grad(f, leaf.data).data) < 1e-5, (kind.variant, i)
