import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from introspective.metric import (
    DiagGaussian,
    MetricParams,
    PairedEmbedding,
    cosine,
    cosine_relative_uncertainty,
    gaussian_kl,
    grad_decay_factor,
    grad_introspective_distance,
    introspective_cosine,
    introspective_cosine_dis,
    introspective_distance,
    pairwise_distance,
    pairwise_similarity,
    relative_uncertainty,
    semantic_distance,
    similarity_uncertainty,
    strict_introspective_distance,
    weaken,
)


def pe(s, u=None):
    s = np.atleast_1d(np.asarray(s, float))
    return PairedEmbedding(s, np.zeros(2) if u is None else u)


def pair_with(alpha, beta, d=2):
    """Two embeddings with semantic distance ``alpha`` and pairwise uncertainty ``beta``."""
    a = PairedEmbedding(np.r_[alpha, np.zeros(d - 1)], np.r_[beta, np.zeros(d - 1)])
    b = PairedEmbedding(np.zeros(d), np.zeros(d))
    return a, b


finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
vec = arrays(np.float64, 6, elements=finite)
params = st.builds(MetricParams, gamma=st.floats(0, 5), tau=st.floats(0.1, 10))


# --- types ------------------------------------------------------------------------

def test_params_validation():
    with pytest.raises(ValueError):
        MetricParams(gamma=-0.1)
    with pytest.raises(ValueError):
        MetricParams(tau=0.0)
    with pytest.raises(ValueError):
        MetricParams(eps_div=1e-3)
    with pytest.raises(ValueError):
        PairedEmbedding([1.0, np.nan], [0.0])
    with pytest.raises(ValueError):
        PairedEmbedding([], [0.0])
    with pytest.raises(ValueError):
        DiagGaussian([0.0], [0.0])


# --- documented examples -----------------------------------------------------------

def test_semantic_distance_examples():
    assert semantic_distance(pe([1.0, 2.0]), pe([1.0, 2.0])) == 0.0
    assert semantic_distance(pe([3.0, 4.0]), pe([0.0, 0.0])) == 5.0
    with pytest.raises(ValueError):
        semantic_distance(pe([1.0, 2.0]), pe([1.0, 2.0, 3.0]))


def test_semantic_distance_scalar_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x, y = rng.standard_normal((2, 32))
        acc = 0.0
        for k in range(32):
            acc += (x[k] - y[k]) ** 2
        assert semantic_distance(pe(x), pe(y)) == pytest.approx(math.sqrt(acc), rel=1e-14)


def test_similarity_uncertainty_examples():
    z = np.zeros(2)
    assert similarity_uncertainty(pe(z, z), pe(z, z)) == 0.0
    assert similarity_uncertainty(pe(z, [1, 0]), pe(z, [-1, 0])) == 0.0
    assert similarity_uncertainty(pe(z, [1, 0]), pe(z, [1, 0])) == 2.0
    with pytest.raises(ValueError):
        similarity_uncertainty(pe(z, [1, 0]), pe(z, [1, 0, 0]))


def test_relative_uncertainty_examples():
    a, b = pair_with(1.0, 0.0)
    assert relative_uncertainty(a, b, MetricParams()) == 0.0
    a, b = pair_with(2.0, 2.0)
    assert relative_uncertainty(a, b, MetricParams(gamma=3.0)) == 2.5
    a, b = pair_with(0.0, 1.0)
    assert relative_uncertainty(a, b, MetricParams(eps_div=1e-12)) == pytest.approx(1e12)


def test_introspective_distance_examples():
    rng = np.random.default_rng(1)
    x, y = rng.standard_normal((2, 8))
    a, b = PairedEmbedding(x, np.zeros(3)), PairedEmbedding(y, np.zeros(3))
    assert introspective_distance(a, b, MetricParams()) == semantic_distance(a, b)
    a, b = pair_with(2.0, 2.0)
    assert introspective_distance(a, b, MetricParams(tau=1.0)) == pytest.approx(0.735759, abs=1e-6)
    assert introspective_distance(a, b, MetricParams(gamma=3.0, tau=5.0)) == pytest.approx(1.213061, abs=1e-6)


def test_strict_distance_examples():
    p0 = MetricParams()
    assert strict_introspective_distance(*pair_with(5.0, 1.0), p0) == 5.0
    assert strict_introspective_distance(*pair_with(1.0, 1.0), p0) == 0.0
    assert strict_introspective_distance(*pair_with(2.0, 0.0), MetricParams(gamma=3.0)) == 0.0


def cos_pair(c, u_a=(0.0, 0.0), u_b=(0.0, 0.0)):
    """Unit vectors at cosine ``c``."""
    theta = math.acos(c)
    return (PairedEmbedding([1.0, 0.0], u_a),
            PairedEmbedding([math.cos(theta), math.sin(theta)], u_b))


def test_introspective_cosine_examples():
    a = PairedEmbedding([1.0, 2.0], [5.0, 1.0])
    b = PairedEmbedding([2.0, 4.0], [3.0, 0.0])
    assert introspective_cosine(a, b, MetricParams(gamma=2.0)) == 1.0
    # C = 0.5 and beta = 0.5 make r = 1
    a, b = cos_pair(0.5, (0.5, 0.0))
    assert cosine_relative_uncertainty(a, b, MetricParams(tau=1.0)) == pytest.approx(1.0, abs=1e-12)
    assert introspective_cosine(a, b, MetricParams(tau=1.0)) == pytest.approx(0.816060, abs=1e-6)
    a, b = cos_pair(0.3)
    assert introspective_cosine(a, b, MetricParams()) == pytest.approx(0.3, abs=1e-15)
    with pytest.raises(ValueError):
        introspective_cosine(PairedEmbedding([0.0, 0.0], [1.0]), b, MetricParams())


def test_introspective_cosine_dis_examples():
    a, b = cos_pair(0.8)
    assert introspective_cosine_dis(a, b, MetricParams()) == pytest.approx(0.8, abs=1e-15)
    # 1 - C = 0.2, so beta = 0.2 gives r = 1
    a, b = cos_pair(0.8, (0.2, 0.0))
    assert introspective_cosine_dis(a, b, MetricParams(tau=1.0)) == pytest.approx(0.294304, abs=1e-6)
    a, b = cos_pair(0.0, (3.0, 1.0))
    assert introspective_cosine_dis(a, b, MetricParams(gamma=1.0)) == pytest.approx(0.0, abs=1e-15)


def test_gaussian_kl_examples():
    g = DiagGaussian([1.0, 2.0], [0.5, 3.0])
    assert gaussian_kl(g, g) == 0.0
    assert gaussian_kl(DiagGaussian([1.0], [1.0]), DiagGaussian([0.0], [1.0])) == 0.5
    assert gaussian_kl(DiagGaussian([0.0], [2.0]), DiagGaussian([0.0], [1.0])) == pytest.approx(
        0.153426, abs=1e-6)
    with pytest.raises(ValueError):
        DiagGaussian([0.0], [-1.0])


def test_grad_decay_factor_examples():
    assert grad_decay_factor(0.0) == 1.0
    assert grad_decay_factor(1.0) == pytest.approx(0.735759, abs=1e-6)
    assert grad_decay_factor(10.0) == pytest.approx(4.994e-4, abs=1e-7)
    grid = grad_decay_factor(np.arange(0, 201) / 10)
    assert np.all(np.diff(grid) < 0)


def test_grad_reduces_to_euclidean():
    rng = np.random.default_rng(2)
    x, y = rng.standard_normal((2, 5))
    a, b = PairedEmbedding(x, np.zeros(4)), PairedEmbedding(y, np.zeros(4))
    g_sa, g_sb, g_ua, g_ub = grad_introspective_distance(a, b, MetricParams())
    unit = (x - y) / np.linalg.norm(x - y)
    np.testing.assert_allclose(g_sa, unit, rtol=0, atol=1e-15)
    np.testing.assert_allclose(g_sb, -unit, rtol=0, atol=1e-15)
    # beta = 0: zero subgradient
    assert not g_ua.any() and not g_ub.any()


def test_grad_at_tau_one_uses_g():
    rng = np.random.default_rng(3)
    x, y, ua, ub = rng.standard_normal((4, 6))
    a, b = PairedEmbedding(x, ua), PairedEmbedding(y, ub)
    alpha = np.linalg.norm(x - y)
    beta = np.linalg.norm(ua + ub)
    g_sa = grad_introspective_distance(a, b, MetricParams(tau=1.0))[0]
    np.testing.assert_allclose(g_sa, (x - y) / alpha * grad_decay_factor(beta / alpha), rtol=1e-14)


def fd(f, x, h=1e-5):
    g = np.zeros_like(x)
    for k in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        g[k] = (f(xp) - f(xm)) / (2 * h)
    return g


def test_grad_matches_finite_differences():
    rng = np.random.default_rng(4)
    p = MetricParams(gamma=3.0, tau=5.0)
    for _ in range(25):
        sa, sb, ua, ub = rng.standard_normal((4, 16))
        grads = grad_introspective_distance(PairedEmbedding(sa, ua), PairedEmbedding(sb, ub), p)
        numeric = [
            fd(lambda v: introspective_distance(PairedEmbedding(v, ua), PairedEmbedding(sb, ub), p), sa),
            fd(lambda v: introspective_distance(PairedEmbedding(sa, ua), PairedEmbedding(v, ub), p), sb),
            fd(lambda v: introspective_distance(PairedEmbedding(sa, v), PairedEmbedding(sb, ub), p), ua),
            fd(lambda v: introspective_distance(PairedEmbedding(sa, ua), PairedEmbedding(sb, v), p), ub),
        ]
        a = np.concatenate(grads)
        n = np.concatenate(numeric)
        assert np.abs(a - n).max() / np.abs(n).max() <= 1e-6


def test_uncertainty_gradient_has_no_alpha_factor():
    # d D / d beta = -exp(-r/tau)/tau; a stray alpha factor would double it here
    a, b = pair_with(2.0, 1.0)
    p = MetricParams(tau=2.0)
    g_ua = grad_introspective_distance(a, b, p)[2]
    assert g_ua[0] == pytest.approx(-math.exp(-0.25) / 2.0, rel=1e-14)


def test_scaling_uncertainty_shrinks_semantic_gradient():
    rng = np.random.default_rng(5)
    p = MetricParams(gamma=0.5, tau=3.0)
    for _ in range(20):
        sa, sb, ua, ub = rng.standard_normal((4, 8))
        n1 = np.linalg.norm(grad_introspective_distance(PairedEmbedding(sa, ua), PairedEmbedding(sb, ub), p)[0])
        n2 = np.linalg.norm(grad_introspective_distance(PairedEmbedding(sa, 2 * ua), PairedEmbedding(sb, ub), p)[0])
        beta1, beta2 = np.linalg.norm(ua + ub), np.linalg.norm(2 * ua + ub)
        if beta2 > beta1:
            assert n2 < n1


def test_zero_alpha_subgradient():
    a = PairedEmbedding([1.0, 1.0], [1.0, 0.0])
    g_sa, g_sb, g_ua, g_ub = grad_introspective_distance(a, a, MetricParams())
    assert not g_sa.any() and not g_sb.any()
    assert np.all(np.isfinite(g_ua))
    assert introspective_distance(a, a, MetricParams()) == 0.0


def test_weaken_floor_limit():
    # alpha below the floor: exp(-huge) underflows, value is 0 not NaN
    v, da, db = weaken(0.0, 1.0, MetricParams())
    assert v == 0.0 and np.isfinite(da) and np.isfinite(db)


# --- pairwise forms match the scalar API -----------------------------------------

def test_pairwise_matches_scalar_calls():
    rng = np.random.default_rng(6)
    p = MetricParams(gamma=1.0, tau=3.0)
    s, u = rng.standard_normal((10, 5)), rng.standard_normal((10, 4))
    emb = [PairedEmbedding(s[i], u[i]) for i in range(10)]
    d = pairwise_distance(s, u, s, u, p).value
    c = pairwise_similarity(s, u, s, u, p, "sim").value
    c_dis = pairwise_similarity(s, u, s, u, p, "dis").value
    for i in range(10):
        for j in range(10):
            assert d[i, j] == pytest.approx(introspective_distance(emb[i], emb[j], p), rel=1e-12, abs=1e-14)
            if i != j:
                assert c[i, j] == pytest.approx(introspective_cosine(emb[i], emb[j], p), rel=1e-12)
                assert c_dis[i, j] == pytest.approx(introspective_cosine_dis(emb[i], emb[j], p),
                                                    rel=1e-10, abs=1e-14)


def test_pairwise_backward_matches_scalar_gradient():
    rng = np.random.default_rng(7)
    p = MetricParams(gamma=0.7, tau=2.0)
    s1, s2 = rng.standard_normal((2, 1, 6))
    u1, u2 = rng.standard_normal((2, 1, 3))
    g = pairwise_distance(s1, u1, s2, u2, p).backward(np.ones((1, 1)))
    ref = grad_introspective_distance(PairedEmbedding(s1, u1), PairedEmbedding(s2, u2), p)
    for got, want in zip((g[0], g[2], g[1], g[3]), ref):
        np.testing.assert_allclose(got[0], want, rtol=1e-12, atol=1e-15)


def test_pairwise_baseline_ignores_uncertainty():
    rng = np.random.default_rng(8)
    s = rng.standard_normal((4, 3))
    res = pairwise_distance(s, None, s, None, None)
    np.testing.assert_allclose(res.value, np.linalg.norm(s[:, None] - s[None], axis=-1), atol=1e-15)
    assert res.backward(np.ones((4, 4)))[1] is None


def test_unknown_cosine_form():
    s = np.eye(2)
    with pytest.raises(ValueError):
        pairwise_similarity(s, s, s, s, MetricParams(), "bogus")


# --- properties -------------------------------------------------------------------

@settings(max_examples=200, deadline=None)
@given(vec, vec, vec, vec, params)
def test_distance_bounded_and_symmetric(sa, sb, ua, ub, p):
    a, b = PairedEmbedding(sa, ua), PairedEmbedding(sb, ub)
    d = introspective_distance(a, b, p)
    alpha = semantic_distance(a, b)
    assert 0.0 <= d <= alpha
    assert d == introspective_distance(b, a, p)
    assert similarity_uncertainty(a, b) == similarity_uncertainty(b, a)


@settings(max_examples=200, deadline=None)
@given(vec, vec, vec, vec, params)
def test_cosine_lifted_and_symmetric(sa, sb, ua, ub, p):
    assume(np.linalg.norm(sa) > 1e-3 and np.linalg.norm(sb) > 1e-3)
    a, b = PairedEmbedding(sa, ua), PairedEmbedding(sb, ub)
    c_in = introspective_cosine(a, b, p)
    assert c_in >= cosine(a, b)
    assert c_in <= 1.0
    assert c_in == pytest.approx(introspective_cosine(b, a, p), abs=1e-15)


@settings(max_examples=200, deadline=None)
@given(vec, vec, vec, vec)
def test_zero_uncertainty_reduction(sa, sb, ua, ub):
    assume(np.linalg.norm(sa) > 1e-3 and np.linalg.norm(sb) > 1e-3)
    z = np.zeros_like(ua)
    a, b = PairedEmbedding(sa, z), PairedEmbedding(sb, z)
    p = MetricParams()
    assert introspective_distance(a, b, p) == semantic_distance(a, b)
    assert introspective_cosine(a, b, p) == pytest.approx(cosine(a, b), abs=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.01, 10), st.floats(0, 10), st.floats(0.01, 5), params)
def test_monotone_in_uncertainty(alpha, beta, step, p):
    d1 = introspective_distance(*pair_with(alpha, beta), p)
    d2 = introspective_distance(*pair_with(alpha, beta + step), p)
    assume(d1 > 1e-300)
    assert d2 < d1


@settings(max_examples=200, deadline=None)
@given(vec, vec, vec, vec, params)
def test_strict_metric_values(sa, sb, ua, ub, p):
    a, b = PairedEmbedding(sa, ua), PairedEmbedding(sb, ub)
    v = strict_introspective_distance(a, b, p)
    alpha, beta = semantic_distance(a, b), similarity_uncertainty(a, b)
    assert v in (0.0, alpha)
    if beta + p.gamma >= alpha:
        assert v == 0.0


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 4, elements=finite), arrays(np.float64, 4, elements=st.floats(0.01, 10)),
       arrays(np.float64, 4, elements=finite), arrays(np.float64, 4, elements=st.floats(0.01, 10)))
def test_kl_nonnegative(m1, v1, m2, v2):
    assert gaussian_kl(DiagGaussian(m1, v1), DiagGaussian(m2, v2)) >= -1e-12
