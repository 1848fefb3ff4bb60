import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from introspective.mixer import LabelSet, MixConfig, label_equal, mix_batch, mix_pair, positive_mask


def test_labelset_rules():
    assert LabelSet(3) == LabelSet([3])
    assert LabelSet.from_text("3|7") == LabelSet((3, 7))
    assert LabelSet((7, 3)).to_text() == "3|7"
    for bad in ([], [1, 2, 3], [1, 1]):
        with pytest.raises(ValueError):
            LabelSet(bad)


def test_label_equal_examples():
    assert label_equal(LabelSet(1), LabelSet(1))
    assert label_equal(LabelSet((1, 2)), LabelSet((2, 3)))
    assert not label_equal(LabelSet((1, 2)), LabelSet((3, 4)))


def test_label_equal_not_transitive():
    a, b, c = LabelSet((1, 2)), LabelSet((2, 3)), LabelSet((3, 4))
    assert label_equal(a, b) and label_equal(b, c)
    assert not label_equal(a, c)


labelsets = st.sets(st.integers(0, 5), min_size=1, max_size=2).map(LabelSet)


@settings(max_examples=200, deadline=None)
@given(labelsets, labelsets)
def test_label_equal_reflexive_symmetric(a, b):
    assert label_equal(a, a)
    assert label_equal(a, b) == label_equal(b, a)


@settings(max_examples=100, deadline=None)
@given(st.lists(labelsets, min_size=1, max_size=8), st.lists(labelsets, min_size=1, max_size=8))
def test_positive_mask_matches_rule(rows, cols):
    m = positive_mask(rows, cols)
    for i, a in enumerate(rows):
        for j, b in enumerate(cols):
            assert m[i, j] == label_equal(a, b)


def test_mix_pair_examples():
    rng = np.random.default_rng(0)
    x1, x2 = rng.standard_normal((2, 7))
    np.testing.assert_array_equal(mix_pair(x1, x2, 1.0), x1)
    np.testing.assert_array_equal(mix_pair([2.0, 0.0], [0.0, 2.0], 0.5), [1.0, 1.0])
    got = mix_pair(x1, x2, 0.3)
    for k in range(7):
        assert got[k] == pytest.approx(0.3 * x1[k] + 0.7 * x2[k], rel=1e-15)
    with pytest.raises(ValueError):
        mix_pair([1.0], [1.0, 2.0], 0.5)
    with pytest.raises(ValueError):
        mix_pair([1.0], [2.0], 1.5)


def test_config_validation():
    with pytest.raises(ValueError):
        MixConfig(mix_prob=1.5)
    with pytest.raises(ValueError):
        MixConfig(beta_a=0.0)


def test_mix_batch_disabled():
    x = np.arange(8.0).reshape(4, 2)
    out = mix_batch(x, [0, 1, 0, 1], MixConfig(mix_prob=0.0))
    np.testing.assert_array_equal(out.features, x)
    assert not out.mixed.any() and not out.skipped


def test_mix_batch_count():
    x = np.arange(8.0).reshape(4, 2)
    out = mix_batch(x, [0, 1, 0, 1], MixConfig(mix_prob=1.0))
    assert out.features.shape == (6, 2)
    assert out.mixed.tolist() == [False] * 4 + [True] * 2


def test_mix_batch_single_class_skipped():
    out = mix_batch(np.zeros((3, 2)), [1, 1, 1], MixConfig())
    assert out.skipped and out.features.shape == (3, 2)
    with pytest.raises(ValueError):
        mix_batch(np.zeros((1, 2)), [1], MixConfig())


def test_mix_batch_deterministic():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((20, 4))
    labels = [int(c) for c in rng.integers(0, 4, 20)]
    a = mix_batch(x, labels, MixConfig(rng_seed=5))
    b = mix_batch(x, labels, MixConfig(rng_seed=5))
    np.testing.assert_array_equal(a.features, b.features)
    assert a.labels == b.labels and a.parents == b.parents


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 30), st.floats(0.0, 1.0))
def test_mixed_samples_invariants(seed, n, prob):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 3))
    labels = [LabelSet(int(c)) for c in rng.integers(0, 3, n)]
    out = mix_batch(x, labels, MixConfig(mix_prob=prob, rng_seed=seed))
    assert len(out.parents) == int(out.mixed.sum())
    used = [k for i, j, _ in out.parents for k in (i, j)]
    assert len(used) == len(set(used))
    for row, (i, j, lam) in zip(np.flatnonzero(out.mixed), out.parents):
        ls = out.labels[row]
        assert len(ls) == 2
        assert label_equal(ls, labels[i]) and label_equal(ls, labels[j])
        assert not label_equal(labels[i], labels[j])
        lo = np.minimum(x[i], x[j]) - 1e-12
        hi = np.maximum(x[i], x[j]) + 1e-12
        assert np.all((out.features[row] >= lo) & (out.features[row] <= hi))
        assert 0.0 <= lam <= 1.0
