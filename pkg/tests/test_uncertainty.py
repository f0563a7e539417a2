import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cimlab.bayesian import PredictiveResult
from cimlab.uncertainty import OOD, ScoredSet, auroc, ece, mutual_information, ood_eval, predictive_entropy


def result(samples):
    samples = np.asarray(samples, dtype=np.float64)
    return PredictiveResult(samples.mean(axis=0), samples)


@pytest.mark.parametrize("probs, expected", [
    ([1.0] + [0.0] * 9, 0.0),
    ([0.1] * 10, math.log(10)),
    ([0.5, 0.5] + [0.0] * 8, math.log(2)),
])
def test_entropy_values(probs, expected):
    assert predictive_entropy(result([[probs]]))[0] == pytest.approx(expected, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (3, 4, 6), elements=st.floats(0.0, 1.0)), st.permutations(range(6)))
def test_scores_bounded_and_label_free(raw, perm):
    raw = raw + 1e-9
    samples = raw / raw.sum(axis=-1, keepdims=True)
    h = predictive_entropy(result(samples))
    assert np.all(h >= -1e-12) and np.all(h <= math.log(6) + 1e-12)
    shuffled = result(samples[..., list(perm)])
    assert np.allclose(predictive_entropy(shuffled), h)
    assert np.allclose(mutual_information(shuffled), mutual_information(result(samples)))


def test_mutual_information_identical_samples():
    r = result([[[0.2, 0.3, 0.5]]] * 5)
    assert mutual_information(r)[0] == pytest.approx(0.0, abs=1e-12)


def test_mutual_information_disagreeing_samples():
    r = result([[[1.0, 0.0]], [[0.0, 1.0]]])
    assert mutual_information(r)[0] == pytest.approx(math.log(2), abs=1e-12)


def test_mutual_information_needs_two_samples():
    with pytest.raises(ValueError):
        mutual_information(result([[[0.5, 0.5]]]))


@settings(max_examples=1000, deadline=None)
@given(arrays(np.float64, (4, 1, 5), elements=st.floats(0.0, 1.0)))
def test_mutual_information_bounded_by_entropy(raw):
    raw = raw + 1e-9
    r = result(raw / raw.sum(axis=-1, keepdims=True))
    mi, h = mutual_information(r)[0], predictive_entropy(r)[0]
    assert 0.0 <= mi <= h + 1e-12


def test_ece_perfectly_calibrated():
    # confidence 0.75 and exactly three in four correct
    probs = np.tile([0.75, 0.25], (4, 1))
    assert ece(probs, np.array([0, 0, 0, 1])) == pytest.approx(0.0, abs=1e-12)


def test_ece_confident_and_wrong():
    probs = np.tile([1.0, 0.0], (6, 1))
    assert ece(probs, np.ones(6, dtype=int)) == pytest.approx(1.0)


def ece_oracle(probs, labels, bins):
    conf = probs.max(1)
    correct = probs.argmax(1) == labels
    total = 0.0
    for k in range(bins):
        lo, hi = k / bins, (k + 1) / bins
        sel = np.array([(lo < c <= hi) or (k == 0 and c == 0) for c in conf])
        if sel.any():
            total += sel.sum() / len(conf) * abs(correct[sel].mean() - conf[sel].mean())
    return total


@pytest.mark.parametrize("seed, bins", [(0, 15), (1, 10), (2, 5), (3, 1)])
def test_ece_matches_bin_loop(seed, bins):
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(4) * 0.5, size=300)
    labels = rng.integers(0, 4, 300)
    assert ece(probs, labels, bins) == pytest.approx(ece_oracle(probs, labels, bins), abs=1e-12)


def test_separated_scores():
    out = ood_eval(ScoredSet(np.linspace(0, 1, 100)), ScoredSet(np.linspace(2, 3, 100), origin=OOD))
    assert out["auroc"] == 1.0 and out["detection_rate_at_5pct_fpr"] == 1.0


def test_identical_distributions_near_chance():
    rng = np.random.default_rng(0)
    assert abs(auroc(rng.standard_normal(1000), rng.standard_normal(1000)) - 0.5) <= 0.03


def test_auroc_matches_pairwise_count():
    rng = np.random.default_rng(5)
    a = rng.integers(0, 20, 200).astype(float)
    b = rng.integers(5, 25, 200).astype(float)
    pairs = [(1.0 if y > x else 0.5 if y == x else 0.0) for x, y in itertools.product(a, b)]
    assert auroc(a, b) == pytest.approx(np.mean(pairs), abs=1e-12)


@pytest.mark.parametrize("transform", [np.exp, lambda s: 3 * s + 7, lambda s: s ** 3])
def test_monotone_transform_invariance(transform):
    rng = np.random.default_rng(2)
    a, b = rng.standard_normal(300), rng.standard_normal(300) + 1
    base = ood_eval(ScoredSet(a), ScoredSet(b))
    moved = ood_eval(ScoredSet(transform(a)), ScoredSet(transform(b)))
    assert moved["auroc"] == pytest.approx(base["auroc"], abs=1e-12)
    assert moved["detection_rate_at_5pct_fpr"] == base["detection_rate_at_5pct_fpr"]


def test_false_positive_rate_at_threshold():
    scores = np.arange(1000.0)
    out = ood_eval(ScoredSet(scores), ScoredSet(scores))
    assert (scores > out["threshold"]).mean() <= 0.05


@pytest.mark.parametrize("bad", [[], [np.nan]])
def test_invalid_score_sets(bad):
    with pytest.raises(ValueError):
        ood_eval(ScoredSet(bad), ScoredSet([1.0]))
