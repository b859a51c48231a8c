import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rfsep import metrics as M
from rfsep.metrics import EmbedStats, MetricError


def stats1d(mu, var):
    return EmbedStats(np.array([mu], float), np.array([[var]], float), 2)


def test_embedding_stats_examples():
    s = M.embedding_stats(np.ones((2, 3)))
    np.testing.assert_allclose(s.cov, 1e-6 * np.eye(3), atol=1e-18)
    r = np.random.default_rng(0)
    s = M.embedding_stats(r.standard_normal((10_000, 4)))
    assert np.all(np.abs(s.mean) <= 0.05)
    assert np.all(np.abs(s.cov - np.eye(4)) <= 0.1)
    with pytest.raises(MetricError):
        M.embedding_stats(np.ones((1, 3)))


@pytest.mark.parametrize("a, b, expected", [
    ((0, 1), (1, 1), 1.0),
    ((0, 1), (0, 4), 1.0),
    ((3, 2), (3, 2), 0.0),
])
def test_frechet_closed_forms(a, b, expected):
    assert M.frechet_distance(stats1d(*a), stats1d(*b)) == pytest.approx(expected, abs=1e-8)


@settings(max_examples=100)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(0.01, 9), st.floats(-5, 5), st.floats(0.01, 9)), min_size=1, max_size=5))
def test_frechet_diagonal_closed_form(dims):
    m1, v1, m2, v2 = (np.array(x) for x in zip(*dims))
    s1 = EmbedStats(m1, np.diag(v1), 2)
    s2 = EmbedStats(m2, np.diag(v2), 2)
    expected = np.sum((m1 - m2) ** 2 + (np.sqrt(v1) - np.sqrt(v2)) ** 2)
    assert M.frechet_distance(s1, s2) == pytest.approx(expected, abs=1e-8)


@settings(max_examples=50)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_frechet_symmetric_nonnegative(seed, d):
    r = np.random.default_rng(seed)
    a, b = (M.embedding_stats(r.standard_normal((d + 5, d)) @ r.standard_normal((d, d))) for _ in range(2))
    ab, ba = M.frechet_distance(a, b), M.frechet_distance(b, a)
    assert ab >= 0
    assert ab == pytest.approx(ba, abs=1e-8)
    assert M.frechet_distance(a, a) == pytest.approx(0.0, abs=1e-8)


def test_frechet_errors():
    with pytest.raises(MetricError):
        M.frechet_distance(stats1d(0, 1), EmbedStats(np.zeros(2), np.eye(2), 2))
    with pytest.raises(MetricError):
        M.frechet_distance(stats1d(np.nan, 1), stats1d(0, 1))


def test_lsd_examples():
    a = np.random.default_rng(0).standard_normal((10, 8))
    assert M.log_spectral_distance(a, a) == 0.0
    assert M.log_spectral_distance(a, a + 0.1) == pytest.approx(1.0)
    x = np.array([[0.0, 1.0], [2.0, 3.0]])
    y = np.array([[1.0, 1.0], [2.0, 1.0]])
    # squared diffs 1, 0, 0, 4 -> mean 1.25
    assert M.log_spectral_distance(x, y) == pytest.approx(10 * np.sqrt(1.25))
    with pytest.raises(MetricError):
        M.log_spectral_distance(x, y[:1])


def test_si_sdr_examples():
    r = np.random.default_rng(1)
    ref = r.standard_normal(1000)
    assert M.si_sdr(ref, ref) == 60.0
    assert M.si_sdr(2 * ref, ref) == 60.0
    n = r.standard_normal(1000)
    n -= (n @ ref) / (ref @ ref) * ref
    n *= np.linalg.norm(ref) / np.linalg.norm(n)
    assert M.si_sdr(ref + n, ref) == pytest.approx(0.0, abs=1e-9)
    with pytest.raises(MetricError):
        M.si_sdr(ref, np.zeros(1000))
    with pytest.raises(MetricError):
        M.si_sdr(ref[:10], ref)


@settings(max_examples=50)
@given(st.integers(0, 1000), st.floats(1e-3, 1e3))
def test_si_sdr_scale_invariant(seed, scale):
    r = np.random.default_rng(seed)
    ref, est = r.standard_normal(256), r.standard_normal(256)
    assert M.si_sdr(scale * est, ref) == pytest.approx(M.si_sdr(est, ref), abs=1e-9)


def _toy_corpus(n_per=12, seed=0):
    """Two trivially separable 'classes': energy in low vs high mel bins."""
    r = np.random.default_rng(seed)
    mels, labels = [], []
    for k in range(2 * n_per):
        m = np.full((20, 16), -5.0) + 0.1 * r.standard_normal((20, 16))
        band = slice(0, 4) if k % 2 == 0 else slice(12, 16)
        m[:, band] = -1.0 + 0.1 * r.standard_normal((20, 4))
        mels.append(m)
        labels.append(k % 2)
    return np.array(mels, np.float32), np.array(labels)


def test_classifier_trains_and_scores():
    mels, labels = _toy_corpus()
    clf, losses = M.train_query_classifier(mels, labels, 3, steps=60, batch=8, lr=3e-3, seed=0)
    assert losses[-1] < losses[0]
    test, test_labels = _toy_corpus(seed=1)
    assert M.accuracy(clf, test, test_labels) == 1.0
    p = clf.probs(test)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)
    c = M.consistency_score(test[0], 0, clf)
    assert 0 <= c <= 1 and c == pytest.approx(p[0, 0], abs=1e-7)
    with pytest.raises(MetricError):
        M.consistency_score(test[0], 3, clf)
    e = M.embedding_of(test[0], clf)
    assert e.shape == (32,)
    np.testing.assert_array_equal(e, M.embedding_of(test[0], clf))
    means = [M.embedding_of(test[test_labels == k], clf).mean(0) for k in (0, 1)]
    assert np.linalg.norm(means[0] - means[1]) > 0


def test_classifier_errors_and_uniform_logits():
    mels, labels = _toy_corpus(3)
    with pytest.raises(MetricError):
        M.train_query_classifier(mels, np.zeros(len(mels), int), 2, steps=1)
    with pytest.raises(MetricError):
        M.QueryClassifier(1)
    clf = M.QueryClassifier(6, 20, 16)
    for p in (clf.out.weight, clf.out.bias):
        p.data[:] = 0
    np.testing.assert_allclose(clf.probs(mels[:2]), 1 / 6, atol=1e-7)


def test_report_format(tmp_path):
    rep = {"flow": {"lsd_db": M.summarize([1.0, 3.0, 2.0])}}
    M.write_report(tmp_path / "m.json", rep)
    back = json.loads((tmp_path / "m.json").read_text())
    assert back["flow"]["lsd_db"] == {"per_item": [1.0, 3.0, 2.0], "mean": 2.0, "median": 2.0}
