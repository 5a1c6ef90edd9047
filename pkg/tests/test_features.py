import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mots_refine.features import (
    INTRA_FRAME_NEGATIVE,
    INTRA_TRACKLET_POSITIVE,
    EmbeddingStore,
    EstimationError,
    SeparationError,
    SimilaritySampleSet,
    Thresholds,
    collect_intra_frame_similarities,
    collect_intra_tracklet_similarities,
    cosine_similarity,
    estimate_theta_long,
    estimate_theta_short,
    gaussian_crossing,
)


def neg(values):
    return SimilaritySampleSet(np.asarray(values, float), INTRA_FRAME_NEGATIVE)


def pos(values):
    return SimilaritySampleSet(np.asarray(values, float), INTRA_TRACKLET_POSITIVE)


def test_cosine_examples():
    assert cosine_similarity([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert cosine_similarity([1, 1, 0], [1, 0, 0]) == pytest.approx(1 / math.sqrt(2))


def test_cosine_errors():
    with pytest.raises(ValueError):
        cosine_similarity([0, 0], [1, 0])
    with pytest.raises(ValueError):
        cosine_similarity([1, 0], [1, 0, 0])


def test_cosine_clamped():
    v = np.array([0.1] * 7)
    assert cosine_similarity(v, v) <= 1.0


finite = st.floats(-10, 10, allow_nan=False).filter(lambda x: abs(x) > 1e-3)


@settings(max_examples=100)
@given(st.lists(finite, min_size=3, max_size=3), st.lists(finite, min_size=3, max_size=3), st.floats(0.01, 100))
def test_cosine_symmetric_and_scale_invariant(a, b, k):
    s = cosine_similarity(a, b)
    assert s == pytest.approx(cosine_similarity(b, a), abs=1e-12)
    assert cosine_similarity(a, np.array(b) * k) == pytest.approx(s, abs=1e-9)


def test_store_rejects_zero_norm_and_duplicates():
    with pytest.raises(ValueError, match="zero-norm"):
        EmbeddingStore([(1, 1)], np.zeros((1, 3)))
    with pytest.raises(ValueError, match="duplicate"):
        EmbeddingStore([(1, 1), (1, 1)], np.ones((2, 3)))
    with pytest.raises(ValueError, match="non-finite"):
        EmbeddingStore([(1, 1)], np.array([[np.nan, 1.0]]))


def test_store_lookup_error_names_key():
    s = EmbeddingStore([(1, 1)], np.ones((1, 2)))
    with pytest.raises(KeyError, match=r"\(2, 5\)"):
        s.vector((2, 5))


def test_intra_frame_counts(rng):
    keys = [(f, k) for f in range(1, 4) for k in range(1, 4)]
    store = EmbeddingStore(keys, rng.standard_normal((9, 4)))
    one_each = {f: [(f, 1)] for f in range(1, 4)}
    assert len(collect_intra_frame_similarities(one_each, store)) == 0
    assert len(collect_intra_frame_similarities({1: [(1, 1), (1, 2), (1, 3)]}, store)) == 3


def test_intra_frame_count_matches_pair_formula(rng):
    frames = {}
    keys = []
    for f in range(1, 101):
        n = int(rng.integers(0, 6))
        frames[f] = [(f, k) for k in range(n)]
        keys.extend(frames[f])
    store = EmbeddingStore(keys, rng.standard_normal((len(keys), 8)))
    samples = collect_intra_frame_similarities(frames, store)
    assert len(samples) == sum(math.comb(len(v), 2) for v in frames.values())
    # values equal the direct pairwise computation
    expected = [cosine_similarity(store.vector(a), store.vector(b))
                for v in frames.values() for i, a in enumerate(v) for b in v[i + 1:]]
    assert np.allclose(samples.values, expected, atol=1e-12)


def test_intra_tracklet_pairs(rng):
    keys = [(f, 1) for f in range(5)]
    store = EmbeddingStore(keys, rng.standard_normal((5, 3)))
    s = collect_intra_tracklet_similarities([keys[:3], keys[3:4]], store)
    assert s.kind == INTRA_TRACKLET_POSITIVE and len(s) == 3


def test_theta_short_degenerate_variance():
    assert estimate_theta_short(neg([0.3] * 40)) == pytest.approx(0.3)


def test_theta_short_population_convention():
    # mean 0.1, population sd 0.1
    assert estimate_theta_short(neg([0.0, 0.2]), min_samples=2) == pytest.approx(0.4)


def test_theta_short_normal_draws():
    values = np.clip(np.random.default_rng(0).normal(0.10, 0.05, 10_000), -1, 1)
    assert estimate_theta_short(neg(values)) == pytest.approx(0.25, abs=0.01)


def test_theta_short_clamped_at_one():
    assert estimate_theta_short(neg([0.9, 1.0] * 20)) <= 1.0


def test_theta_short_needs_samples():
    with pytest.raises(EstimationError, match="fallback"):
        estimate_theta_short(neg([0.1] * 29))


def test_theta_short_rejects_positive_kind():
    with pytest.raises(ValueError):
        estimate_theta_short(pos([0.1] * 40))


@settings(max_examples=50)
@given(st.floats(-0.3, 0.3))
def test_theta_short_translation_equivariant(delta):
    base = np.random.default_rng(3).uniform(-0.2, 0.2, 100)
    a = estimate_theta_short(neg(base))
    b = estimate_theta_short(neg(base + delta))
    assert b == pytest.approx(a + delta, abs=1e-9)


def test_theta_long_symmetric_normals():
    r = np.random.default_rng(1)
    n = neg(np.clip(r.normal(0.1, 0.05, 10_000), -1, 1))
    p = pos(np.clip(r.normal(0.9, 0.05, 10_000), -1, 1))
    assert estimate_theta_long(n, p) == pytest.approx(0.5, abs=0.02)


def test_theta_long_equal_variance_is_midpoint():
    base = np.random.default_rng(2).uniform(-0.1, 0.1, 200)
    n, p = neg(base + 0.1), pos(base + 0.7)
    assert estimate_theta_long(n, p) == (n.mean + p.mean) / 2


def scan_crossing(mu_n, sd_n, mu_p, sd_p, step=1e-4):
    """Brute-force density scan between the means."""
    xs = np.arange(mu_n + step, mu_p, step)
    ln = -((xs - mu_n) ** 2) / (2 * sd_n**2) - np.log(sd_n)
    lp = -((xs - mu_p) ** 2) / (2 * sd_p**2) - np.log(sd_p)
    return xs[np.argmin(np.abs(ln - lp))]


@pytest.mark.parametrize(
    "mu_n,sd_n,mu_p,sd_p",
    [(0.2, 0.10, 0.8, 0.05), (0.0, 0.2, 0.6, 0.1), (0.1, 0.02, 0.9, 0.2), (-0.2, 0.3, 0.5, 0.29)],
)
def test_gaussian_crossing_matches_scan(mu_n, sd_n, mu_p, sd_p):
    got = gaussian_crossing(mu_n, sd_n, mu_p, sd_p)
    assert mu_n < got < mu_p
    assert got == pytest.approx(scan_crossing(mu_n, sd_n, mu_p, sd_p), abs=1e-4)


def test_theta_long_from_samples_matches_scan():
    r = np.random.default_rng(4)
    n = neg(np.clip(r.normal(0.2, 0.10, 5000), -1, 1))
    p = pos(np.clip(r.normal(0.8, 0.05, 5000), -1, 1))
    assert estimate_theta_long(n, p) == pytest.approx(scan_crossing(n.mean, n.std, p.mean, p.std), abs=1e-4)


def test_crossing_fallback_when_no_root_between_means():
    # negatives ten times wider and means nearly equal: the negative density
    # dominates on the whole interval
    got = gaussian_crossing(0.0, 1.0, 0.01, 0.1)
    assert got == pytest.approx((0.0 * 0.1 + 0.01 * 1.0) / 1.1)


def test_theta_long_separation_failure():
    with pytest.raises(SeparationError):
        estimate_theta_long(neg([0.5] * 40), pos([0.4] * 40))


def test_theta_long_needs_samples():
    with pytest.raises(EstimationError):
        estimate_theta_long(neg([0.1] * 40), pos([0.9] * 10))


def test_otsu_alternative_lies_between_modes():
    r = np.random.default_rng(5)
    n = neg(np.clip(r.normal(0.1, 0.05, 2000), -1, 1))
    p = pos(np.clip(r.normal(0.9, 0.05, 2000), -1, 1))
    assert 0.25 < estimate_theta_long(n, p, method="otsu") < 0.75


def test_estimators_deterministic():
    v = np.random.default_rng(6).uniform(0, 0.3, 500)
    w = np.random.default_rng(7).uniform(0.6, 1.0, 500)
    assert estimate_theta_short(neg(v)) == estimate_theta_short(neg(v.copy()))
    assert estimate_theta_long(neg(v), pos(w)) == estimate_theta_long(neg(v.copy()), pos(w.copy()))


def test_thresholds_validation():
    Thresholds(0.3, 0.6, 15)
    with pytest.raises(ValueError):
        Thresholds(0.3, 0.6, 0)
    with pytest.raises(ValueError):
        Thresholds(1.3, 0.6, 1)


def test_sample_set_rejects_out_of_range():
    with pytest.raises(ValueError):
        neg([1.5])
