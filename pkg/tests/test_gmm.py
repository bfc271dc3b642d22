import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment

from rgmp.gmm import (
    GmmParams,
    conditional_aggregate,
    consistency_weights,
    em_fit,
    gmm_density,
    mahalanobis_all,
    mahalanobis_distance,
    refine,
    responsibilities,
    select_nearest,
)


def random_spd(rng, d, scale=1.0):
    a = rng.normal(size=(d, d))
    return scale * (a @ a.T / d + 0.5 * np.eye(d))


def random_theta(seed, k=6, d=6):
    rng = np.random.default_rng(seed)
    priors = rng.uniform(0.5, 1.5, size=k)
    return GmmParams(priors / priors.sum(), rng.normal(scale=2.0, size=(k, d)), np.stack([random_spd(rng, d) for _ in range(k)]))


def density_oracle(x, theta):
    """Direct evaluation with an explicit inverse and determinant."""
    total = 0.0
    d = theta.dim
    for a, mu, cov in zip(theta.priors, theta.means, theta.covariances):
        diff = x - mu
        q = diff @ np.linalg.inv(cov) @ diff
        total += a * math.exp(-0.5 * q) / math.sqrt((2 * math.pi) ** d * np.linalg.det(cov))
    return total


def sample_mixture(rng, means, std, n):
    labels = rng.integers(len(means), size=n)
    return means[labels] + std * rng.normal(size=(n, means.shape[1])), labels


# ---------------------------------------------------------------- parameters


def test_params_validation():
    eye = np.eye(2)[None]
    with pytest.raises(ValueError):
        GmmParams(np.array([0.5]), np.zeros((1, 2)), eye)
    with pytest.raises(ValueError):
        GmmParams(np.array([1.0]), np.zeros((1, 2)), np.array([[[1.0, 2.0], [2.0, 1.0]]]))
    with pytest.raises(ValueError):
        GmmParams(np.array([1.0]), np.zeros((1, 2)), np.array([[[1.0, 0.5], [0.0, 1.0]]]))


# ---------------------------------------------------------------- density


def test_standard_normal_at_mean():
    theta = GmmParams(np.array([1.0]), np.zeros((1, 6)), np.eye(6)[None])
    assert abs(gmm_density(np.zeros(6), theta) - (2 * math.pi) ** -3) < 1e-15
    assert abs((2 * math.pi) ** -3 - 4.03e-3) < 1e-5


def test_component_unimodality():
    theta = random_theta(1, k=1)
    mu = theta.means[0]
    far = mu + 10 * np.sqrt(np.diag(theta.covariances[0]))
    assert gmm_density(mu, theta) >= gmm_density(far, theta)


def test_density_matches_oracle():
    rng = np.random.default_rng(2)
    for i in range(100):
        theta = random_theta(i)
        x = rng.normal(scale=2.0, size=6)
        ref = density_oracle(x, theta)
        assert abs(gmm_density(x, theta) - ref) <= 1e-10 * ref


def test_density_integrates_to_one():
    rng = np.random.default_rng(3)
    theta = GmmParams(
        np.array([0.3, 0.7]),
        np.array([[0.0, 0.0], [2.0, -1.0]]),
        np.stack([random_spd(rng, 2, 0.3), random_spd(rng, 2, 0.2)]),
    )
    lo, hi = -6.0, 8.0
    pts = rng.uniform(lo, hi, size=(400_000, 2))
    estimate = gmm_density(pts, theta).mean() * (hi - lo) ** 2
    assert abs(estimate - 1.0) < 0.02


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_responsibilities_are_distributions(seed):
    theta = random_theta(seed)
    x = np.random.default_rng(seed).normal(scale=3.0, size=(50, 6))
    gamma, _ = responsibilities(x, theta)
    assert np.all(gamma >= 0) and np.all(gamma <= 1)
    np.testing.assert_allclose(gamma.sum(axis=1), 1.0, rtol=0, atol=1e-12)


# ---------------------------------------------------------------- EM


def test_em_single_component_closed_form():
    x = np.random.default_rng(4).normal(size=(300, 6)) @ random_spd(np.random.default_rng(5), 6)
    theta, trace = em_fit(x, k=1, ridge=1e-6)
    assert theta.priors[0] == 1.0
    np.testing.assert_allclose(theta.means[0], x.mean(axis=0), rtol=0, atol=1e-12)
    np.testing.assert_allclose(theta.covariances[0], np.cov(x, rowvar=False, bias=True) + 1e-6 * np.eye(6), rtol=0, atol=1e-12)
    assert len(trace) <= 3


def test_em_two_separated_clusters():
    rng = np.random.default_rng(6)
    gens = np.array([np.full(6, 5.0), np.full(6, -5.0)])
    x, _ = sample_mixture(rng, gens, 1.0, 2000)
    theta, trace = em_fit(x, k=2, seed=0)
    cost = np.linalg.norm(theta.means[:, None] - gens[None], axis=2)
    rows, cols = linear_sum_assignment(cost)
    # oracle: per-cluster sample means
    assert np.all(cost[rows, cols] < 0.15)
    assert np.all(np.diff(trace) >= -1e-9)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5))
def test_em_trace_non_decreasing(seed, k):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(120, 3)) + rng.integers(0, 3, size=(120, 1)) * 2.0
    _, trace = em_fit(x, k=k, seed=seed)
    assert np.all(np.diff(trace) >= -1e-9)


def test_em_rejects_too_few_samples():
    with pytest.raises(ValueError):
        em_fit(np.zeros((3, 6)), k=6)


def test_em_handles_duplicate_points(caplog):
    x = np.repeat(np.eye(6)[:3], 10, axis=0)
    theta, trace = em_fit(x, k=6, seed=0)
    assert theta.n_components == 6
    assert np.all(np.isfinite(trace))


def test_em_deterministic():
    x = np.random.default_rng(7).normal(size=(200, 6))
    a, ta = em_fit(x, k=3, seed=11)
    b, tb = em_fit(x, k=3, seed=11)
    np.testing.assert_array_equal(a.means, b.means)
    assert ta == tb


# ---------------------------------------------------------------- scoring


def test_mahalanobis_examples():
    theta = random_theta(8)
    mu = theta.means[2]
    assert mahalanobis_distance(mu, theta, 2) == 0.0
    eye = GmmParams(np.array([1.0]), np.zeros((1, 6)), np.eye(6)[None])
    x = np.random.default_rng(9).normal(size=6)
    assert abs(mahalanobis_distance(x, eye, 0) - np.linalg.norm(x)) < 1e-12
    with pytest.raises(IndexError):
        mahalanobis_distance(x, theta, 6)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_mahalanobis_scaling(seed, c):
    theta = random_theta(seed)
    scaled = GmmParams(theta.priors, theta.means, c * theta.covariances)
    x = np.random.default_rng(seed).normal(size=6)
    np.testing.assert_allclose(mahalanobis_all(x, scaled), mahalanobis_all(x, theta) / math.sqrt(c), rtol=1e-10)


def test_mahalanobis_affine_invariance():
    rng = np.random.default_rng(10)
    for i in range(20):
        theta = random_theta(i)
        a = rng.normal(size=(6, 6)) + 3 * np.eye(6)
        b = rng.normal(size=6)
        moved = GmmParams(theta.priors, theta.means @ a.T + b, np.einsum("ij,kjl,ml->kim", a, theta.covariances, a))
        x = rng.normal(size=6)
        np.testing.assert_allclose(mahalanobis_all(a @ x + b, moved), mahalanobis_all(x, theta), rtol=1e-8)


def test_select_nearest_matches_enumeration():
    rng = np.random.default_rng(12)
    theta = random_theta(13)
    for _ in range(1000):
        x = rng.normal(scale=3.0, size=6)
        dists = [
            math.sqrt((x - m) @ np.linalg.inv(c) @ (x - m)) for m, c in zip(theta.means, theta.covariances)
        ]
        np.testing.assert_array_equal(select_nearest(x, theta), theta.means[int(np.argmin(dists))])


def test_select_nearest_ties_pick_lowest_index():
    theta = GmmParams(np.array([0.5, 0.5]), np.array([[1.0, 0.0], [-1.0, 0.0]]), np.stack([np.eye(2)] * 2))
    np.testing.assert_array_equal(select_nearest(np.zeros(2), theta), [1.0, 0.0])


def test_argmin_invariant_under_uniform_scaling():
    rng = np.random.default_rng(14)
    for t in range(1000):
        theta = random_theta(t % 50)
        c = float(rng.uniform(0.05, 20.0))
        scaled = GmmParams(theta.priors, theta.means, c * theta.covariances)
        x = rng.normal(scale=3.0, size=6)
        assert np.argmin(mahalanobis_all(x, theta)) == np.argmin(mahalanobis_all(x, scaled))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_nearest_returns_a_mean(seed):
    theta = random_theta(seed)
    x = np.random.default_rng(seed).normal(scale=4.0, size=6)
    out = refine(x, theta, "nearest")
    assert any(np.array_equal(out, m) for m in theta.means)


def test_refine_examples():
    theta = random_theta(15)
    np.testing.assert_array_equal(refine(theta.means[1], theta, "nearest"), theta.means[1])
    single = GmmParams(np.array([1.0]), theta.means[:1], theta.covariances[:1])
    np.testing.assert_allclose(refine(np.ones(6), single, "aggregate"), theta.means[0], rtol=0, atol=1e-15)
    with pytest.raises(ValueError):
        refine(np.ones(6), theta, "median")


def test_aggregate_single_component():
    theta = random_theta(16, k=1)
    mean, cov = conditional_aggregate(np.zeros(6), theta)
    np.testing.assert_array_equal(mean, theta.means[0])
    np.testing.assert_array_equal(cov, theta.covariances[0])


def test_aggregate_far_component_limit():
    means = np.array([np.zeros(6), np.full(6, 100.0), np.full(6, -100.0)])
    theta = GmmParams(np.full(3, 1 / 3), means, np.stack([np.eye(6)] * 3))
    mean, _ = conditional_aggregate(means[0], theta)
    # oracle: softmax of -l_k with l = (0, 245, 245)
    w_other = math.exp(-100 * math.sqrt(6))
    assert np.max(np.abs(mean - means[0])) < 1e-6
    assert w_other < 1e-100


def test_aggregate_identical_components():
    rng = np.random.default_rng(17)
    mu, cov = rng.normal(size=6), random_spd(rng, 6)
    priors = np.array([0.2, 0.3, 0.5])
    theta = GmmParams(priors, np.stack([mu] * 3), np.stack([cov] * 3))
    mean, agg = conditional_aggregate(rng.normal(size=6), theta)
    w = consistency_weights(rng.normal(size=6), theta)
    np.testing.assert_allclose(w, priors, rtol=0, atol=1e-15)
    np.testing.assert_allclose(mean, mu, rtol=0, atol=1e-14)
    np.testing.assert_allclose(agg, cov * np.sum(priors ** 2), rtol=1e-14, atol=0)


def test_modes_agree_when_one_component_dominates():
    rng = np.random.default_rng(18)
    hits = 0
    for _ in range(200):
        theta = GmmParams(np.full(6, 1 / 6), rng.normal(scale=20.0, size=(6, 6)), np.stack([np.eye(6)] * 6))
        x = theta.means[0] + rng.normal(scale=0.3, size=6)
        l = mahalanobis_all(x, theta)
        others = np.delete(l, np.argmin(l))
        if l.min() + 5 < others.min():
            hits += 1
            assert np.max(np.abs(refine(x, theta, "nearest") - refine(x, theta, "aggregate"))) < 1e-1
    assert hits > 100


def test_modes_agree_within_1e3_under_strong_dominance():
    means = np.array([np.zeros(6), np.full(6, 10.0)])
    theta = GmmParams(np.array([0.5, 0.5]), means, np.stack([np.eye(6)] * 2))
    x = np.full(6, 0.1)
    l = mahalanobis_all(x, theta)
    assert l[0] + 5 < l[1]
    assert np.max(np.abs(refine(x, theta, "nearest") - refine(x, theta, "aggregate"))) < 1e-3
