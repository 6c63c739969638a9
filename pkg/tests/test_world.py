import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from maskdiff import MASK
from maskdiff.exceptions import DegenerateEvidenceError, InvalidInputError
from maskdiff.oracle import brute_force_conditional
from maskdiff.schedule import NoiseSchedule
from maskdiff.world import PatchDecoder, TemplateMixture, TemplatePrior, fit_prior


def test_prior_validation():
    with pytest.raises(InvalidInputError):
        TemplatePrior(np.array([[0, 1]]), np.array([0.5]), 0.1, 2)
    with pytest.raises(InvalidInputError):
        TemplatePrior(np.array([[0, 3]]), np.array([1.0]), 0.1, 3)
    with pytest.raises(InvalidInputError):
        TemplatePrior(np.array([[0, 1]]), np.array([1.0]), 1.0, 2)


def test_sampling_without_noise_hits_templates():
    p = TemplatePrior(np.array([[0, 1, 2], [2, 2, 2]]), np.array([0.5, 0.5]), 0.0, 3)
    xs = p.sample(0, n=200)
    assert all(any(np.array_equal(x, t) for t in p.templates) for x in xs)
    one = TemplatePrior(np.array([[1, 0, 1]]), np.array([1.0]), 0.0, 2)
    assert np.all(one.sample(5, n=50) == [1, 0, 1])


def test_template_frequencies():
    w = np.array([0.2, 0.5, 0.3])
    p = TemplatePrior(np.array([[0, 0], [1, 1], [2, 2]]), w, 0.0, 3)
    n = 100000
    counts = np.bincount(p.sample(1, n=n)[:, 0], minlength=3)
    assert np.all(np.abs(counts - n * w) <= 3 * np.sqrt(n * w * (1 - w)))


def test_positive_probability_with_noise():
    p = TemplatePrior.random(2, 3, 3, 0.1, random_state=0)
    total = sum(np.exp(p.log_prob(np.array(x))) for x in itertools.product(range(3), repeat=3))
    assert total == pytest.approx(1.0, abs=1e-12)
    assert all(p.log_prob(np.array(x)) > -np.inf for x in itertools.product(range(3), repeat=3))


def test_denoise_example():
    p = TemplatePrior(np.array([[0, 0, 1], [1, 1, 1]]), np.array([0.5, 0.5]), 0.0, 2)
    rows = p.denoise(np.array([0, MASK, MASK]))
    np.testing.assert_array_equal(rows, [[1, 0], [1, 0], [0, 1]])
    np.testing.assert_allclose(p.denoise(np.full(3, MASK)), p.marginals())
    with pytest.raises(DegenerateEvidenceError):
        TemplatePrior(np.array([[0, 0]]), np.array([1.0]), 0.0, 2).denoise(np.array([1, MASK]))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_denoise_matches_enumeration(seed):
    rng = np.random.RandomState(seed)
    p = TemplatePrior.random(int(rng.randint(1, 4)), 4, 3, float(rng.uniform(0.01, 0.5)), random_state=rng)
    z = rng.randint(3, size=4)
    z[rng.rand(4) < 0.6] = MASK
    rows = p.denoise(z)
    np.testing.assert_allclose(rows.sum(axis=1), 1.0, atol=1e-12)
    assert np.abs(rows - brute_force_conditional(p, z)).max() <= 1e-12


def test_fit_degenerate():
    X = np.tile([1, 0, 2], (30, 1))
    est = TemplateMixture(n_templates=1, n_tokens=3, random_state=0).fit(X)
    np.testing.assert_array_equal(est.prior_.templates[0], [1, 0, 2])
    assert est.prior_.rho == pytest.approx(1e-3)


def test_fit_warns_when_templates_exceed_distinct_samples():
    with pytest.warns(UserWarning):
        TemplateMixture(n_templates=3, n_tokens=2, random_state=0).fit(np.array([[0, 1], [0, 1]]))


def test_fit_recovers_templates():
    hits = 0
    seeds = range(20)
    for s in seeds:
        truth = TemplatePrior.random(2, 8, 4, 0.05, random_state=100 + s)
        X = truth.sample(s, n=500)
        prior, report = fit_prior(X, 2, iters=100, n_tokens=4, random_state=s)
        found = {tuple(t) for t in prior.templates}
        hits += found == {tuple(t) for t in truth.templates}
        ll = report["log_likelihood_history"]
        assert all(b >= a - 1e-9 for a, b in zip(ll, ll[1:]))
    assert hits / len(seeds) >= 0.95


def test_fit_prior_reports_held_out_nelbo():
    truth = TemplatePrior.random(2, 4, 3, 0.1, random_state=0)
    _, report = fit_prior(truth.sample(0, n=200), 2, n_tokens=3, random_state=0,
                          held_out=truth.sample(1, n=5), schedule=NoiseSchedule("cosine", 3))
    assert np.isfinite(report["held_out_nelbo"])


def test_estimator_api():
    est = TemplateMixture(n_templates=2, n_tokens=3, random_state=0)
    assert est.get_params()["n_templates"] == 2
    X = TemplatePrior.random(2, 4, 3, 0.1, random_state=0).sample(0, n=100)
    est.fit(X)
    assert np.isfinite(est.score(X))
    proba = est.predict_proba(X[:5])
    assert proba.shape == (5, 4, 3)
    np.testing.assert_allclose(proba.sum(axis=-1), 1.0)
    assert est.sample(7, random_state=0).shape == (7, 4)


def test_decoder_linear_structure():
    dec = PatchDecoder((2, 3), 2, 3, seed=4)
    assert dec.image_shape == (4, 6) and dec.length == 6
    assert np.all(dec.decode(np.zeros((6, 3))) == 0)
    rng = np.random.RandomState(0)
    E1, E2 = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
    np.testing.assert_allclose(dec(2 * E1 - 3 * E2), 2 * dec(E1) - 3 * dec(E2), atol=1e-12)
    E3 = E1.copy()
    E3[4] += 1.0
    diff = dec(E3) != dec(E1)
    assert diff[2:4, 2:4].all() and diff.sum() == 4
    bound = 1 / np.sqrt(3)
    assert np.all(np.abs(dec.weight) <= bound)
    np.testing.assert_array_equal(PatchDecoder((2, 3), 2, 3, seed=4).weight, dec.weight)


def test_decoder_jacobian_and_vjp():
    for output in ("linear", "tanh"):
        dec = PatchDecoder((2, 2), 2, 2, seed=1, output=output)
        rng = np.random.RandomState(1)
        E = rng.standard_normal((4, 2))
        G = rng.standard_normal(dec.image_shape)
        fd = np.zeros_like(E)
        h = 1e-6
        for idx in np.ndindex(E.shape):
            e = np.zeros_like(E)
            e[idx] = h
            fd[idx] = ((dec(E + e) - dec(E - e)) * G).sum() / (2 * h)
        g = dec.vjp(E, G)
        assert np.linalg.norm(g - fd) / np.linalg.norm(fd) <= 1e-7
    J = PatchDecoder((2, 2), 2, 2, seed=1).jacobian()
    np.testing.assert_array_equal(J, PatchDecoder((2, 2), 2, 2, seed=1).weight)
