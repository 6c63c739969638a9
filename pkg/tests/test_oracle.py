import math

import numpy as np
import pytest
from scipy.special import logsumexp

from maskdiff._validation import MASK
from maskdiff.audits import enumerable_instance
from maskdiff.exceptions import InvalidInputError, SizeGuardError
from maskdiff.measurements import Identity, MeasurementSpec
from maskdiff.oracle import (PerturbedDenoiser, RandomCandidate, all_sequences,
                             brute_force_conditional, categorical_kl, empirical_marginals,
                             exact_model_distribution, exact_model_posterior, exact_posterior,
                             tv_distance)
from maskdiff.schedule import NoiseSchedule
from maskdiff.world import TemplatePrior


def test_all_sequences():
    s = all_sequences(3, 2)
    assert s.shape == (9, 2) and len({tuple(r) for r in s}) == 9
    with pytest.raises(SizeGuardError):
        all_sequences(10, 7)


def test_brute_force_matches_denoiser():
    prior = TemplatePrior.random(2, 4, 3, 0.3, random_state=1)
    z = np.array([MASK, 1, MASK, 0])
    np.testing.assert_allclose(brute_force_conditional(prior, z), prior.denoise(z), atol=1e-12)


def test_exact_posterior_flat_likelihood_is_prior():
    cb, dec, sch, prior = enumerable_instance(0)
    spec = MeasurementSpec(Identity(), sigma=math.inf, y=np.zeros(dec.image_shape))
    post = exact_posterior(prior, spec, dec, cb)
    assert post.probs.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(post.probs, [math.exp(prior.log_prob(x)) for x in post.sequences],
                               atol=1e-12)
    np.testing.assert_allclose(post.marginals.sum(axis=1), 1.0)


def test_model_distribution_normalizes_without_tilt():
    cb, dec, sch, prior = enumerable_instance(2)
    for cand in (prior, RandomCandidate(3, seed=4)):
        dist = exact_model_distribution(cand, sch, 3, 3)
        assert all(MASK not in z for z in dist)
        assert logsumexp(list(dist.values())) == pytest.approx(0.0, abs=1e-12)


def test_model_posterior_matches_distribution():
    cb, dec, sch, prior = enumerable_instance(1)
    cand = RandomCandidate(3, seed=1)
    dist = exact_model_distribution(cand, sch, 3, 3)
    for x in [(0, 1, 2), (2, 2, 2)]:
        assert exact_model_posterior(np.array(x), cand, sch, 3) == pytest.approx(dist[x])


def test_single_step_chain_is_factorized_table():
    sch = NoiseSchedule("cosine", 1)
    cand = RandomCandidate(2, seed=0)
    table = cand(np.full(2, MASK), 1)
    dist = exact_model_distribution(cand, sch, 2, 2)
    assert math.exp(dist[(1, 0)]) == pytest.approx(table[0, 1] * table[1, 0])


def test_path_guard():
    with pytest.raises(SizeGuardError):
        exact_model_distribution(RandomCandidate(3), NoiseSchedule("cosine", 5), 3, 3)


def test_kl_and_tv():
    p = np.array([0.5, 0.5, 0.0])
    q = np.array([0.25, 0.25, 0.5])
    assert categorical_kl(p, q) == pytest.approx(math.log(2))
    assert categorical_kl(q, p) == math.inf
    assert tv_distance(p, q) == pytest.approx(0.5)
    with pytest.raises(InvalidInputError):
        tv_distance(p, q[:2])


def test_empirical_marginals():
    m = empirical_marginals(np.array([[0, 1], [0, 0]]), 2)
    np.testing.assert_array_equal(m, [[1.0, 0.0], [0.5, 0.5]])


def test_candidates_are_deterministic_and_respect_reveals():
    cand = RandomCandidate(3, seed=5)
    z = np.array([MASK, 2, MASK])
    np.testing.assert_array_equal(cand(z, 1), RandomCandidate(3, seed=5)(z, 1))
    np.testing.assert_array_equal(cand(z, 1)[1], [0, 0, 1])
    prior = TemplatePrior.random(2, 3, 3, 0.2, random_state=0)
    pert = PerturbedDenoiser(prior, seed=1)
    p = pert(z, 1)
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    assert not np.allclose(p[0], prior(z)[0])
    np.testing.assert_array_equal(p[1], prior(z)[1])
