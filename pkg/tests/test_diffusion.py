import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from maskdiff import MASK
from maskdiff.diffusion import (aps_loss, ddps_loss, forward_sample, nelbo, nelbo_mc,
                                posterior_step, practical_aps_loss, reconstruction_term,
                                step_kl, tilted_reveal_weights)
from maskdiff.exceptions import InvalidInputError
from maskdiff.oracle import RandomCandidate, categorical_kl
from maskdiff.schedule import NoiseSchedule
from maskdiff.world import TemplatePrior

LIN3 = NoiseSchedule("linear", 3)  # reveal_weight(3) = 1/3


def test_forward_sample_boundaries():
    x = np.arange(10) % 3
    s = NoiseSchedule("cosine", 5)
    assert np.array_equal(forward_sample(x, 0.0, s, 0), x)
    assert np.all(forward_sample(x, 1.0, s, 0) == MASK)


def test_forward_sample_concentration():
    s = NoiseSchedule("linear", 4)
    x = np.zeros(10000, dtype=int)
    frac = np.mean(forward_sample(x, 0.75, s, 1) == MASK)
    assert abs(frac - 0.75) <= 3 * math.sqrt(0.75 * 0.25 / 10000)


def test_posterior_step_example():
    assert LIN3.reveal_weight(3) == pytest.approx(1 / 3)
    out = posterior_step(np.array([MASK, 1]), np.array([[0.5, 0.5, 0.0], [0.2, 0.3, 0.5]]), 3, LIN3)
    np.testing.assert_allclose(out[0], [1 / 6, 1 / 6, 0.0, 2 / 3])
    np.testing.assert_array_equal(out[1], [0, 1, 0, 0])


@given(st.integers(1, 6), st.integers(2, 6), st.integers(0, 2 ** 32 - 1))
def test_posterior_step_normalized(L, K, seed):
    rng = np.random.RandomState(seed)
    z = rng.randint(-1, K, size=L)
    out = posterior_step(z, rng.dirichlet(np.ones(K), size=L), int(rng.randint(1, 4)), LIN3)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(out >= 0)


def test_step_kl_examples():
    assert step_kl(0, [0.5, 0.5], 3, True, LIN3) == pytest.approx(math.log(2) / 3, abs=1e-8)
    assert step_kl(0, [0.5, 0.5], 3, False, LIN3) == 0.0
    assert step_kl(1, [0.0, 1.0], 3, True, LIN3) == 0.0
    assert step_kl(0, [0.0, 1.0], 3, True, LIN3) == math.inf


def test_step_kl_matches_enumeration():
    rng = np.random.RandomState(3)
    for _ in range(50):
        row = rng.dirichlet(np.ones(4))
        x = int(rng.randint(4))
        i = int(rng.randint(1, 4))
        z = np.array([MASK])
        kl = categorical_kl(posterior_step(z, np.eye(4)[[x]], i, LIN3)[0],
                            posterior_step(z, row[None], i, LIN3)[0])
        assert step_kl(x, row, i, True, LIN3) == pytest.approx(kl, abs=1e-12)


def test_tilted_weights():
    row = np.array([0.2, 0.5, 0.3])
    base = posterior_step(np.array([MASK]), row[None], 2, LIN3)[0]
    np.testing.assert_array_equal(tilted_reveal_weights(row, 1.0, 2, LIN3), base)
    half = tilted_reveal_weights(row, 0.5, 2, LIN3)
    np.testing.assert_allclose(half, base / 2)
    assert np.argmax(half[:3]) == np.argmax(base[:3])
    with pytest.raises(InvalidInputError):
        tilted_reveal_weights(row, 0.0, 2, LIN3)


def prior3():
    return TemplatePrior(np.array([[0, 1, 2], [2, 2, 0]]), np.array([0.6, 0.4]), 0.1, 3)


def test_nelbo_single_step():
    p = prior3()
    x = np.array([0, 2, 2])
    s = NoiseSchedule("cosine", 1)
    table = p(np.full(3, MASK))
    expected = -np.log(table[np.arange(3), x]).sum()
    assert nelbo(x, p, s) == pytest.approx(expected, abs=1e-12)


def test_nelbo_deterministic_prior_is_zero():
    p = TemplatePrior(np.array([[1, 0, 2, 2]]), np.array([1.0]), 0.0, 3)
    assert nelbo(np.array([1, 0, 2, 2]), p, NoiseSchedule("cosine", 4)) == 0.0
    assert reconstruction_term(np.array([1, 0, 2, 2])) == 0.0


def test_nelbo_monte_carlo_agrees():
    p = prior3()
    x = np.array([0, 1, 0])
    s = NoiseSchedule("cosine", 3)
    exact = nelbo(x, p, s)
    mean, se = nelbo_mc(x, p, s, 100000, random_state=0)
    assert abs(mean - exact) <= 3 * se


def _loglik(table):
    return -float(((table - 0.3) ** 2).sum())


def test_ddps_flat_and_shift():
    phi = RandomCandidate(3, seed=4)
    x = np.array([2, 0, 1])
    s = NoiseSchedule("cosine", 3)
    assert ddps_loss(x, phi, s) == pytest.approx(nelbo(x, phi, s), abs=1e-12)
    c = 0.37
    shifted = ddps_loss(x, phi, s, lambda t: _loglik(t) + c)
    assert shifted == pytest.approx(ddps_loss(x, phi, s, _loglik) - s.steps * c, abs=1e-12)


def test_aps_identity_and_equivalence():
    p = prior3()
    s = NoiseSchedule("cosine", 3)
    x = np.array([0, 1, 2])
    tilt = nelbo(x, p, s) - ddps_loss(x, p, s, _loglik)
    assert aps_loss(x, p, p, s, _loglik) == pytest.approx(nelbo(x, p, s) - tilt, abs=1e-12)
    phi = RandomCandidate(3, seed=9)
    assert aps_loss(x, phi, p, s, _loglik) == pytest.approx(ddps_loss(x, phi, s, _loglik), abs=1e-10)


def test_practical_bound_with_one_hot_pretrained():
    x = np.array([1])
    one_hot = lambda z, i=None: np.eye(3)[[1]]
    phi = RandomCandidate(3, seed=2)
    s = NoiseSchedule("cosine", 3)
    assert practical_aps_loss(x, phi, one_hot, s, _loglik) == pytest.approx(
        aps_loss(x, phi, one_hot, s, _loglik), abs=1e-12)


def test_monte_carlo_mode_requires_draws():
    with pytest.raises(InvalidInputError):
        nelbo(np.array([0, 1]), prior3(), LIN3, exact=False)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_ddps_bound_over_random_candidates(seed):
    from maskdiff.oracle import exact_model_posterior

    phi = RandomCandidate(3, seed=seed)
    rng = np.random.RandomState(seed)
    x = rng.randint(3, size=3)
    s = NoiseSchedule("cosine", 3)
    assert ddps_loss(x, phi, s, _loglik) >= -exact_model_posterior(x, phi, s, 3, _loglik) - 1e-9
