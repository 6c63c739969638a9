import numpy as np
import pytest

from maskdiff._validation import softmax
from maskdiff.audits import gradient_error
from maskdiff.codebook import Codebook, lfq_quantize
from maskdiff.config import preset
from maskdiff.exceptions import InvalidInputError
from maskdiff.harness import build_world, synthesize_task
from maskdiff.inner_opt import (AdamState, OptConfig, Pipeline, expected_embedding, optimize,
                                prior_preservation_loss, quantized_log_likelihood, ste_offset)
from maskdiff.measurements import Downsample, Identity, MeasurementSpec, PixelMask
from maskdiff.world import PatchDecoder


def _setup(op=None, loss="l2", lambda_p=0.0, lambda_pp=0.0, seed=0):
    rng = np.random.RandomState(seed)
    cb = Codebook(2)
    dec = PatchDecoder((2, 2), 4, 2, seed=seed)
    op = op or Identity()
    y = op(dec(cb.embed(rng.randint(4, size=4))))
    spec = MeasurementSpec(op, sigma=0.05, loss=loss, y=y, lambda_p=lambda_p, lambda_pp=lambda_pp)
    prior = rng.dirichlet(np.ones(4), size=4)
    return cb, dec, spec, prior, rng


def test_expected_embedding_is_convex_combination():
    cb = Codebook(3)
    onehot = np.eye(8)[[0, 5, 7]]
    np.testing.assert_array_equal(expected_embedding(onehot, cb), cb.entries[[0, 5, 7]])
    uniform = np.full((2, 8), 1 / 8)
    np.testing.assert_allclose(expected_embedding(uniform, cb), 0.0, atol=1e-15)


def test_prior_preservation():
    prior = np.array([[0.5, 0.5], [0.9, 0.1]])
    flags = np.array([True, False])
    assert prior_preservation_loss(prior, prior, np.zeros(2, bool)) == 0.0
    loss, g = prior_preservation_loss(np.array([[1.0, 0.0], [0.2, 0.8]]), prior, flags, with_grad=True)
    assert loss == pytest.approx(-np.log(0.5) / 2)
    assert np.all(g[1] == 0) and g[0, 0] == pytest.approx(-0.5 / (0.5 * 2))


@pytest.mark.parametrize("case", [dict(), dict(loss="l1"), dict(op=Downsample(2), lambda_p=0.1),
                                  dict(op=PixelMask(0.6, 3), lambda_pp=0.2)])
def test_backward_matches_surrogate_differences(case):
    cb, dec, spec, prior, rng = _setup(**case)
    pipe = Pipeline(cb, dec, spec, prior, rng.rand(4) < 0.7)
    assert gradient_error(pipe, rng.standard_normal((4, 4))) <= 1e-5


def test_ste_forward_uses_quantized_value():
    cb, dec, spec, prior, rng = _setup()
    logits = rng.standard_normal((4, 4))
    tape = Pipeline(cb, dec, spec).forward(logits)
    np.testing.assert_array_equal(tape.quantized, lfq_quantize(tape.expected))
    np.testing.assert_array_equal(tape.image, dec(tape.quantized))
    np.testing.assert_allclose(tape.expected + ste_offset(logits, cb), tape.quantized)


def test_quantized_log_likelihood():
    cb, dec, spec, _, _ = _setup()
    table = np.eye(4)[[0, 1, 2, 3]]
    ll = quantized_log_likelihood(spec, dec, cb)
    x = dec(cb.embed(np.arange(4)))
    assert ll(table) == pytest.approx(-np.sum((x - spec.y) ** 2) / (2 * 0.05 ** 2))


def test_adam_first_step_is_lr_sign():
    adam = AdamState((3,), lr=0.1)
    out = adam.update(np.zeros(3), np.array([2.0, -0.5, 0.0]))
    np.testing.assert_allclose(out, [-0.1, 0.1, 0.0], atol=1e-8)


def test_harmonic_decay():
    cfg = OptConfig(inner_steps=100, lr=1.0)
    assert cfg.lr_at(0) == 1.0 and cfg.lr_at(100) == 0.5
    assert OptConfig(lr_decay="none").lr_at(50) == 1.0


def test_frozen_rows_untouched_and_loss_does_not_rise():
    cb, dec, spec, prior, rng = _setup()
    logits = rng.standard_normal((4, 4))
    trainable = np.array([True, False, True, False])
    res = optimize(logits, Pipeline(cb, dec, spec), OptConfig(inner_steps=50), trainable)
    np.testing.assert_array_equal(res.logits[~trainable], logits[~trainable])
    np.testing.assert_allclose(res.probs, softmax(res.logits))
    assert res.final_loss <= res.initial_loss
    assert len(res.history) == 51 and not res.diverged


def test_zero_steps_returns_start():
    cb, dec, spec, prior, rng = _setup()
    logits = rng.standard_normal((4, 4))
    res = optimize(logits, Pipeline(cb, dec, spec), OptConfig(inner_steps=0))
    np.testing.assert_array_equal(res.logits, logits)
    assert res.final_loss == res.initial_loss


def test_rejects_non_finite_logits():
    cb, dec, spec, _, _ = _setup()
    with pytest.raises(InvalidInputError):
        optimize(np.full((4, 4), np.nan), Pipeline(cb, dec, spec))


def test_first_step_monotone_on_toy_inpaint():
    cfg = preset("toy-inpaint")
    world = build_world(cfg)
    z = np.full(world.decoder.length, -1)
    theta = world.prior(z, world.schedule.steps)
    ok = 0
    n = 100
    for s in range(n):
        _, _, spec = synthesize_task(world, 0, s, True)
        pipe = Pipeline(world.codebook, world.decoder, spec, theta, np.ones(len(z), bool))
        res = optimize(np.log(theta), pipe, world.opt)
        ok += res.history[-1] <= res.history[0]
    assert ok / n >= 0.99
