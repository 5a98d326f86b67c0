import math

import numpy as np
import pytest

from oracles import max_fd_error
from stochdet.diffusion.denoiser import (
    DenoiserParams,
    build_inputs,
    denoise_step,
    init_params,
    mlp_forward,
    split_output,
)
from stochdet.diffusion.latent import decode, encode, to_unit
from stochdet.diffusion.sampler import SamplerConfig, initial_latents, reverse_sample, sample_runs
from stochdet.diffusion.schedule import NoiseSchedule, cosine_schedule, forward_noise
from stochdet.diffusion.training import (
    Annotated,
    OptimizerConfig,
    dataset_loss,
    greedy_match,
    hungarian_match,
    match_cost,
    supervised_loss,
    train,
)
from stochdet.errors import ConfigError, EmptyBatch, StepOutOfRange
from stochdet.experiments import load_bundled_model
from stochdet.simworld import generate_domain, load_preset


@pytest.fixture(scope="module")
def schedule():
    return cosine_schedule()


@pytest.fixture(scope="module")
def scenes():
    return generate_domain(load_preset("target"), 3)


# --- schedule and forward process ---------------------------------------------------


def test_cosine_schedule_shape(schedule):
    ab = schedule.alpha_bar
    assert schedule.T == 1000 and ab[0] == 1.0
    assert np.all(np.diff(ab) < 0) and ab[-1] > 0
    steps = schedule.inference_steps(10)
    assert steps[0] == 1000 and steps[-1] == 0 and len(steps) == 11


@pytest.mark.parametrize("t", [1, 500, 1000])
def test_forward_noise_moments(schedule, t):
    rng = np.random.default_rng(0)
    z0 = np.array([0.7])
    draws = np.array([forward_noise(z0, t, schedule, rng)[0][0] for _ in range(10_000)])
    ab = schedule.alpha_bar[t]
    var = 1.0 - ab
    # standard errors of the sample mean and variance of a Gaussian
    se_mean = math.sqrt(var / len(draws))
    se_var = var * math.sqrt(2.0 / (len(draws) - 1))
    assert abs(draws.mean() - math.sqrt(ab) * z0[0]) < 3 * se_mean
    assert abs(draws.var(ddof=1) - var) < 3 * se_var


def test_forward_noise_explicit_noise_and_range(schedule):
    z0 = np.ones((2, 4))
    eps = np.full((2, 4), 0.5)
    zt, out_eps = forward_noise(z0, 0, schedule, np.random.default_rng(0), noise=eps)
    np.testing.assert_array_equal(zt, z0)
    assert out_eps is eps
    with pytest.raises(StepOutOfRange):
        forward_noise(z0, 1001, schedule, np.random.default_rng(0))


def test_bad_schedules():
    with pytest.raises(ConfigError):
        NoiseSchedule(np.array([1.0]))
    with pytest.raises(ConfigError):
        NoiseSchedule(np.array([1.0, 0.5, 0.7]))


# --- latent coding --------------------------------------------------------------------


def test_encode_decode_round_trip():
    boxes = np.array([[10.0, 20.0, 50.0, 90.0], [0.0, 0.0, 512.0, 512.0]])
    np.testing.assert_allclose(decode(encode(boxes, 512, 512), 512, 512), boxes, atol=1e-9)


# --- denoiser ----------------------------------------------------------------------------


def test_denoise_step_zero_weights_returns_reference(scenes):
    p = init_params(np.random.default_rng(0))
    zero = DenoiserParams(*(np.zeros_like(a) for _, a in p.arrays()), n_classes=4, embed_dim=p.embed_dim)
    zt = np.random.default_rng(1).standard_normal((5, 4))
    z0, logits = denoise_step(zt, 10, scenes[0].features, zero)
    np.testing.assert_array_equal(logits, 0.0)
    # zero deltas reproduce the pooled reference box
    x = build_inputs(zt, 10, scenes[0].features, zero)
    ref_unit = (x[:, -4:] + 1.0) / 2.0
    np.testing.assert_allclose(to_unit(z0, zero.scale), ref_unit, atol=1e-12)


def test_denoise_step_deterministic_and_range(scenes):
    p = init_params(np.random.default_rng(0))
    zt = np.random.default_rng(2).standard_normal((8, 4))
    a = denoise_step(zt, 300, scenes[0].features, p)
    b = denoise_step(zt, 300, scenes[0].features, p)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    with pytest.raises(StepOutOfRange):
        denoise_step(zt, 0, scenes[0].features, p)


def test_head_input_jacobian(scenes):
    """Central differences of the clean-latent prediction w.r.t. the head's
    raw outputs agree with the chain rule used in training."""
    from stochdet.diffusion.denoiser import head_jacobian

    p = init_params(np.random.default_rng(3))
    zt = np.random.default_rng(4).standard_normal((6, 4))
    x = build_inputs(zt, 100, scenes[1].features, p)
    out, _ = mlp_forward(p, x)
    jac = head_jacobian(out, x, p.scale)
    h = 1e-6
    for j in range(4):
        e = np.zeros_like(out)
        e[:, j] = h
        num = (split_output(out + e, x, p.scale)[0][:, j] - split_output(out - e, x, p.scale)[0][:, j]) / (2 * h)
        np.testing.assert_allclose(num, jac[:, j], rtol=1e-6, atol=1e-9)


# --- sampling -----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def model():
    p, _, _ = load_bundled_model()
    return p


def test_reverse_sample_deterministic(model, scenes):
    a = reverse_sample(scenes[0], model, SamplerConfig(seed=5))
    b = reverse_sample(scenes[0], model, SamplerConfig(seed=5))
    assert a.detections == b.detections
    assert len(a.detections) == 300


def test_reverse_sample_diverse_across_seeds(model, scenes):
    for k in range(100):
        a = reverse_sample(scenes[0], model, SamplerConfig(20, 3, seed=2 * k))
        b = reverse_sample(scenes[0], model, SamplerConfig(20, 3, seed=2 * k + 1))
        assert not np.array_equal(a.detections.boxes, b.detections.boxes)


def test_sample_runs_indices_and_independence(model, scenes):
    runs = sample_runs(scenes[0], model, 3, SamplerConfig(num_boxes=30, seed=1))
    assert [r.run_index for r in runs] == [1, 2, 3]
    assert not np.array_equal(runs[0].detections.boxes, runs[1].detections.boxes)
    # run k does not depend on how many runs were requested
    again = sample_runs(scenes[0], model, 2, SamplerConfig(num_boxes=30, seed=1))
    assert again[1].detections == runs[1].detections


def test_f_box_size_quarters_area():
    z1 = initial_latents(SamplerConfig(num_boxes=500, f_box_size=1.0), np.random.default_rng(0), 2.0)
    zh = initial_latents(SamplerConfig(num_boxes=500, f_box_size=0.5), np.random.default_rng(0), 2.0)
    a1 = np.prod(to_unit(z1)[:, 2:], axis=1)
    ah = np.prod(to_unit(zh)[:, 2:], axis=1)
    np.testing.assert_allclose(ah, a1 / 4, rtol=1e-12)
    np.testing.assert_array_equal(z1[:, :2], zh[:, :2])


def test_sampler_config_validation():
    with pytest.raises(ConfigError):
        SamplerConfig(num_boxes=0)
    with pytest.raises(ConfigError):
        SamplerConfig(f_box_size=0.0)


# --- training loss ------------------------------------------------------------------------


def test_supervised_loss_gradient(schedule, scenes):
    p = init_params(np.random.default_rng(1))

    def fn(q):
        r = supervised_loss(q, scenes[:2], schedule, np.random.default_rng(5))
        return r.total, r.grads

    assert max_fd_error(fn, p) < 1e-4


def test_supervised_loss_rejects_empty(schedule, scenes):
    p = init_params(np.random.default_rng(1))
    with pytest.raises(EmptyBatch):
        supervised_loss(p, [], schedule, np.random.default_rng(0))
    empty = Annotated(scenes[0], np.zeros((0, 4)), np.zeros(0, dtype=int))
    with pytest.raises(EmptyBatch):
        supervised_loss(p, [empty], schedule, np.random.default_rng(0))


def test_hungarian_not_worse_than_greedy():
    rng = np.random.default_rng(0)
    for _ in range(50):
        pred = rng.standard_normal((int(rng.integers(3, 12)), 4))
        gt = rng.standard_normal((int(rng.integers(1, 6)), 4))
        cost = match_cost(pred, gt, 2.0)
        hr, hc = hungarian_match(cost)
        gr, gc = greedy_match(cost)
        assert len(hr) == len(gr) == min(cost.shape)
        assert len(set(hc.tolist())) == len(hc)
        assert cost[hr, hc].sum() <= cost[gr, gc].sum() + 1e-12


def test_train_zero_steps_and_zero_lr(schedule, scenes):
    p = init_params(np.random.default_rng(0))
    q, trace = train(p, scenes, schedule, OptimizerConfig(steps=0))
    assert len(trace) == 0
    np.testing.assert_array_equal(q.flat(), p.flat())
    q, trace = train(p, scenes, schedule, OptimizerConfig(steps=5, lr=0.0))
    assert len(trace) == 5
    np.testing.assert_array_equal(q.flat(), p.flat())


def test_train_is_seeded(schedule, scenes):
    p = init_params(np.random.default_rng(0))
    a, ta = train(p, scenes, schedule, OptimizerConfig(steps=10, seed=3))
    b, tb = train(p, scenes, schedule, OptimizerConfig(steps=10, seed=3))
    np.testing.assert_array_equal(a.flat(), b.flat())
    np.testing.assert_array_equal(ta, tb)


def test_weight_averaging(schedule, scenes):
    p = init_params(np.random.default_rng(0))
    last, _ = train(p, scenes, schedule, OptimizerConfig(steps=20))
    avg, _ = train(p, scenes, schedule, OptimizerConfig(steps=20, ema_decay=0.9))
    assert not np.array_equal(last.flat(), avg.flat())
    # the average lags behind: it sits between the start and the last iterate
    assert np.linalg.norm(avg.flat() - p.flat()) < np.linalg.norm(last.flat() - p.flat())
    with pytest.raises(ConfigError):
        OptimizerConfig(ema_decay=1.0)


def test_default_training_halves_loss(schedule, model):
    """The bundled checkpoint is exactly what default training produces, and
    that training more than halves the dataset loss."""
    scenes = generate_domain(load_preset("source"), 200)
    p0 = init_params(np.random.default_rng(0))
    p, _ = train(p0, scenes, schedule, OptimizerConfig())
    np.testing.assert_array_equal(p.flat(), model.flat())
    ratio = dataset_loss(p, scenes, schedule) / dataset_loss(p0, scenes, schedule)
    # measured 0.181
    assert ratio < 0.5
