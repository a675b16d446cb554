import math

import numpy as np
import pytest
from scipy.special import logsumexp

from trackfusion import _kernels
from trackfusion.emissions import ObservableLayout, ObservableModel, beta_logpdf
from trackfusion.hmm import (
    AnnotatedHistory,
    HmmParams,
    InfeasibleAnnotationError,
    default_transition_matrix,
    emission_log_density,
    expected_transition_counts,
    filter_posterior,
    forward_backward,
    forward_pass,
    log_likelihood,
    pairwise_posterior,
    pairwise_posteriors,
    reestimate_transitions,
    smoothed_posteriors,
    total_likelihood,
    train,
)
from trackfusion.oracle import InstanceTooLargeError, brute_force

from conftest import random_history, random_params


@pytest.fixture(params=["compiled", "numpy"])
def backend(request, monkeypatch):
    if request.param == "compiled":
        if not _kernels.AVAILABLE:
            pytest.skip("numba not installed")
    else:
        monkeypatch.setattr(_kernels, "AVAILABLE", False)
    return request.param


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    d = np.abs(a - b)
    scale = np.where(np.abs(b) > 0, np.abs(b), 1e-300)
    return float(np.max(np.where(d == 0, 0.0, d / scale)))


def uniform_params(n, m=1):
    N = 2**n
    return HmmParams(default_transition_matrix(n), ObservableModel(np.ones((N, m)), np.ones((N, m))))


def log_space_reference(params, history):
    """Unscaled forward recursion in log space: per-segment likelihoods and filtered posteriors."""
    logf = np.array([[emission_log_density(params, i, x) for i in range(params.n_states)]
                     for x in history.frames])
    with np.errstate(divide="ignore"):
        log_a = np.log(params.transitions)
    total = 0.0
    filt = np.zeros_like(logf)
    for start, stop, state in history.segments():
        la = np.full(params.n_states, -np.inf)
        la[0] = logf[start, 0]
        filt[start] = np.exp(la - logsumexp(la))
        for t in range(start + 1, stop):
            la = logsumexp(la[:, None] + log_a, axis=0) + logf[t]
            filt[t] = np.exp(la - logsumexp(la))
        total += la[state] if state is not None else logsumexp(la)
    return total, filt


# --- initial transition matrix ---------------------------------------------------

def test_default_transitions_n2_rows_before_normalisation():
    a = default_transition_matrix(2)
    row1 = np.array([0.98, 0.05, 0.05, 0.001])
    row4 = np.array([0.0, 1e-10, 1e-10, 0.98])
    np.testing.assert_allclose(a[0], row1 / row1.sum(), rtol=1e-15)
    np.testing.assert_allclose(a[3], row4 / row4.sum(), rtol=1e-15)


@pytest.mark.parametrize("n", range(1, 9))
def test_default_transitions_rows_sum_to_one(n):
    a = default_transition_matrix(n)
    assert a.shape == (2**n, 2**n)
    assert np.all(np.abs(a.sum(axis=1) - 1.0) <= 1e-12)
    assert np.all(a >= 0)
    # self-transitions dominate every row
    assert np.all(np.argmax(a, axis=1) == np.arange(2**n))


def test_params_reject_bad_transitions():
    model = ObservableModel(np.ones((2, 1)), np.ones((2, 1)))
    with pytest.raises(ValueError):
        HmmParams(np.array([[0.5, 0.4], [0.5, 0.5]]), model)
    with pytest.raises(ValueError):
        HmmParams(np.array([[1.2, -0.2], [0.5, 0.5]]), model)
    with pytest.raises(ValueError):
        HmmParams(np.eye(3), ObservableModel(np.ones((3, 1)), np.ones((3, 1))))


# --- emission density ---------------------------------------------------------------

def test_emission_density_uniform_shapes_is_zero():
    params = uniform_params(2, m=3)
    assert emission_log_density(params, 2, [0.1, 0.5, 0.9]) == pytest.approx(0.0, abs=1e-15)


def test_emission_density_two_dims_at_half():
    model = ObservableModel([[2.0, 2.0], [1.0, 1.0]], [[1.0, 1.0], [1.0, 1.0]])
    params = HmmParams(default_transition_matrix(1), model)
    assert emission_log_density(params, 0, [0.5, 0.5]) == pytest.approx(0.0, abs=1e-14)


def test_emission_density_is_sum_of_dimensions(rng):
    params, layout = random_params(rng, 2, dims_per_tracker=2)
    for _ in range(20):
        x = rng.uniform(0.01, 0.99, layout.m)
        i = int(rng.integers(0, params.n_states))
        expected = sum(beta_logpdf(x[j], params.emissions.shape(i, j)) for j in range(layout.m))
        assert emission_log_density(params, i, x) == pytest.approx(expected, rel=1e-12, abs=1e-12)


# --- history --------------------------------------------------------------------------

def test_history_segments_and_validation():
    h = AnnotatedHistory(np.full((6, 1), 0.5), ((1, 0), (4, 2)))
    assert h.segments() == [(0, 2, 0), (2, 5, 2), (5, 6, None)]
    assert h.boundary_times().tolist() == [1, 4]
    with pytest.raises(ValueError):
        AnnotatedHistory(np.full((3, 1), 0.5), ((1, 0), (1, 0)))
    with pytest.raises(ValueError):
        AnnotatedHistory(np.full((3, 1), 0.5), ((3, 0),))
    with pytest.raises(ValueError):
        AnnotatedHistory(np.full((3, 1), 1.5))


# --- forward / backward -----------------------------------------------------------------

def test_single_frame_single_tracker(backend):
    params = HmmParams(default_transition_matrix(1), ObservableModel([[2.0], [1.0]], [[1.0], [2.0]]))
    h = AnnotatedHistory(np.array([[0.3]]))
    cache = forward_backward(params, h)
    np.testing.assert_array_equal(cache.alphas[0], [1.0, 0.0])
    assert cache.log_likelihood == pytest.approx(math.log(2 * 0.3), rel=1e-14)
    np.testing.assert_array_equal(cache.betas[0], [1.0, 1.0])
    assert total_likelihood(cache) == cache.log_likelihood


def test_uniform_emissions_follow_powers_of_a(backend):
    params = uniform_params(2)
    h = AnnotatedHistory(np.full((3, 1), 0.4))
    cache = forward_pass(params, h)
    a = params.transitions
    e0 = np.eye(4)[0]
    for t in range(3):
        expected = e0 @ np.linalg.matrix_power(a, t)
        np.testing.assert_allclose(filter_posterior(cache, t), expected, rtol=1e-14, atol=1e-300)
    assert cache.log_likelihood == pytest.approx(0.0, abs=1e-14)


def test_annotated_terminal_has_one_hot_beta(backend):
    params = HmmParams(default_transition_matrix(1), ObservableModel([[2.0], [1.0]], [[1.0], [2.0]]))
    h = AnnotatedHistory(np.array([[0.7], [0.6], [0.2]]), ((1, 0),))
    cache = forward_backward(params, h)
    np.testing.assert_array_equal(cache.betas[1], [1.0, 0.0])
    np.testing.assert_array_equal(cache.betas[2], [1.0, 1.0])
    # the frame after an annotation restarts in the all-correct state
    np.testing.assert_array_equal(cache.alphas[2], [1.0, 0.0])


def test_matches_enumeration(backend):
    rng = np.random.default_rng(7)
    checked = infeasible = 0
    for _ in range(80):
        n = int(rng.integers(1, 3))
        params, layout = random_params(rng, n)
        h = random_history(rng, int(rng.integers(1, 7)), layout.m, params.n_states)
        ref = brute_force(params, h)
        cache = forward_pass(params, h)
        if not np.isfinite(ref.log_likelihood):
            assert cache.log_likelihood == -np.inf
            with pytest.raises(InfeasibleAnnotationError):
                backward_pass_of(cache)
            infeasible += 1
            continue
        cache = forward_backward(params, h)
        assert rel_err(cache.log_likelihood, ref.log_likelihood) <= 1e-9
        assert rel_err(cache.alphas, ref.filtered) <= 1e-9
        assert rel_err(smoothed_posteriors(cache), ref.smoothed) <= 1e-9
        times, xi = pairwise_posteriors(cache)
        assert sorted(times.tolist()) == sorted(ref.pairwise)
        for t, x in zip(times, xi):
            assert rel_err(x, ref.pairwise[int(t)]) <= 1e-9
        checked += 1
    assert checked > 40


def backward_pass_of(cache):
    from trackfusion.hmm import backward_pass
    return backward_pass(cache)


def test_unscaled_alphas_are_recoverable(backend, rng):
    params, layout = random_params(rng, 2)
    h = random_history(rng, 6, layout.m, params.n_states, max_annotations=1)
    h = AnnotatedHistory(h.frames, ((2, 0),))
    cache = forward_pass(params, h)
    # direct unscaled recursion, feasible for six frames
    f = np.exp(params.emissions.log_density(h.frames))
    a = params.transitions
    direct = np.zeros_like(f)
    for start, stop, _ in h.segments():
        direct[start, 0] = f[start, 0]
        for t in range(start + 1, stop):
            direct[t] = (direct[t - 1] @ a) * f[t]
    with np.errstate(divide="ignore"):
        np.testing.assert_allclose(cache.unscaled_log_alphas(), np.log(direct), rtol=1e-12)


def test_compiled_and_numpy_paths_agree(monkeypatch):
    if not _kernels.AVAILABLE:
        pytest.skip("numba not installed")
    rng = np.random.default_rng(3)
    params, layout = random_params(rng, 3, dims_per_tracker=2)
    h = random_history(rng, 400, layout.m, 1, max_annotations=30)
    fast = forward_backward(params, h)
    monkeypatch.setattr(_kernels, "AVAILABLE", False)
    slow = forward_backward(params, AnnotatedHistory(h.frames, h.annotations))
    np.testing.assert_allclose(fast.alphas, slow.alphas, rtol=1e-11, atol=1e-300)
    np.testing.assert_allclose(fast.log_scales, slow.log_scales, rtol=1e-11)
    np.testing.assert_allclose(fast.betas, slow.betas, rtol=1e-10, atol=1e-300)
    np.testing.assert_allclose(expected_transition_counts(fast), expected_transition_counts(slow), rtol=1e-10)


def test_extreme_emissions_stay_finite(backend):
    # the all-correct state is unreachable after a segment start yet explains the
    # frames thousands of nats better than any other state, so every rescaled
    # predicted mass underflows and the log-space fallback has to take over
    a = np.array([[0.0, 0.5, 0.3, 0.2], [0.0, 0.8, 0.1, 0.1], [0.0, 0.1, 0.8, 0.1], [0.0, 0.0, 0.0, 1.0]])
    p = np.array([[3000.0], [1.0], [1.0], [1.0]])
    q = np.array([[1.0], [3000.0], [3001.0], [3002.0]])
    params = HmmParams(a, ObservableModel(p, q))
    frames = np.full((12, 1), 1 - 1e-5)
    h = AnnotatedHistory(frames, ((5, 2),))
    cache = forward_pass(params, h)
    ref_ll, ref_filt = log_space_reference(params, h)
    assert np.isfinite(ref_ll)
    assert cache.log_likelihood == pytest.approx(ref_ll, rel=1e-9)
    np.testing.assert_allclose(cache.alphas, ref_filt, rtol=1e-8, atol=1e-300)
    assert np.all(np.isfinite(cache.alphas))


def test_log_space_reference_agrees_on_moderate_instances(backend, rng):
    for _ in range(10):
        params, layout = random_params(rng, 2)
        h = random_history(rng, 30, layout.m, 1, max_annotations=4)
        ll, filt = log_space_reference(params, h)
        cache = forward_pass(params, h)
        assert cache.log_likelihood == pytest.approx(ll, rel=1e-10)
        np.testing.assert_allclose(cache.alphas, filt, rtol=1e-9, atol=1e-300)


def test_infeasible_annotation_gives_minus_infinity(backend):
    # a one-frame segment can only be in the all-correct state
    params = uniform_params(1)
    h = AnnotatedHistory(np.full((2, 1), 0.5), ((0, 1),))
    assert log_likelihood(params, h) == -np.inf
    with pytest.raises(InfeasibleAnnotationError) as exc:
        forward_backward(params, h)
    assert list(exc.value.segments) == [0]


def test_segments_are_independent(backend, rng):
    params, layout = random_params(rng, 2)
    first = random_history(rng, 8, layout.m, 1, max_annotations=0)
    second = random_history(rng, 5, layout.m, 1, max_annotations=0)
    a1 = AnnotatedHistory(first.frames, ((7, 1),))
    joined = AnnotatedHistory(np.vstack([first.frames, second.frames]), ((7, 1),))
    assert log_likelihood(params, joined) == pytest.approx(
        log_likelihood(params, a1) + log_likelihood(params, second), rel=1e-13
    )


def test_posterior_normalisation(backend, rng):
    params, layout = random_params(rng, 3)
    h = random_history(rng, 60, layout.m, 1, max_annotations=6)
    cache = forward_backward(params, h)
    gamma = smoothed_posteriors(cache)
    assert np.all(np.abs(cache.alphas.sum(axis=1) - 1) <= 1e-12)
    assert np.all(np.abs(gamma.sum(axis=1) - 1) <= 1e-12)
    times, xi = pairwise_posteriors(cache)
    assert np.all(np.abs(xi.sum(axis=(1, 2)) - 1) <= 1e-12)
    np.testing.assert_allclose(xi.sum(axis=2), gamma[times], atol=1e-12)
    np.testing.assert_allclose(xi.sum(axis=1), gamma[times + 1], atol=1e-12)


def test_pairwise_undefined_across_a_boundary(backend):
    params = uniform_params(1)
    h = AnnotatedHistory(np.full((4, 1), 0.5), ((1, 0),))
    cache = forward_backward(params, h)
    with pytest.raises(ValueError):
        pairwise_posterior(cache, 1)
    with pytest.raises(IndexError):
        pairwise_posterior(cache, 3)
    assert pairwise_posterior(cache, 2).shape == (2, 2)


def test_smoothed_requires_backward_pass():
    params = uniform_params(1)
    cache = forward_pass(params, AnnotatedHistory(np.full((3, 1), 0.5)))
    with pytest.raises(ValueError):
        smoothed_posteriors(cache)


def test_brute_force_refuses_large_instances():
    params = uniform_params(3)
    with pytest.raises(InstanceTooLargeError):
        brute_force(params, AnnotatedHistory(np.full((9, 1), 0.5)))


# --- re-estimation and training -------------------------------------------------------------

def test_reestimated_rows_sum_to_one(backend, rng):
    params, layout = random_params(rng, 2)
    h = random_history(rng, 50, layout.m, 1, max_annotations=5)
    a = reestimate_transitions(forward_backward(params, h))
    assert np.all(np.abs(a.sum(axis=1) - 1) <= 1e-12)


def test_unvisited_state_keeps_its_row(backend):
    # state 3 (all failed) is unreachable when the chain never leaves state 0
    a = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 0.5, 0.25, 0.25], [0.0, 0.25, 0.5, 0.25], [0.0, 0.0, 0.0, 1.0]])
    params = HmmParams(a, ObservableModel(np.ones((4, 1)), np.ones((4, 1))))
    h = AnnotatedHistory(np.full((5, 1), 0.5), ((4, 0),))
    new = reestimate_transitions(forward_backward(params, h))
    np.testing.assert_array_equal(new[1:], a[1:])
    np.testing.assert_allclose(new[0], [1.0, 0.0, 0.0, 0.0])


def test_pseudocounts_shift_the_estimate(backend):
    params = uniform_params(1)
    h = AnnotatedHistory(np.full((5, 1), 0.5), ((4, 0),))
    cache = forward_backward(params, h)
    plain = reestimate_transitions(cache)
    prior = reestimate_transitions(cache, pseudocounts=np.array([[0.0, 4.0], [0.0, 1.0]]))
    np.testing.assert_allclose(plain[0], [1.0, 0.0])
    np.testing.assert_allclose(prior[0], [0.5, 0.5])


def test_train_is_monotone(backend):
    rng = np.random.default_rng(21)
    for _ in range(15):
        n = int(rng.integers(1, 4))
        params, layout = random_params(rng, n)
        h = random_history(rng, int(rng.integers(10, 120)), layout.m, 1, max_annotations=5)
        if not h.annotations:
            h = AnnotatedHistory(h.frames, ((h.T - 1, 0),))
        result = train(params, h, max_iters=4)
        lls = np.array(result.log_likelihoods)
        assert np.all(np.diff(lls) >= -1e-12)
        assert result.log_likelihoods[-1] == pytest.approx(log_likelihood(result.params, h), rel=1e-12)


def test_train_zero_iterations_returns_input(backend, rng):
    params, layout = random_params(rng, 2)
    h = random_history(rng, 20, layout.m, 1, max_annotations=2)
    h = AnnotatedHistory(h.frames, ((5, 0),))
    result = train(params, h, max_iters=0)
    assert result.params == params
    assert len(result.log_likelihoods) == 1


def test_train_needs_an_annotation(rng):
    params, layout = random_params(rng, 1)
    with pytest.raises(ValueError):
        train(params, AnnotatedHistory(np.full((5, layout.m), 0.5)))


def _sample_chain(rng, a, model, T):
    states = np.zeros(T, dtype=int)
    for t in range(1, T):
        states[t] = rng.choice(a.shape[0], p=a[states[t - 1]])
    frames = rng.beta(model.p[states], model.q[states])
    return states, frames


def test_training_on_generated_data_improves_likelihood(backend):
    rng = np.random.default_rng(5)
    n = 2
    layout = ObservableLayout.uniform(n, 1)
    true_a = np.array([[0.0, 0.45, 0.45, 0.1], [0.0, 0.9, 0.05, 0.05], [0.0, 0.05, 0.9, 0.05], [0.0, 0.1, 0.1, 0.8]])
    true_model = ObservableModel([[6.0, 6.0], [6.0, 1.5], [1.5, 6.0], [1.5, 1.5]],
                                 [[1.5, 1.5], [1.5, 6.0], [6.0, 1.5], [6.0, 6.0]])
    states, frames = _sample_chain(rng, true_a, true_model, 400)
    h = AnnotatedHistory(frames, ((399, int(states[-1])),))
    start = HmmParams.default(layout)
    result = train(start, h, max_iters=3)
    assert log_likelihood(result.params, h) >= log_likelihood(start, h)
