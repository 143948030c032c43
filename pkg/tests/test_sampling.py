import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy import integrate

from asal import sampling
from asal.gp import KernelParams, rbf_gram
from asal.sampling import FourierBatch, SechParams


# Story: averaging outer products of many independent feature draws should
# approach the RBF kernel; frequencies scale as 1/l per dimension.
def test_rff_covariance_approaches_rbf_kernel():
    rng = np.random.default_rng(0)
    kernel = KernelParams(1.0, [0.5, 0.3])
    X = rng.uniform(0, 1, (6, 2))
    draws = np.stack([sampling.sample_rff(kernel, 100, rng, center=False)(X) for _ in range(3000)])
    emp = draws.T @ draws / len(draws)
    np.testing.assert_allclose(emp, rbf_gram(X, X, kernel), atol=0.06)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), ls=st.floats(0.05, 2.0))
def test_domain_mean_matches_quadrature_1d(seed, ls):
    f = sampling.sample_rff(KernelParams(1.0, [ls]), 50, np.random.default_rng(seed), center=False)
    nodes = np.linspace(0, 1, 4001)
    quad = integrate.trapezoid(f.raw(nodes[:, None]), nodes)
    assert sampling.domain_mean(f) == pytest.approx(quad, abs=1e-5)


def test_domain_mean_matches_quadrature_3d():
    f = sampling.sample_rff(KernelParams(1.0, [0.4, 0.7, 1.1]), 30, np.random.default_rng(1), center=False)
    g = np.linspace(0, 1, 61)
    G = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
    vals = f.raw(G).reshape(61, 61, 61)
    quad = integrate.trapezoid(integrate.trapezoid(integrate.trapezoid(vals, g), g), g)
    assert sampling.domain_mean(f) == pytest.approx(quad, abs=2e-3)


def test_centered_sample_has_zero_domain_mean():
    f = sampling.sample_rff(KernelParams(1.0, [0.3]), 100, np.random.default_rng(3))
    x = np.linspace(0, 1, 20001)[:, None]
    assert integrate.trapezoid(f(x), x[:, 0]) == pytest.approx(0.0, abs=1e-6)


def test_domain_mean_guards_near_zero_frequency():
    f = sampling.FourierFunction(np.array([1.0]), np.array([[1e-9]]), np.array([0.3]))
    assert np.isfinite(sampling.domain_mean(f))


def test_hyperparameter_ranges_and_variance_budget():
    rng = np.random.default_rng(0)
    for _ in range(500):
        h = sampling.sample_hyperparams(2, rng)
        sigma = np.sqrt(h.task_noise_var)
        assert 0.01 - 1e-12 <= sigma <= 0.2002 + 1e-12
        # signal-to-noise at the worst case is 4.9976, see the decisions log
        assert np.sqrt(h.task_kernel.variance) / sigma >= 4.99
        assert np.all(h.task_kernel.lengthscales >= 0.2)
        assert h.sech.c**2 + h.safety_kernel.variance + h.safety_noise_var == pytest.approx(1.0001)
        assert np.all((h.sech.w >= 5) & (h.sech.w <= 40))
        np.testing.assert_allclose(h.sech.Q @ h.sech.Q.T, np.eye(2), atol=1e-12)


def test_sech_prior_center_value_and_backends_agree():
    p = SechParams(1.0, np.array([20.0, 20.0]), np.eye(2))
    assert sampling.sech_prior_mean(np.array([[0.5, 0.5]]), p)[0] == pytest.approx(3.2 * (1 - 0.47))
    X = np.random.default_rng(0).uniform(0, 1, (7, 2))
    np.testing.assert_allclose(
        sampling.sech_prior_mean(torch.as_tensor(X), p).numpy(), sampling.sech_prior_mean(X, p), rtol=1e-14
    )


def test_sampled_task_starts_safe_inside_the_box():
    rng = np.random.default_rng(5)
    n_safe = 0
    for _ in range(20):
        task = sampling.sample_task(sampling.sample_hyperparams(2, rng), 5, rng=rng)
        X = task.initial.inputs
        assert X.shape == (5, 2) and np.all((X >= 0.4) & (X <= 0.6))
        if task.safe_seeded:
            n_safe += 1
            assert np.all(task.initial.safety >= 0)
    assert n_safe >= 15


def test_sampling_terminates_on_a_hopeless_constraint():
    rng = np.random.default_rng(0)
    h = sampling.sample_hyperparams(1, rng)
    h = sampling.TaskHyperParams(h.task_kernel, h.task_noise_var, h.safety_kernel, h.safety_noise_var,
                                 SechParams(-50.0, h.sech.w, h.sech.Q))
    task = sampling.sample_task(h, 3, max_iter=4, rng=rng)
    assert not task.safe_seeded and len(task.initial) == 3


def test_fourier_batch_matches_individual_functions():
    rng = np.random.default_rng(2)
    tasks = [sampling.sample_task(sampling.sample_hyperparams(2, rng), 2, rng=rng) for _ in range(3)]
    X = rng.uniform(0, 1, (3, 5, 2))
    fb = FourierBatch.stack([t.f for t in tasks])
    qb = FourierBatch.stack([t.q for t in tasks])
    for i, t in enumerate(tasks):
        np.testing.assert_allclose(fb(torch.as_tensor(X))[i].numpy(), t.f(X[i]), rtol=1e-12)
        np.testing.assert_allclose(qb(torch.as_tensor(X))[i].numpy(), t.q(X[i]), rtol=1e-12)


def test_single_point_evaluation_returns_float():
    f = sampling.sample_rff(KernelParams(1.0, [0.3, 0.3]), 10, np.random.default_rng(0))
    assert isinstance(f(np.array([0.2, 0.4])), float)


def test_grid_sampler_shape_and_range():
    g = sampling.sample_grid(100, 2, np.random.default_rng(0))
    assert g.shape == (100, 2) and np.all((g >= 0) & (g <= 1))
    assert sampling.default_grid_size(2) == 100 and sampling.default_grid_size(5) == 500


def test_dump_tasks_is_self_describing(tmp_path):
    rng = np.random.default_rng(0)
    tasks = [sampling.sample_task(sampling.sample_hyperparams(1, rng), 1, rng=rng) for _ in range(2)]
    path = sampling.dump_tasks(tasks, tmp_path / "t.npz")
    with np.load(path) as data:
        header = json.loads(str(data["__header__"]))
        assert header["format"] == "asal-tasks" and len(header["tasks"]) == 2
        np.testing.assert_array_equal(data["1/f/weights"], tasks[1].f.weights)
