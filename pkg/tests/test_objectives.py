import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from asal import batched as bgp
from asal import gp, objectives as obj, sampling
from asal.gp import KernelParams
from asal.sampling import FourierBatch


def make_case(seed=0, B=3, dim=2, n_init=2, T=4, t_sim=None):
    """Random rollouts on sampled tasks plus the numpy-side tasks for oracles."""
    rng = np.random.default_rng(seed)
    tasks = [sampling.sample_task(sampling.sample_hyperparams(dim, rng), n_init, rng=rng) for _ in range(B)]
    t = lambda a: torch.as_tensor(np.asarray(a), dtype=torch.float64)  # noqa: E731
    Xq = rng.uniform(0, 1, (B, T, dim))
    y = np.stack([k.f(Xq[i]) + rng.normal(0, np.sqrt(k.hyper.task_noise_var), T) for i, k in enumerate(tasks)])
    z = np.stack([k.q(Xq[i]) + rng.normal(0, np.sqrt(k.hyper.safety_noise_var), T) for i, k in enumerate(tasks)])
    t_sim = np.full(B, T) if t_sim is None else np.asarray(t_sim)
    h = [k.hyper for k in tasks]
    r = obj.Rollouts(
        x_init=t([k.initial.inputs for k in tasks]),
        y_init=t([k.initial.outputs for k in tasks]),
        queries=t(Xq),
        y=t(y),
        t_sim=torch.as_tensor(t_sim),
        task_variance=t([x.task_kernel.variance for x in h]),
        task_lengthscales=t([x.task_kernel.lengthscales for x in h]),
        task_noise=t([x.task_noise_var for x in h]),
        f=FourierBatch.stack([k.f for k in tasks]),
        z_init=t([k.initial.safety for k in tasks]),
        z=t(z),
        safety_variance=t([x.safety_kernel.variance for x in h]),
        safety_lengthscales=t([x.safety_kernel.lengthscales for x in h]),
        safety_noise=t([x.safety_noise_var for x in h]),
        q=FourierBatch.stack([k.q for k in tasks]),
    )
    return r, tasks


def joint_logpdf(X, v, X_new, v_new, kernel, noise, prior=None):
    pred = gp.gp_posterior(X, v, X_new, kernel, noise, prior_mean=prior)
    return gp.log_pdf(v_new, pred)


def oracle_entropy(r, tasks, i, grid=None):
    h = tasks[i].hyper
    X, Y = r.x_init[i].numpy(), r.y_init[i].numpy()
    if grid is not None:
        X, Y = np.vstack([X, grid[0]]), np.concatenate([Y, grid[1][i]])
    T = int(r.t_sim[i])
    return -joint_logpdf(X, Y, r.queries[i, :T].numpy(), r.y[i, :T].numpy(), h.task_kernel, h.task_noise_var)


def oracle_entropy_mean(r, tasks, i, grid=None):
    h = tasks[i].hyper
    X = r.x_init[i].numpy() if grid is None else np.vstack([r.x_init[i].numpy(), grid[0]])
    Y = np.zeros(len(X))
    T = int(r.t_sim[i])
    return gp.entropy(gp.gp_posterior(X, Y, r.queries[i, :T].numpy(), h.task_kernel, h.task_noise_var))


def oracle_unsafe(r, tasks, i):
    h = tasks[i].hyper
    prior = lambda A: sampling.sech_prior_mean(A, tasks[i].q.prior_mean)  # noqa: E731
    X, Z = r.x_init[i].numpy(), r.z_init[i].numpy()
    out = []
    for t in range(r.horizon):
        pred = gp.gp_posterior(X, Z, r.queries[i, t : t + 1].numpy(), h.safety_kernel, h.safety_noise_var, prior)
        out.append(gp.safety_prob_negative(pred.mean[0], pred.variance[0]))
        X = np.vstack([X, r.queries[i, t].numpy()])
        Z = np.append(Z, r.z[i, t].item())
    return np.array(out)


def grid_for(r, seed=7, n=9):
    rng = np.random.default_rng(seed)
    gx = rng.uniform(0, 1, (n, r.queries.shape[-1]))
    gy = rng.normal(size=(r.batch_size, n))
    return gx, gy


# Story: each objective must equal the same quantity computed from dense
# numpy GP posteriors, one rollout at a time.
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_entropy_score_matches_joint_density_oracle(seed):
    r, tasks = make_case(seed, t_sim=[4, 2, 3])
    s = obj.entropy_score(r).numpy()
    for i in range(r.batch_size):
        assert s[i] == pytest.approx(oracle_entropy(r, tasks, i), rel=1e-9)


def test_mutual_info_matches_oracle():
    r, tasks = make_case(3, t_sim=[4, 1, 3])
    gx, gy = grid_for(r)
    s = obj.mutual_info_score(r, gx, gy).numpy()
    for i in range(r.batch_size):
        expected = oracle_entropy(r, tasks, i) - oracle_entropy(r, tasks, i, (gx, gy))
        assert s[i] == pytest.approx(expected, rel=1e-8, abs=1e-9)


def test_mean_variants_match_gaussian_entropy_oracles():
    r, tasks = make_case(4, t_sim=[2, 4, 3])
    gx, gy = grid_for(r)
    h = obj.mean_entropy_score(r).numpy()
    i_mean = obj.mean_mi_score(r, gx, gy).numpy()
    for i in range(r.batch_size):
        assert h[i] == pytest.approx(oracle_entropy_mean(r, tasks, i), rel=1e-9)
        expected = oracle_entropy_mean(r, tasks, i) - oracle_entropy_mean(r, tasks, i, (gx, gy))
        assert i_mean[i] == pytest.approx(expected, rel=1e-8, abs=1e-9)


def test_mean_entropy_ignores_realized_outputs():
    r, _ = make_case(5)
    r2 = obj.Rollouts(**{**r.__dict__, "y": r.y + 3.0})
    torch.testing.assert_close(obj.mean_entropy_score(r), obj.mean_entropy_score(r2))


def test_unsafe_probabilities_use_the_sech_prior():
    r, tasks = make_case(6)
    p = obj.unsafe_probabilities(r).numpy()
    for i in range(r.batch_size):
        np.testing.assert_allclose(p[i], oracle_unsafe(r, tasks, i), rtol=1e-7, atol=1e-12)


def test_safe_scores_match_oracles():
    r, tasks = make_case(8, t_sim=[4, 3, 1])
    gamma = 0.05
    s = obj.safe_score(r, gamma).numpy()
    d = obj.safe_division_score(r).numpy()
    for i in range(r.batch_size):
        T = int(r.t_sim[i])
        p = oracle_unsafe(r, tasks, i)[:T]
        h = oracle_entropy(r, tasks, i)
        penalty = np.log(np.maximum(gamma, np.minimum(p + 1e-5, 1.0))).sum()
        assert s[i] == pytest.approx(h - penalty, rel=1e-8)
        assert d[i] == pytest.approx(h + np.log(1 - p).sum(), rel=1e-7)


def test_gamma_one_makes_safe_score_equal_entropy_bitwise():
    r, _ = make_case(9)
    assert torch.equal(obj.safe_score(r, 1.0), obj.entropy_score(r))
    with pytest.raises(ValueError):
        obj.unsafe_logprob_terms(r, 1.5)


# Story: the floor keeps log finite even when a query is almost surely safe.
def test_unsafe_terms_are_floored_and_masked():
    r, _ = make_case(10, t_sim=[1, 2, 4])
    terms = obj.unsafe_logprob_terms(r, 0.0)
    assert torch.all(torch.isfinite(terms))
    assert torch.all(terms >= math.log(1e-5) - 1e-12) and torch.all(terms <= 0)
    assert torch.all(terms[0, 1:] == 0) and torch.all(terms[1, 2:] == 0)


def test_masked_tail_never_changes_kept_terms():
    r, _ = make_case(11, t_sim=[2, 2, 2])
    gx, gy = grid_for(r)
    changed = obj.Rollouts(**{**r.__dict__})
    changed.queries = r.queries.clone()
    changed.y = r.y.clone()
    changed.z = r.z.clone()
    changed.queries[:, 2:] = torch.rand_like(r.queries[:, 2:])
    changed.y[:, 2:] += 5.0
    changed.z[:, 2:] -= 5.0
    for name in ("H", "I", "H_mean", "I_mean", "S_H", "S_H_division"):
        a = obj.score(name, r, grid=(gx, gy))
        b = obj.score(name, changed, grid=(gx, gy))
        torch.testing.assert_close(a, b, rtol=1e-10, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(p=st.integers(1, 6), q=st.integers(1, 6), seed=st.integers(0, 10_000))
def test_prefixed_conditionals_equal_full_factorization(p, q, seed):
    g = torch.Generator().manual_seed(seed)
    X = torch.rand(2, p + q, 2, generator=g, dtype=torch.float64)
    v = torch.randn(2, p + q, generator=g, dtype=torch.float64)
    m = torch.randn(2, p + q, generator=g, dtype=torch.float64)
    var = torch.tensor([1.0, 0.7], dtype=torch.float64)
    ls = torch.tensor([[0.3, 0.5], [0.4, 0.2]], dtype=torch.float64)
    noise = torch.tensor([0.01, 0.05], dtype=torch.float64)
    K = bgp.noisy_gram(X, var, ls, noise)
    mean, cvar, w = bgp.sequential_conditionals(K, v, m)
    mean_b, cvar_b, w_b = bgp.prefixed_conditionals(X[:, :p], v[:, :p], X[:, p:], v[:, p:], var, ls, noise,
                                                    m[:, :p], m[:, p:])
    torch.testing.assert_close(cvar_b, cvar[:, p:], rtol=1e-9, atol=1e-12)
    torch.testing.assert_close(w_b, w[:, p:], rtol=1e-8, atol=1e-9)
    torch.testing.assert_close(mean_b, mean[:, p:], rtol=1e-8, atol=1e-9)


def test_batched_posterior_matches_numpy():
    rng = np.random.default_rng(0)
    X, Xs, y = rng.uniform(0, 1, (7, 2)), rng.uniform(0, 1, (3, 2)), rng.normal(size=7)
    kernel = KernelParams(0.8, [0.3, 0.6])
    t = lambda a: torch.tensor(np.array(a))[None]  # noqa: E731
    mean, cov = bgp.posterior(t(X), t(y), t(Xs), t(0.8)[0:1], t(kernel.lengthscales), t(0.02)[0:1])
    pred = gp.gp_posterior(X, y, Xs, kernel, 0.02)
    # the batched factorization always adds a 1e-10 jitter
    np.testing.assert_allclose(mean[0].numpy(), pred.mean, rtol=1e-7)
    np.testing.assert_allclose(cov[0].numpy(), pred.covariance, rtol=1e-7, atol=1e-10)


def dad_oracle(r, contrastive, i):
    T = int(r.t_sim[i])
    X = np.vstack([r.x_init[i].numpy(), r.queries[i, :T].numpy()])
    Y = np.concatenate([r.y_init[i].numpy(), r.y[i, :T].numpy()])
    noise = r.task_noise[i].item()
    means = [r.f(torch.as_tensor(X)[None].expand(r.batch_size, -1, -1))[i].numpy()]
    alt = contrastive(torch.as_tensor(X)[None, None].expand(r.batch_size, -1, -1, -1))[i].numpy()
    means += list(alt)
    ll = np.array([np.sum(-0.5 * (Y - m) ** 2 / noise - 0.5 * np.log(2 * np.pi * noise)) for m in means])
    return ll[0] - np.log(np.mean(np.exp(ll - ll.max()))) - ll.max()


def contrastive_for(r, tasks, n=5, seed=0):
    rng = np.random.default_rng(seed)
    groups = [[sampling.sample_rff(k.hyper.task_kernel, k.f.n_features, rng) for _ in range(n)] for k in tasks]
    return FourierBatch.stack_groups(groups)


# Story: the contrastive bound matches a direct numpy evaluation and can
# never exceed log(N + 1).
def test_dad_score_matches_oracle_and_respects_bound():
    r, tasks = make_case(12, t_sim=[4, 2, 1])
    c = contrastive_for(r, tasks)
    s = obj.dad_score(r, c).numpy()
    for i in range(r.batch_size):
        assert s[i] == pytest.approx(dad_oracle(r, c, i), rel=1e-9, abs=1e-9)
    assert np.all(s <= math.log(6) + 1e-12)
    loss = obj.training_loss("DAD", r, contrastive=c)
    assert loss.item() == pytest.approx(-s.mean())


def test_training_loss_normalizes_by_history_size():
    r, _ = make_case(13, t_sim=[4, 2, 3])
    s = obj.entropy_score(r)
    loss = obj.training_loss("H", r)
    expected = -(s / torch.tensor([6.0, 4.0, 5.0], dtype=torch.float64)).mean()
    torch.testing.assert_close(loss, expected)


def test_unknown_objective_is_rejected():
    r, _ = make_case(14)
    with pytest.raises(ValueError, match="unknown objective"):
        obj.score("X", r)


def test_objectives_without_safety_data_refuse_safe_scores():
    r, _ = make_case(15)
    r.z = None
    with pytest.raises(ValueError):
        obj.safe_score(r, 0.05)


# -- deployment-time acquisition ------------------------------------------------


def test_minunsafe_acquisition_matches_hand_formula():
    rng = np.random.default_rng(0)
    X = rng.uniform(0, 1, (6, 1))
    task = gp.GPModel(X, np.sin(6 * X[:, 0]), KernelParams(1.0, [0.3]), 0.01)
    safety = gp.GPModel(X, 0.5 - X[:, 0], KernelParams(1.0, [0.3]), 0.01)
    cand = np.linspace(0, 1, 11)[:, None]
    s = obj.minunsafe_scores(cand, task, safety, 0.05)
    _, vy = task.predict(cand)
    mz, vz = safety.predict(cand)
    p = gp.safety_prob_negative(mz, vz)
    np.testing.assert_allclose(s, 0.5 * np.log(2 * np.pi * np.e * vy) - np.log(np.maximum(0.05, p)))
    assert obj.minunsafe_acquisition(cand[3], 0.05, task, safety) == pytest.approx(s[3])


# Story: when every candidate is safe enough, the penalty is the constant
# -log(gamma) and MinUnsafe ranks candidates exactly like entropy.
def test_minunsafe_offset_is_constant_on_safe_candidates():
    rng = np.random.default_rng(1)
    X = rng.uniform(0, 1, (5, 2))
    task = gp.GPModel(X, rng.normal(size=5), KernelParams(1.0, [0.3, 0.3]), 0.01)
    safety = gp.GPModel(X, np.full(5, 5.0), KernelParams(1.0, [5.0, 5.0]), 0.01)
    cand = rng.uniform(0, 1, (50, 2))
    _, vy = task.predict(cand)
    np.testing.assert_allclose(obj.minunsafe_scores(cand, task, safety, 0.1) - gp.predictive_entropy(vy), -np.log(0.1))
