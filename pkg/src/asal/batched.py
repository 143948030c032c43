"""Batched, differentiable GP algebra in torch (float64).

The training objectives only ever need the chain of one-step conditionals of
an ordered sequence ``[prefix..., queries...]``: for each position j, the
predictive mean and (noise-inclusive) variance of element j given elements
``< j``. All of them fall out of a single Cholesky factor ``K = L L^T`` of
the noisy prior covariance: with ``w = L^{-1} r`` and ``r`` the residual
against the prior mean, the conditional variance is ``L_jj^2`` and the
conditional mean is ``mean_j + r_j - L_jj w_j``.
"""

from __future__ import annotations

import math

import torch

LOG_2PI = math.log(2.0 * math.pi)
JITTER_START = 1e-10
JITTER_MAX = 1e-4


def rbf_gram(X1, X2, variance, lengthscales):
    """``X1 (..., n, D)``, ``X2 (..., m, D)``, ``variance (...)``, ``lengthscales (..., D)``."""
    ls = lengthscales.unsqueeze(-2)
    diff = X1.unsqueeze(-2) / ls.unsqueeze(-2) - X2.unsqueeze(-3) / ls.unsqueeze(-2)
    sq = (diff**2).sum(-1)
    return variance[..., None, None] * torch.exp(-0.5 * sq)


def _rbf_gram_expanded(X, variance, lengthscales):
    """Square gram via |a|^2 + |b|^2 - 2ab; faster, used only off the gradient path."""
    Xs = X / lengthscales.unsqueeze(-2)
    sq_norm = (Xs**2).sum(-1)
    sq = sq_norm.unsqueeze(-1) + sq_norm.unsqueeze(-2) - 2.0 * Xs @ Xs.transpose(-1, -2)
    return variance[..., None, None] * torch.exp(-0.5 * sq.clamp_min(0.0))


def noisy_gram(X, variance, lengthscales, noise_var):
    if torch.is_grad_enabled() and (X.requires_grad or variance.requires_grad or lengthscales.requires_grad):
        K = rbf_gram(X, X, variance, lengthscales)
    else:
        K = _rbf_gram_expanded(X, variance, lengthscales)
    eye = torch.eye(X.shape[-2], dtype=X.dtype, device=X.device)
    return K + noise_var[..., None, None] * eye


def cholesky(K):
    """Batched lower Cholesky with jitter escalation (x10 from 1e-10 to 1e-4)."""
    eye = torch.eye(K.shape[-1], dtype=K.dtype, device=K.device)
    jitter = JITTER_START
    while True:
        L, info = torch.linalg.cholesky_ex(K + jitter * eye)
        if not bool((info > 0).any()):
            return L
        jitter *= 10.0
        if jitter > JITTER_MAX * (1 + 1e-9):
            raise torch.linalg.LinAlgError(
                f"batched Cholesky failed after jitter {JITTER_MAX:g}"
            )


def sequential_conditionals(K, values, prior_mean=None):
    """One-step conditionals of an ordered Gaussian sequence.

    Returns ``(cond_mean, cond_var, whitened)``, each shaped like ``values``;
    ``whitened[j] = (values[j] - cond_mean[j]) / sqrt(cond_var[j])``.
    """
    if prior_mean is None:
        prior_mean = torch.zeros_like(values)
    L = cholesky(K)
    resid = values - prior_mean
    w = torch.linalg.solve_triangular(L, resid.unsqueeze(-1), upper=False).squeeze(-1)
    diag = torch.diagonal(L, dim1=-2, dim2=-1)
    cond_mean = values - diag * w
    return cond_mean, diag**2, w


def prefixed_conditionals(X_prefix, v_prefix, X_query, v_query, variance, lengthscales, noise_var,
                          prior_prefix=None, prior_query=None):
    """Query-block conditionals of ``[prefix, queries]`` from a block Cholesky.

    Same values as :func:`sequential_conditionals` on the concatenated
    sequence, restricted to the query positions. The prefix factor is computed
    once; gradients reach it only through its inputs, so a policy-independent
    prefix (initial data, grids) adds no backward cost beyond one solve.
    """
    r_p = v_prefix if prior_prefix is None else v_prefix - prior_prefix
    r_q = v_query if prior_query is None else v_query - prior_query
    K_pp = noisy_gram(X_prefix, variance, lengthscales, noise_var)
    K_qp = rbf_gram(X_query, X_prefix, variance, lengthscales)
    K_qq = noisy_gram(X_query, variance, lengthscales, noise_var)
    L_p = cholesky(K_pp)
    A = torch.linalg.solve_triangular(L_p, K_qp.transpose(-1, -2), upper=False)  # (p, T)
    w_p = torch.linalg.solve_triangular(L_p, r_p.unsqueeze(-1), upper=False)
    S = K_qq - A.transpose(-1, -2) @ A
    L_s = cholesky(S)
    rhs = r_q.unsqueeze(-1) - A.transpose(-1, -2) @ w_p
    w = torch.linalg.solve_triangular(L_s, rhs, upper=False).squeeze(-1)
    diag = torch.diagonal(L_s, dim1=-2, dim2=-1)
    return v_query - diag * w, diag**2, w


def gaussian_logpdf_terms(whitened, cond_var):
    """Per-position log N(value_j | cond_mean_j, cond_var_j)."""
    return -0.5 * whitened**2 - 0.5 * torch.log(cond_var) - 0.5 * LOG_2PI


def gaussian_entropy_terms(cond_var):
    return 0.5 * (LOG_2PI + 1.0) + 0.5 * torch.log(cond_var)


def posterior(X, values, X_test, variance, lengthscales, noise_var, prior_mean=None, test_mean=None):
    """Batched noise-inclusive predictive mean and covariance (reference form)."""
    K = noisy_gram(X, variance, lengthscales, noise_var)
    K_s = rbf_gram(X, X_test, variance, lengthscales)
    K_ss = noisy_gram(X_test, variance, lengthscales, noise_var)
    L = cholesky(K)
    resid = values if prior_mean is None else values - prior_mean
    alpha = torch.cholesky_solve(resid.unsqueeze(-1), L).squeeze(-1)
    V = torch.linalg.solve_triangular(L, K_s, upper=False)
    mean = (K_s.transpose(-1, -2) @ alpha.unsqueeze(-1)).squeeze(-1)
    if test_mean is not None:
        mean = mean + test_mean
    cov = K_ss - V.transpose(-1, -2) @ V
    return mean, cov
