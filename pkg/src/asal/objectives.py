"""Differentiable acquisition objectives over simulated rollouts.

Scores are per-rollout tensors (higher is better). Every rollout in a
:class:`Rollouts` batch shares the same maximum length ``T``; positions past a
rollout's own ``t_sim`` are masked out. Because each position is conditioned
only on earlier positions, the masked tail never influences a kept term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import torch

from . import batched as bgp
from .gp import GPModel, predictive_entropy, safety_prob_negative
from .sampling import FourierBatch

UNSAFE_FLOOR = 1e-5


@dataclass
class Rollouts:
    """A batch of simulated AL trajectories with their generating GP parameters."""

    x_init: torch.Tensor  # (B, N, D)
    y_init: torch.Tensor  # (B, N)
    queries: torch.Tensor  # (B, T, D)
    y: torch.Tensor  # (B, T)
    t_sim: torch.Tensor  # (B,) int
    task_variance: torch.Tensor  # (B,)
    task_lengthscales: torch.Tensor  # (B, D)
    task_noise: torch.Tensor  # (B,)
    f: Optional[FourierBatch] = None
    z_init: Optional[torch.Tensor] = None
    z: Optional[torch.Tensor] = None
    safety_variance: Optional[torch.Tensor] = None
    safety_lengthscales: Optional[torch.Tensor] = None
    safety_noise: Optional[torch.Tensor] = None
    q: Optional[FourierBatch] = None
    budget_trace: Optional[torch.Tensor] = None  # (B, T)

    @property
    def batch_size(self) -> int:
        return self.y.shape[0]

    @property
    def n_init(self) -> int:
        return self.y_init.shape[1]

    @property
    def horizon(self) -> int:
        return self.y.shape[1]

    @property
    def mask(self) -> torch.Tensor:
        steps = torch.arange(self.horizon)
        return (steps[None, :] < self.t_sim[:, None]).to(self.y.dtype)

    @property
    def normalizer(self) -> torch.Tensor:
        return (self.n_init + self.t_sim).to(self.y.dtype)

    def select(self, index) -> "Rollouts":
        """Sub-batch by index (keeps the shared horizon)."""
        out = {}
        for name, value in self.__dict__.items():
            if isinstance(value, torch.Tensor):
                out[name] = value[index]
            elif isinstance(value, FourierBatch):
                out[name] = FourierBatch(
                    *(None if t is None else t[index] for t in value.__dict__.values())
                )
            else:
                out[name] = value
        return replace(self, **out)


def _task_conditionals(r: Rollouts, prefix_x=None, prefix_y=None):
    """One-step conditionals of the query outputs given init (and extra prefix)."""
    X, Y = r.x_init, r.y_init
    if prefix_x is not None:
        X = torch.cat([X, prefix_x], dim=1)
        Y = torch.cat([Y, prefix_y], dim=1)
    _, var, w = bgp.prefixed_conditionals(
        X, Y, r.queries, r.y, r.task_variance, r.task_lengthscales, r.task_noise
    )
    return var, w


def _safety_conditionals(r: Rollouts):
    if r.z is None:
        raise ValueError("rollouts carry no safety observations")
    prior = r.q.prior if r.q is not None else None
    mean, var, _ = bgp.prefixed_conditionals(
        r.x_init,
        r.z_init,
        r.queries,
        r.z,
        r.safety_variance,
        r.safety_lengthscales,
        r.safety_noise,
        prior(r.x_init) if prior else None,
        prior(r.queries) if prior else None,
    )
    return mean, var


def entropy_score(r: Rollouts) -> torch.Tensor:
    """-log p(y_1:T_sim | Y_init) under the generating task GP."""
    var, w = _task_conditionals(r)
    return -(bgp.gaussian_logpdf_terms(w, var) * r.mask).sum(-1)


def _grid_batch(r: Rollouts, grid_x, grid_y):
    grid_x = torch.as_tensor(grid_x, dtype=r.y.dtype)
    if grid_x.dim() == 2:
        grid_x = grid_x.expand(r.batch_size, -1, -1)
    return grid_x, torch.as_tensor(grid_y, dtype=r.y.dtype)


def mutual_info_score(r: Rollouts, grid_x, grid_y) -> torch.Tensor:
    """-log p(y | Y_init) + log p(y | Y_init, Y_grid)."""
    grid_x, grid_y = _grid_batch(r, grid_x, grid_y)
    var_g, w_g = _task_conditionals(r, grid_x, grid_y)
    conditioned = (bgp.gaussian_logpdf_terms(w_g, var_g) * r.mask).sum(-1)
    return entropy_score(r) + conditioned


def mean_entropy_score(r: Rollouts) -> torch.Tensor:
    """Joint entropy of the query outputs given Y_init (realized y unused)."""
    var, _ = _task_conditionals(r)
    return (bgp.gaussian_entropy_terms(var) * r.mask).sum(-1)


def mean_mi_score(r: Rollouts, grid_x, grid_y) -> torch.Tensor:
    grid_x, grid_y = _grid_batch(r, grid_x, grid_y)
    var_g, _ = _task_conditionals(r, grid_x, grid_y)
    return mean_entropy_score(r) - (bgp.gaussian_entropy_terms(var_g) * r.mask).sum(-1)


def unsafe_probabilities(r: Rollouts) -> torch.Tensor:
    """p(z(x_t) < 0 | z_<t, Z_init) for every query position (unmasked)."""
    mean, var = _safety_conditionals(r)
    return torch.special.ndtr(-mean / torch.sqrt(var))


def unsafe_logprob_terms(r: Rollouts, gamma: float) -> torch.Tensor:
    """log max(gamma, p_unsafe + 1e-5) per query; zero past ``t_sim``.

    The floored probability is capped at 1 so that gamma = 1 zeroes every term.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    p = torch.clamp(unsafe_probabilities(r) + UNSAFE_FLOOR, max=1.0)
    return torch.log(torch.clamp(p, min=gamma)) * r.mask


def safe_score(r: Rollouts, gamma: float) -> torch.Tensor:
    return entropy_score(r) - unsafe_logprob_terms(r, gamma).sum(-1)


def safe_division_score(r: Rollouts) -> torch.Tensor:
    mean, var = _safety_conditionals(r)
    log_safe = torch.special.log_ndtr(mean / torch.sqrt(var))
    return entropy_score(r) + (log_safe * r.mask).sum(-1)


def dad_score(r: Rollouts, contrastive: FourierBatch) -> torch.Tensor:
    """Contrastive bound log[p(D | f_0) / mean_l p(D | f_l)] with l = 0..N.

    ``contrastive`` is a (B, N, ...) stack of alternative functions; the
    rollout's own ``f`` is f_0. Initial points are always counted, queries
    only up to ``t_sim``.
    """
    X = torch.cat([r.x_init, r.queries], dim=1)
    Y = torch.cat([r.y_init, r.y], dim=1)
    weight = torch.cat([torch.ones_like(r.y_init), r.mask], dim=1)
    noise = r.task_noise[:, None]
    f0 = r.f(X)  # (B, n)
    f_alt = contrastive(X.unsqueeze(1))  # (B, N, n)
    means = torch.cat([f0.unsqueeze(1), f_alt], dim=1)
    resid = Y.unsqueeze(1) - means
    ll = (-0.5 * resid**2 / noise[:, None] - 0.5 * torch.log(noise[:, None]) - 0.5 * bgp.LOG_2PI)
    ll = (ll * weight.unsqueeze(1)).sum(-1)  # (B, N+1)
    n_total = ll.shape[1]
    return ll[:, 0] - torch.logsumexp(ll, dim=1) + math.log(n_total)


OBJECTIVES = ("H", "I", "H_mean", "I_mean", "S_H", "S_H_division", "DAD")


def score(objective: str, r: Rollouts, gamma: float = 0.05, grid=None, contrastive=None):
    """Per-rollout score for a named objective."""
    if objective == "H":
        return entropy_score(r)
    if objective == "I":
        return mutual_info_score(r, *grid)
    if objective == "H_mean":
        return mean_entropy_score(r)
    if objective == "I_mean":
        return mean_mi_score(r, *grid)
    if objective == "S_H":
        return safe_score(r, gamma)
    if objective == "S_H_division":
        return safe_division_score(r)
    if objective == "DAD":
        return dad_score(r, contrastive)
    raise ValueError(f"unknown objective {objective!r}; choose from {OBJECTIVES}")


def training_loss(objective: str, r: Rollouts, **kwargs) -> torch.Tensor:
    """Negated batch mean of the per-rollout score divided by N_init + T_sim."""
    s = score(objective, r, **kwargs)
    if objective == "DAD":
        return -s.mean()
    return -(s / r.normalizer).mean()


# -- deployment-time acquisition -------------------------------------------------


def minunsafe_scores(X_cand, task_model: GPModel, safety_model: GPModel, gamma: float):
    """Predictive entropy minus log max(gamma, P(z < 0)) at each candidate."""
    _, var_y = task_model.predict(X_cand)
    mean_z, var_z = safety_model.predict(X_cand)
    p_unsafe = np.maximum(safety_prob_negative(mean_z, var_z), 1e-300)
    return predictive_entropy(var_y) - np.log(np.maximum(gamma, p_unsafe))


def minunsafe_acquisition(x, gamma: float, task_model: GPModel, safety_model: GPModel) -> float:
    return float(minunsafe_scores(np.atleast_2d(x), task_model, safety_model, gamma)[0])
