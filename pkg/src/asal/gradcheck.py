"""Central finite-difference checks of policy-parameter gradients.

Each fixture is a tiny training batch (embed 8, T <= 3, N_init <= 2) whose
loss is a deterministic function of the policy parameters. The check compares
autograd against central differences on a random subset of coordinates and
along random directions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .objectives import OBJECTIVES
from .sampling import FourierBatch
from .trainer import TrainConfig, new_policy, simulate_step, step_loss

FD_STEP = 1e-5
TOLERANCE = 1e-3


@dataclass
class GradCheckResult:
    objective: str
    dim: int
    rel_error: float
    directional_error: float
    grad_norm: float

    @property
    def error(self) -> float:
        return max(self.rel_error, self.directional_error)

    def passed(self, tol: float = TOLERANCE) -> bool:
        return self.error <= tol and self.grad_norm > 0


def fixture(objective: str, dim: int, seed: int = 0):
    """A tiny ``(policy, loss_fn)`` pair for ``objective``."""
    config = TrainConfig(
        dim=dim,
        T=3,
        n_init=2,
        objective=objective,
        n_k=1,
        n_fq=6 if objective == "DAD" else 2,
        B=1,
        n_grid=12,
        embed_dim=8,
        hidden=32,
        mode="deepset",
        total_steps=0,
        seed=seed,
        safe_tasks=True if objective in ("S_H", "S_H_division") else False,
    ).resolved()
    policy = new_policy(config)
    rng = np.random.default_rng(seed)
    step = simulate_step(config, rng)
    if objective == "DAD":
        step.contrastive = _nearby_alternatives(step.tasks.f, config.n_fq, rng)

    def loss_fn():
        return step_loss(policy, config, step)

    return policy, loss_fn


def _nearby_alternatives(f: FourierBatch, count: int, rng, scale: float = 0.05) -> FourierBatch:
    """Weight-perturbed copies of each f_0; random prior draws would make the
    contrastive bound saturate at log(count + 1) with a vanishing gradient."""
    B, L = f.weights.shape
    noise = torch.as_tensor(rng.standard_normal((B, count, L)) * scale, dtype=f.weights.dtype)
    return FourierBatch(
        f.weights.unsqueeze(1) + noise,
        f.frequencies.unsqueeze(1).expand(B, count, -1, -1),
        f.phases.unsqueeze(1).expand(B, count, -1),
        f.mean_shift.unsqueeze(1).expand(B, count),
    )


def _flat_params(policy):
    return [p for p in policy.parameters() if p.requires_grad]


def check_gradients(
    policy,
    loss_fn,
    n_coords: int = 40,
    n_directions: int = 3,
    step: float = FD_STEP,
    seed: int = 0,
    flip_sign: bool = False,
):
    """Return ``(coordinate error, directional error, gradient norm)``.

    The coordinate error is ``max|g_fd - g_ad| / max|g_ad|`` over the sampled
    coordinates; the directional error compares ``g_ad . u`` with the
    central difference along random unit directions ``u``. ``flip_sign``
    negates the autograd gradient (used to confirm a wrong gradient is caught).
    """
    params = _flat_params(policy)
    policy.zero_grad(set_to_none=True)
    loss = loss_fn()
    loss.backward()
    grads = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    if flip_sign:
        grads = [-g for g in grads]
    flat_grad = torch.cat([g.reshape(-1) for g in grads])
    sizes = [p.numel() for p in params]
    offsets = np.cumsum([0] + sizes)
    rng = np.random.default_rng(seed)

    # prefer coordinates with nonzero gradient so the check is informative
    nz = torch.nonzero(flat_grad).reshape(-1).numpy()
    pool = nz if nz.size >= n_coords else np.arange(flat_grad.numel())
    coords = rng.choice(pool, size=min(n_coords, pool.size), replace=False)

    def evaluate():
        with torch.no_grad():
            return float(loss_fn())

    fd = np.empty(len(coords))
    with torch.no_grad():
        for i, c in enumerate(coords):
            k = int(np.searchsorted(offsets, c, side="right") - 1)
            flat = params[k].view(-1)
            j = c - offsets[k]
            orig = flat[j].item()
            flat[j] = orig + step
            up = evaluate()
            flat[j] = orig - step
            down = evaluate()
            flat[j] = orig
            fd[i] = (up - down) / (2 * step)
    ad = flat_grad[coords].numpy()
    scale = max(np.max(np.abs(ad)), 1e-300)
    coord_err = float(np.max(np.abs(fd - ad)) / scale)

    dir_err = 0.0
    for _ in range(n_directions):
        u = [torch.as_tensor(rng.standard_normal(p.shape), dtype=p.dtype) for p in params]
        norm = torch.sqrt(sum((v**2).sum() for v in u))
        u = [v / norm for v in u]
        with torch.no_grad():
            for p, v in zip(params, u):
                p.add_(step * v)
            up = evaluate()
            for p, v in zip(params, u):
                p.sub_(2 * step * v)
            down = evaluate()
            for p, v in zip(params, u):
                p.add_(step * v)
        fd_dir = (up - down) / (2 * step)
        ad_dir = float(sum((g * v).sum() for g, v in zip(grads, u)))
        denom = max(abs(ad_dir), float(torch.linalg.vector_norm(flat_grad)) * 1e-3, 1e-300)
        dir_err = max(dir_err, abs(fd_dir - ad_dir) / denom)
    return coord_err, float(dir_err), float(torch.linalg.vector_norm(flat_grad))


def run_suite(dims=(1, 2), objectives=OBJECTIVES, seed: int = 0, flip_sign: bool = False) -> list:
    results = []
    for objective in objectives:
        for dim in dims:
            policy, loss_fn = fixture(objective, dim, seed)
            rel, directional, norm = check_gradients(policy, loss_fn, seed=seed, flip_sign=flip_sign)
            results.append(GradCheckResult(objective, dim, rel, directional, norm))
    return results
