"""Synthetic safe-AL tasks drawn from GP priors via random Fourier features."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .gp import Dataset, KernelParams

DEFAULT_FEATURES = 100
DEFAULT_MAX_ITER = 50
SECH_SCALE = 3.2
SECH_OFFSET = -0.47
SAFETY_PRIOR_AMPLITUDE = float(np.sqrt(0.5))
VARIANCE_BUDGET = 1.0001
NEAR_ZERO_FREQUENCY = 1e-5
INVERSE_FREQUENCY_GUARD = 100000.0


def default_safe_box(dim: int) -> np.ndarray:
    """The central seed box [0.4, 0.6]^D as a (D, 2) array of bounds."""
    return np.tile([0.4, 0.6], (dim, 1))


@dataclass(frozen=True)
class SechParams:
    c: float
    w: np.ndarray
    Q: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.w)


@dataclass(frozen=True)
class TaskHyperParams:
    task_kernel: KernelParams
    task_noise_var: float
    safety_kernel: KernelParams
    safety_noise_var: float
    sech: SechParams

    @property
    def dim(self) -> int:
        return self.task_kernel.dim


def sech_prior_mean(x, p: SechParams):
    """3.2c(-0.47 + sech(mean_d w_d u_d^2)) with u = Q^T (x - 0.5).

    Accepts a single point, an (n, D) array, or a torch tensor.
    """
    if isinstance(x, torch.Tensor):
        Q = torch.as_tensor(p.Q, dtype=x.dtype)
        w = torch.as_tensor(p.w, dtype=x.dtype)
        u = (x - 0.5) @ Q
        r = (w * u**2).sum(-1) / len(p.w)
        return SECH_SCALE * p.c * (SECH_OFFSET + 1.0 / torch.cosh(r))
    x = np.asarray(x, dtype=float)
    u = (x - 0.5) @ p.Q
    r = (p.w * u**2).sum(-1) / len(p.w)
    return SECH_SCALE * p.c * (SECH_OFFSET + 1.0 / np.cosh(r))


@dataclass
class FourierFunction:
    """f(x) = sum_i w_i sqrt(2/L) cos(a_i . x + b_i) - mean_shift [+ prior mean]."""

    weights: np.ndarray
    frequencies: np.ndarray
    phases: np.ndarray
    mean_shift: float = 0.0
    prior_mean: Optional[SechParams] = None

    @property
    def n_features(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.frequencies.shape[1]

    def raw(self, x):
        scale = np.sqrt(2.0 / self.n_features)
        if isinstance(x, torch.Tensor):
            A = torch.as_tensor(self.frequencies, dtype=x.dtype)
            b = torch.as_tensor(self.phases, dtype=x.dtype)
            w = torch.as_tensor(self.weights, dtype=x.dtype)
            return torch.cos(x @ A.T + b) @ w * scale
        x = np.asarray(x, dtype=float)
        return np.cos(x @ self.frequencies.T + self.phases) @ self.weights * scale

    def __call__(self, x):
        single = not isinstance(x, torch.Tensor) and np.ndim(x) == 1
        if single:
            x = np.asarray(x, dtype=float)[None, :]
        out = self.raw(x) - self.mean_shift
        if self.prior_mean is not None:
            out = out + sech_prior_mean(x, self.prior_mean)
        return float(out[0]) if single else out


def domain_mean(f: FourierFunction) -> float:
    """Exact average of the raw feature sum over [0, 1]^D.

    Uses the D-fold antiderivative of cos: the integral of cos(a.x + b) over the
    unit cube is ``prod(1/a_d) * sum_s (-1)^(D-|s|) cos(a.s + b - D*pi/2)`` over
    the 2^D corners ``s``.
    """
    A, b = f.frequencies, f.phases
    L, D = A.shape
    if D > 10:
        raise ValueError("corner enumeration is limited to D <= 10")
    corners = np.array(list(itertools.product((0.0, 1.0), repeat=D)))
    signs = (-1.0) ** (D - corners.sum(1))
    phase = A @ corners.T + b[:, None] - D * np.pi / 2.0
    corner_sum = np.cos(phase) @ signs
    prod = np.prod(A, axis=1)
    near_zero = np.any(np.abs(A) < NEAR_ZERO_FREQUENCY, axis=1)
    safe_prod = np.where(near_zero, 1.0, prod)
    inv = np.where(near_zero, np.where(prod < 0, -1.0, 1.0) * INVERSE_FREQUENCY_GUARD, 1.0 / safe_prod)
    integrals = inv * corner_sum
    return float(np.sqrt(2.0 / L) * f.weights @ integrals)


def sample_rff(
    kernel: KernelParams,
    n_features: int = DEFAULT_FEATURES,
    rng: Optional[np.random.Generator] = None,
    center: bool = True,
) -> FourierFunction:
    """Draw one pathwise RBF-GP sample as a Fourier feature function.

    Frequencies use per-dimension standard deviation 1/l_d (the RBF spectral
    measure). With ``center`` the analytic domain mean is subtracted.
    """
    if n_features < 1:
        raise ValueError("need at least one feature")
    rng = np.random.default_rng() if rng is None else rng
    D = kernel.dim
    weights = rng.normal(0.0, np.sqrt(kernel.variance), n_features)
    frequencies = rng.normal(0.0, 1.0, (n_features, D)) / kernel.lengthscales
    phases = rng.uniform(0.0, 2.0 * np.pi, n_features)
    f = FourierFunction(weights, frequencies, phases)
    if center:
        f.mean_shift = domain_mean(f)
    return f


def sample_hyperparams(dim: int, rng: np.random.Generator) -> TaskHyperParams:
    if dim < 1:
        raise ValueError("dim must be >= 1")
    v = rng.uniform(0.9616, 1.0)
    ls = 0.2 + rng.gamma(1.0, 1.0 / 10.0, dim)
    c = SAFETY_PRIOR_AMPLITUDE
    v_q = rng.uniform(0.9616 - c**2, 1.0 - c**2)
    ls_q = 0.2 + rng.gamma(1.0, 1.0 / 10.0, dim)
    w = rng.uniform(5.0, 40.0, dim)
    Q, _ = np.linalg.qr(rng.uniform(-1.0, 1.0, (dim, dim)))
    return TaskHyperParams(
        task_kernel=KernelParams(v, ls),
        task_noise_var=VARIANCE_BUDGET - v,
        safety_kernel=KernelParams(v_q, ls_q),
        safety_noise_var=VARIANCE_BUDGET - c**2 - v_q,
        sech=SechParams(c, w, Q),
    )


@dataclass
class SafeALTask:
    f: FourierFunction
    q: Optional[FourierFunction]
    hyper: TaskHyperParams
    initial: Dataset
    safe_seeded: bool = True


def sample_task(
    hyper: TaskHyperParams,
    n_init: int,
    box: Optional[np.ndarray] = None,
    max_iter: int = DEFAULT_MAX_ITER,
    rng: Optional[np.random.Generator] = None,
    n_features: int = DEFAULT_FEATURES,
) -> SafeALTask:
    """Draw (f, q) and a safe initial dataset from the seed box.

    Safe rows accumulate across iterations; at ``max_iter`` the current draw is
    accepted whatever its safety so the loop always terminates.
    """
    if n_init < 1:
        raise ValueError("n_init must be >= 1")
    rng = np.random.default_rng() if rng is None else rng
    D = hyper.dim
    box = default_safe_box(D) if box is None else np.asarray(box, dtype=float)
    f = sample_rff(hyper.task_kernel, n_features, rng)
    q = sample_rff(hyper.safety_kernel, n_features, rng)
    q.prior_mean = hyper.sech
    sd, sd_q = np.sqrt(hyper.task_noise_var), np.sqrt(hyper.safety_noise_var)

    xs, ys, zs = [], [], []
    safe_seeded = True
    for i in range(1, max_iter + 1):
        X = rng.uniform(box[:, 0], box[:, 1], (n_init, D))
        Y = f(X) + rng.normal(0.0, sd, n_init)
        Z = q(X) + rng.normal(0.0, sd_q, n_init)
        keep = Z >= 0
        xs.append(X[keep]), ys.append(Y[keep]), zs.append(Z[keep])
        if i == max_iter and sum(len(y) for y in ys) < n_init:
            safe_seeded = False
            xs.append(X[~keep]), ys.append(Y[~keep]), zs.append(Z[~keep])
        if sum(len(y) for y in ys) >= n_init:
            break
    X0 = np.concatenate(xs)[:n_init]
    initial = Dataset(X0, np.concatenate(ys)[:n_init], np.concatenate(zs)[:n_init], n_init=n_init)
    return SafeALTask(f, q, hyper, initial, safe_seeded)


def sample_task_unconstrained(
    hyper: TaskHyperParams,
    n_init: int,
    rng: Optional[np.random.Generator] = None,
    n_features: int = DEFAULT_FEATURES,
) -> tuple[FourierFunction, Dataset]:
    rng = np.random.default_rng() if rng is None else rng
    D = hyper.dim
    f = sample_rff(hyper.task_kernel, n_features, rng)
    X = rng.uniform(0.0, 1.0, (n_init, D))
    Y = f(X) + rng.normal(0.0, np.sqrt(hyper.task_noise_var), n_init)
    return f, Dataset(X, Y, n_init=n_init)


def sample_grid(n_grid: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    return rng.beta(0.5, 0.5, (n_grid, dim))


def default_grid_size(dim: int) -> int:
    return 100 if dim <= 2 else 500


# -- stacked evaluation for training --------------------------------------------


@dataclass
class FourierBatch:
    """A stack of Fourier functions evaluated jointly on torch inputs."""

    weights: torch.Tensor  # (B, L)
    frequencies: torch.Tensor  # (B, L, D)
    phases: torch.Tensor  # (B, L)
    mean_shift: torch.Tensor  # (B,)
    sech_c: Optional[torch.Tensor] = None  # (B,)
    sech_w: Optional[torch.Tensor] = None  # (B, D)
    sech_Q: Optional[torch.Tensor] = None  # (B, D, D)

    @classmethod
    def stack(cls, fns: Sequence[FourierFunction], dtype=torch.float64) -> "FourierBatch":
        t = lambda a: torch.as_tensor(np.stack(a), dtype=dtype)  # noqa: E731
        batch = cls(
            t([f.weights for f in fns]),
            t([f.frequencies for f in fns]),
            t([f.phases for f in fns]),
            t([f.mean_shift for f in fns]),
        )
        if fns and fns[0].prior_mean is not None:
            batch.sech_c = t([f.prior_mean.c for f in fns])
            batch.sech_w = t([f.prior_mean.w for f in fns])
            batch.sech_Q = t([f.prior_mean.Q for f in fns])
        return batch

    @classmethod
    def stack_groups(cls, groups: Sequence[Sequence[FourierFunction]], dtype=torch.float64) -> "FourierBatch":
        """Stack equal-length groups into a (B, C, ...) batch (prior means dropped)."""
        parts = [cls.stack(g, dtype) for g in groups]
        return cls(
            torch.stack([p.weights for p in parts]),
            torch.stack([p.frequencies for p in parts]),
            torch.stack([p.phases for p in parts]),
            torch.stack([p.mean_shift for p in parts]),
        )

    def prior(self, x):
        """Sech prior mean at ``x (B, n, D)``; zeros if the stack has none."""
        if self.sech_c is None:
            return torch.zeros(x.shape[:-1], dtype=x.dtype)
        u = (x - 0.5) @ self.sech_Q
        r = (self.sech_w.unsqueeze(-2) * u**2).sum(-1) / u.shape[-1]
        return SECH_SCALE * self.sech_c[..., None] * (SECH_OFFSET + 1.0 / torch.cosh(r))

    def __call__(self, x):
        L = self.weights.shape[-1]
        feats = torch.cos(x @ self.frequencies.transpose(-1, -2) + self.phases.unsqueeze(-2))
        out = (feats @ self.weights.unsqueeze(-1)).squeeze(-1) * np.sqrt(2.0 / L)
        return out - self.mean_shift[..., None] + self.prior(x)


# -- inspection dump -------------------------------------------------------------


def dump_tasks(tasks: Sequence[SafeALTask], path) -> Path:
    """Write sampled tasks to a self-describing ``.npz`` (JSON header + arrays)."""
    path = Path(path)
    arrays = {}
    meta = []
    for i, task in enumerate(tasks):
        h = task.hyper
        meta.append(
            {
                "index": i,
                "dim": h.dim,
                "task_variance": h.task_kernel.variance,
                "task_lengthscales": h.task_kernel.lengthscales.tolist(),
                "task_noise_var": h.task_noise_var,
                "safety_variance": h.safety_kernel.variance,
                "safety_lengthscales": h.safety_kernel.lengthscales.tolist(),
                "safety_noise_var": h.safety_noise_var,
                "sech_c": h.sech.c,
                "sech_w": h.sech.w.tolist(),
                "safe_seeded": task.safe_seeded,
            }
        )
        for name, fn in (("f", task.f), ("q", task.q)):
            if fn is None:
                continue
            arrays[f"{i}/{name}/weights"] = fn.weights
            arrays[f"{i}/{name}/frequencies"] = fn.frequencies
            arrays[f"{i}/{name}/phases"] = fn.phases
            arrays[f"{i}/{name}/mean_shift"] = np.array(fn.mean_shift)
        arrays[f"{i}/sech_Q"] = h.sech.Q
        arrays[f"{i}/init/inputs"] = task.initial.inputs
        arrays[f"{i}/init/outputs"] = task.initial.outputs
        if task.initial.safety is not None:
            arrays[f"{i}/init/safety"] = task.initial.safety
    header = json.dumps({"format": "asal-tasks", "version": 1, "tasks": meta})
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(header), **arrays)
    return path
