"""Deployment-time query loops: amortized policy and GP-based AL baselines."""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .benchmarks import PoolProblem, PoolSplit
from .gp import (
    Dataset,
    GPModel,
    KernelParams,
    count_factorizations,
    predictive_entropy,
    safety_prob_nonneg,
)
from .objectives import minunsafe_scores

MODES = ("policy", "gp_al", "safe_gp_al", "minunsafe_gp_al", "random", "safe_random")
SAFE_MODES = ("safe_gp_al", "minunsafe_gp_al", "safe_random")
FALLBACK_KERNEL_LENGTHSCALE = 0.3
FALLBACK_NOISE_VAR = 0.01


@dataclass
class DeployConfig:
    mode: str = "gp_al"
    T: int = 20
    n_init: int = 1
    gamma: float = 0.05
    n_candidates: int = 5000
    resample_candidates: bool = True
    n_restarts: int = 5
    seed: int = 0

    def validate(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.T < 1 or self.n_init < 1:
            raise ValueError("T and n_init must be >= 1")
        if self.mode in SAFE_MODES and not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1] for safe modes")
        if self.n_candidates < self.T:
            raise ValueError("the discretization must hold at least T candidates")
        return self


@dataclass
class RunResult:
    method: str
    problem: str
    seed: int
    queries: np.ndarray
    outputs: np.ndarray
    safety: Optional[np.ndarray]
    query_times: np.ndarray
    rmse: float
    safe_fraction: float
    kernel_variance: float
    kernel_lengthscales: list
    noise_var: float
    fallback_steps: int = 0
    loop_factorizations: int = 0
    pool_indices: Optional[list] = None

    @property
    def mean_query_time(self) -> float:
        return float(np.mean(self.query_times))

    def to_record(self) -> dict:
        rec = asdict(self)
        for key, value in rec.items():
            if isinstance(value, np.ndarray):
                rec[key] = value.tolist()
        return rec


class DeploymentError(RuntimeError):
    """A problem evaluation failed; ``partial`` holds the data collected so far."""

    def __init__(self, message, partial: Dataset):
        super().__init__(message)
        self.partial = partial


def fit_model(X, values, n_restarts: int = 5) -> GPModel:
    """Zero-mean RBF GP by Type-II ML; a fixed default model below two points."""
    X = np.asarray(X, dtype=float)
    if len(values) < 2:
        kernel = KernelParams(1.0, np.full(X.shape[1], FALLBACK_KERNEL_LENGTHSCALE))
        return GPModel(X, values, kernel, FALLBACK_NOISE_VAR)
    model, _ = GPModel.fit(X, values, n_restarts=n_restarts)
    return model


# -- single acquisition steps ---------------------------------------------------------


def conventional_al_step(data: Dataset, candidates: np.ndarray, n_restarts: int = 5) -> int:
    """Index of the candidate with maximal predictive entropy."""
    model = fit_model(data.inputs, data.outputs, n_restarts)
    _, var = model.predict(candidates)
    return int(np.argmax(predictive_entropy(var)))


def _safe_probability(data: Dataset, candidates, n_restarts):
    model = fit_model(data.inputs, data.safety, n_restarts)
    mean, var = model.predict(candidates)
    return safety_prob_nonneg(mean, var), model


def safe_al_step(data: Dataset, candidates, gamma: float, n_restarts: int = 5) -> tuple[int, bool]:
    """Max-entropy candidate among those with P(z >= 0) >= 1 - gamma.

    Returns ``(index, fell_back)``; with no such candidate the most probably
    safe one is chosen.
    """
    task = fit_model(data.inputs, data.outputs, n_restarts)
    p_safe, _ = _safe_probability(data, candidates, n_restarts)
    safe = p_safe >= 1.0 - gamma
    if not safe.any():
        return int(np.argmax(p_safe)), True
    _, var = task.predict(candidates)
    scores = np.where(safe, predictive_entropy(var), -np.inf)
    return int(np.argmax(scores)), False


def minunsafe_al_step(data: Dataset, candidates, gamma: float, n_restarts: int = 5) -> int:
    task = fit_model(data.inputs, data.outputs, n_restarts)
    safety = fit_model(data.inputs, data.safety, n_restarts)
    return int(np.argmax(minunsafe_scores(candidates, task, safety, gamma)))


def safe_random_step(data: Dataset, candidates, gamma: float, rng, n_restarts: int = 5) -> tuple[int, bool]:
    p_safe, _ = _safe_probability(data, candidates, n_restarts)
    safe = np.flatnonzero(p_safe >= 1.0 - gamma)
    if safe.size == 0:
        return int(np.argmax(p_safe)), True
    return int(rng.choice(safe)), False


# -- full deployment ---------------------------------------------------------------------


def _streams(seed: int):
    data_ss, noise_ss, method_ss = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(s) for s in (data_ss, noise_ss, method_ss))


def _nearest(point: np.ndarray, X: np.ndarray, available: np.ndarray) -> int:
    d = np.sum((X[available] - point) ** 2, axis=1)
    return int(available[np.argmin(d)])


def deploy(problem, config: DeployConfig, policy=None) -> RunResult:
    """Run one AL episode of ``config.T`` queries and evaluate the final GP.

    The seed fixes three independent streams: initial data and test set
    (shared by every method), observation noise, and method randomness
    (candidate sets, random choices). Per-query times cover only choosing the
    next input.
    """
    config.validate()
    if config.mode == "policy" and policy is None:
        raise ValueError("policy mode needs a policy")
    if config.mode in SAFE_MODES and not problem.has_safety:
        raise ValueError(f"{config.mode} needs a problem with a safety constraint")
    data_rng, noise_rng, method_rng = _streams(config.seed)
    pool = isinstance(problem, PoolProblem)
    split: Optional[PoolSplit] = None
    if pool:
        split = problem.split(config.n_init, data_rng)
        data = problem.dataset(split.init)
        test_x, test_y = problem.inputs[split.test], problem.outputs[split.test]
        available = split.pool.copy()
        if len(available) < config.T:
            raise ValueError("pool holds fewer points than the query budget")
    else:
        data = problem.initial_data(config.n_init, data_rng)
        test_x, test_y = problem.test_set(data_rng)
    policy_safety = policy is not None and getattr(policy, "has_safety", False)

    candidates = None
    times, picked, fallbacks = [], [], 0
    counter_ctx = count_factorizations()
    counter = counter_ctx.__enter__()
    try:
        for t in range(1, config.T + 1):
            t0 = time.perf_counter()
            if not pool and (candidates is None or config.resample_candidates):
                candidates = method_rng.uniform(0.0, 1.0, (config.n_candidates, problem.dim))
            cand = problem.inputs[available] if pool else candidates
            mode = config.mode
            if mode == "policy":
                x = policy.query(config.T - t + 1, data.inputs, data.outputs, data.safety if policy_safety else None)
                idx = None
                if pool:
                    row = _nearest(x, problem.inputs, available)
                    idx = int(np.flatnonzero(available == row)[0])
            elif mode == "random":
                idx = int(method_rng.integers(len(cand)))
            elif mode == "gp_al":
                idx = conventional_al_step(data, cand, config.n_restarts)
            elif mode == "safe_gp_al":
                idx, fb = safe_al_step(data, cand, config.gamma, config.n_restarts)
                fallbacks += fb
            elif mode == "minunsafe_gp_al":
                idx = minunsafe_al_step(data, cand, config.gamma, config.n_restarts)
            else:
                idx, fb = safe_random_step(data, cand, config.gamma, method_rng, config.n_restarts)
                fallbacks += fb
            if idx is not None:
                x = cand[idx]
            times.append(time.perf_counter() - t0)
            try:
                if pool:
                    row = int(available[idx])
                    available = np.delete(available, idx)
                    picked.append(row)
                    y = problem.outputs[row]
                    z = None if problem.safety is None else problem.safety[row] - problem.threshold
                else:
                    ys, zs = problem.observe(x[None, :], noise_rng)
                    y, z = ys[0], (None if zs is None else zs[0])
            except Exception as exc:  # noqa: BLE001 - re-raised with the trajectory attached
                raise DeploymentError(f"evaluation failed at query {t}: {exc}", data) from exc
            data = data.append(x, y, z)
    finally:
        counter_ctx.__exit__(None, None, None)

    final = fit_model(data.inputs, data.outputs, config.n_restarts)
    mean, _ = final.predict(test_x)
    rmse = float(np.sqrt(np.mean((mean - test_y) ** 2)))
    queries = data.inputs[config.n_init :]
    if pool:
        safe_fraction = float(np.mean(problem.safe_mask()[picked]))
    else:
        safe_fraction = float(np.mean(problem.is_safe(queries)))
    return RunResult(
        method=config.mode,
        problem=getattr(problem, "name", "problem"),
        seed=config.seed,
        queries=queries,
        outputs=data.outputs[config.n_init :],
        safety=None if data.safety is None else data.safety[config.n_init :],
        query_times=np.asarray(times),
        rmse=rmse,
        safe_fraction=safe_fraction,
        kernel_variance=final.kernel.variance,
        kernel_lengthscales=final.kernel.lengthscales.tolist(),
        noise_var=final.noise_var,
        fallback_steps=fallbacks,
        loop_factorizations=counter[0],
        pool_indices=picked if pool else None,
    )


# -- parallel grids ------------------------------------------------------------------------


@dataclass
class Job:
    problem: str
    config: DeployConfig
    checkpoint: Optional[str] = None
    pool_kwargs: dict = field(default_factory=dict)


def run_job(job: Job) -> dict:
    from .benchmarks import get_problem
    from .policy import load_checkpoint

    problem = get_problem(job.problem, **job.pool_kwargs)
    policy = load_checkpoint(job.checkpoint) if job.config.mode == "policy" else None
    return deploy(problem, job.config, policy).to_record()


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("ASAL_WORKERS", "1")))
    except ValueError:
        return 1


def run_jobs(jobs: list, workers: Optional[int] = None) -> list:
    """Run jobs in parallel; results come back in job order."""
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(jobs) <= 1:
        return [run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(run_job, jobs))
