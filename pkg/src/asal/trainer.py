"""Offline policy training on simulated GP tasks.

One numpy ``Generator`` seeded from ``config.seed`` drives every draw of a
training step (hyperparameters, functions, initial data, noise, budgets,
grids) in a fixed order that does not depend on the objective. Two configs
that differ only in the objective therefore see identical task streams.
Held-out monitoring tasks come from a separate child stream.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import batched as bgp
from . import objectives as obj
from .policy import (
    QueryPolicy,
    init_policy,
    policy_arrays,
    policy_from_archive,
    policy_header,
    read_archive,
    save_checkpoint,
    write_archive,
)
from .sampling import (
    DEFAULT_FEATURES,
    FourierBatch,
    default_grid_size,
    sample_grid,
    sample_hyperparams,
    sample_rff,
    sample_task,
    sample_task_unconstrained,
)

SAFE_OBJECTIVES = ("S_H", "S_H_division")
GRID_OBJECTIVES = ("I", "I_mean")
TRAIN_STATE_FORMAT = "asal-train-state"


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    dim: int = 1
    T: int = 20
    n_init: int = 1
    objective: str = "S_H"
    gamma: float = 0.05
    n_k: int = 10
    n_fq: Optional[int] = None  # 5, or 200 contrastive functions for DAD
    B: Optional[int] = None  # 1 for entropy-type objectives, 10 for I and DAD
    n_features: int = DEFAULT_FEATURES
    n_grid: Optional[int] = None
    lr: float = 1e-3
    decay: float = 0.98
    decay_interval: int = 50
    total_steps: Optional[int] = None  # 10000, or 20000 for DAD
    epoch_length: int = 50
    seed: int = 0
    embed_dim: int = 128
    hidden: int = 512
    mode: str = "attention"
    safety: Optional[bool] = None  # safety branch; defaults to safe objectives
    budget: Optional[bool] = None  # budget input; off for DAD
    safe_tasks: Optional[bool] = None  # sample q and safe-seeded initial data
    monitor_tasks: int = 32
    monitor_points: int = 200
    select_window: int = 10
    max_skips: int = 20

    def resolved(self) -> "TrainConfig":
        """Copy with every ``None`` default filled in and the fields validated."""
        c = dataclasses.replace(self)
        dad = c.objective == "DAD"
        if c.n_fq is None:
            c.n_fq = 200 if dad else 5
        if c.B is None:
            c.B = 10 if (dad or c.objective in GRID_OBJECTIVES) else 1
        if c.total_steps is None:
            c.total_steps = 20000 if dad else 10000
        if c.safety is None:
            c.safety = c.objective in SAFE_OBJECTIVES
        if c.budget is None:
            c.budget = not dad
        if c.safe_tasks is None:
            c.safe_tasks = bool(c.safety)
        if c.n_grid is None and c.objective in GRID_OBJECTIVES:
            c.n_grid = default_grid_size(c.dim)
        c.validate()
        return c

    def validate(self):
        if self.objective not in obj.OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}; choose from {obj.OBJECTIVES}")
        for name in ("dim", "T", "n_init", "n_k", "n_fq", "B", "n_features", "epoch_length", "decay_interval"):
            v = getattr(self, name)
            if v is None or int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.total_steps is None or self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.objective in GRID_OBJECTIVES and (self.n_grid is None or self.n_grid < 1):
            raise ValueError("mutual-information objectives need n_grid >= 1")
        if self.objective in SAFE_OBJECTIVES and not (self.safety and self.safe_tasks):
            raise ValueError("safe objectives need the safety branch and safe tasks")
        if self.safety and not self.safe_tasks:
            raise ValueError("a safety branch needs safe tasks to observe")
        if self.objective == "DAD" and (self.safety or self.budget):
            raise ValueError("DAD training uses neither a safety branch nor a budget input")
        if self.mode not in ("attention", "deepset"):
            raise ValueError("mode must be 'attention' or 'deepset'")
        if self.lr <= 0 or not 0 < self.decay <= 1:
            raise ValueError("lr must be positive and decay in (0, 1]")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(**data)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# -- simulated task batches ------------------------------------------------------


@dataclass
class TaskBatch:
    """Tensors for a batch of simulated tasks with their pre-drawn noise."""

    f: FourierBatch
    x_init: torch.Tensor
    y_init: torch.Tensor
    eps: torch.Tensor  # (B, T) task noise for the queries
    task_variance: torch.Tensor
    task_lengthscales: torch.Tensor
    task_noise: torch.Tensor
    q: Optional[FourierBatch] = None
    z_init: Optional[torch.Tensor] = None
    eps_q: Optional[torch.Tensor] = None
    safety_variance: Optional[torch.Tensor] = None
    safety_lengthscales: Optional[torch.Tensor] = None
    safety_noise: Optional[torch.Tensor] = None

    @property
    def size(self) -> int:
        return self.x_init.shape[0]


@dataclass
class StepData:
    tasks: TaskBatch
    t_sim: torch.Tensor
    grid: Optional[tuple] = None
    contrastive: Optional[FourierBatch] = None


def _tensor(a, dtype=torch.float64):
    return torch.as_tensor(np.asarray(a, dtype=float), dtype=dtype)


def _build_batch(entries, T: int, rng: np.random.Generator, safe: bool) -> TaskBatch:
    """``entries``: list of (hyper, f, q, X_init); draws all noise from ``rng``."""
    n = len(entries)
    N = entries[0][3].shape[0]
    sd = np.array([np.sqrt(e[0].task_noise_var) for e in entries])
    X0 = np.stack([e[3] for e in entries])
    f = FourierBatch.stack([e[1] for e in entries])
    eps_init = rng.standard_normal((n, N)) * sd[:, None]
    eps = rng.standard_normal((n, T)) * sd[:, None]
    x_init = _tensor(X0)
    with torch.no_grad():
        y_init = f(x_init) + _tensor(eps_init)
    batch = TaskBatch(
        f=f,
        x_init=x_init,
        y_init=y_init,
        eps=_tensor(eps),
        task_variance=_tensor([e[0].task_kernel.variance for e in entries]),
        task_lengthscales=_tensor([e[0].task_kernel.lengthscales for e in entries]),
        task_noise=_tensor([e[0].task_noise_var for e in entries]),
    )
    if safe:
        sd_q = np.array([np.sqrt(e[0].safety_noise_var) for e in entries])
        q = FourierBatch.stack([e[2] for e in entries])
        eps_q_init = rng.standard_normal((n, N)) * sd_q[:, None]
        eps_q = rng.standard_normal((n, T)) * sd_q[:, None]
        with torch.no_grad():
            batch.z_init = q(x_init) + _tensor(eps_q_init)
        batch.q = q
        batch.eps_q = _tensor(eps_q)
        batch.safety_variance = _tensor([e[0].safety_kernel.variance for e in entries])
        batch.safety_lengthscales = _tensor([e[0].safety_kernel.lengthscales for e in entries])
        batch.safety_noise = _tensor([e[0].safety_noise_var for e in entries])
    return batch


def _draw_task(config: TrainConfig, hyper, rng):
    if config.safe_tasks:
        task = sample_task(hyper, config.n_init, rng=rng, n_features=config.n_features)
        return task.f, task.q, task.initial.inputs
    f, data = sample_task_unconstrained(hyper, config.n_init, rng=rng, n_features=config.n_features)
    return f, None, data.inputs


def simulate_step(config: TrainConfig, rng: np.random.Generator) -> StepData:
    """Draw one training batch of N_k x N_fq x B instances (N_k x B for DAD).

    Initial inputs and T_sim are shared by the B noise realizations of a task.
    """
    c = config
    if c.objective == "DAD":
        return _simulate_dad_step(c, rng)
    entries, t_sim = [], []
    for _ in range(c.n_k):
        hyper = sample_hyperparams(c.dim, rng)
        for _ in range(c.n_fq):
            f, q, X0 = _draw_task(c, hyper, rng)
            t = int(rng.integers(1, c.T + 1))
            for _ in range(c.B):
                entries.append((hyper, f, q, X0))
                t_sim.append(t)
    tasks = _build_batch(entries, c.T, rng, c.safe_tasks)
    step = StepData(tasks, torch.as_tensor(t_sim, dtype=torch.long))
    if c.objective in GRID_OBJECTIVES:
        gx = sample_grid(c.n_grid, c.dim, rng)
        noise = rng.standard_normal((tasks.size, c.n_grid)) * np.sqrt(tasks.task_noise.numpy())[:, None]
        gx_t = _tensor(gx)
        with torch.no_grad():
            gy = tasks.f(gx_t.expand(tasks.size, -1, -1)) + _tensor(noise)
        step.grid = (gx_t, gy)
    return step


def _simulate_dad_step(c: TrainConfig, rng) -> StepData:
    entries, groups = [], []
    for _ in range(c.n_k):
        hyper = sample_hyperparams(c.dim, rng)
        f0, _, X0 = _draw_task(c, hyper, rng)
        alts = [sample_rff(hyper.task_kernel, c.n_features, rng) for _ in range(c.n_fq)]
        for _ in range(c.B):
            entries.append((hyper, f0, None, X0))
            groups.append(alts)
    tasks = _build_batch(entries, c.T, rng, False)
    t_sim = torch.full((tasks.size,), c.T, dtype=torch.long)
    return StepData(tasks, t_sim, contrastive=FourierBatch.stack_groups(groups))


def rollout_policy(policy: QueryPolicy, tasks: TaskBatch, t_sim: torch.Tensor) -> obj.Rollouts:
    """Run the policy on every task for ``max(t_sim)`` steps.

    Step t uses budget ``T_sim - t + 1`` (floored at 1 once a rollout is past
    its own horizon; those positions are masked out of every objective).
    """
    horizon = int(t_sim.max())
    if int(t_sim.min()) < 1:
        raise ValueError("t_sim must be >= 1")
    safe = policy.has_safety
    state = policy.start(tasks.x_init, tasks.y_init, tasks.z_init if safe else None)
    xs, ys, zs, budgets = [], [], [], []
    for t in range(1, horizon + 1):
        budget = torch.clamp(t_sim - t + 1, min=1).to(tasks.y_init.dtype)
        x = policy.propose(state, budget)
        assert bool(((x >= 0) & (x <= 1)).all()), "policy output left the unit cube"
        y = tasks.f(x.unsqueeze(-2)).squeeze(-1) + tasks.eps[:, t - 1]
        z = None
        if tasks.q is not None:
            z = tasks.q(x.unsqueeze(-2)).squeeze(-1) + tasks.eps_q[:, t - 1]
        xs.append(x), ys.append(y), zs.append(z), budgets.append(budget)
        if t < horizon:
            state = policy.extend(state, x, y, z if safe else None)
    r = obj.Rollouts(
        x_init=tasks.x_init,
        y_init=tasks.y_init,
        queries=torch.stack(xs, dim=1),
        y=torch.stack(ys, dim=1),
        t_sim=t_sim,
        task_variance=tasks.task_variance,
        task_lengthscales=tasks.task_lengthscales,
        task_noise=tasks.task_noise,
        f=tasks.f,
        budget_trace=torch.stack(budgets, dim=1),
    )
    if tasks.q is not None:
        r.z_init = tasks.z_init
        r.z = torch.stack(zs, dim=1)
        r.q = tasks.q
        r.safety_variance = tasks.safety_variance
        r.safety_lengthscales = tasks.safety_lengthscales
        r.safety_noise = tasks.safety_noise
    return r


def step_loss(policy: QueryPolicy, config: TrainConfig, step: StepData) -> torch.Tensor:
    r = rollout_policy(policy, step.tasks, step.t_sim)
    if config.objective != "DAD":
        expected = config.n_init + step.t_sim
        assert torch.equal(r.normalizer, expected.to(r.normalizer.dtype)), "bad loss normalizer"
    return obj.training_loss(
        config.objective, r, gamma=config.gamma, grid=step.grid, contrastive=step.contrastive
    )


# -- held-out monitoring -----------------------------------------------------------


@dataclass
class Monitor:
    tasks: TaskBatch
    test_x: torch.Tensor
    test_f: torch.Tensor


def make_monitor(config: TrainConfig, rng) -> Monitor:
    c = config
    entries = []
    for _ in range(c.monitor_tasks):
        hyper = sample_hyperparams(c.dim, rng)
        f, q, X0 = _draw_task(c, hyper, rng)
        entries.append((hyper, f, q, X0))
    tasks = _build_batch(entries, c.T, rng, c.safe_tasks)
    test_x = _tensor(rng.uniform(0.0, 1.0, (c.monitor_tasks, c.monitor_points, c.dim)))
    with torch.no_grad():
        test_f = tasks.f(test_x)
    return Monitor(tasks, test_x, test_f)


@torch.no_grad()
def monitor_rmse(policy: QueryPolicy, config: TrainConfig, monitor: Monitor) -> float:
    """Mean over held-out tasks of the true-hyperparameter GP posterior-mean RMSE."""
    tasks = monitor.tasks
    t_sim = torch.full((tasks.size,), config.T, dtype=torch.long)
    r = rollout_policy(policy, tasks, t_sim)
    X = torch.cat([r.x_init, r.queries], dim=1)
    Y = torch.cat([r.y_init, r.y], dim=1)
    mean, _ = bgp.posterior(X, Y, monitor.test_x, r.task_variance, r.task_lengthscales, r.task_noise)
    rmse = torch.sqrt(((mean - monitor.test_f) ** 2).mean(-1))
    return float(rmse.mean())


# -- training loop -----------------------------------------------------------------


@dataclass
class TrainResult:
    policy: QueryPolicy
    config: TrainConfig
    log: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)
    epoch_rmse: list = field(default_factory=list)
    best_epoch: Optional[int] = None
    skipped: int = 0
    completed: bool = True


def _streams(seed: int):
    train_ss, monitor_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(train_ss), np.random.default_rng(monitor_ss)


def _make_optimizer(policy, config):
    opt = torch.optim.RAdam(policy.parameters(), lr=config.lr)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=config.decay_interval, gamma=config.decay)
    return opt, sched


def new_policy(config: TrainConfig) -> QueryPolicy:
    return init_policy(
        config.dim,
        config.embed_dim,
        seed=config.seed,
        safety=config.safety,
        budget=config.budget,
        mode=config.mode,
        max_budget=config.T,
        hidden=config.hidden,
    )


class _JsonlLog:
    def __init__(self, path: Optional[Path], records: list):
        self.path = path
        self.records = records

    def write(self, record: dict):
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record) + "\n")


def train(
    config: TrainConfig,
    out_dir=None,
    resume: bool = False,
    stop_after: Optional[int] = None,
    checkpoint_every: Optional[int] = None,
    monitor: bool = True,
) -> TrainResult:
    """Train a policy; optionally persist a resumable state under ``out_dir``.

    ``stop_after`` halts (with state saved) after that many total steps, which
    is how interrupted runs are simulated. ``monitor=False`` skips the
    per-epoch held-out deployment.
    """
    config = config.resolved()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    state_path = out / "train_state.npz" if out is not None else None
    log_path = out / "train_log.jsonl" if out is not None else None
    checkpoint_every = checkpoint_every or config.epoch_length

    policy = new_policy(config)
    opt, sched = _make_optimizer(policy, config)
    rng, monitor_rng = _streams(config.seed)
    mon = make_monitor(config, monitor_rng) if monitor else None
    result = TrainResult(policy, config)
    n_epochs = math.ceil(config.total_steps / config.epoch_length) if config.total_steps else 0
    window_start = max(0, n_epochs - config.select_window)
    best = {"loss": math.inf, "epoch": None, "params": None}
    start_step, consecutive = 0, 0
    epoch_buf: list = []

    if resume and state_path is not None and state_path.exists():
        start_step, consecutive, epoch_buf, best = _load_state(
            state_path, config, policy, opt, sched, rng, result
        )
    elif out is not None and log_path.exists() and not resume:
        log_path.unlink()
    if resume and log_path is not None:
        _truncate_log(log_path, start_step)
    log = _JsonlLog(log_path, result.log)

    for step in range(start_step, config.total_steps):
        if stop_after is not None and step >= stop_after:
            result.completed = False
            break
        data = simulate_step(config, rng)
        opt.zero_grad(set_to_none=True)
        loss = step_loss(policy, config, data)
        value = float(loss.detach())
        finite = math.isfinite(value)
        if finite:
            loss.backward()
            finite = all(
                p.grad is None or bool(torch.isfinite(p.grad).all()) for p in policy.parameters()
            )
        lr = opt.param_groups[0]["lr"]
        if finite:
            opt.step()
            consecutive = 0
        else:
            consecutive += 1
            result.skipped += 1
            warnings.warn(f"non-finite loss or gradient at step {step}; step skipped")
            if consecutive >= config.max_skips:
                raise TrainingAborted(f"{consecutive} consecutive non-finite steps")
        with warnings.catch_warnings():
            # a skipped first step trips torch's scheduler-order check
            warnings.filterwarnings("ignore", message="Detected call of `lr_scheduler.step")
            sched.step()
        result.losses.append(value)
        if finite:
            epoch_buf.append(value)
        log.write({"step": step + 1, "loss": value, "lr": lr, "skipped": not finite})

        done = step + 1
        if done % config.epoch_length == 0 or done == config.total_steps:
            epoch = (done - 1) // config.epoch_length
            mean_loss = float(np.mean(epoch_buf)) if epoch_buf else math.nan
            epoch_buf = []
            rmse = monitor_rmse(policy, config, mon) if mon is not None else None
            result.epoch_losses.append(mean_loss)
            result.epoch_rmse.append(rmse)
            log.write({"epoch": epoch + 1, "step": done, "mean_loss": mean_loss, "rmse": rmse})
            if epoch >= window_start and mean_loss < best["loss"]:
                best = {
                    "loss": mean_loss,
                    "epoch": epoch + 1,
                    "params": {k: v.detach().clone() for k, v in policy.state_dict().items()},
                }
        if state_path is not None and (done % checkpoint_every == 0 or done == stop_after):
            _save_state(state_path, config, policy, opt, sched, rng, done, consecutive, epoch_buf, best, result)

    if result.completed and best["params"] is not None:
        policy.load_state_dict(best["params"])
        result.best_epoch = best["epoch"]
    if out is not None and result.completed:
        save_checkpoint(policy, out / "policy.npz", extra_header={"train_config": config.to_dict()})
    return result


# -- resumable state ------------------------------------------------------------------


def _save_state(path, config, policy, opt, sched, rng, step, consecutive, epoch_buf, best, result):
    arrays = policy_arrays(policy)
    opt_state = opt.state_dict()
    slots = {}
    for idx, st in opt_state["state"].items():
        slots[str(idx)] = sorted(st)
        for key, value in st.items():
            arrays[f"opt/{idx}/{key}"] = torch.as_tensor(value).detach().numpy()
    if best["params"] is not None:
        for k, v in best["params"].items():
            arrays[f"best/{k}"] = v.numpy()
    arrays["losses"] = np.asarray(result.losses, dtype=float)
    arrays["epoch_losses"] = np.asarray(result.epoch_losses, dtype=float)
    arrays["epoch_rmse"] = np.asarray([np.nan if v is None else v for v in result.epoch_rmse], dtype=float)
    arrays["epoch_buf"] = np.asarray(epoch_buf, dtype=float)
    header = policy_header(policy)
    header.update(
        {
            "kind": TRAIN_STATE_FORMAT,
            "train_config": config.to_dict(),
            "step": step,
            "consecutive_skips": consecutive,
            "skipped": result.skipped,
            "optimizer_groups": opt_state["param_groups"],
            "optimizer_slots": slots,
            "scheduler": sched.state_dict(),
            "rng": rng.bit_generator.state,
            "best_loss": best["loss"] if math.isfinite(best["loss"]) else None,
            "best_epoch": best["epoch"],
        }
    )
    write_archive(path, header, arrays)


def _load_state(path, config, policy, opt, sched, rng, result):
    header, arrays = read_archive(path)
    if header.get("kind") != TRAIN_STATE_FORMAT:
        raise ValueError(f"{path} is not a training state file")
    if header["train_config"] != config.to_dict():
        raise ValueError("training state was written under a different configuration")
    policy.load_state_dict(policy_from_archive(header, arrays).state_dict())
    opt_state = {"state": {}, "param_groups": header["optimizer_groups"]}
    for idx, keys in header["optimizer_slots"].items():
        opt_state["state"][int(idx)] = {k: torch.as_tensor(arrays[f"opt/{idx}/{k}"]) for k in keys}
    opt.load_state_dict(opt_state)
    sched.load_state_dict(header["scheduler"])
    rng.bit_generator.state = header["rng"]
    result.losses = arrays["losses"].tolist()
    result.epoch_losses = arrays["epoch_losses"].tolist()
    result.epoch_rmse = [None if np.isnan(v) else float(v) for v in arrays["epoch_rmse"]]
    result.skipped = header["skipped"]
    best = {"loss": math.inf, "epoch": None, "params": None}
    if header["best_epoch"] is not None:
        best = {
            "loss": header["best_loss"],
            "epoch": header["best_epoch"],
            "params": {
                k[len("best/"):]: torch.as_tensor(v) for k, v in arrays.items() if k.startswith("best/")
            },
        }
    return header["step"], header["consecutive_skips"], arrays["epoch_buf"].tolist(), best


def _truncate_log(path: Path, step: int):
    """Drop log records written after ``step`` so a resumed log has no duplicates."""
    if not path.exists():
        return
    keep = []
    for line in path.read_text().splitlines():
        rec = json.loads(line)
        if rec.get("step", 0) <= step:
            keep.append(line)
    path.write_text("".join(k + "\n" for k in keep))


def smoothed(values, window: int = 50) -> np.ndarray:
    """Trailing moving average used to judge training progress."""
    v = np.asarray(values, dtype=float)
    if v.size < window:
        return v.copy()
    kernel = np.ones(window) / window
    return np.convolve(v, kernel, mode="valid")


def timed_steps(config: TrainConfig, n_steps: int = 3) -> float:
    """Mean wall time of a training step; used to size desk-scale runs."""
    config = dataclasses.replace(config.resolved(), total_steps=n_steps)
    t0 = time.perf_counter()
    train(config, monitor=False)
    return (time.perf_counter() - t0) / n_steps


@torch.no_grad()
def _posterior_rmse(X, Y, r_like: TaskBatch, test_x, test_f) -> torch.Tensor:
    mean, _ = bgp.posterior(X, Y, test_x, r_like.task_variance, r_like.task_lengthscales, r_like.task_noise)
    return torch.sqrt(((mean - test_f) ** 2).mean(-1))


@torch.no_grad()
def compare_with_random(policy: QueryPolicy, config: TrainConfig, seed: int, n_tasks: int = 32):
    """Per-task RMSE of the policy and of uniform random queries on held-out tasks.

    Both methods see the same tasks, initial data and noise; each runs T
    queries and is scored by the true-hyperparameter GP posterior mean against
    the noise-free function at ``monitor_points`` uniform inputs.
    """
    config = dataclasses.replace(config.resolved(), monitor_tasks=n_tasks)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    mon = make_monitor(config, rng)
    tasks = mon.tasks
    t_sim = torch.full((tasks.size,), config.T, dtype=torch.long)
    r = rollout_policy(policy, tasks, t_sim)
    X = torch.cat([r.x_init, r.queries], dim=1)
    Y = torch.cat([r.y_init, r.y], dim=1)
    policy_rmse = _posterior_rmse(X, Y, tasks, mon.test_x, mon.test_f)
    Xr = _tensor(rng.uniform(0.0, 1.0, (tasks.size, config.T, config.dim)))
    Yr = tasks.f(Xr) + tasks.eps
    random_rmse = _posterior_rmse(
        torch.cat([tasks.x_init, Xr], 1), torch.cat([tasks.y_init, Yr], 1), tasks, mon.test_x, mon.test_f
    )
    return policy_rmse.numpy(), random_rmse.numpy()


@torch.no_grad()
def safety_dominance_probe(policy: QueryPolicy, config: TrainConfig, n_rollouts: int = 100, seed: int = 0):
    """Mean |exploration term| and mean |unsafe log-probability term| per rollout.

    Rollouts are drawn like training batches of ``config`` (full horizon T);
    the unsafe term uses ``config.gamma``, so gamma = 0 leaves only the floor.
    """
    c = dataclasses.replace(config.resolved(), B=1)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD0]))
    explore, unsafe = [], []
    while sum(len(e) for e in explore) < n_rollouts:
        step = simulate_step(c, rng)
        t_sim = torch.full_like(step.t_sim, c.T)
        r = rollout_policy(policy, step.tasks, t_sim)
        explore.append(obj.entropy_score(r).abs())
        unsafe.append(obj.unsafe_logprob_terms(r, c.gamma).sum(-1).abs())
    explore = torch.cat(explore)[:n_rollouts]
    unsafe = torch.cat(unsafe)[:n_rollouts]
    return float(explore.mean()), float(unsafe.mean())
