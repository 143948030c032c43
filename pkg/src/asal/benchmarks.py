"""Analytic benchmark problems on [0, 1]^D and CSV pool ingestion.

Every analytic problem maps the unit cube affinely onto its native box. The
normalization constants below were computed once and frozen with the recipe

    u = np.random.default_rng(NORMALIZATION_SEED).uniform(0, 1, (NORMALIZATION_SAMPLES, D))
    values = raw_function(native(u))
    mean, std = values.mean(), values.std()

(:func:`normalization_recipe` reruns it). Constraint functions are divided by
their standard deviation only so the zero level set is unchanged.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .gp import Dataset

NORMALIZATION_SEED = 20250101
NORMALIZATION_SAMPLES = 100_000
NOISE_STD = 0.1
DEFAULT_MAX_ITER = 50

BRANIN_MEAN = 54.48123971142356
BRANIN_STD = 51.3061897626043
SIMIONESCU_MEAN = 2.0741106036000872e-05
SIMIONESCU_STD = 0.05210047406709875
SIMIONESCU_Q_STD = 0.6740510035109651
TOWNSEND_MEAN = -0.4775676414922435
TOWNSEND_STD = 1.0252968344485054
TOWNSEND_Q_STD = 2.254722716330907


class SchemaError(ValueError):
    pass


# -- raw functions on native coordinates -------------------------------------------


def branin_raw(x1, x2):
    a, b, c, r, s, t = 1.0, 5.1 / (4 * np.pi**2), 5 / np.pi, 6.0, 10.0, 1 / (8 * np.pi)
    return a * (x2 - b * x1**2 + c * x1 - r) ** 2 + s * (1 - t) * np.cos(x1) + s


def angle(x1, x2):
    """Two-argument angle with sign(0) = 1 on the negative x2 half-axis and 0 at the origin."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    safe_x2 = np.where(x2 == 0, 1.0, x2)
    base = np.arctan(x1 / safe_x2)
    sign = np.where(x1 >= 0, 1.0, -1.0)
    return np.where(
        x2 > 0,
        base,
        np.where(x2 < 0, base + sign * np.pi, np.where(x1 != 0, np.sign(x1) * np.pi / 2, 0.0)),
    )


def simionescu_raw(x1, x2):
    return 0.1 * x1 * x2


def simionescu_constraint_raw(x1, x2):
    b = angle(x1, x2)
    return (1 + 0.2 * np.cos(8 * b)) ** 2 - x1**2 - x2**2


def townsend_raw(x1, x2):
    return -np.cos((x1 - 0.1) * x2) ** 2 - x1 * np.sin(3 * x1 + x2)


def townsend_constraint_raw(x1, x2):
    b = angle(x1, x2)
    radial = 2 * np.cos(b) - 0.5 * np.cos(2 * b) - 0.25 * np.cos(3 * b) - 0.125 * np.cos(4 * b)
    return radial**2 + (2 * np.sin(b)) ** 2 - x1**2 - x2**2


# -- problems -----------------------------------------------------------------------


@dataclass
class BenchmarkProblem:
    """A continuous problem on [0, 1]^D with optional safety constraint q >= 0."""

    name: str
    dim: int
    lower: np.ndarray
    upper: np.ndarray
    raw_f: Callable
    f_mean: float = 0.0
    f_std: float = 1.0
    raw_q: Optional[Callable] = None
    q_std: float = 1.0
    noise_std: float = NOISE_STD
    noise_std_q: float = NOISE_STD
    n_test: int = 200
    safe_box: Optional[np.ndarray] = None

    @property
    def has_safety(self) -> bool:
        return self.raw_q is not None

    @property
    def is_pool(self) -> bool:
        return False

    def _check(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[-1] != self.dim:
            x = x.reshape(-1, self.dim)
        if np.any(x < 0.0) or np.any(x > 1.0):
            raise ValueError(f"{self.name}: inputs must lie in [0, 1]^{self.dim}")
        return x

    def native(self, x) -> np.ndarray:
        x = self._check(x)
        return self.lower + x * (self.upper - self.lower)

    def f(self, x) -> np.ndarray:
        u = self.native(x)
        return (self.raw_f(*u.T) - self.f_mean) / self.f_std

    def q(self, x) -> np.ndarray:
        if not self.has_safety:
            raise ValueError(f"{self.name} has no safety constraint")
        u = self.native(x)
        return self.raw_q(*u.T) / self.q_std

    def observe(self, x, rng: np.random.Generator):
        """Noisy ``(y, z)`` at a batch of inputs (``z`` is None without a constraint)."""
        x = self._check(x)
        y = self.f(x) + rng.normal(0.0, self.noise_std, len(x))
        z = None
        if self.has_safety:
            z = self.q(x) + rng.normal(0.0, self.noise_std_q, len(x))
        return y, z

    def is_safe(self, x) -> np.ndarray:
        if not self.has_safety:
            return np.ones(len(self._check(x)), dtype=bool)
        return self.q(x) >= 0

    def test_set(self, rng: np.random.Generator, max_draws: int = 1_000_000):
        """``n_test`` uniform inputs (truly safe ones only for constrained problems)."""
        if not self.has_safety:
            X = rng.uniform(0.0, 1.0, (self.n_test, self.dim))
            return X, self.f(X)
        kept, drawn = [], 0
        while sum(len(k) for k in kept) < self.n_test:
            if drawn > max_draws:
                raise RuntimeError(f"{self.name}: safe region too small to draw test points")
            X = rng.uniform(0.0, 1.0, (self.n_test, self.dim))
            drawn += self.n_test
            kept.append(X[self.q(X) >= 0])
        X = np.concatenate(kept)[: self.n_test]
        return X, self.f(X)

    def initial_data(self, n_init: int, rng: np.random.Generator, max_iter: int = DEFAULT_MAX_ITER):
        """Initial observations: uniform for unconstrained problems, otherwise
        drawn in the safe seed box keeping only rows observed with z >= 0."""
        if n_init < 1:
            raise ValueError("n_init must be >= 1")
        if not self.has_safety:
            X = rng.uniform(0.0, 1.0, (n_init, self.dim))
            y, _ = self.observe(X, rng)
            return Dataset(X, y, n_init=n_init)
        box = self.safe_box if self.safe_box is not None else np.tile([0.4, 0.6], (self.dim, 1))
        xs, ys, zs = [], [], []
        for i in range(1, max_iter + 1):
            X = rng.uniform(box[:, 0], box[:, 1], (n_init, self.dim))
            y, z = self.observe(X, rng)
            keep = z >= 0
            xs.append(X[keep]), ys.append(y[keep]), zs.append(z[keep])
            if i == max_iter and sum(len(v) for v in ys) < n_init:
                xs.append(X[~keep]), ys.append(y[~keep]), zs.append(z[~keep])
            if sum(len(v) for v in ys) >= n_init:
                break
        return Dataset(
            np.concatenate(xs)[:n_init], np.concatenate(ys)[:n_init], np.concatenate(zs)[:n_init], n_init=n_init
        )


def make_sin() -> BenchmarkProblem:
    """f(x) = sin(20x) on [0, 1], left unnormalized."""
    return BenchmarkProblem(
        "sin", 1, np.array([0.0]), np.array([1.0]), lambda x1: np.sin(20.0 * x1), n_test=50
    )


def make_branin() -> BenchmarkProblem:
    return BenchmarkProblem(
        "branin", 2, np.array([-5.0, 0.0]), np.array([10.0, 15.0]), branin_raw, BRANIN_MEAN, BRANIN_STD, n_test=200
    )


def make_simionescu() -> BenchmarkProblem:
    return BenchmarkProblem(
        "simionescu",
        2,
        np.array([-1.25, -1.25]),
        np.array([1.25, 1.25]),
        simionescu_raw,
        SIMIONESCU_MEAN,
        SIMIONESCU_STD,
        simionescu_constraint_raw,
        SIMIONESCU_Q_STD,
        n_test=200,
        safe_box=np.tile([0.4, 0.6], (2, 1)),
    )


def make_townsend() -> BenchmarkProblem:
    return BenchmarkProblem(
        "townsend",
        2,
        np.array([-2.25, -2.5]),
        np.array([2.25, 1.75]),
        townsend_raw,
        TOWNSEND_MEAN,
        TOWNSEND_STD,
        townsend_constraint_raw,
        TOWNSEND_Q_STD,
        n_test=200,
        safe_box=np.tile([0.4, 0.6], (2, 1)),
    )


PROBLEMS = {
    "sin": make_sin,
    "branin": make_branin,
    "simionescu": make_simionescu,
    "townsend": make_townsend,
}


def normalization_recipe(problem: BenchmarkProblem):
    """Recompute (f mean, f std, q std) with the frozen seed and sample count."""
    u = np.random.default_rng(NORMALIZATION_SEED).uniform(0.0, 1.0, (NORMALIZATION_SAMPLES, problem.dim))
    x = problem.lower + u * (problem.upper - problem.lower)
    values = problem.raw_f(*x.T)
    q_std = float(problem.raw_q(*x.T).std()) if problem.has_safety else None
    return float(values.mean()), float(values.std()), q_std


# -- CSV pools ---------------------------------------------------------------------


# name -> (test count, safety threshold)
KNOWN_POOLS = {
    "airline": (50, 0.0),
    "lgbb": (200, 0.0),
    "airfoil": (500, 0.0),
    "engine": (200, 0.2),
}


@dataclass
class PoolProblem:
    """A finite dataset queried by index; safe means ``z - threshold >= 0``."""

    name: str
    inputs: np.ndarray
    outputs: np.ndarray
    safety: Optional[np.ndarray] = None
    n_test: int = 50
    threshold: float = 0.0
    safe_box: Optional[np.ndarray] = None

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def has_safety(self) -> bool:
        return self.safety is not None

    @property
    def is_pool(self) -> bool:
        return True

    def __len__(self) -> int:
        return len(self.outputs)

    def safe_mask(self) -> np.ndarray:
        if not self.has_safety:
            return np.ones(len(self), dtype=bool)
        return self.safety - self.threshold >= 0

    def split(self, n_init: int, rng: np.random.Generator) -> "PoolSplit":
        """Seeded split into test indices, initial indices and the remaining pool.

        Test points are drawn among safe rows for constrained pools; initial
        rows come from the safe seed box when it holds enough safe rows.
        """
        idx = np.arange(len(self))
        safe = self.safe_mask()
        candidates = idx[safe]
        if len(candidates) < self.n_test + n_init:
            raise ValueError(f"{self.name}: not enough rows for {self.n_test} test and {n_init} initial points")
        test = rng.choice(candidates, self.n_test, replace=False)
        rest = np.setdiff1d(idx, test)
        init_from = rest[safe[rest]]
        if self.has_safety:
            box = self.safe_box if self.safe_box is not None else np.tile([0.4, 0.6], (self.dim, 1))
            X = self.inputs[init_from]
            in_box = np.all((X >= box[:, 0]) & (X <= box[:, 1]), axis=1)
            if in_box.sum() >= n_init:
                init_from = init_from[in_box]
        init = rng.choice(init_from, n_init, replace=False)
        pool = np.setdiff1d(rest, init)
        return PoolSplit(np.sort(test), init, pool)

    def dataset(self, rows) -> Dataset:
        rows = np.asarray(rows, dtype=int)
        z = None if self.safety is None else self.safety[rows] - self.threshold
        return Dataset(self.inputs[rows], self.outputs[rows], z, n_init=len(rows))


@dataclass
class PoolSplit:
    test: np.ndarray
    init: np.ndarray
    pool: np.ndarray
    queried: set = field(default_factory=set)


def load_pool_csv(
    path,
    dimension: int,
    has_safety: bool = False,
    name: Optional[str] = None,
    n_test: Optional[int] = None,
    threshold: Optional[float] = None,
) -> PoolProblem:
    """Parse ``x1,...,xD,y[,z]`` rows. The dataset name (default: file stem)
    selects the test count and safety threshold of a recognized dataset."""
    path = Path(path)
    name = (name or path.stem).lower()
    known_test, known_threshold = KNOWN_POOLS.get(name, (None, 0.0))
    n_test = n_test if n_test is not None else known_test
    if n_test is None:
        raise ValueError(f"unrecognized pool {name!r}: pass the test count explicitly")
    threshold = known_threshold if threshold is None else threshold

    expected = [f"x{i + 1}" for i in range(dimension)] + ["y"]
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if header[: dimension + 1] != expected:
            raise SchemaError(f"{path}: header must start with {','.join(expected)}, got {','.join(header)}")
        extra = header[dimension + 1 :]
        if has_safety and extra != ["z"]:
            raise SchemaError(f"{path}: a safety pool needs a trailing z column")
        if not has_safety and extra not in ([], ["z"]):
            raise SchemaError(f"{path}: unexpected columns {extra}")
        width = len(header)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != width:
                raise SchemaError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
            try:
                values = [float(c) for c in row]
            except ValueError:
                raise SchemaError(f"{path}:{lineno}: non-numeric field in {row}") from None
            if not np.all(np.isfinite(values)):
                raise SchemaError(f"{path}:{lineno}: non-finite value")
            if any(v < 0.0 or v > 1.0 for v in values[:dimension]):
                raise SchemaError(f"{path}:{lineno}: inputs must lie in [0, 1]")
            rows.append(values)
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    data = np.array(rows)
    safety = data[:, dimension + 1] if has_safety else None
    return PoolProblem(name, data[:, :dimension], data[:, dimension], safety, n_test, threshold)


def get_problem(name: str, **pool_kwargs):
    """Registry lookup by name; ``*.csv`` paths load pools."""
    if name in PROBLEMS:
        return PROBLEMS[name]()
    if name.endswith(".csv"):
        return load_pool_csv(name, **pool_kwargs)
    raise ValueError(f"unknown problem {name!r}; choose from {sorted(PROBLEMS)} or a .csv pool")
