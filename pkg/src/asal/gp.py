"""Exact Gaussian-process algebra with an RBF kernel (numpy).

Everything here works on plain arrays and is free of hidden state, with one
exception: :func:`count_factorizations` lets callers count Cholesky
factorizations made inside a ``with`` block (used to check that policy
deployment never touches a gram matrix).
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import linalg, optimize, special

LOG_2PI = float(np.log(2.0 * np.pi))

JITTER_START = 1e-10
JITTER_MAX = 1e-4

# log-space bounds used by Type-II maximum likelihood
LOG_LENGTHSCALE_BOUNDS = (np.log(1e-2), np.log(1e2))
LOG_VARIANCE_BOUNDS = (np.log(1e-4), np.log(1e2))
LOG_NOISE_BOUNDS = (np.log(1e-6), np.log(1e1))


class SingularSystemError(np.linalg.LinAlgError):
    """Raised when a gram matrix stays non-PD after maximum jitter."""


@dataclass(frozen=True)
class KernelParams:
    variance: float
    lengthscales: np.ndarray

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float)).copy()
        ls.setflags(write=False)
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "variance", float(self.variance))
        if not np.isfinite(self.variance) or self.variance <= 0:
            raise ValueError(f"kernel variance must be positive and finite, got {self.variance}")
        if ls.ndim != 1 or ls.size == 0 or not np.all(np.isfinite(ls)) or np.any(ls <= 0):
            raise ValueError(f"lengthscales must be a nonempty vector of positive reals, got {ls}")

    @property
    def dim(self) -> int:
        return self.lengthscales.size


@dataclass
class Dataset:
    """Observations ``(x, y[, z])``; the first ``n_init`` rows are the initial data."""

    inputs: np.ndarray
    outputs: np.ndarray
    safety: Optional[np.ndarray] = None
    n_init: int = 0

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        if self.inputs.ndim == 1:
            self.inputs = self.inputs[:, None]
        self.outputs = np.asarray(self.outputs, dtype=float).reshape(-1)
        if self.safety is not None:
            self.safety = np.asarray(self.safety, dtype=float).reshape(-1)
        n = self.inputs.shape[0]
        if self.outputs.shape[0] != n or (self.safety is not None and self.safety.shape[0] != n):
            raise ValueError("inputs, outputs and safety must have the same number of rows")
        if n and (np.any(self.inputs < 0.0) or np.any(self.inputs > 1.0)):
            raise ValueError("inputs must lie in the unit hypercube")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def append(self, x, y, z=None) -> "Dataset":
        x = np.asarray(x, dtype=float).reshape(1, -1)
        safety = None
        if self.safety is not None:
            safety = np.append(self.safety, z)
        return Dataset(
            np.vstack([self.inputs, x]), np.append(self.outputs, y), safety, self.n_init
        )


@dataclass
class GaussianPredictive:
    mean: np.ndarray
    covariance: np.ndarray

    @property
    def variance(self) -> np.ndarray:
        return np.diag(self.covariance).copy()


@dataclass
class GPFit:
    kernel: KernelParams
    noise_var: float
    log_marginal: float
    degraded: bool = False
    restarts: list = field(default_factory=list)

    def __iter__(self):
        # allows ``kernel, noise = fit_type2_ml(...)``
        return iter((self.kernel, self.noise_var))


# -- factorization counter -----------------------------------------------------

_factorizations: contextvars.ContextVar[Optional[list]] = contextvars.ContextVar(
    "asal_factorizations", default=None
)


@contextlib.contextmanager
def count_factorizations():
    """Count Cholesky factorizations performed in the current context.

    >>> with count_factorizations() as counter:
    ...     ...
    >>> counter[0]
    0
    """
    counter = [0]
    token = _factorizations.set(counter)
    try:
        yield counter
    finally:
        _factorizations.reset(token)


def _record_factorization():
    counter = _factorizations.get()
    if counter is not None:
        counter[0] += 1


# -- kernel ----------------------------------------------------------------------


def rbf_kernel(x, x2, params: KernelParams) -> float:
    """v * exp(-0.5 * sum_d ((x_d - x2_d) / l_d)^2) for two single points."""
    d = (np.asarray(x, dtype=float) - np.asarray(x2, dtype=float)) / params.lengthscales
    return float(params.variance * np.exp(-0.5 * np.dot(d, d)))


def rbf_gram(X1, X2, params: KernelParams) -> np.ndarray:
    X1 = np.atleast_2d(np.asarray(X1, dtype=float)) / params.lengthscales
    X2 = np.atleast_2d(np.asarray(X2, dtype=float)) / params.lengthscales
    sq = (
        np.sum(X1**2, axis=1)[:, None]
        + np.sum(X2**2, axis=1)[None, :]
        - 2.0 * X1 @ X2.T
    )
    np.maximum(sq, 0.0, out=sq)
    return params.variance * np.exp(-0.5 * sq)


def cholesky_jitter(K: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, escalating diagonal jitter x10 from 1e-10 to 1e-4."""
    _record_factorization()
    n = K.shape[0]
    if n == 0:
        return np.zeros((0, 0))
    jitter = JITTER_START
    eye = np.eye(n)
    while jitter <= JITTER_MAX * (1 + 1e-9):
        try:
            return linalg.cholesky(K + jitter * eye, lower=True, check_finite=False)
        except linalg.LinAlgError:
            jitter *= 10.0
    if not np.all(np.isfinite(K)):
        raise SingularSystemError("gram matrix contains non-finite entries")
    cond = np.linalg.cond(K)
    raise SingularSystemError(
        f"Cholesky failed after jitter {JITTER_MAX:g}; condition estimate {cond:.3e}"
    )


def _as_inputs(X, dim=None) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1) if dim in (None, 1) else X.reshape(1, -1)
    return X


def gp_posterior(
    X,
    values,
    X_test,
    kernel: KernelParams,
    noise_var: float,
    prior_mean: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> GaussianPredictive:
    """Predictive distribution of noisy observations at ``X_test``.

    The covariance includes ``noise_var`` on the test block. With no training
    points this is the prior.
    """
    if noise_var <= 0:
        raise ValueError("noise_var must be positive")
    X_test = _as_inputs(X_test, kernel.dim)
    X = _as_inputs(X, kernel.dim).reshape(-1, X_test.shape[1])
    values = np.asarray(values, dtype=float).reshape(-1)
    m_test = prior_mean(X_test) if prior_mean is not None else np.zeros(len(X_test))
    K_ss = rbf_gram(X_test, X_test, kernel) + noise_var * np.eye(len(X_test))
    if len(X) == 0:
        return GaussianPredictive(np.asarray(m_test, dtype=float), K_ss)
    m_train = prior_mean(X) if prior_mean is not None else np.zeros(len(X))
    L = cholesky_jitter(rbf_gram(X, X, kernel) + noise_var * np.eye(len(X)))
    K_s = rbf_gram(X, X_test, kernel)
    alpha = linalg.cho_solve((L, True), values - m_train, check_finite=False)
    V = linalg.solve_triangular(L, K_s, lower=True, check_finite=False)
    mean = K_s.T @ alpha + m_test
    cov = K_ss - V.T @ V
    return GaussianPredictive(mean, 0.5 * (cov + cov.T))


def log_pdf(values, dist: GaussianPredictive) -> float:
    values = np.asarray(values, dtype=float).reshape(-1)
    if values.shape != dist.mean.shape:
        raise ValueError(f"dimension mismatch: {values.shape} vs {dist.mean.shape}")
    L = cholesky_jitter(dist.covariance)
    w = linalg.solve_triangular(L, values - dist.mean, lower=True, check_finite=False)
    m = values.size
    return float(-0.5 * m * LOG_2PI - np.sum(np.log(np.diag(L))) - 0.5 * w @ w)


def entropy(dist: GaussianPredictive) -> float:
    L = cholesky_jitter(dist.covariance)
    m = dist.mean.size
    return float(0.5 * m * (LOG_2PI + 1.0) + np.sum(np.log(np.diag(L))))


def safety_prob_nonneg(pred_mean, pred_var):
    """P(z >= 0) for z ~ N(pred_mean, pred_var)."""
    pred_var = np.asarray(pred_var, dtype=float)
    if np.any(pred_var <= 0):
        raise ValueError("pred_var must be positive")
    return 0.5 * (1.0 + special.erf(np.asarray(pred_mean, dtype=float) / np.sqrt(2.0 * pred_var)))


def safety_prob_negative(pred_mean, pred_var):
    """P(z < 0), the complement of :func:`safety_prob_nonneg`."""
    return 1.0 - safety_prob_nonneg(pred_mean, pred_var)


def predictive_entropy(pred_var):
    """Entropy of a univariate Gaussian with variance ``pred_var``."""
    return 0.5 * (LOG_2PI + 1.0 + np.log(pred_var))


# -- Type-II maximum likelihood --------------------------------------------------


def _unpack(theta: np.ndarray, dim: int):
    return np.exp(theta[0]), np.exp(theta[1 : 1 + dim]), np.exp(theta[1 + dim])


def log_marginal_likelihood(X, y, kernel: KernelParams, noise_var: float) -> float:
    X = _as_inputs(X, kernel.dim)
    y = np.asarray(y, dtype=float).reshape(-1)
    dist = GaussianPredictive(np.zeros(len(y)), rbf_gram(X, X, kernel) + noise_var * np.eye(len(y)))
    return log_pdf(y, dist)


def _neg_lml_and_grad(theta, X, y, sqdist):
    dim = X.shape[1]
    v, ls, noise = _unpack(theta, dim)
    scaled = sqdist / ls**2  # (n, n, D)
    Kf = v * np.exp(-0.5 * scaled.sum(-1))
    n = len(y)
    K = Kf + noise * np.eye(n)
    try:
        L = cholesky_jitter(K)
    except SingularSystemError:
        return np.inf, np.zeros_like(theta)
    alpha = linalg.cho_solve((L, True), y, check_finite=False)
    lml = -0.5 * y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * LOG_2PI
    Kinv = linalg.cho_solve((L, True), np.eye(n), check_finite=False)
    W = np.outer(alpha, alpha) - Kinv
    grad = np.empty_like(theta)
    grad[0] = 0.5 * np.sum(W * Kf)
    for d in range(dim):
        grad[1 + d] = 0.5 * np.sum(W * Kf * scaled[:, :, d])
    grad[1 + dim] = 0.5 * noise * np.trace(W)
    return -lml, -grad


def fit_type2_ml(
    X,
    y,
    n_restarts: int = 5,
    rng: Optional[np.random.Generator] = None,
    maxiter: int = 200,
) -> GPFit:
    """Zero-mean RBF GP hyperparameters by maximizing the log marginal likelihood.

    Optimizes (log v, log l, log noise) with bounded L-BFGS-B from ``n_restarts``
    initializations: the first is a fixed default, the rest are drawn from
    ``rng`` (seeded with 0 when omitted, so the fit is a pure function of the
    data). The returned objective is never below that of any initialization.
    """
    X = _as_inputs(X)
    y = np.asarray(y, dtype=float).reshape(-1)
    n, dim = X.shape
    if n < 2:
        raise ValueError("Type-II ML needs at least two observations")
    rng = np.random.default_rng(0) if rng is None else rng
    sqdist = (X[:, None, :] - X[None, :, :]) ** 2
    bounds = (
        [LOG_VARIANCE_BOUNDS]
        + [LOG_LENGTHSCALE_BOUNDS] * dim
        + [LOG_NOISE_BOUNDS]
    )
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])

    inits = [np.concatenate([[0.0], np.full(dim, np.log(0.3)), [np.log(1e-2)]])]
    for _ in range(n_restarts - 1):
        inits.append(
            np.concatenate(
                [
                    rng.uniform(np.log(0.1), np.log(3.0), 1),
                    rng.uniform(np.log(0.03), np.log(2.0), dim),
                    rng.uniform(np.log(1e-4), np.log(0.3), 1),
                ]
            )
        )

    best_theta, best_val = None, np.inf
    init_best_theta, init_best_val = None, np.inf
    improved = False
    restarts = []
    for theta0 in inits:
        theta0 = np.clip(theta0, lo, hi)
        f0, _ = _neg_lml_and_grad(theta0, X, y, sqdist)
        if f0 < init_best_val:
            init_best_theta, init_best_val = theta0, f0
        try:
            res = optimize.minimize(
                _neg_lml_and_grad,
                theta0,
                args=(X, y, sqdist),
                jac=True,
                method="L-BFGS-B",
                bounds=bounds,
                options={"maxiter": maxiter},
            )
            theta, val = res.x, float(res.fun)
        except (ValueError, np.linalg.LinAlgError):
            theta, val = theta0, np.inf
        restarts.append(-val)
        if np.isfinite(val) and val < f0:
            improved = True
        if val < best_val:
            best_theta, best_val = theta, val
    degraded = not improved
    if best_theta is None or init_best_val < best_val:
        best_theta, best_val = init_best_theta, init_best_val
    v, ls, noise = _unpack(best_theta, dim)
    return GPFit(KernelParams(v, ls), float(noise), float(-best_val), degraded, restarts)


class GPModel:
    """A zero-mean GP conditioned once and queried many times."""

    def __init__(self, X, y, kernel: KernelParams, noise_var: float, prior_mean=None):
        self.X = _as_inputs(X, kernel.dim)
        self.y = np.asarray(y, dtype=float).reshape(-1)
        self.kernel = kernel
        self.noise_var = float(noise_var)
        self.prior_mean = prior_mean
        m = prior_mean(self.X) if prior_mean is not None else 0.0
        self._L = cholesky_jitter(rbf_gram(self.X, self.X, kernel) + self.noise_var * np.eye(len(self.y)))
        self._alpha = linalg.cho_solve((self._L, True), self.y - m, check_finite=False)

    @classmethod
    def fit(cls, X, y, n_restarts: int = 5, rng=None) -> tuple["GPModel", GPFit]:
        result = fit_type2_ml(X, y, n_restarts=n_restarts, rng=rng)
        return cls(X, y, result.kernel, result.noise_var), result

    def predict(self, X_test, latent: bool = False):
        """Marginal mean and variance; noise-inclusive unless ``latent``."""
        X_test = _as_inputs(X_test, self.kernel.dim)
        K_s = rbf_gram(self.X, X_test, self.kernel)
        mean = K_s.T @ self._alpha
        if self.prior_mean is not None:
            mean = mean + self.prior_mean(X_test)
        V = linalg.solve_triangular(self._L, K_s, lower=True, check_finite=False)
        var = self.kernel.variance - np.sum(V**2, axis=0)
        var = np.maximum(var, 1e-12)
        if not latent:
            var = var + self.noise_var
        return mean, var
