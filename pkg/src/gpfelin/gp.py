"""Exact GP regression with a factorized posterior and O(N^2) data updates.

Prior mean functions are vectorized: ``prior_mean(X, w)`` receives the
row-stacked inputs and the per-point weights (controls, or ``None``) and
returns one value per row. ``None`` stands for the zero mean.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import optimize
from scipy.linalg import cho_solve, solve_triangular

from .errors import ContractViolation, NumericalDegeneracy
from .kernels import Kernel, _as_2d

log = logging.getLogger(__name__)

MeanFn = Callable[[np.ndarray, Optional[np.ndarray]], np.ndarray]

# relative to the kernel's prior variance; tried in order until Cholesky succeeds
JITTER_SCHEDULE = tuple(10.0 ** p for p in range(-14, -5))
NEGATIVE_VARIANCE_TOL = 1e-10


def zero_mean(X, w=None):
    return np.zeros(_as_2d(X).shape[0])


@dataclass(frozen=True)
class Dataset:
    """Training inputs, scalar targets, the control active at each sample and
    the (shared) observation noise variance."""

    inputs: np.ndarray
    targets: np.ndarray
    controls: np.ndarray
    noise_variance: float = 0.0

    def __post_init__(self):
        X = np.asarray(self.inputs, dtype=float)
        if X.ndim == 1:
            X = X.reshape(0, 0) if X.size == 0 else X[None, :]
        y = np.asarray(self.targets, dtype=float).reshape(-1)
        u = np.asarray(self.controls, dtype=float).reshape(-1)
        if not (X.shape[0] == y.shape[0] == u.shape[0]):
            raise ContractViolation(
                f"inconsistent dataset sizes: {X.shape[0]} inputs, {y.shape[0]} targets, "
                f"{u.shape[0]} controls")
        if not np.all(np.isfinite(y)):
            raise ContractViolation("targets must be finite")
        if not self.noise_variance >= 0:
            raise ContractViolation("noise_variance must be non-negative")
        for name, v in (("inputs", X), ("targets", y), ("controls", u)):
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    @classmethod
    def empty(cls, dim: int, noise_variance: float = 0.0) -> "Dataset":
        return cls(np.zeros((0, dim)), np.zeros(0), np.zeros(0), noise_variance)

    @classmethod
    def from_points(cls, inputs, targets, controls=None, noise_variance=0.0) -> "Dataset":
        X = _as_2d(inputs)
        if controls is None:
            controls = np.zeros(X.shape[0])
        return cls(X, targets, controls, noise_variance)

    def __len__(self):
        return self.targets.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def append(self, x, y, u=0.0) -> "Dataset":
        x = np.asarray(x, dtype=float).reshape(1, -1)
        X = x if len(self) == 0 else np.vstack([self.inputs, x])
        return Dataset(X, np.append(self.targets, y), np.append(self.controls, u),
                       self.noise_variance)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.inputs[idx].reshape(len(idx), self.dim), self.targets[idx],
                       self.controls[idx], self.noise_variance)

    def drop(self, index: int) -> "Dataset":
        keep = np.delete(np.arange(len(self)), index)
        return self.subset(keep)


@dataclass(frozen=True)
class PosteriorState:
    """Immutable posterior snapshot: ``L L^T = K + (noise + jitter) I`` and
    ``alpha = (L L^T)^{-1} (y - m)``."""

    dataset: Dataset
    kernel: Kernel
    prior_mean: MeanFn
    L: np.ndarray
    alpha: np.ndarray
    jitter: float

    def __len__(self):
        return len(self.dataset)

    @property
    def weights(self):
        return self.dataset.controls if self.kernel.needs_weights else None

    @property
    def diag_shift(self) -> float:
        return self.dataset.noise_variance + self.jitter


def _check_duplicates(dataset: Dataset):
    if dataset.noise_variance > 0 or len(dataset) < 2:
        return
    rows = np.column_stack([dataset.inputs, dataset.controls])
    if np.unique(rows, axis=0).shape[0] < rows.shape[0]:
        raise NumericalDegeneracy("duplicate inputs with zero noise make the Gram matrix singular")


def _factorize(K: np.ndarray, noise: float, scale: float, jitter: Optional[float] = None):
    n = K.shape[0]
    scale = scale if scale > 0 else 1.0
    candidates = (jitter,) if jitter is not None else tuple(r * scale for r in JITTER_SCHEDULE)
    for j in candidates:
        try:
            return np.linalg.cholesky(K + (noise + j) * np.eye(n)), j
        except np.linalg.LinAlgError:
            continue
    raise NumericalDegeneracy(
        f"Gram matrix of size {n} not positive definite even with jitter {candidates[-1]:.1e}")


def fit(dataset: Dataset, kernel: Kernel, prior_mean: Optional[MeanFn] = None,
        jitter: Optional[float] = None) -> PosteriorState:
    """Condition the GP prior on ``dataset``. An empty dataset gives the prior."""
    prior_mean = prior_mean or zero_mean
    N = len(dataset)
    if N == 0:
        return PosteriorState(dataset, kernel, prior_mean, np.zeros((0, 0)), np.zeros(0),
                              0.0 if jitter is None else jitter)
    _check_duplicates(dataset)
    w = dataset.controls if kernel.needs_weights else None
    K = kernel(dataset.inputs, None, w, w)
    K = 0.5 * (K + K.T)
    L, j = _factorize(K, dataset.noise_variance, kernel.scale, jitter)
    resid = dataset.targets - prior_mean(dataset.inputs, w)
    alpha = cho_solve((L, True), resid, check_finite=False)
    return PosteriorState(dataset, kernel, prior_mean, L, alpha, j)


def _cross(state: PosteriorState, Xs: np.ndarray, us):
    if state.kernel.needs_weights and us is None:
        raise ContractViolation("a control value is required for this kernel")
    return state.kernel(state.dataset.inputs, Xs, state.weights, us)


def predict(state: PosteriorState, Xs, us=None, full_cov: bool = False):
    """Posterior means and variances at each row of ``Xs``."""
    Xs = _as_2d(Xs)
    if Xs.shape[1] != state.dataset.dim and len(state) > 0:
        raise ContractViolation("test input dimension does not match the data")
    if us is not None:
        us = np.broadcast_to(np.asarray(us, dtype=float), (Xs.shape[0],))
    if state.kernel.needs_weights and us is None:
        raise ContractViolation("a control value is required for this kernel")
    mean = np.asarray(state.prior_mean(Xs, us), dtype=float).reshape(-1)
    kss = state.kernel.diag(Xs, us)
    if len(state) == 0:
        return mean, kss.copy()
    Ks = _cross(state, Xs, us)
    mean = mean + Ks.T @ state.alpha
    V = solve_triangular(state.L, Ks, lower=True, check_finite=False)
    var = kss - np.einsum("ij,ij->j", V, V)
    if np.any(var < -NEGATIVE_VARIANCE_TOL * max(1.0, state.kernel.scale)):
        raise NumericalDegeneracy(f"negative posterior variance {var.min():.3e}")
    return mean, np.maximum(var, 0.0)


def posterior(state: PosteriorState, x_star, u_star=None) -> tuple[float, float]:
    """Posterior mean and variance at a single input."""
    us = None if u_star is None else np.array([float(u_star)])
    m, v = predict(state, np.asarray(x_star, dtype=float).reshape(1, -1), us)
    return float(m[0]), float(v[0])


def log_marginal_likelihood(dataset: Dataset, kernel: Kernel,
                            prior_mean: Optional[MeanFn] = None) -> float:
    """log N(y | m, K + noise I)."""
    return log_marginal_likelihood_and_grad(dataset, kernel, prior_mean, grad=False)[0]


def log_marginal_likelihood_and_grad(dataset: Dataset, kernel: Kernel,
                                     prior_mean: Optional[MeanFn] = None, grad: bool = True):
    """Log marginal likelihood and its gradient w.r.t. ``kernel.theta``."""
    if len(dataset) == 0:
        raise ContractViolation("likelihood needs a non-empty dataset")
    st = fit(dataset, kernel, prior_mean)
    resid = dataset.targets - st.prior_mean(dataset.inputs, st.weights)
    N = len(dataset)
    val = (-0.5 * resid @ st.alpha - np.sum(np.log(np.diag(st.L)))
           - 0.5 * N * np.log(2 * np.pi))
    if not grad:
        return float(val), None
    Ainv = cho_solve((st.L, True), np.eye(N), check_finite=False)
    Q = np.outer(st.alpha, st.alpha) - Ainv
    g = np.array([0.5 * np.sum(Q * dK) for dK in kernel.gram_grad(dataset.inputs, st.weights)])
    return float(val), g


@dataclass
class RestartTrace:
    init_theta: np.ndarray
    values: list = field(default_factory=list)
    thetas: list = field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self) -> int:
        return max(len(self.values) - 1, 0)


@dataclass
class HyperOptReport:
    kernel: Kernel
    theta: np.ndarray
    log_likelihood: float
    restarts: list
    converged: bool

    @property
    def winner(self) -> RestartTrace:
        return max(self.restarts, key=lambda r: max(r.values, default=-np.inf))


DEFAULT_LOG_BOUNDS = (np.log(1e-3), np.log(1e3))


def optimize_hyperparameters(dataset: Dataset, kernel: Kernel, prior_mean: Optional[MeanFn] = None,
                             init=None, n_restarts: int = 3, seed=0, max_iter: int = 200,
                             gtol: float = 1e-6, bounds=DEFAULT_LOG_BOUNDS,
                             restart_scale: float = 1.0) -> HyperOptReport:
    """Maximize the log marginal likelihood over the log-hyperparameters.

    Restart 0 starts at ``init`` (defaults to ``kernel.theta``); the others
    start at Gaussian perturbations of it in log space. Non-finite entries of
    the start vector (e.g. infinite lengthscales) are held fixed. Never
    raises on optimizer failure: the best iterate seen is returned with
    ``converged=False``.
    """
    if len(dataset) == 0:
        raise ContractViolation("cannot optimize hyperparameters on an empty dataset")
    if n_restarts < 1:
        raise ContractViolation("n_restarts must be >= 1")
    theta0 = np.asarray(kernel.theta if init is None else init, dtype=float)
    free = np.isfinite(theta0)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    lo, hi = bounds

    def full(z):
        th = theta0.copy()
        th[free] = z
        return th

    def objective(z):
        try:
            val, g = log_marginal_likelihood_and_grad(dataset, kernel.with_theta(full(z)), prior_mean)
        except NumericalDegeneracy:
            return 1e25, np.zeros_like(z)
        return -val, -g[free]

    restarts = []
    for k in range(n_restarts):
        z0 = theta0[free].copy()
        if k > 0:
            z0 = z0 + restart_scale * rng.standard_normal(z0.shape)
        z0 = np.clip(z0, lo, hi)
        tr = RestartTrace(full(z0))
        f0, _ = objective(z0)
        if f0 >= 1e25:
            restarts.append(tr)
            continue
        tr.values.append(-f0)
        tr.thetas.append(full(z0))

        def record(zk, tr=tr):
            fk, _ = objective(zk)
            tr.values.append(-fk)
            tr.thetas.append(full(zk))

        try:
            res = optimize.minimize(objective, z0, jac=True, method="L-BFGS-B",
                                    bounds=[(lo, hi)] * len(z0), callback=record,
                                    options={"maxiter": max_iter, "gtol": gtol})
            tr.converged = bool(res.success)
        except (ValueError, FloatingPointError) as exc:
            log.warning("restart %d failed: %s", k, exc)
        restarts.append(tr)

    best_val, best_theta = -np.inf, theta0
    for tr in restarts:
        for v, th in zip(tr.values, tr.thetas):
            if v > best_val:
                best_val, best_theta = v, th
    converged = any(tr.converged for tr in restarts if tr.values)
    if not np.isfinite(best_val):
        log.warning("hyperparameter optimization failed on every restart; keeping init")
    return HyperOptReport(kernel.with_theta(best_theta), best_theta, float(best_val), restarts,
                          converged)


def _cholupdate(L: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Lower factor of L L^T + v v^T, O(n^2)."""
    L = L.copy()
    v = v.copy()
    n = L.shape[0]
    for k in range(n):
        lkk = L[k, k]
        r = np.hypot(lkk, v[k])
        c, s = r / lkk, v[k] / lkk
        L[k, k] = r
        if k + 1 < n:
            L[k + 1:, k] = (L[k + 1:, k] + s * v[k + 1:]) / c
            v[k + 1:] = c * v[k + 1:] - s * L[k + 1:, k]
    return L


def add_point(state: PosteriorState, x, y: float, u: float = 0.0) -> PosteriorState:
    """Posterior after appending one observation; extends the Cholesky factor by one row."""
    ds = state.dataset.append(x, y, u)
    if len(state) == 0:
        return fit(ds, state.kernel, state.prior_mean)
    x = np.asarray(x, dtype=float).reshape(1, -1)
    w = np.array([float(u)]) if state.kernel.needs_weights else None
    if state.dataset.noise_variance == 0:
        same = np.all(state.dataset.inputs == x, axis=1)
        if w is not None:
            same &= state.dataset.controls == w[0]
        if np.any(same):
            raise NumericalDegeneracy("duplicate input with zero noise")
    k = state.kernel(state.dataset.inputs, x, state.weights, w)[:, 0]
    kss = state.kernel.diag(x, w)[0] + state.diag_shift
    l = solve_triangular(state.L, k, lower=True, check_finite=False)
    d2 = kss - l @ l
    if not d2 > 0.5 * state.diag_shift:
        # lost positive definiteness in finite precision; refactor with escalation
        return fit(ds, state.kernel, state.prior_mean)
    N = len(state)
    L = np.zeros((N + 1, N + 1))
    L[:N, :N] = state.L
    L[N, :N] = l
    L[N, N] = np.sqrt(d2)
    resid = ds.targets - state.prior_mean(ds.inputs, ds.controls if w is not None else None)
    alpha = cho_solve((L, True), resid, check_finite=False)
    return PosteriorState(ds, state.kernel, state.prior_mean, L, alpha, state.jitter)


def remove_point(state: PosteriorState, index: int) -> PosteriorState:
    """Posterior after deleting observation ``index``; Cholesky downdate in O(N^2)."""
    N = len(state)
    if not 0 <= index < N:
        raise ContractViolation(f"index {index} out of range for dataset of size {N}")
    ds = state.dataset.drop(index)
    if N == 1:
        return fit(ds, state.kernel, state.prior_mean)
    L = state.L
    i = index
    Lnew = np.zeros((N - 1, N - 1))
    Lnew[:i, :i] = L[:i, :i]
    Lnew[i:, :i] = L[i + 1:, :i]
    if i + 1 < N:
        Lnew[i:, i:] = _cholupdate(L[i + 1:, i + 1:], L[i + 1:, i])
    w = ds.controls if state.kernel.needs_weights else None
    resid = ds.targets - state.prior_mean(ds.inputs, w)
    alpha = cho_solve((Lnew, True), resid, check_finite=False)
    return PosteriorState(ds, state.kernel, state.prior_mean, Lnew, alpha, state.jitter)
