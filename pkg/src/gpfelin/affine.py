"""Identification of x_n' = f(x) + g(x) u from closed-loop sums.

Two modes:

* unknown g: one GP over the compound kernel k_f + u k_g u', prior mean
  u * m_g(x) on the observations, split into f_hat and g_hat afterwards;
* known g: a plain GP on the residual targets y - g(x) u.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np
from scipy.linalg import solve_triangular

from . import gp
from .errors import ContractViolation
from .kernels import CompoundAffineKernel, Kernel, SumKernel, _as_2d

log = logging.getLogger(__name__)

DEFAULT_ETA = 1e-3


def constant_mean(c: float):
    """Vectorized constant function, usable as m_g."""
    c = float(c)

    def m(X, w=None):
        return np.full(_as_2d(X).shape[0], c)

    m.value = c
    return m


def sanitize_positive(y: float, eta: float) -> float:
    if not eta > 0:
        raise ContractViolation(f"eta must be positive, got {eta}")
    return max(y, eta)


@dataclass(frozen=True)
class AffineModel:
    state: gp.PosteriorState
    m_g: Optional[Callable] = None
    eta: float = DEFAULT_ETA
    g_known: Optional[Callable] = None

    @property
    def known_g(self) -> bool:
        return self.g_known is not None

    @property
    def dataset(self) -> gp.Dataset:
        return self.state.dataset

    @property
    def kernel(self) -> Kernel:
        return self.state.kernel

    def __len__(self):
        return len(self.state)

    def add(self, x, y: float, u: float) -> "AffineModel":
        """Record the measurement y of x_n' taken while control u was applied."""
        if self.known_g:
            y = y - self.g_known(np.asarray(x, dtype=float)) * u
        return replace(self, state=gp.add_point(self.state, x, y, u))

    def with_dataset(self, dataset: gp.Dataset, kernel: Optional[Kernel] = None) -> "AffineModel":
        """Refit on ``dataset`` (targets in stored form) with an optional new kernel."""
        kernel = self.kernel if kernel is None else kernel
        return replace(self, state=gp.fit(dataset, kernel, self.state.prior_mean))

    def remove(self, index: int) -> "AffineModel":
        return replace(self, state=gp.remove_point(self.state, index))


def unknown_g_model(kf: Kernel, kg: Kernel, m_g: Callable, noise_variance: float, dim: int,
                    eta: float = DEFAULT_ETA) -> AffineModel:
    """Empty model with f_hat = 0 and g_hat = m_g."""
    def prior(X, w):
        return np.asarray(w, dtype=float) * m_g(X)

    kernel = CompoundAffineKernel(kf, kg)
    state = gp.fit(gp.Dataset.empty(dim, noise_variance), kernel, prior)
    return AffineModel(state, m_g=m_g, eta=eta)


def known_g_model(kf: Kernel, g: Callable, noise_variance: float, dim: int) -> AffineModel:
    """Empty residual model for a plant whose g is known exactly."""
    state = gp.fit(gp.Dataset.empty(dim, noise_variance), kf, gp.zero_mean)
    return AffineModel(state, g_known=g)


def _predict_fg_raw(model: AffineModel, X) -> tuple[np.ndarray, np.ndarray]:
    X = _as_2d(X)
    kern = model.kernel
    mg = model.m_g(X)
    if len(model) == 0:
        return np.zeros(X.shape[0]), mg
    st = model.state
    Xd, U = st.dataset.inputs, st.dataset.controls
    f_hat = kern.kf(Xd, X).T @ st.alpha
    g_hat = mg + kern.kg(Xd, X).T @ (U * st.alpha)
    return f_hat, g_hat


def predict_fg(model: AffineModel, x) -> tuple[float, float]:
    """Joint estimates (f_hat, g_hat) at ``x``; g_hat is floored at eta."""
    if model.known_g:
        raise ContractViolation("predict_fg requires an unknown-g model")
    f, g = _predict_fg_raw(model, x)
    f, g = float(f[0]), float(g[0])
    if g <= model.eta:
        log.warning("g_hat=%.3e fell below eta=%.1e at x=%s; flooring", g, model.eta, x)
    return f, sanitize_positive(g, model.eta)


def predict_fg_grid(model: AffineModel, X) -> tuple[np.ndarray, np.ndarray]:
    """Unfloored (f_hat, g_hat) on each row of ``X``."""
    if model.known_g:
        raise ContractViolation("predict_fg_grid requires an unknown-g model")
    return _predict_fg_raw(model, X)


def predict_f_known_g(model: AffineModel, x) -> float:
    if not model.known_g:
        raise ContractViolation("predict_f_known_g requires a known-g model")
    return gp.posterior(model.state, x)[0]


def estimates(model: AffineModel, x) -> tuple[float, float]:
    """(f_hat, g_hat) in either mode."""
    if model.known_g:
        return predict_f_known_g(model, x), float(model.g_known(np.asarray(x, dtype=float)))
    return predict_fg(model, x)


def predict_fg_variance(model: AffineModel, x, u_hypothetical: Optional[float] = None) -> float:
    """Posterior variance used by the triggers.

    Known g: variance of the residual GP. Unknown g: variance of the f part,
    or of f + g u when ``u_hypothetical`` is given.
    """
    if model.known_g:
        return gp.posterior(model.state, x)[1]
    if u_hypothetical is not None:
        return gp.posterior(model.state, x, u_hypothetical)[1]
    X = _as_2d(x)
    kf = model.kernel.kf
    kss = float(kf.diag(X)[0])
    if len(model) == 0:
        return kss
    k = kf(model.dataset.inputs, X)[:, 0]
    v = solve_triangular(model.state.L, k, lower=True, check_finite=False)
    return max(kss - float(v @ v), 0.0)


def decompose_sum(state: gp.PosteriorState, x, w=None) -> tuple[float, float, float, float]:
    """Posterior (mean, variance) of each summand of a sum kernel at ``x``.

    The component means exclude the prior mean, so with a zero prior they add
    up to the joint posterior mean. A compound kernel is decomposed as
    k_f + Scaled(k_g); pass the test control as ``w``.
    """
    kern = state.kernel
    if isinstance(kern, CompoundAffineKernel):
        kern = kern.as_sum()
    if not isinstance(kern, SumKernel):
        raise ContractViolation(f"decompose_sum needs a sum kernel, got {type(kern).__name__}")
    X = _as_2d(x)
    wv = None if w is None else np.array([float(w)])
    out = []
    for part in (kern.a, kern.b):
        kss = float(part.diag(X, wv)[0])
        if len(state) == 0:
            out += [0.0, kss]
            continue
        k = part(state.dataset.inputs, X, state.weights, wv)[:, 0]
        v = solve_triangular(state.L, k, lower=True, check_finite=False)
        out += [float(k @ state.alpha), max(kss - float(v @ v), 0.0)]
    return tuple(out)


@dataclass(frozen=True)
class OpenLoopBatch:
    """Direct observations of f taken with the control switched off."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.inputs, dtype=float)
        X = X.reshape(-1, X.shape[-1]) if X.size else X.reshape(0, 0)
        y = np.asarray(self.targets, dtype=float).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise ContractViolation("open-loop batch inputs and targets differ in length")
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "targets", y)

    @property
    def controls(self) -> np.ndarray:
        return np.zeros(len(self.targets))

    def __len__(self):
        return len(self.targets)


def augment_open_loop(model: AffineModel, batch: OpenLoopBatch) -> AffineModel:
    """Fuse open-loop f observations into an unknown-g model.

    An open-loop point is a compound-kernel observation with u = 0, so it has
    zero covariance with g and enters through k_f alone.
    """
    if model.known_g:
        raise ContractViolation("open-loop fusion applies to the unknown-g model")
    for x, y in zip(batch.inputs, batch.targets):
        model = replace(model, state=gp.add_point(model.state, x, y, 0.0))
    return model
