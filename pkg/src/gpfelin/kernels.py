"""Covariance functions and kernel algebra.

Every kernel is an immutable object evaluated on row-stacked inputs
``X1`` (N x n) and ``X2`` (M x n). Kernels built from a known per-point
scaling (products with a known function, the control-affine compound
kernel) take the per-point values as ``w1``/``w2`` at call time; the values
live with the dataset, not inside the kernel.

Hyperparameters are exposed in log space through ``theta`` / ``with_theta``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractViolation


def _as_2d(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    return X


@dataclass(frozen=True)
class SEHyperparams:
    """Lengthscales (one per input dimension) and signal variance of an SE kernel.

    A lengthscale of ``np.inf`` switches the corresponding input off.
    """

    lengthscales: tuple
    signal_variance: float

    def __post_init__(self):
        ls = tuple(float(v) for v in np.atleast_1d(self.lengthscales))
        if not all(v > 0 for v in ls):
            raise ContractViolation(f"lengthscales must be positive, got {ls}")
        if not self.signal_variance >= 0:
            raise ContractViolation(
                f"signal_variance must be non-negative, got {self.signal_variance}")
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "signal_variance", float(self.signal_variance))

    @property
    def dim(self) -> int:
        return len(self.lengthscales)


def se_eval(h: SEHyperparams, x, x_prime) -> float:
    """Squared-exponential ARD covariance between two state vectors."""
    x = np.asarray(x, dtype=float)
    x_prime = np.asarray(x_prime, dtype=float)
    if x.shape != (h.dim,) or x_prime.shape != (h.dim,):
        raise ContractViolation(
            f"expected vectors of length {h.dim}, got {x.shape} and {x_prime.shape}")
    ls = np.asarray(h.lengthscales)
    q = np.sum(((x - x_prime) / ls) ** 2)
    return h.signal_variance * float(np.exp(-0.5 * q))


def se_grad(h: SEHyperparams, x, x_prime) -> np.ndarray:
    """Partials of :func:`se_eval` w.r.t. ``[log l_1, ..., log l_n, log sf2]``."""
    k = se_eval(h, x, x_prime)
    ls = np.asarray(h.lengthscales)
    d2 = ((np.asarray(x, float) - np.asarray(x_prime, float)) / ls) ** 2
    return np.append(k * d2, k)


def compound_eval(kf: "Kernel", kg: "Kernel", u_x: float, u_xp: float, x, x_prime) -> float:
    """k_f(x, x') + u_x k_g(x, x') u_x'."""
    X1, X2 = _as_2d(x), _as_2d(x_prime)
    return float(kf(X1, X2)[0, 0] + u_x * kg(X1, X2)[0, 0] * u_xp)


class Kernel:
    """Base class. Subclasses implement ``__call__``, ``diag``, ``theta``,
    ``with_theta`` and ``gram_grad``."""

    needs_weights = False

    def __call__(self, X1, X2=None, w1=None, w2=None) -> np.ndarray:
        raise NotImplementedError

    def diag(self, X, w=None) -> np.ndarray:
        raise NotImplementedError

    @property
    def theta(self) -> np.ndarray:
        raise NotImplementedError

    def with_theta(self, theta) -> "Kernel":
        raise NotImplementedError

    def gram_grad(self, X, w=None) -> list[np.ndarray]:
        """dK/dtheta_p for the Gram matrix on ``X``, one matrix per entry of theta."""
        raise NotImplementedError

    @property
    def scale(self) -> float:
        """Typical prior variance, used to size diagonal jitter."""
        raise NotImplementedError

    def __add__(self, other: "Kernel") -> "SumKernel":
        return SumKernel(self, other)


@dataclass(frozen=True)
class SEKernel(Kernel):
    hyp: SEHyperparams

    @classmethod
    def create(cls, lengthscales, signal_variance) -> "SEKernel":
        return cls(SEHyperparams(tuple(np.atleast_1d(lengthscales)), signal_variance))

    def _scaled_sqdist(self, X1, X2):
        ls = np.asarray(self.hyp.lengthscales)
        A = X1 / ls
        B = X2 / ls
        d = A[:, None, :] - B[None, :, :]
        return d * d

    def __call__(self, X1, X2=None, w1=None, w2=None) -> np.ndarray:
        X1 = _as_2d(X1)
        X2 = X1 if X2 is None else _as_2d(X2)
        if X1.shape[1] != self.hyp.dim or X2.shape[1] != self.hyp.dim:
            raise ContractViolation(
                f"input dimension mismatch: kernel has {self.hyp.dim}, "
                f"inputs have {X1.shape[1]} and {X2.shape[1]}")
        q = self._scaled_sqdist(X1, X2).sum(axis=-1)
        return self.hyp.signal_variance * np.exp(-0.5 * q)

    def diag(self, X, w=None) -> np.ndarray:
        return np.full(_as_2d(X).shape[0], self.hyp.signal_variance)

    @property
    def theta(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(np.append(self.hyp.lengthscales, self.hyp.signal_variance))

    def with_theta(self, theta) -> "SEKernel":
        p = np.exp(np.asarray(theta, dtype=float))
        return SEKernel(SEHyperparams(tuple(p[:-1]), p[-1]))

    def gram_grad(self, X, w=None) -> list[np.ndarray]:
        X = _as_2d(X)
        d2 = self._scaled_sqdist(X, X)
        K = self.hyp.signal_variance * np.exp(-0.5 * d2.sum(axis=-1))
        return [K * d2[..., j] for j in range(self.hyp.dim)] + [K]

    @property
    def scale(self) -> float:
        return self.hyp.signal_variance


@dataclass(frozen=True)
class SumKernel(Kernel):
    """k_a + k_b. Per-point weights are forwarded to both summands."""

    a: Kernel
    b: Kernel

    @property
    def needs_weights(self):
        return self.a.needs_weights or self.b.needs_weights

    def __call__(self, X1, X2=None, w1=None, w2=None):
        return self.a(X1, X2, w1, w2) + self.b(X1, X2, w1, w2)

    def diag(self, X, w=None):
        return self.a.diag(X, w) + self.b.diag(X, w)

    @property
    def theta(self):
        return np.concatenate([self.a.theta, self.b.theta])

    def with_theta(self, theta):
        na = len(self.a.theta)
        return SumKernel(self.a.with_theta(theta[:na]), self.b.with_theta(theta[na:]))

    def gram_grad(self, X, w=None):
        return self.a.gram_grad(X, w) + self.b.gram_grad(X, w)

    @property
    def scale(self):
        return self.a.scale + self.b.scale


@dataclass(frozen=True)
class ScaledKernel(Kernel):
    """h(x) k(x, x') h(x') for a known function h.

    The per-point values of h are either computed from ``h`` or passed
    explicitly as weights (which take precedence).
    """

    base: Kernel
    h: Optional[Callable[[np.ndarray], np.ndarray]] = None

    needs_weights = True

    def _w(self, X, w):
        if w is not None:
            return np.asarray(w, dtype=float).reshape(-1)
        if self.h is None:
            raise ContractViolation("ScaledKernel needs per-point weights or a known function h")
        return np.asarray(self.h(_as_2d(X)), dtype=float).reshape(-1)

    def __call__(self, X1, X2=None, w1=None, w2=None):
        if X2 is None:
            X2, w2 = X1, w1
        s1, s2 = self._w(X1, w1), self._w(X2, w2)
        return s1[:, None] * self.base(X1, X2) * s2[None, :]

    def diag(self, X, w=None):
        s = self._w(X, w)
        return s * s * self.base.diag(X)

    @property
    def theta(self):
        return self.base.theta

    def with_theta(self, theta):
        return ScaledKernel(self.base.with_theta(theta), self.h)

    def gram_grad(self, X, w=None):
        s = self._w(X, w)
        S = s[:, None] * s[None, :]
        return [S * G for G in self.base.gram_grad(X)]

    @property
    def scale(self):
        return self.base.scale


@dataclass(frozen=True)
class CompoundAffineKernel(Kernel):
    """k_f(x, x') + u k_g(x, x') u' -- the kernel of y = f(x) + g(x) u.

    ``w1``/``w2`` carry the control value recorded with each input.
    """

    kf: Kernel
    kg: Kernel

    needs_weights = True

    @staticmethod
    def _u(w, n):
        if w is None:
            raise ContractViolation("compound kernel requires one control value per input")
        u = np.asarray(w, dtype=float).reshape(-1)
        if u.shape[0] != n:
            raise ContractViolation(f"got {u.shape[0]} control values for {n} inputs")
        return u

    def __call__(self, X1, X2=None, w1=None, w2=None):
        X1 = _as_2d(X1)
        if X2 is None:
            X2, w2 = X1, w1
        X2 = _as_2d(X2)
        u1, u2 = self._u(w1, X1.shape[0]), self._u(w2, X2.shape[0])
        return self.kf(X1, X2) + u1[:, None] * self.kg(X1, X2) * u2[None, :]

    def diag(self, X, w=None):
        X = _as_2d(X)
        u = self._u(w, X.shape[0])
        return self.kf.diag(X) + u * u * self.kg.diag(X)

    @property
    def theta(self):
        return np.concatenate([self.kf.theta, self.kg.theta])

    def with_theta(self, theta):
        nf = len(self.kf.theta)
        return CompoundAffineKernel(self.kf.with_theta(theta[:nf]), self.kg.with_theta(theta[nf:]))

    def gram_grad(self, X, w=None):
        X = _as_2d(X)
        u = self._u(w, X.shape[0])
        U = u[:, None] * u[None, :]
        return self.kf.gram_grad(X) + [U * G for G in self.kg.gram_grad(X)]

    @property
    def scale(self):
        return self.kf.scale

    def as_sum(self) -> SumKernel:
        """The same covariance written as Sum(k_f, Scaled(k_g)) for decomposition."""
        return SumKernel(self.kf, ScaledKernel(self.kg))


def gram(kernel: Kernel, inputs: Sequence, weights=None) -> np.ndarray:
    """Symmetric Gram matrix of ``kernel`` on ``inputs``."""
    X = _as_2d(inputs)
    if X.shape[0] == 0:
        raise ContractViolation("gram needs at least one input")
    if weights is not None and len(np.atleast_1d(weights)) != X.shape[0]:
        raise ContractViolation("weights length does not match inputs")
    K = kernel(X, None, weights, weights)
    return 0.5 * (K + K.T)
