"""Filtered tracking error and the feedback-linearizing control law."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation


def hurwitz_check(lam) -> bool:
    """True iff s^(n-1) + lam[n-2] s^(n-2) + ... + lam[0] has all roots in the open left half-plane."""
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    if lam.size == 0:
        raise ContractViolation("lambda must be non-empty")
    coeffs = np.concatenate([[1.0], lam[::-1]])
    return bool(np.all(np.roots(coeffs).real < 0))


@dataclass(frozen=True)
class ControllerConfig:
    lam: tuple
    k_c: float = 1.0
    r_min: float = 0.0

    def __post_init__(self):
        lam = tuple(float(v) for v in np.atleast_1d(self.lam))
        object.__setattr__(self, "lam", lam)
        if not self.k_c > 0:
            raise ContractViolation(f"k_c must be positive, got {self.k_c}")
        if self.r_min < 0:
            raise ContractViolation("r_min must be non-negative")
        if not hurwitz_check(lam):
            raise ContractViolation(f"lambda={list(lam)} is not Hurwitz")

    @property
    def order(self) -> int:
        return len(self.lam) + 1


@dataclass(frozen=True)
class ReferencePoint:
    """x_d and its first n-1 derivatives, plus the n-th derivative."""

    xd: np.ndarray
    xd_n: float


def _check(e, lam):
    e = np.asarray(e, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if e.shape != (lam.size + 1,):
        raise ContractViolation(f"error vector of length {e.size} does not match lambda of length {lam.size}")
    return e, lam


def filtered_state(e, lam) -> float:
    """r = [lambda^T 1] e."""
    e, lam = _check(e, lam)
    return float(lam @ e[:-1] + e[-1])


def feedforward_rho(e, ref: ReferencePoint, lam) -> float:
    """rho = lambda^T e_{2:n} - d^n x_d / dt^n, so that r' = f + g u + rho."""
    e, lam = _check(e, lam)
    return float(lam @ e[1:] - ref.xd_n)


def control(f_hat: float, g_hat: float, r: float, rho: float, k_c: float) -> float:
    if not g_hat > 0:
        raise ContractViolation(f"g_hat must be positive, got {g_hat}")
    return (-f_hat - k_c * r - rho) / g_hat
