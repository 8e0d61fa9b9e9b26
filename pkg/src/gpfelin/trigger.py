"""Event-triggering laws, bound radii, inter-event times and forgetting."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import cho_solve

from . import gp
from .affine import AffineModel, predict_fg_variance
from .errors import ContractViolation

log = logging.getLogger(__name__)

KINDS = ("variance", "error", "noisy", "time")


@dataclass(frozen=True)
class TriggerConfig:
    beta: float
    delta: Optional[float] = None
    noise_std: float = 0.0
    budget: Optional[int] = None
    lipschitz_sigma: Optional[float] = None
    r_min: float = 0.0

    def __post_init__(self):
        if not self.beta > 0:
            raise ContractViolation("beta must be positive")
        if self.delta is not None and not 0 < self.delta < 1:
            raise ContractViolation("delta must lie in (0, 1)")
        if self.noise_std < 0 or self.r_min < 0:
            raise ContractViolation("noise_std and r_min must be non-negative")
        if self.budget is not None and self.budget < 1:
            raise ContractViolation("budget must be >= 1")


@dataclass
class EventLog:
    times: list = field(default_factory=list)
    kinds: list = field(default_factory=list)
    sizes: list = field(default_factory=list)

    def record(self, t: float, kind: str, size: int):
        if kind not in KINDS:
            raise ContractViolation(f"unknown trigger kind {kind!r}")
        if self.times and not t > self.times[-1]:
            raise ContractViolation(f"event time {t} does not follow {self.times[-1]}")
        self.times.append(float(t))
        self.kinds.append(kind)
        self.sizes.append(int(size))

    def __len__(self):
        return len(self.times)

    def gaps(self) -> np.ndarray:
        return np.diff(np.asarray(self.times))


def _threshold(r, k_c, r_min):
    return k_c * max(abs(r), r_min)


def variance_trigger(sigma, beta, r, k_c, r_min=0.0) -> bool:
    """beta sigma >= k_c max(|r|, r_min); sigma is a posterior standard deviation."""
    return beta * sigma >= _threshold(r, k_c, r_min)


def error_trigger(delta_f, r, k_c, r_min=0.0) -> bool:
    """|f - f_hat| >= k_c max(|r|, r_min), for a continuously measured model error."""
    return delta_f >= _threshold(r, k_c, r_min)


def _bracket_norm(k_c, lam):
    return k_c * np.linalg.norm(np.append(np.atleast_1d(np.asarray(lam, float)), 1.0))


def noise_ball_radius(noise_std, beta, k_c, lam) -> float:
    """Radius of the error ball inside which noisy measurements cannot help."""
    return noise_std * beta / _bracket_norm(k_c, lam)


def ultimate_bound_radius(beta, sigma_bar, k_c, lam) -> float:
    return beta * sigma_bar / _bracket_norm(k_c, lam)


def noisy_trigger(sigma, beta, r, k_c, e, lam, noise_std, r_min=0.0) -> bool:
    """Variance trigger, disabled while the error lies inside the noise ball."""
    rad = noise_ball_radius(noise_std, beta, k_c, lam)
    # a zero radius means no dead band at all, including at e = 0
    outside = rad == 0 or np.linalg.norm(e) > rad
    return bool(outside and variance_trigger(sigma, beta, r, k_c, r_min))


def _phi_rate(beta, L, k_c):
    return lambda t, phi: beta * phi * phi + phi * (L * beta + k_c) + L * k_c


def inter_event_lower_bound(beta, lipschitz_sigma, k_c, phi0=0.0, rtol=1e-11) -> float:
    """Time for phi' = beta phi^2 + phi (L beta + k_c) + L k_c to climb from phi0 to k_c/beta."""
    if not (beta > 0 and lipschitz_sigma > 0 and k_c > 0):
        raise ContractViolation("beta, lipschitz_sigma and k_c must be positive")
    target = k_c / beta
    if not 0 <= phi0 < target:
        raise ContractViolation(f"phi0={phi0} must lie in [0, k_c/beta={target})")
    rate = _phi_rate(beta, lipschitz_sigma, k_c)

    def hit(t, phi):
        return phi[0] - target
    hit.terminal = True
    hit.direction = 1

    # phi' >= L k_c > 0, so the target is reached before this horizon
    horizon = (target - phi0) / (lipschitz_sigma * k_c) * 1.01 + 1e-12
    sol = solve_ivp(rate, (0.0, horizon), [phi0], method="DOP853", events=hit,
                    rtol=rtol, atol=1e-14 * max(target, 1.0))
    if not sol.t_events[0].size:
        raise RuntimeError("phi never reached k_c/beta; integration failed")
    return float(sol.t_events[0][0])


def inter_event_lower_bound_closed_form(beta, lipschitz_sigma, k_c, phi0=0.0) -> float:
    """Closed form for the degenerate case L beta = k_c, where phi' = beta (phi + L)^2."""
    L = lipschitz_sigma
    if not np.isclose(L * beta, k_c, rtol=1e-12, atol=0.0):
        raise ContractViolation("closed form only applies when lipschitz_sigma * beta == k_c")
    return (1.0 / (phi0 + L) - 1.0 / (k_c / beta + L)) / beta


def forget_all(dataset: gp.Dataset, newest=None) -> gp.Dataset:
    """Keep only the newest point: ``newest`` as (x, y, u), else the last row."""
    if newest is None:
        return dataset.subset([len(dataset) - 1])
    x, y, u = newest
    return gp.Dataset.empty(np.size(x), dataset.noise_variance).append(x, y, u)


@dataclass
class BudgetResult:
    model: AffineModel
    removed: list
    fallback: bool
    sigma_after: float
    condition_ok: bool


# variances within this fraction of the threshold variance (k_c r / beta)^2 count as ties
TIE_FRAC = 1e-2


def forget_to_budget(model: AffineModel, budget: int, current_x, r, k_c, beta, r_min=0.0,
                     newest_index: Optional[int] = None) -> BudgetResult:
    """Greedy backward elimination down to ``budget`` points.

    Each round removes the point whose deletion raises the variance at
    ``current_x`` the least; ties go to the point best explained by the rest
    (smallest leave-one-out variance). The newest point is never removed. If
    the trigger condition beta sigma < k_c max(|r|, r_min) cannot be kept,
    the dataset collapses to the newest point alone.
    """
    if budget < 1:
        raise ContractViolation("budget must be >= 1")
    N = len(model)
    newest = N - 1 if newest_index is None else newest_index
    thresh = _threshold(r, k_c, r_min)

    def sigma_at(m):
        return np.sqrt(predict_fg_variance(m, current_x))

    if N <= budget:
        s = sigma_at(model)
        return BudgetResult(model, [], False, s, beta * s < thresh)

    ids = list(range(N))  # original indices still present
    removed = []
    cur = model
    tie_tol = TIE_FRAC * (thresh / beta) ** 2
    while len(ids) > budget:
        cand = [j for j in range(len(ids)) if ids[j] != newest]
        trials = [(cur.remove(j), j) for j in cand]
        var = np.array([predict_fg_variance(m, current_x) for m, _ in trials])
        tied = np.flatnonzero(var <= var.min() + tie_tol)
        if tied.size > 1:
            st = cur.state
            Ainv_diag = np.diag(cho_solve((st.L, True), np.eye(len(ids)), check_finite=False))
            loo = 1.0 / Ainv_diag[[cand[t] for t in tied]]
            pick = tied[int(np.argmin(loo))]
        else:
            pick = tied[0]
        nxt, j = trials[pick]
        if beta * np.sqrt(var[pick]) >= thresh:
            break
        cur = nxt
        removed.append(ids.pop(j))

    if len(ids) > budget:
        log.info("budget elimination would break the trigger condition; keeping newest point only")
        ds = model.dataset.subset([newest])
        cur = model.with_dataset(ds)
        s = sigma_at(cur)
        return BudgetResult(cur, [i for i in range(N) if i != newest], True, s, beta * s < thresh)
    s = sigma_at(cur)
    return BudgetResult(cur, removed, False, s, beta * s < thresh)
