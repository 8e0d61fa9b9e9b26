"""Plants, references, fixed-step integration and the closed-loop learning run."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from numpy.polynomial import Polynomial
from scipy.linalg import solve_triangular

from . import gp
from .affine import AffineModel, constant_mean, known_g_model, unknown_g_model
from .controller import ControllerConfig, ReferencePoint, control, filtered_state, feedforward_rho
from .errors import ContractViolation, DivergenceFault, NumericalDegeneracy, PlantFault
from .kernels import SEHyperparams, SEKernel
from .trigger import (EventLog, TriggerConfig, error_trigger, forget_to_budget, noisy_trigger,
                      variance_trigger)

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------- plants

@dataclass(frozen=True)
class PlantSpec:
    """x_i' = x_{i+1} for i < n, x_n' = f(x) + g(x) u."""

    name: str
    order: int
    f: Callable[[np.ndarray], float]
    g: Callable[[np.ndarray], float]


def _pendulum_f(x):
    return 1.0 - math.sin(x[0]) + 0.5 / (1.0 + math.exp(-x[1] / 10.0))


def _pendulum_g(x):
    return 1.0 + 0.5 * math.sin(x[1] / 2.0)


PENDULUM = PlantSpec("pendulum", 2, _pendulum_f, _pendulum_g)
PLANTS = {"pendulum": PENDULUM}


def plant_deriv(plant: PlantSpec, x, u: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (plant.order,):
        raise ContractViolation(f"state of shape {x.shape} for a plant of order {plant.order}")
    g = plant.g(x)
    if not g > 0:
        raise PlantFault(f"g(x)={g} <= 0 at x={x}")
    dx = np.empty_like(x)
    dx[:-1] = x[1:]
    dx[-1] = plant.f(x) + g * u
    return dx


def integrate_step(plant: PlantSpec, control_fn: Callable[[float, np.ndarray], float], x, t: float,
                   dt: float) -> np.ndarray:
    """One classical RK4 step; the control is re-evaluated at every stage."""
    if not dt > 0:
        raise ContractViolation("dt must be positive")
    x = np.asarray(x, dtype=float)
    k1 = plant_deriv(plant, x, control_fn(t, x))
    x2 = x + 0.5 * dt * k1
    k2 = plant_deriv(plant, x2, control_fn(t + 0.5 * dt, x2))
    x3 = x + 0.5 * dt * k2
    k3 = plant_deriv(plant, x3, control_fn(t + 0.5 * dt, x3))
    x4 = x + dt * k3
    k4 = plant_deriv(plant, x4, control_fn(t + dt, x4))
    out = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise DivergenceFault(f"non-finite state {out} after step from t={t}, x={x}")
    return out


def measure(plant: PlantSpec, x, u: float, noise_std: float, rng: np.random.Generator) -> float:
    """Noisy measurement of x_n'. One normal draw per call, whatever the noise level."""
    eps = rng.standard_normal()
    return float(plant_deriv(plant, x, u)[-1] + noise_std * eps)


# --------------------------------------------------------------------------- references

@dataclass(frozen=True)
class SoftStep:
    """x_d(t) = start + (end - start) * logistic(steepness * (t - center))."""

    center: float = 10.0
    steepness: float = 20.0
    start: float = 1.0
    end: float = 0.0


@dataclass(frozen=True)
class Sinusoid:
    amplitude: float = 1.0
    frequency: float = 1.0
    phase: float = 0.0


TrajectorySpec = Union[SoftStep, Sinusoid]

_LOGISTIC_POLYS = [Polynomial([0.0, 1.0])]
_LOGISTIC_FACTOR = Polynomial([0.0, 1.0, -1.0])  # s (1 - s)


def _logistic_poly(k: int) -> Polynomial:
    # d^k/dz^k logistic(z) as a polynomial in s = logistic(z)
    while len(_LOGISTIC_POLYS) <= k:
        _LOGISTIC_POLYS.append(_LOGISTIC_POLYS[-1].deriv() * _LOGISTIC_FACTOR)
    return _LOGISTIC_POLYS[k]


def _logistic(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


def reference_eval(traj: TrajectorySpec, t: float, n: int = 2) -> ReferencePoint:
    """x_d with derivatives 0..n-1, and the n-th derivative."""
    if isinstance(traj, Sinusoid):
        w, A = traj.frequency, traj.amplitude
        d = [A * w ** k * math.sin(w * t + traj.phase + k * math.pi / 2) for k in range(n + 1)]
    elif isinstance(traj, SoftStep):
        s = _logistic(traj.steepness * (t - traj.center))
        jump = traj.end - traj.start
        d = [traj.start + jump * s]
        for k in range(1, n + 1):
            d.append(jump * traj.steepness ** k * float(_logistic_poly(k)(s)))
    else:
        raise ContractViolation(f"unknown trajectory {traj!r}")
    return ReferencePoint(np.array(d[:n]), d[n])


# --------------------------------------------------------------------------- run config

TRIGGER_MODES = ("variance", "error", "noisy", "time")
HYPER_POLICIES = ("fixed", "reoptimize")
FORGETTING = ("none", "forget_all", "budget")
MODEL_MODES = ("unknown_g", "known_g")


@dataclass(frozen=True)
class RunConfig:
    plant: PlantSpec
    trajectory: TrajectorySpec
    controller: ControllerConfig
    trigger: TriggerConfig
    trigger_mode: str
    noise_variance: float
    x0: tuple
    t_sim: float
    dt: float = 1e-3
    seed: int = 0
    trigger_period: Optional[float] = None
    hyper_policy: str = "fixed"
    kernel_f: SEHyperparams = SEHyperparams((1.0, 1.0), 1.0)
    kernel_g: Optional[SEHyperparams] = None
    forgetting: str = "none"
    model_mode: str = "unknown_g"
    m_g: float = 2.0
    eta: float = 1e-3
    n_restarts: int = 2
    max_events: Optional[int] = 5000
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "x0", tuple(float(v) for v in self.x0))
        if not self.dt > 0 or not self.t_sim >= 0:
            raise ContractViolation("dt must be positive and t_sim non-negative")
        if abs(self.t_sim / self.dt - round(self.t_sim / self.dt)) > 1e-6:
            raise ContractViolation("t_sim must be an integer multiple of dt")
        if len(self.x0) != self.plant.order or self.controller.order != self.plant.order:
            raise ContractViolation("x0, lambda and plant order disagree")
        if self.trigger_mode not in TRIGGER_MODES:
            raise ContractViolation(f"trigger_mode must be one of {TRIGGER_MODES}")
        if self.trigger_mode == "time":
            p = self.trigger_period
            if p is None or not p > 0 or abs(p / self.dt - round(p / self.dt)) > 1e-6:
                raise ContractViolation("time trigger needs a positive period that is a multiple of dt")
        if self.hyper_policy not in HYPER_POLICIES:
            raise ContractViolation(f"hyper_policy must be one of {HYPER_POLICIES}")
        if self.forgetting not in FORGETTING:
            raise ContractViolation(f"forgetting must be one of {FORGETTING}")
        if self.forgetting == "budget" and self.trigger.budget is None:
            raise ContractViolation("budget forgetting needs trigger.budget")
        if self.model_mode not in MODEL_MODES:
            raise ContractViolation(f"model_mode must be one of {MODEL_MODES}")
        if self.model_mode == "unknown_g" and self.kernel_g is None:
            raise ContractViolation("unknown-g mode needs kernel_g")
        if self.max_events is not None and self.max_events < 1:
            raise ContractViolation("max_events must be >= 1")
        if self.noise_variance < 0 or not self.eta > 0 or not self.m_g > 0:
            raise ContractViolation("noise_variance >= 0, eta > 0 and m_g > 0 required")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_sim / self.dt))


# --------------------------------------------------------------------------- trace

@dataclass
class Trace:
    t: np.ndarray
    x: np.ndarray
    xd: np.ndarray
    e_norm: np.ndarray
    r: np.ndarray
    u: np.ndarray
    sigma: np.ndarray
    f_hat: np.ndarray
    g_hat: np.ndarray
    kappa: np.ndarray
    event: np.ndarray
    events: EventLog = field(default_factory=EventLog)
    model: Optional[AffineModel] = None
    n_rows: int = 0
    wall_clock: float = 0.0
    peak_size: int = 0
    floor_hits: int = 0
    budget_checks: list = field(default_factory=list)
    hyper_history: list = field(default_factory=list)
    fault: Optional[str] = None

    @classmethod
    def allocate(cls, n_rows: int, n: int) -> "Trace":
        z = lambda: np.zeros(n_rows)  # noqa: E731
        return cls(z(), np.zeros((n_rows, n)), np.zeros((n_rows, n)), z(), z(), z(), z(), z(), z(),
                   np.zeros(n_rows, dtype=int), np.zeros(n_rows, dtype=bool))

    def truncated(self) -> "Trace":
        """View restricted to the rows actually written."""
        k = self.n_rows
        out = Trace(self.t[:k], self.x[:k], self.xd[:k], self.e_norm[:k], self.r[:k], self.u[:k],
                    self.sigma[:k], self.f_hat[:k], self.g_hat[:k], self.kappa[:k], self.event[:k])
        for name in ("events", "model", "n_rows", "wall_clock", "peak_size", "floor_hits",
                     "budget_checks", "hyper_history", "fault"):
            setattr(out, name, getattr(self, name))
        return out

    @property
    def dataset_size(self) -> int:
        return 0 if self.model is None else len(self.model)


class SimulationAborted(RuntimeError):
    """A fault stopped the run; ``trace`` holds every row written before it."""

    def __init__(self, message: str, trace: Trace, cause: Exception):
        super().__init__(message)
        self.trace = trace
        self.cause = cause


# --------------------------------------------------------------------------- fast model view

class _ModelView:
    """Per-snapshot precomputation for the hot loop (SE kernels only)."""

    def __init__(self, model: AffineModel, plant: PlantSpec):
        self.model = model
        self.plant = plant
        st = model.state
        self.N = len(st)
        self.known_g = model.known_g
        kern = st.kernel
        kf = kern if self.known_g else kern.kf
        self.sf2 = kf.hyp.signal_variance
        self.inv_lf = 1.0 / np.asarray(kf.hyp.lengthscales)
        if not self.known_g:
            self.mg = model.m_g
            self.sg2 = kern.kg.hyp.signal_variance
            self.inv_lg = 1.0 / np.asarray(kern.kg.hyp.lengthscales)
            self.u_alpha = st.dataset.controls * st.alpha
        self.X = st.dataset.inputs
        self.alpha = st.alpha
        self.L = st.L
        self._cache_x = None
        self._cache_kf = None

    def _kf(self, x):
        if self._cache_x is not None and np.array_equal(self._cache_x, x):
            return self._cache_kf
        d = (self.X - x) * self.inv_lf
        k = self.sf2 * np.exp(-0.5 * np.einsum("ij,ij->i", d, d))
        self._cache_x, self._cache_kf = x.copy(), k
        return k

    def fg(self, x) -> tuple[float, float]:
        """(f_hat, unfloored g_hat)."""
        if self.known_g:
            g = self.plant.g(x) if self.model.g_known is self.plant.g else float(self.model.g_known(x))
            if self.N == 0:
                return 0.0, g
            return float(self._kf(x) @ self.alpha), g
        g0 = float(self.mg(x[None, :])[0])
        if self.N == 0:
            return 0.0, g0
        d = (self.X - x) * self.inv_lg
        kg = self.sg2 * np.exp(-0.5 * np.einsum("ij,ij->i", d, d))
        return float(self._kf(x) @ self.alpha), g0 + float(kg @ self.u_alpha)

    def sigma(self, x) -> float:
        if self.N == 0:
            return math.sqrt(self.sf2)
        k = self._kf(x)
        v = solve_triangular(self.L, k, lower=True, check_finite=False)
        var = self.sf2 - float(v @ v)
        if var < -gp.NEGATIVE_VARIANCE_TOL * max(1.0, self.sf2):
            raise NumericalDegeneracy(f"negative posterior variance {var:.3e}")
        return math.sqrt(max(var, 0.0))


# --------------------------------------------------------------------------- closed loop

def initial_model(cfg: RunConfig) -> AffineModel:
    n = cfg.plant.order
    kf = SEKernel(cfg.kernel_f)
    if cfg.model_mode == "known_g":
        return known_g_model(kf, cfg.plant.g, cfg.noise_variance, n)
    return unknown_g_model(kf, SEKernel(cfg.kernel_g), constant_mean(cfg.m_g), cfg.noise_variance,
                           n, eta=cfg.eta)


class _Loop:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.plant = cfg.plant
        self.n = cfg.plant.order
        self.lam = np.asarray(cfg.controller.lam)
        self.k_c = cfg.controller.k_c
        self.r_min = max(cfg.controller.r_min, cfg.trigger.r_min)
        self.beta = cfg.trigger.beta
        self.noise_std = math.sqrt(cfg.noise_variance)
        self.rng = np.random.default_rng(cfg.seed)
        self.hyper_rng = np.random.default_rng([cfg.seed, 1])
        self.kappa = 0
        self.set_model(initial_model(cfg))
        self.trace = Trace.allocate(cfg.n_steps + 1, self.n)
        self.trace.peak_size = 0

    def set_model(self, model: AffineModel):
        self.model = model
        self.view = _ModelView(model, self.plant)

    # -- evaluation helpers
    def errors(self, t, x):
        ref = reference_eval(self.cfg.trajectory, t, self.n)
        e = x - ref.xd
        r = float(self.lam @ e[:-1] + e[-1])
        rho = float(self.lam @ e[1:] - ref.xd_n)
        return ref, e, r, rho

    def control_at(self, t, x) -> float:
        _, _, r, rho = self.errors(t, x)
        f, g = self.view.fg(x)
        if g <= self.cfg.eta:
            self.trace.floor_hits += 1
            g = self.cfg.eta
        return control(f, g, r, rho, self.k_c)

    def fires(self, t, x) -> bool:
        mode = self.cfg.trigger_mode
        _, e, r, _ = self.errors(t, x)
        if mode == "error":
            return error_trigger(abs(self.plant.f(x) - self.view.fg(x)[0]), r, self.k_c, self.r_min)
        sigma = self.view.sigma(x)
        if mode == "noisy":
            return noisy_trigger(sigma, self.beta, r, self.k_c, e, self.lam,
                                 self.cfg.trigger.noise_std, self.r_min)
        return variance_trigger(sigma, self.beta, r, self.k_c, self.r_min)

    # -- events
    def event(self, t, x):
        cfg = self.cfg
        if cfg.max_events is not None and self.kappa >= cfg.max_events:
            raise NumericalDegeneracy(f"Zeno guard: event {self.kappa + 1} at t={t:.6f} exceeds max_events")
        u = self.control_at(t, x)
        y = measure(self.plant, x, u, self.noise_std, self.rng)
        model = self.model
        if cfg.forgetting == "forget_all":
            model = model.with_dataset(gp.Dataset.empty(self.n, cfg.noise_variance))
        model = model.add(x, y, u)
        if cfg.hyper_policy == "reoptimize":
            rep = gp.optimize_hyperparameters(model.dataset, model.kernel, model.state.prior_mean,
                                              n_restarts=cfg.n_restarts, seed=self.hyper_rng)
            model = model.with_dataset(model.dataset, rep.kernel)
            self.trace.hyper_history.append((t, rep.theta.copy(), rep.log_likelihood))
        if cfg.forgetting == "budget":
            _, _, r, _ = self.errors(t, x)
            res = forget_to_budget(model, cfg.trigger.budget, x, r, self.k_c, self.beta, self.r_min)
            model = res.model
            self.trace.budget_checks.append((t, len(model), res.condition_ok, res.fallback))
        self.set_model(model)
        self.kappa += 1
        self.trace.events.record(t, cfg.trigger_mode, len(model))
        self.trace.peak_size = max(self.trace.peak_size, len(model))

    # -- trace rows
    def row(self, k, t, x, event):
        tr = self.trace
        ref, e, r, rho = self.errors(t, x)
        f, g = self.view.fg(x)
        g_used = g if g > self.cfg.eta else self.cfg.eta
        tr.t[k] = t
        tr.x[k] = x
        tr.xd[k] = ref.xd
        tr.e_norm[k] = float(np.linalg.norm(e))
        tr.r[k] = r
        tr.u[k] = control(f, g_used, r, rho, self.k_c)
        tr.sigma[k] = self.view.sigma(x)
        tr.f_hat[k] = f
        tr.g_hat[k] = g
        tr.kappa[k] = self.kappa
        tr.event[k] = event
        tr.n_rows = k + 1

    def step_events(self, k, t, x):
        """Advance from (t, x) to grid time k dt, handling any events inside."""
        cfg = self.cfg
        tg = k * cfg.dt
        if cfg.trigger_mode == "time":
            x_new = integrate_step(self.plant, self.control_at, x, t, tg - t)
            period = int(round(cfg.trigger_period / cfg.dt))
            if k % period == 0:
                self.event(tg, x_new)
                return tg, x_new, True
            return tg, x_new, False

        had_event = False
        for _ in range(MAX_EVENTS_PER_STEP):
            x_new = integrate_step(self.plant, self.control_at, x, t, tg - t)
            if not self.fires(tg, x_new):
                return tg, x_new, had_event
            if self.fires(t, x):
                # still active right after an update; cannot refine further
                t_ev, x_ev = tg, x_new
            else:
                t_ev = self.refine(t, x, tg, x_new)
                x_ev = x_new if t_ev >= tg else integrate_step(self.plant, self.control_at, x, t, t_ev - t)
            self.event(t_ev, x_ev)
            had_event = True
            t, x = t_ev, x_ev
            if t >= tg:
                return tg, x, True
        raise NumericalDegeneracy(f"event storm: more than {MAX_EVENTS_PER_STEP} events in step {k}")

    def refine(self, ta, xa, tb, xb) -> float:
        """Bisect the trigger crossing on the linearly interpolated state."""
        tol = self.cfg.dt / 100.0
        lo, hi = ta, tb
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            xm = xa + (mid - ta) / (tb - ta) * (xb - xa)
            if self.fires(mid, xm):
                hi = mid
            else:
                lo = mid
        return hi

    def run(self) -> Trace:
        cfg = self.cfg
        t0 = time.perf_counter()
        x = np.asarray(cfg.x0, dtype=float)
        t = 0.0
        k = 0
        try:
            ev0 = cfg.trigger_mode != "time" and self.fires(0.0, x)
            if ev0:
                self.event(0.0, x)
            self.row(0, 0.0, x, ev0)
            for k in range(1, cfg.n_steps + 1):
                t, x, ev = self.step_events(k, t, x)
                self.row(k, t, x, ev)
        except (DivergenceFault, PlantFault, NumericalDegeneracy) as exc:
            self.trace.fault = f"{type(exc).__name__}: {exc}"
            self.trace.model = self.model
            self.trace.wall_clock = time.perf_counter() - t0
            raise SimulationAborted(f"run aborted at step {k}: {exc}", self.trace.truncated(), exc) from exc
        self.trace.model = self.model
        self.trace.wall_clock = time.perf_counter() - t0
        return self.trace


MAX_EVENTS_PER_STEP = 1000


def run_closed_loop(config: RunConfig) -> Trace:
    """Simulate the online-learning feedback-linearizing loop.

    Raises :class:`SimulationAborted` (carrying the partial trace) on
    divergence, plant faults or a degenerate Gram matrix.
    """
    return _Loop(config).run()
