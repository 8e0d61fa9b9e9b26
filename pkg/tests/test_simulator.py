import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gpfelin.affine import estimates, predict_fg_grid, predict_fg_variance
from gpfelin.cli import parse_config
from gpfelin.errors import ContractViolation, DivergenceFault, NumericalDegeneracy, PlantFault
from gpfelin.simulator import (PENDULUM, PlantSpec, SimulationAborted, Sinusoid, SoftStep, _ModelView,
                               initial_model, integrate_step, measure, plant_deriv, reference_eval,
                               run_closed_loop)

OSC = PlantSpec("oscillator", 2, lambda x: -x[0], lambda x: 1.0)


def _short(preset="s2", **kw):
    cfg = parse_config(preset, {"t_sim": 2.0})
    return replace(cfg, **kw) if kw else cfg


def _integrate(dt, T=1.0):
    x = np.array([1.0, 0.0])
    for k in range(int(round(T / dt))):
        x = integrate_step(OSC, lambda t, x: 0.0, x, k * dt, dt)
    return x


def test_rk4_fourth_order():
    exact = np.array([math.cos(1.0), -math.sin(1.0)])
    e1 = np.linalg.norm(_integrate(0.1) - exact)
    e2 = np.linalg.norm(_integrate(0.05) - exact)
    assert 14 < e1 / e2 < 18


def test_plant_deriv_chain_form():
    x = np.array([0.3, -0.4])
    d = plant_deriv(PENDULUM, x, 2.0)
    assert d[0] == x[1]
    assert d[1] == pytest.approx(PENDULUM.f(x) + PENDULUM.g(x) * 2.0)


def test_plant_fault_on_nonpositive_g():
    bad = PlantSpec("bad", 2, lambda x: 0.0, lambda x: -1.0)
    with pytest.raises(PlantFault):
        plant_deriv(bad, [0.0, 0.0], 1.0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_detected():
    with pytest.raises(DivergenceFault):
        integrate_step(OSC, lambda t, x: np.inf, np.zeros(2), 0.0, 0.1)


def test_no_finite_escape_without_control():
    x = np.array([3.0, 2.0])
    for k in range(5000):
        x = integrate_step(PENDULUM, lambda t, x: 0.0, x, k * 1e-2, 1e-2)
    assert np.all(np.isfinite(x))


def test_measurement_statistics():
    rng = np.random.default_rng(3)
    x = np.array([0.5, 0.5])
    truth = plant_deriv(PENDULUM, x, 1.0)[-1]
    ys = np.array([measure(PENDULUM, x, 1.0, 0.1, rng) for _ in range(4000)])
    assert abs(ys.mean() - truth) < 4 * 0.1 / math.sqrt(4000)
    assert ys.std() == pytest.approx(0.1, rel=0.05)


def test_noise_free_measurement_is_exact():
    x = np.array([0.5, 0.5])
    y = measure(PENDULUM, x, 1.0, 0.0, np.random.default_rng(0))
    assert y == plant_deriv(PENDULUM, x, 1.0)[-1]


@given(st.floats(0, 20))
def test_soft_step_derivatives_match_fd(t):
    traj = SoftStep()
    h = 1e-5
    ref = reference_eval(traj, t, 2)
    up, dn = reference_eval(traj, t + h, 2), reference_eval(traj, t - h, 2)
    assert ref.xd[1] == pytest.approx((up.xd[0] - dn.xd[0]) / (2 * h), abs=1e-4)
    assert ref.xd_n == pytest.approx((up.xd[1] - dn.xd[1]) / (2 * h), abs=1e-2)


def test_soft_step_levels():
    assert reference_eval(SoftStep(), 0.0).xd[0] == pytest.approx(1.0)
    assert reference_eval(SoftStep(), 20.0).xd[0] == pytest.approx(0.0)
    assert reference_eval(SoftStep(), 10.0).xd[0] == pytest.approx(0.5)


def test_sinusoid():
    ref = reference_eval(Sinusoid(), 0.7, 2)
    assert ref.xd == pytest.approx([math.sin(0.7), math.cos(0.7)])
    assert ref.xd_n == pytest.approx(-math.sin(0.7))


@pytest.mark.parametrize("preset", ["s1", "s2"])
def test_model_view_agrees_with_library(preset, rng):
    cfg = _short(preset)
    model = initial_model(cfg)
    for x in rng.uniform(-2, 2, (5, 2)):
        u = rng.uniform(-2, 2)
        model = model.add(x, plant_deriv(cfg.plant, x, u)[-1], u)
    view = _ModelView(model, cfg.plant)
    for x in rng.uniform(-2, 2, (4, 2)):
        f, g = view.fg(x)
        if model.known_g:
            assert (f, g) == pytest.approx(estimates(model, x), abs=1e-12)
        else:
            fr, gr = predict_fg_grid(model, x)
            assert (f, g) == pytest.approx((fr[0], gr[0]), abs=1e-12)
        assert view.sigma(x) ** 2 == pytest.approx(predict_fg_variance(model, x), abs=1e-12)


def test_run_config_validation():
    cfg = _short()
    with pytest.raises(ContractViolation):
        replace(cfg, dt=0.0)
    with pytest.raises(ContractViolation):
        replace(cfg, t_sim=1.0005)
    with pytest.raises(ContractViolation):
        replace(cfg, x0=(1.0,))
    with pytest.raises(ContractViolation):
        replace(cfg, trigger_mode="time", trigger_period=None)
    with pytest.raises(ContractViolation):
        replace(cfg, forgetting="budget")


def test_short_run_shapes_and_determinism():
    cfg = _short()
    a, b = run_closed_loop(cfg), run_closed_loop(cfg)
    assert a.n_rows == cfg.n_steps + 1
    for name in ("t", "x", "u", "sigma", "kappa", "event"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert a.events.times == b.events.times
    assert a.kappa[-1] == len(a.events)


def test_trigger_invariant_between_events():
    cfg = _short()
    tr = run_closed_loop(cfg)
    quiet = ~tr.event
    lhs = cfg.trigger.beta * tr.sigma[quiet]
    rhs = cfg.controller.k_c * np.maximum(np.abs(tr.r[quiet]), cfg.controller.r_min)
    assert np.all(lhs < rhs)


def test_event_flags_sit_on_event_rows():
    cfg = _short()
    tr = run_closed_loop(cfg)
    rows = {int(math.ceil(t / cfg.dt - 1e-9)) for t in tr.events.times}
    assert set(np.flatnonzero(tr.event)) == rows


def test_first_event_at_time_zero():
    tr = run_closed_loop(_short())
    assert tr.events.times[0] == 0.0 and tr.event[0]


def test_time_trigger_count():
    cfg = _short("s2", trigger_mode="time", trigger_period=0.5)
    tr = run_closed_loop(cfg)
    assert tr.events.times == [0.5, 1.0, 1.5, 2.0]
    assert tr.dataset_size == 4


def test_forget_all_keeps_single_point():
    tr = run_closed_loop(_short("s2", forgetting="forget_all"))
    assert tr.peak_size == 1 and tr.dataset_size == 1


def test_zeno_guard_aborts_with_partial_trace():
    with pytest.raises(SimulationAborted) as exc:
        run_closed_loop(_short("s2", max_events=2))
    tr = exc.value.trace
    assert isinstance(exc.value.cause, NumericalDegeneracy)
    assert 0 < tr.n_rows < 2001 and len(tr.t) == tr.n_rows
    assert "Zeno" in tr.fault


def test_plant_fault_aborts_run():
    bad = PlantSpec("bad", 2, lambda x: 0.0, lambda x: 1.0 - x[0])
    cfg = _short("s2", plant=bad, model_mode="known_g")
    with pytest.raises(SimulationAborted) as exc:
        run_closed_loop(cfg)
    assert isinstance(exc.value.cause, PlantFault)
