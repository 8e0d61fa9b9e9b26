import numpy as np
import pytest
from hypothesis import given, strategies as st

from gpfelin import gp
from gpfelin.errors import ContractViolation, NumericalDegeneracy
from gpfelin.kernels import SEKernel


def _random_data(rng, n, d=2, noise=0.0):
    X = rng.uniform(-3, 3, size=(n, d))
    y = np.sin(X).sum(axis=1) + 0.3 * X[:, 0]
    return gp.Dataset.from_points(X, y, noise_variance=noise)


def _dense(ds, kern, Xs, shift):
    K = kern(ds.inputs) + shift * np.eye(len(ds))
    Ks = kern(ds.inputs, Xs)
    Ki = np.linalg.inv(K)
    return Ks.T @ Ki @ ds.targets, kern.diag(Xs) - np.einsum("ij,ik,kj->j", Ks, Ki, Ks)


def test_empty_dataset_gives_prior():
    kern = SEKernel.create([1.0, 1.0], 2.5)
    st_ = gp.fit(gp.Dataset.empty(2), kern)
    assert gp.posterior(st_, [0.3, 0.1]) == (0.0, 2.5)


def test_one_noisy_point_closed_form():
    kern = SEKernel.create([1.0], 5.0)
    st_ = gp.fit(gp.Dataset.from_points([[0.0]], [1.0], noise_variance=1e-6), kern, jitter=0.0)
    assert gp.posterior(st_, [0.0])[1] == pytest.approx(9.999998e-7, rel=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_noiseless_interpolation(seed):
    rng = np.random.default_rng(seed)
    ds = _random_data(rng, 12)
    st_ = gp.fit(ds, SEKernel.create(rng.uniform(0.5, 2, 2), rng.uniform(0.5, 3)))
    m, v = gp.predict(st_, ds.inputs)
    assert np.abs(m - ds.targets).max() < 1e-8
    assert np.sqrt(v).max() < 1e-6


def test_factorized_matches_dense_inverse(rng):
    ds = _random_data(rng, 18, noise=1e-4)
    kern = SEKernel.create([0.9, 1.4], 1.7)
    st_ = gp.fit(ds, kern)
    Xs = rng.uniform(-3, 3, size=(30, 2))
    m, v = gp.predict(st_, Xs)
    md, vd = _dense(ds, kern, Xs, st_.diag_shift)
    assert np.allclose(m, md, atol=1e-8)
    assert np.allclose(v, vd, atol=1e-8)


def test_add_remove_sequence_matches_refit(rng):
    kern = SEKernel.create([1.0, 1.5], 2.0)
    ds = _random_data(rng, 40, noise=1e-4)
    state = gp.fit(gp.Dataset.empty(2, 1e-4), kern)
    for step in range(50):
        if len(state) > 3 and step % 3 == 2:
            state = gp.remove_point(state, int(rng.integers(len(state))))
        else:
            i = step % 40
            state = gp.add_point(state, ds.inputs[i] + 1e-3 * step, ds.targets[i])
    ref = gp.fit(state.dataset, kern, jitter=state.jitter)
    grid = np.stack(np.meshgrid(np.linspace(-3, 3, 10), np.linspace(-3, 3, 10)), -1).reshape(-1, 2)
    m1, v1 = gp.predict(state, grid)
    m2, v2 = gp.predict(ref, grid)
    assert np.abs(m1 - m2).max() < 1e-6
    assert np.abs(v1 - v2).max() < 1e-6


def test_remove_then_add_restores_posterior(rng):
    kern = SEKernel.create([1.0, 1.0], 1.0)
    st_ = gp.fit(_random_data(rng, 6, noise=1e-3), kern)
    x, y = st_.dataset.inputs[2], st_.dataset.targets[2]
    back = gp.add_point(gp.remove_point(st_, 2), x, y)
    assert gp.posterior(back, [0.1, 0.2]) == pytest.approx(gp.posterior(st_, [0.1, 0.2]), abs=1e-10)


def test_remove_out_of_range():
    st_ = gp.fit(gp.Dataset.from_points([[0.0]], [1.0]), SEKernel.create([1.0], 1.0))
    with pytest.raises(ContractViolation):
        gp.remove_point(st_, 1)


def test_noiseless_duplicate_rejected():
    ds = gp.Dataset.from_points([[0.0], [0.0]], [1.0, 1.0])
    with pytest.raises(NumericalDegeneracy):
        gp.fit(ds, SEKernel.create([1.0], 1.0))
    st_ = gp.fit(gp.Dataset.from_points([[0.0]], [1.0]), SEKernel.create([1.0], 1.0))
    with pytest.raises(NumericalDegeneracy):
        gp.add_point(st_, [0.0], 1.0)


def test_near_duplicates_escalate_jitter():
    # slightly indefinite Gram matrix: needs jitter above 1e-12 to factor
    K = np.ones((2, 2)) - 1e-12 * np.eye(2)
    _, j = gp._factorize(K, 0.0, 1.0)
    assert j > 1e-12
    with pytest.raises(NumericalDegeneracy):
        gp._factorize(np.ones((2, 2)) - 1e-3 * np.eye(2), 0.0, 1.0)


def test_dataset_validation():
    with pytest.raises(ContractViolation):
        gp.Dataset.from_points([[0.0], [1.0]], [1.0])
    with pytest.raises(ContractViolation):
        gp.Dataset.from_points([[0.0]], [np.nan])


def test_likelihood_known_value():
    # one point: log N(y | 0, sf2 + noise)
    ds = gp.Dataset.from_points([[0.0]], [0.7], noise_variance=0.1)
    val = gp.log_marginal_likelihood(ds, SEKernel.create([1.0], 2.0))
    s2 = 2.0 + 0.1 + 2e-14
    assert val == pytest.approx(-0.5 * 0.49 / s2 - 0.5 * np.log(2 * np.pi * s2))


@given(st.lists(st.floats(-2.0, 2.0), min_size=3, max_size=3))
def test_likelihood_gradient_matches_fd(log_theta):
    rng = np.random.default_rng(7)
    ds = _random_data(rng, 10, noise=1e-2)
    kern = SEKernel(SEKernel.create([1, 1], 1).hyp).with_theta(np.r_[log_theta[:2], log_theta[2]])
    _, g = gp.log_marginal_likelihood_and_grad(ds, kern)
    h = 1e-5
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        fd = (gp.log_marginal_likelihood(ds, kern.with_theta(kern.theta + e))
              - gp.log_marginal_likelihood(ds, kern.with_theta(kern.theta - e))) / (2 * h)
        assert abs(g[j] - fd) <= 1e-4 * max(1.0, abs(fd))


def test_optimizer_improves_likelihood(rng):
    ds = _random_data(rng, 25, noise=1e-3)
    kern = SEKernel.create([10.0, 10.0], 0.1)
    rep = gp.optimize_hyperparameters(ds, kern, n_restarts=2, seed=1)
    assert rep.log_likelihood > gp.log_marginal_likelihood(ds, kern)
    assert rep.log_likelihood == pytest.approx(gp.log_marginal_likelihood(ds, rep.kernel))
    assert len(rep.restarts) == 2


def test_optimizer_holds_infinite_lengthscale(rng):
    ds = _random_data(rng, 10, noise=1e-3)
    rep = gp.optimize_hyperparameters(ds, SEKernel.create([1.0, np.inf], 1.0), n_restarts=1)
    assert np.isinf(rep.kernel.hyp.lengthscales[1])


def test_optimizer_is_deterministic(rng):
    ds = _random_data(rng, 10, noise=1e-3)
    kern = SEKernel.create([1.0, 1.0], 1.0)
    a = gp.optimize_hyperparameters(ds, kern, n_restarts=3, seed=4)
    b = gp.optimize_hyperparameters(ds, kern, n_restarts=3, seed=4)
    assert np.array_equal(a.theta, b.theta)


def test_optimizer_rejects_empty():
    with pytest.raises(ContractViolation):
        gp.optimize_hyperparameters(gp.Dataset.empty(1), SEKernel.create([1.0], 1.0))


@given(st.lists(st.tuples(st.floats(-3, 3), st.floats(-3, 3)), min_size=1, max_size=8, unique=True),
       st.tuples(st.floats(-3, 3), st.floats(-3, 3)))
def test_variance_bounded_and_monotone_in_data(pts, probe):
    kern = SEKernel.create([1.0, 0.8], 2.0)
    state = gp.fit(gp.Dataset.empty(2, 1e-6), kern)
    prev = gp.posterior(state, probe)[1]
    for p in pts:
        state = gp.add_point(state, p, float(np.sin(p[0])))
        v = gp.posterior(state, probe)[1]
        assert 0.0 <= v <= 2.0
        assert v <= prev + 1e-9
        prev = v
