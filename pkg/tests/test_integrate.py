import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from mfstmcmc.fsp import StateSpace, assemble_generator, build_rectangle_space
from mfstmcmc.integrate import (
    IntegratorConfig,
    IntegratorError,
    dense_reference_expm,
    expm_multiply_krylov,
    step_fixed,
    step_implicit,
)
from mfstmcmc.models import birth_death, il1beta, il1beta_prior


def random_generator(n, rng, density=0.05, leak=0.1):
    A = sp.random(n, n, density=density, random_state=rng, data_rvs=lambda k: rng.uniform(0, 5, k)).toarray()
    np.fill_diagonal(A, 0.0)
    out = A.sum(axis=0) + leak * rng.uniform(0, 1, n) * (rng.uniform(size=n) < 0.2)
    return sp.csr_matrix(A - np.diag(out))


def birth_death_3():
    return assemble_generator(birth_death(), np.log10([10.0, 1.0]), build_rectangle_space((2,))).matrix


def test_zero_step_is_identity():
    v = np.array([0.2, 0.3, 0.5])
    out = expm_multiply_krylov(birth_death_3(), v, 0.0)
    np.testing.assert_array_equal(out, v)


def test_scalar_exponential():
    out = expm_multiply_krylov(sp.csr_matrix([[-1.0]]), np.array([1.0]), 1.0)
    assert out[0] == pytest.approx(math.exp(-1.0), rel=1e-12)


def test_birth_death_against_dense():
    A = birth_death_3()
    v = np.array([1.0, 0.0, 0.0])
    ref = dense_reference_expm(A, v, 0.5)
    assert np.max(np.abs(expm_multiply_krylov(A, v, 0.5) - ref)) <= 1e-10


@pytest.mark.parametrize("seed", range(100))
def test_krylov_vs_dense_random(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(20, 501))
    A = random_generator(n, rng)
    v = rng.dirichlet(np.ones(n))
    dt = float(rng.uniform(0.05, 2.0))
    assert np.abs(expm_multiply_krylov(A, v, dt) - dense_reference_expm(A, v, dt)).sum() <= 1e-8


def test_implicit_constant_generator_matches_krylov():
    rng = np.random.default_rng(3)
    A = random_generator(80, rng)
    v = rng.dirichlet(np.ones(80))
    cfg = IntegratorConfig()
    a = step_implicit(lambda t: A, v, 0.0, 1.0, cfg)
    b = expm_multiply_krylov(A, v, 1.0, cfg)
    assert np.abs(a - b).sum() <= 10 * (cfg.rel_tol + cfg.abs_tol)


def test_implicit_scalar_time_varying():
    cfg = IntegratorConfig()
    out = step_implicit(lambda t: sp.csr_matrix([[-(1.0 + math.sin(t))]]), np.array([1.0]), 0.0, 2.0, cfg)
    exact = math.exp(-(2.0 + 1.0 - math.cos(2.0)))
    assert abs(out[0] - exact) <= cfg.rel_tol * exact


def test_implicit_third_order():
    def A(t):
        return np.array([[-(1.0 + math.sin(t))]])

    exact = math.exp(-(2.0 + 1.0 - math.cos(2.0)))
    errs = [abs(step_fixed(A, np.array([1.0]), 0.0, 2.0, n)[0] - exact) for n in (10, 20, 40)]
    for coarse, fine in zip(errs[:-1], errs[1:]):
        assert coarse / fine >= 2 ** 3 * 0.7


def test_implicit_rejects_empty_interval():
    with pytest.raises(ValueError):
        step_implicit(lambda t: np.zeros((1, 1)), np.ones(1), 1.0, 1.0)


def test_krylov_substep_limit():
    rng = np.random.default_rng(0)
    A = random_generator(300, rng) * 1e3
    with pytest.raises(IntegratorError):
        expm_multiply_krylov(A, rng.dirichlet(np.ones(300)), 10.0, IntegratorConfig(max_substeps=2))


def test_il1beta_mass_non_increasing():
    net = il1beta()
    theta = il1beta_prior().mean.copy()
    theta[4] = 1.5  # b10: strong signal effect
    box = build_rectangle_space((1, 1, 1, 40))
    # one gene copy occupies exactly one of the three gene states
    space = StateSpace(box.states[box.states[:, :3].sum(axis=1) == 1], box.bound)

    def A_of_t(t):
        return assemble_generator(net, theta, space, t=t).matrix

    v = np.zeros(len(space))
    v[space.index_of(np.array([[1, 0, 0, 0]]))[0]] = 1.0
    masses = [1.0]
    t_prev = 0.0
    for t in np.linspace(0.5, 8.0, 16):
        v = step_implicit(A_of_t, v, t_prev, float(t))
        masses.append(v.sum())
        t_prev = float(t)
    assert np.all(np.diff(masses) <= 1e-10)


def test_dense_zero_generator():
    v = np.array([0.1, 0.9])
    np.testing.assert_allclose(dense_reference_expm(np.zeros((2, 2)), v, 3.0), v)


@given(st.floats(0.01, 5.0), st.floats(0.01, 5.0), st.floats(0.0, 1.0))
def test_dense_nilpotent(k, dt, v1):
    A = k * np.array([[0.0, 0.0], [1.0, 0.0]])
    v = np.array([v1, 1.0 - v1])
    expected = v + dt * A @ v
    np.testing.assert_allclose(dense_reference_expm(A, v, dt), expected, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_dense_substochastic(seed):
    rng = np.random.default_rng(seed)
    A = random_generator(50, rng, density=0.2)
    v = rng.dirichlet(np.ones(50))
    out = dense_reference_expm(A, v, 1.0)
    assert out.min() >= -1e-12 and out.max() <= 1.0
    assert out.sum() <= 1 + 1e-12


def test_dense_cap():
    with pytest.raises(ValueError):
        dense_reference_expm(sp.identity(2001, format="csr"), np.ones(2001), 1.0)


@pytest.mark.parametrize("seed", range(10))
def test_krylov_mass_non_increasing(seed):
    rng = np.random.default_rng(100 + seed)
    A = random_generator(200, rng, leak=1.0)
    v = rng.dirichlet(np.ones(200))
    prev = v.sum()
    for dt in (0.1, 0.2, 0.4, 0.8):
        v = expm_multiply_krylov(A, v, dt)
        assert v.sum() <= prev + 1e-10
        prev = v.sum()
