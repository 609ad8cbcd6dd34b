from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pseudograph.errors import TimeTooLarge
from pseudograph.hamiltonian import make_hamiltonian
from pseudograph.laxoleinik import (
    SectionSamples,
    derivative_of,
    discrete_action,
    grid_nodes,
    minimal_action,
    negative_semigroup,
    positive_semigroup,
)
from pseudograph.semiconcave import make_function

FREE = make_hamiltonian("free")
PEND = make_hamiltonian("pendulum")
U2P = make_function("two_parabolas")


def hopf_lax_scan(x, t, sign=+1, n_y=10_000):
    """Dense scan of max_y [u(y) - d(x,y)^2/(2t)] (sign +1) or min_y [u(y) + d^2/(2t)] for two_parabolas."""
    y = np.arange(n_y) / n_y
    u = 0.5 * np.minimum(y, 1 - y) ** 2
    d = np.abs(np.asarray(x)[:, None] - y[None])
    d = np.minimum(d, 1 - d)
    if sign > 0:
        return np.max(u[None] - d**2 / (2 * t), axis=1)
    return np.min(u[None] + d**2 / (2 * t), axis=1)


def closed_form_section(x, t):
    """Covector of the backward free flow of E(two_parabolas): branch zone and fiber zone."""
    s = x - np.round(x)
    return np.where(np.abs(s) <= 0.5 * (1 - t), s / (1 - t), np.sign(s) * (0.5 - np.abs(s)) / t)


def test_free_action():
    h, path = minimal_action(FREE, 0.2, 0.4, 0.5)
    assert h == pytest.approx(0.04, abs=1e-14)
    assert path.N == 10 and path.nodes.shape == (11, 1)
    assert minimal_action(FREE, 0.3, 0.3, 0.7)[0] == pytest.approx(0.0, abs=1e-15)
    # the short way round the circle
    assert minimal_action(FREE, 0.1, 0.9, 0.5)[0] == pytest.approx(0.04, abs=1e-14)


def test_pendulum_equilibrium_action_is_minimal(rng):
    h, path = minimal_action(PEND, 0.5, 0.5, 0.3)
    assert h == pytest.approx(0.3, abs=1e-12)
    for _ in range(100):
        nodes = path.nodes.copy()
        nodes[1:-1] += rng.normal(scale=0.05, size=nodes[1:-1].shape)
        assert discrete_action(PEND, nodes, 0.3) >= h - 1e-12


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0.05, 1.0))
def test_action_symmetric_for_reversible_h(x, y, t):
    assert minimal_action(PEND, x, y, t)[0] == pytest.approx(minimal_action(PEND, y, x, t)[0], abs=1e-7)


def test_restarts_never_hurt():
    h0, _ = minimal_action(PEND, 0.1, 0.7, 0.6)
    h1, _ = minimal_action(PEND, 0.1, 0.7, 0.6, restarts=3, seed=7)
    assert h1 <= h0 + 1e-12


def test_action_preconditions():
    with pytest.raises(TimeTooLarge):
        minimal_action(FREE, 0.0, 0.1, 1.5)
    with pytest.raises(ValueError):
        minimal_action(FREE, 0.0, 0.1, 0.0)
    with pytest.raises(ValueError):
        minimal_action(FREE, 0.0, 0.1, 0.5, N=3)


@pytest.mark.parametrize("t", [0.1, 0.5, 1.0])
def test_zero_function_is_fixed(t):
    for semigroup in (positive_semigroup, negative_semigroup):
        s = semigroup(make_function("zero"), FREE, t, 32)
        assert np.max(np.abs(s.values)) <= 1e-14
        assert np.max(np.abs(s.covectors)) <= 1e-12


def test_positive_two_parabolas_values():
    s = positive_semigroup(U2P, FREE, 0.25, 256)
    assert s.values[128] == pytest.approx(0.125, abs=1e-12)
    assert s.values[0] == pytest.approx(0.0, abs=1e-12)
    x = s.nodes()[:, 0]
    np.testing.assert_allclose(s.values, hopf_lax_scan(x, 0.25), atol=1e-7)


def test_negative_two_parabolas_values():
    s = negative_semigroup(U2P, FREE, 0.25, 64)
    x = s.nodes()[:, 0]
    np.testing.assert_allclose(s.values, hopf_lax_scan(x, 0.25, sign=-1), atol=1e-7)
    assert s.values[32] == pytest.approx(hopf_lax_scan(np.array([0.5]), 0.25, sign=-1)[0], abs=1e-7)


def test_two_dimensional_semigroup_splits():
    # periodized |y|^2 / 2 in two variables is a sum of one-variable problems
    s = positive_semigroup(make_function("two_parabolas", 2), make_hamiltonian("free", 2), 0.2, 16)
    x = grid_nodes(16, 2)
    expected = hopf_lax_scan(x[:, 0], 0.2) + hopf_lax_scan(x[:, 1], 0.2)
    np.testing.assert_allclose(s.flat_values(), expected, atol=1e-7)


@pytest.mark.parametrize("H", [FREE, PEND], ids=["free", "pendulum"])
def test_constant_equivariance(H):
    u = make_function("random_quadratics", n=3, seed=0)
    base = positive_semigroup(u, H, 0.2, 32)
    vals = base.interpolant()

    def shifted(q):
        return vals(q) + 0.75

    lifted = positive_semigroup(SectionSamples(32, 1, base.values + 0.75), H, 0.1, 32)
    plain = positive_semigroup(base, H, 0.1, 32)
    np.testing.assert_allclose(lifted.values, plain.values + 0.75, atol=1e-9)
    np.testing.assert_allclose(positive_semigroup(shifted, H, 0.1, 32).values, plain.values + 0.75, atol=1e-9)


def test_monotonicity():
    u = make_function("two_parabolas")
    small = positive_semigroup(SectionSamples(64, 1, u(grid_nodes(64, 1)) - 0.01), FREE, 0.2, 64)
    big = positive_semigroup(u, FREE, 0.2, 64)
    assert np.all(small.values <= big.values + 1e-9)


def test_derivative_of_examples():
    n = 256
    x = np.arange(n) / n
    s = derivative_of(SectionSamples(n, 1, np.sin(2 * np.pi * x)))
    assert np.max(np.abs(s.covectors[:, 0] - 2 * np.pi * np.cos(2 * np.pi * x))) <= 1e-3
    c = derivative_of(SectionSamples(8, 2, np.full((8, 8), 3.0)))
    assert np.all(c.covectors == 0)


def test_semigroup_covectors_match_closed_form_section():
    for t in (0.1, 0.2, 0.25):
        s = positive_semigroup(U2P, FREE, t, 256)
        err = np.abs(s.covectors[:, 0] - closed_form_section(s.nodes()[:, 0], t))
        assert err.max() <= 0.02


@pytest.mark.parametrize("s_,t_", [(0.1, 0.1), (0.1, 0.2), (0.2, 0.1), (0.2, 0.2)])
def test_semigroup_law(s_, t_):
    n = 128
    once = positive_semigroup(U2P, FREE, s_ + t_, n)
    twice = positive_semigroup(positive_semigroup(U2P, FREE, t_, n), FREE, s_, n)
    assert np.max(np.abs(once.values - twice.values)) <= 5.0 / n


def test_pendulum_semigroup_is_between_the_bounds():
    # u(y) - h_t(x, y) at y = x bounds the max from below
    u = make_function("cosine", a=0.2)
    s = positive_semigroup(u, PEND, 0.1, 32)
    x = s.nodes()
    lower = u(x) - np.array([minimal_action(PEND, xi, xi, 0.1)[0] for xi in x[:, 0]])
    assert np.all(s.values >= lower - 1e-12)


def test_section_csv_and_validation():
    s = derivative_of(SectionSamples(4, 1, np.arange(4.0), t=0.5))
    lines = s.to_csv().splitlines()
    assert lines[0] == "q1,value,p1,t" and len(lines) == 5
    with pytest.raises(ValueError):
        SectionSamples(4, 1, np.array([0.0, np.nan, 0.0, 0.0]))
    with pytest.raises(ValueError):
        positive_semigroup(make_function("zero", 2), FREE, 0.1, 8)
