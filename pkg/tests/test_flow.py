from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pseudograph.cloud import GRAPH, PhasePointCloud
from pseudograph.errors import EnergyDriftExceeded, LoopNotClosed
from pseudograph.flow import (
    FlowConfig,
    PhaseLoop,
    TangentVector,
    flow_cloud,
    flow_point,
    flow_points,
    loop_action,
    symplectic_loop_invariance_check,
    tangent_flow,
)
from pseudograph.hamiltonian import make_hamiltonian
from pseudograph.semiconcave import enlarged_pseudograph_sample, make_function

FREE = make_hamiltonian("free")
PEND = make_hamiltonian("pendulum")

# DOP853 at rtol 1e-13 on q' = p, p' = 2 pi sin(2 pi q)
PEND_END = (0.6854889035313448, -0.9373652404302476)
# central difference (step 1e-6) of the same integrator, start (0.25, 0.3), t = 0.2
PEND_TANGENT = (0.17988181, 0.57609363)


def loop_of(kind, n=512):
    q = np.arange(n) / n
    p = {"zero": 0 * q, "one": 1 + 0 * q, "sin": np.sin(2 * np.pi * q), "cos": 0.5 * np.cos(2 * np.pi * q)}[kind]
    return PhaseLoop(q, p, (1,))


def test_free_flight():
    q, p = flow_point(FREE, (0.2, 0.5), -0.4)
    assert q[0] % 1.0 == pytest.approx(0.0, abs=1e-12)
    assert p[0] == pytest.approx(0.5, abs=1e-15)


def test_pendulum_equilibrium():
    q, p = flow_point(PEND, (0.5, 0.0), 1.0)
    assert q[0] == pytest.approx(0.5, abs=1e-13) and p[0] == pytest.approx(0.0, abs=1e-13)


@pytest.mark.parametrize("cfg", [FlowConfig(), FlowConfig("rk4_fixed", step=1e-3)])
def test_pendulum_orbit_against_reference(cfg):
    q, p = flow_point(PEND, (0.25, 0.3), 0.7, cfg)
    assert q[0] == pytest.approx(PEND_END[0], abs=1e-8)
    assert p[0] == pytest.approx(PEND_END[1], abs=1e-8)


def test_rk4_self_convergence():
    a = flow_point(PEND, (0.25, 0.3), 0.7, FlowConfig("rk4_fixed", step=2e-3))
    b = flow_point(PEND, (0.25, 0.3), 0.7, FlowConfig("rk4_fixed", step=1e-3))
    assert np.max(np.abs(np.concatenate(a) - np.concatenate(b))) < 1e-8


@given(st.floats(0, 1), st.floats(-2, 2), st.floats(-1, 1))
def test_flow_composition(q0, p0, t):
    x = flow_point(PEND, (q0, p0), t)
    back = flow_point(PEND, x, -t)
    assert np.hypot(back[0][0] - q0, back[1][0] - p0) < 1e-7


@given(st.floats(0, 1), st.floats(-2, 2), st.floats(-2, 2))
def test_energy_conserved_quartic(q0, p0, t):
    H = make_hamiltonian("quartic")
    q, p = flow_point(H, (q0, p0), t)
    assert abs(H.energy(q, p) - H.energy([q0], [p0])) <= 1e-8 * max(1.0, abs(t))


def test_energy_cap_triggers():
    with pytest.raises(EnergyDriftExceeded):
        flow_point(PEND, (0.25, 1.5), 1.0, FlowConfig("rk4_fixed", step=0.2, energy_drift_cap=1e-10))


def test_time_and_config_limits():
    with pytest.raises(ValueError):
        flow_point(FREE, (0.0, 1.0), 10.5)
    with pytest.raises(ValueError):
        FlowConfig(method="leapfrog")
    with pytest.raises(ValueError):
        FlowConfig(tolerance=0.0)


def test_lifts_are_kept():
    q, _ = flow_points(FREE, np.array([[0.9]]), np.array([[2.0]]), 1.0)
    assert q[0, 0] == pytest.approx(2.9)


def test_flow_cloud_zero_section_and_identity():
    c = enlarged_pseudograph_sample(make_function("zero"), 32, 3)
    out = flow_cloud(FREE, c, 0.7)
    np.testing.assert_array_equal(out.q, c.q)
    assert out.source_time == pytest.approx(0.7)
    same = flow_cloud(PEND, c, 0.0)
    np.testing.assert_array_equal(same.p, c.p)


def test_flow_cloud_two_parabolas_closed_form():
    c = enlarged_pseudograph_sample(make_function("two_parabolas"), 64, 9)
    out = flow_cloud(FREE, c, -0.25)
    np.testing.assert_allclose(out.q, c.q - 0.25 * c.p, atol=1e-12)
    np.testing.assert_array_equal(out.p, c.p)
    graph = ~c.is_fiber
    # graph point (q, du(q)) with du(q) the minimal-lift q goes to (q - 0.25 du, du)
    du = c.q[graph, 0] - np.round(c.q[graph, 0])
    gap = out.q[graph, 0] - 0.75 * du
    np.testing.assert_allclose(gap - np.round(gap), 0.0, atol=1e-12)
    fib = c.is_fiber
    np.testing.assert_allclose(out.q[fib, 0], 0.5 - 0.25 * c.p[fib, 0], atol=1e-12)
    assert list(out.provenance) == list(c.provenance)
    assert out.source_time == -0.25


def test_tangent_free_is_a_shear():
    out = tangent_flow(FREE, ((0.3,), (0.7,)), TangentVector(np.array([0.0]), np.array([0.2])), 0.6)
    assert out.dq[0] == pytest.approx(0.12, abs=1e-12)
    assert out.dp[0] == pytest.approx(0.2, abs=1e-12)


def test_tangent_zero_vector():
    out = tangent_flow(PEND, ((0.3,), (0.7,)), TangentVector(np.zeros(1), np.zeros(1)), 0.6)
    assert np.all(out.dq == 0) and np.all(out.dp == 0)


def test_tangent_matches_reference_difference():
    out = tangent_flow(PEND, ((0.25,), (0.3,)), TangentVector(np.array([0.0]), np.array([1.0])), 0.2)
    assert out.dq[0] == pytest.approx(PEND_TANGENT[0], abs=1e-5)
    assert out.dp[0] == pytest.approx(PEND_TANGENT[1], abs=1e-5)


@pytest.mark.parametrize("dim", [1, 2])
def test_tangent_consistency(dim, rng):
    H = make_hamiltonian("pendulum", dim)
    q, p = rng.uniform(size=dim), rng.normal(size=dim)
    dq, dp = rng.normal(size=dim), rng.normal(size=dim)
    out = tangent_flow(H, (q, p), TangentVector(dq, dp), 0.5)
    e = 1e-5
    a = flow_point(H, (q + e * dq, p + e * dp), 0.5)
    b = flow_point(H, (q - e * dq, p - e * dp), 0.5)
    fd = np.concatenate([(a[0] - b[0]) / (2 * e), (a[1] - b[1]) / (2 * e)])
    got = np.concatenate([out.dq, out.dp])
    assert np.max(np.abs(got - fd)) <= 1e-4 * np.max(np.abs(fd))


def test_tangent_rejects_non_finite():
    with pytest.raises(ValueError):
        tangent_flow(FREE, ((0.0,), (0.0,)), TangentVector(np.array([np.nan]), np.array([0.0])), 0.1)


@pytest.mark.parametrize("kind,expected", [("zero", 0.0), ("sin", 0.0), ("one", 1.0)])
def test_loop_action(kind, expected):
    assert loop_action(loop_of(kind, 256)) == pytest.approx(expected, abs=1e-6)


def test_loop_action_needs_a_closed_loop():
    with pytest.raises(LoopNotClosed):
        loop_action(PhaseLoop(np.array([0.0]), np.array([1.0]), (1,)))
    with pytest.raises(LoopNotClosed):
        loop_action(PhaseLoop(np.array([0.0, 0.1]), np.array([1.0, 1.0]), (1,)))
    with pytest.raises(LoopNotClosed):
        loop_action(PhaseLoop(np.array([0.0, 0.7, 0.8]), np.array([1.0, 1.0, 1.0]), (1,)))


def test_invariance_examples():
    assert symplectic_loop_invariance_check(FREE, loop_of("zero", 64), 0.5) == pytest.approx(0.0, abs=1e-15)
    assert symplectic_loop_invariance_check(FREE, loop_of("one", 64), 0.3) <= 1e-6
    assert symplectic_loop_invariance_check(PEND, loop_of("sin"), 0.2) <= 1e-5


def test_invariance_for_a_two_dimensional_loop():
    n = 256
    s = np.arange(n) / n
    q = np.stack([s, 0.3 + 0.1 * np.sin(2 * np.pi * s)], axis=1)
    p = np.stack([0.2 * np.cos(2 * np.pi * s), 0.4 + 0 * s], axis=1)
    loop = PhaseLoop(q, p, (1, 0))
    assert symplectic_loop_invariance_check(make_hamiltonian("pendulum", 2), loop, 0.3) <= 1e-5


def test_cloud_points_must_be_finite():
    with pytest.raises(ValueError):
        PhasePointCloud(np.array([np.inf]), np.array([0.0]), np.array([GRAPH], dtype=object))
