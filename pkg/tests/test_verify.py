from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pseudograph.cloud import GRAPH, PhasePointCloud
from pseudograph.errors import GridMismatch, NoBreakdownInRange, NotAGraph
from pseudograph.flow import flow_cloud
from pseudograph.hamiltonian import CompactTube, hessian_bounds, make_hamiltonian
from pseudograph.laxoleinik import SectionSamples, positive_semigroup
from pseudograph.semiconcave import enlarged_pseudograph_sample, make_function
from pseudograph.verify import (
    VerificationReport,
    breakdown_time,
    cloud_to_section,
    compare_with_semigroup,
    epsilon_bound,
    exactness_test,
    graph_test,
    is_exact,
    lemma3_check,
    lemma4_check,
    lipschitz_estimate,
    paratingent_vertical_test,
    surjectivity_test,
)

FREE = make_hamiltonian("free")
PEND = make_hamiltonian("pendulum")
U2P = make_function("two_parabolas")


def sample(u=U2P, n=256, m=33):
    return enlarged_pseudograph_sample(u, n, m)


@pytest.fixture(scope="module")
def flowed_25():
    return flow_cloud(FREE, sample(), -0.25)


def zero_cloud(n=64):
    return sample(make_function("zero"), n, 3)


def adversarial():
    return PhasePointCloud(np.array([0.0, 0.1]), np.array([0.0, 1.0]), np.array([GRAPH, GRAPH], dtype=object))


# lemma L3 -------------------------------------------------------------------


def test_lemma3_examples():
    assert lemma3_check(zero_cloud(), 0.0) == (True, 0.0)
    ok, margin = lemma3_check(sample(), 0.5)
    assert ok and margin <= 1e-9
    ok, margin = lemma3_check(adversarial(), 0.5)
    assert not ok and margin == pytest.approx(0.09, abs=1e-15)


def test_lemma3_wants_an_unflowed_cloud(flowed_25):
    with pytest.raises(ValueError):
        lemma3_check(flowed_25, 0.5)


@given(st.floats(0.01, 1.0), st.floats(0.0, 1.0))
def test_lemma3_margin_formula(dq, dp):
    c = PhasePointCloud(np.array([0.0, dq * 0.49]), np.array([0.0, dp]), np.array([GRAPH, GRAPH], dtype=object))
    ok, margin = lemma3_check(c, 0.0)
    assert margin == pytest.approx(max(0.0, dp * dq * 0.49), abs=1e-15)


# lemma L4 -------------------------------------------------------------------


@given(st.floats(0, 1), st.floats(-1, 1), st.floats(-1, 1), st.floats(1e-4, 0.05))
def test_lemma4_free_closed_form(q, p, dp, t):
    res = lemma4_check(FREE, q, p, dp, t, 1.0, 1.0)
    assert res.passed
    assert res.lhs == pytest.approx(t * dp * dp, abs=1e-13)
    assert res.bounds["lower_margin"] == pytest.approx(t * dp * dp / 2, abs=1e-13)


def test_lemma4_pendulum_example():
    c, C = hessian_bounds(PEND, CompactTube(1.0))
    res = lemma4_check(PEND, 0.3, 0.2, 0.4, 0.02, c, C)
    assert res.passed
    assert res.bounds["lower_margin"] > 0 and res.bounds["upper_margin"] > 0


def test_lemma4_degenerate_and_preconditions():
    res = lemma4_check(PEND, 0.3, 0.2, 0.0, 0.02, 1.0, 1.0)
    assert res.passed and res.lhs == 0.0
    with pytest.raises(ValueError):
        lemma4_check(FREE, 0.0, 0.0, 0.1, 0.2, 1.0, 1.0)


# graph / surjectivity / Lipschitz ------------------------------------------


def test_graph_examples(flowed_25):
    assert graph_test(flowed_25, 32).is_graph
    unflowed = graph_test(sample(), 32)
    assert not unflowed.is_graph and unflowed.offending_cells == [16]
    assert graph_test(zero_cloud(), 32).is_graph


def test_graph_test_on_unordered_clouds(flowed_25):
    shuffled = flowed_25.select(np.random.default_rng(0).permutation(len(flowed_25)))
    assert not shuffled.ordered
    assert graph_test(shuffled, 32).is_graph
    raw = sample()
    assert 16 in graph_test(raw.select(np.arange(len(raw))), 32).offending_cells


def test_fold_is_detected_past_the_caustic():
    u = make_function("cosine", a=0.2)
    assert graph_test(flow_cloud(FREE, sample(u, 256, 3), -0.12)).is_graph
    assert not graph_test(flow_cloud(FREE, sample(u, 256, 3), -0.14)).is_graph


def test_surjectivity_examples(flowed_25):
    assert surjectivity_test(flowed_25, 32) == 1.0
    half = flowed_25.select(np.mod(flowed_25.q[:, 0], 1.0) < 0.5)
    assert abs(surjectivity_test(half, 32) - 0.5) <= 1 / 32
    assert surjectivity_test(zero_cloud(), 32) == 1.0


@pytest.mark.parametrize("t,lip,tol", [(0.25, 4.0, 0.1), (0.1, 10.0, 0.3)])
def test_lipschitz_blow_up(t, lip, tol):
    assert lipschitz_estimate(flow_cloud(FREE, sample(), -t)) == pytest.approx(lip, abs=tol)


def test_lipschitz_stable_under_refinement():
    a = lipschitz_estimate(flow_cloud(FREE, sample(n=256), -0.2))
    b = lipschitz_estimate(flow_cloud(FREE, sample(n=512), -0.2))
    assert abs(a - b) <= 0.1 * a


def test_lipschitz_edge_cases():
    assert lipschitz_estimate(zero_cloud()) == 0.0
    with pytest.raises(NotAGraph):
        lipschitz_estimate(sample())


def test_paratingent_examples(flowed_25):
    raw = paratingent_vertical_test(sample())
    assert raw.vertical and abs(raw.location[0] - 0.5) < 0.02
    smooth = paratingent_vertical_test(flowed_25)
    assert not smooth.vertical
    assert smooth.max_slope_by_scale[0.01] == pytest.approx(4.0, abs=0.1)
    flat = paratingent_vertical_test(zero_cloud())
    assert all(v in (0.0, None) for v in flat.max_slope_by_scale.values())


# exactness ------------------------------------------------------------------


def test_exactness_examples(flowed_25):
    assert abs(exactness_test(flowed_25)[0]) <= 1e-3
    section = cloud_to_section(flowed_25, 256)
    assert abs(exactness_test(section)[0]) <= 1e-3
    one = SectionSamples(64, 1, np.zeros(64), covectors=np.ones((64, 1)))
    assert exactness_test(one)[0] == pytest.approx(1.0, abs=1e-12)
    assert not is_exact(exactness_test(one), 64)
    assert exactness_test(zero_cloud())[0] == 0.0
    with pytest.raises(NotAGraph):
        exactness_test(sample())


def test_exactness_two_dimensional():
    cov = np.zeros((16, 16, 2))
    cov[..., 1] = 1.0
    out = exactness_test(SectionSamples(16, 2, np.zeros((16, 16)), covectors=cov))
    np.testing.assert_allclose(out, [0.0, 1.0])
    cloud = flow_cloud(make_hamiltonian("free", 2), sample(make_function("two_parabolas", 2), 48, 4), -0.2)
    assert graph_test(cloud, 16).is_graph
    assert np.max(np.abs(exactness_test(cloud, 16, grid_n=32))) <= 5 / 32


# semigroup identity ---------------------------------------------------------


def test_compare_examples(flowed_25):
    sec = positive_semigroup(U2P, FREE, 0.25, 256)
    sup = compare_with_semigroup(flowed_25, sec)
    assert sup <= 0.02 and sup <= 3 / 256
    z = positive_semigroup(make_function("zero"), FREE, 0.25, 64)
    assert compare_with_semigroup(flow_cloud(FREE, zero_cloud(), -0.25), z) == 0.0
    u = make_function("cosine", a=0.2)
    smooth = compare_with_semigroup(flow_cloud(FREE, sample(u, 256, 3), -0.05), positive_semigroup(u, FREE, 0.05, 256))
    assert smooth <= 0.02


def test_compare_errors(flowed_25):
    sec = positive_semigroup(U2P, FREE, 0.2, 64)
    with pytest.raises(GridMismatch):
        compare_with_semigroup(flowed_25, sec)
    with pytest.raises(NotAGraph):
        compare_with_semigroup(flow_cloud(FREE, sample(), 0.0),
                               SectionSamples(64, 1, np.zeros(64), t=0.0, covectors=np.zeros((64, 1))))


# breakdown ------------------------------------------------------------------


def test_epsilon_formulas():
    assert epsilon_bound(0.5, 1.0, 1.0) == (0.125, 0.125)
    stated, derived = epsilon_bound(2.0, 1.0, 2.0)
    assert stated == pytest.approx(2 / 16) and derived == pytest.approx(1 / 128)
    assert epsilon_bound(0.0, 1.0, 1.0) == (0.0, math.inf)


def test_breakdown_two_parabolas():
    r = breakdown_time(FREE, U2P)
    assert r.t_star_measured == pytest.approx(1.0, abs=1e-3)
    assert (r.c, r.C, r.K) == (1.0, 1.0, 0.5)
    assert r.epsilon_paper == r.epsilon_derived == 0.125
    assert r.bound_ok and r.breakdown_found


def test_breakdown_cosine():
    r = breakdown_time(FREE, make_function("cosine", a=0.2))
    assert r.t_star_measured == pytest.approx(1 / (0.2 * 4 * math.pi**2), abs=1e-3)
    assert r.bracket[0] <= r.t_star_measured <= r.bracket[1]


def test_breakdown_absent_for_zero():
    with pytest.raises(NoBreakdownInRange) as info:
        breakdown_time(FREE, make_function("zero"), t_hi=1.0)
    assert info.value.result.t_star_measured == 1.0
    assert not info.value.result.breakdown_found
    with pytest.raises(ValueError):
        breakdown_time(FREE, U2P, t_lo=0.5, t_hi=0.1)


@pytest.mark.parametrize("hname", ["free", "pendulum", "quartic"])
@pytest.mark.parametrize("uname,params", [("two_parabolas", {}), ("cosine", {"a": 0.2}),
                                          ("random_quadratics", {"n": 3, "seed": 0})])
def test_graph_at_safe_scale(hname, uname, params):
    H = make_hamiltonian(hname)
    u = make_function(uname, **params)
    cloud = sample(u, 256, 9)
    c, C = hessian_bounds(H, CompactTube(max(1.0, float(np.abs(cloud.p).max()))))
    _, eps = epsilon_bound(u.K, c, C)
    for t in (0.25 * eps, 0.5 * eps):
        flowed = flow_cloud(H, cloud, -t)
        assert graph_test(flowed).is_graph
        assert surjectivity_test(flowed) == 1.0


# report ---------------------------------------------------------------------


def test_report_serialization():
    r = VerificationReport(config={"b": "2", "a": "1"})
    r.add("one", True, 0.5, {"x": np.float64(1.5), "arr": np.arange(2)})
    r.add("two", False, 1.0, {"inf": math.inf}, control=True)
    r.timestamps["started"] = "now"
    text = r.to_json(include_timestamps=False)
    data = json.loads(text)
    assert "timestamps" not in data and data["passed"] is True
    assert data["checks"][1]["details"]["inf"] == "inf"
    assert list(data["config"]) == ["a", "b"]
    assert "timestamps" in json.loads(r.to_json())
    with pytest.raises(ValueError):
        r.add("one", True, 0.0)
    r.add("three", False, -1.0)
    assert r.failures() == ["three"] and not r.passed
    assert "FAIL" in r.summary()
