import csv

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from salab import BlowUpError, ConvexSet, DomainError, EstimationFailed, distance_to_set
from salab.di import (BARYCENTRIC, VERTEX_RANDOM, LinearHullMap, SelectionRule, default_dt,
                      estimate_T_epsilon, flow_bundle, integrate_di, limit_set_estimate,
                      lyapunov_decrease_audit, verify_S2, write_bundle_csv)
from salab.td import LyapunovCandidate, lyapunov_matrix

ALL_RULES = [BARYCENTRIC, VERTEX_RANDOM, SelectionRule("fixed-vertex", 0), SelectionRule("fixed-vertex", 1),
             SelectionRule("custom-weights", weights=(0.2, 0.8))]
J = np.array([[0.0, 1.0], [-1.0, 0.0]])


def square(x):
    return ConvexSet(np.asarray(x) ** 2)


# --- integrate_di -------------------------------------------------------------------


def test_exponential_decay():
    c = integrate_di(linear_hull([[-1.0]]), [1.0], 1e-4, 1.0)
    assert c.terminal[0] == pytest.approx(np.exp(-1), abs=1e-3)
    assert c.times[-1] == pytest.approx(1.0)


def linear_hull(*mats):
    return LinearHullMap([np.asarray(m, float) for m in mats])


def test_zero_rhs_constant():
    c = integrate_di(linear_hull([[0.0, 0.0], [0.0, 0.0]]), [0.3, -2.0], 1e-2, 1.0)
    assert np.all(c.states == [0.3, -2.0])


@pytest.mark.parametrize("rule", ALL_RULES, ids=str)
def test_hull_sandwich(rule):
    c = integrate_di(linear_hull([[-1.0]], [[-2.0]]), [1.0], 1e-4, 1.0, rule=rule,
                     rng=np.random.default_rng(3))
    x1 = c.terminal[0]
    assert np.exp(-2) - 1e-3 <= x1 <= np.exp(-1) + 1e-3


def test_fixed_vertex_selects_generator():
    rhs = linear_hull([[-1.0]], [[-2.0]])
    lo = integrate_di(rhs, [1.0], 1e-4, 1.0, rule=SelectionRule("fixed-vertex", 1)).terminal[0]
    hi = integrate_di(rhs, [1.0], 1e-4, 1.0, rule=SelectionRule("fixed-vertex", 0)).terminal[0]
    assert lo == pytest.approx(np.exp(-2), abs=1e-3)
    assert hi == pytest.approx(np.exp(-1), abs=1e-3)


def test_blowup_reported_with_time():
    with pytest.raises(BlowUpError) as info:
        integrate_di(square, [1.0], 1e-3, 5.0)
    assert 1.0 < info.value.time < 5.0


def test_bad_step():
    with pytest.raises(DomainError):
        integrate_di(linear_hull([[-1.0]]), [1.0], 2.0, 1.0)
    with pytest.raises(DomainError):
        integrate_di(linear_hull([[-1.0]]), [1.0], 0.0, 1.0)


def test_rule_validation():
    with pytest.raises(DomainError):
        SelectionRule("nearest")
    with pytest.raises(DomainError):
        SelectionRule("custom-weights", weights=(-1.0, 2.0))
    with pytest.raises(DomainError):
        SelectionRule("custom-weights", weights=(1.0, 1.0, 1.0)).select(ConvexSet([[0.0], [1.0]]))


@settings(max_examples=60, deadline=None)
@given(arrays(float, st.tuples(st.integers(1, 6), st.integers(1, 3)), elements=st.floats(-100, 100)),
       st.sampled_from(ALL_RULES[:3] + [SelectionRule("fixed-vertex", 7)]), st.integers(0, 99))
def test_selection_feasible(G, rule, seed):
    S = ConvexSet(G)
    v = rule.select(S, np.random.default_rng(seed))
    assert distance_to_set(v, S) <= 1e-9


def test_singleton_matches_reference_euler():
    M = np.array([[-1.0, 3.0], [-0.5, -2.0]])
    dt, steps = 1e-3, 2000
    x = np.array([1.0, -1.0])
    ref = [x]
    for _ in range(steps):
        x = x + dt * (M @ x)
        ref.append(x)
    c = integrate_di(linear_hull(M), [1.0, -1.0], dt, dt * steps)
    assert np.array_equal(c.states, np.array(ref))


def test_first_order_convergence():
    M = np.diag([-1.0, -2.0])
    x0 = np.array([1.0, 1.0])
    exact = scipy.linalg.expm(M) @ x0
    errs = [np.linalg.norm(integrate_di(linear_hull(M), x0, dt, 1.0).terminal - exact)
            for dt in (1e-2, 1e-3, 1e-4)]
    for a, b in zip(errs, errs[1:]):
        assert 10 / 1.5 <= a / b <= 10 * 1.5


def test_norm_decay_under_common_lyapunov():
    # <u, x> = -||x||^2 for both generators
    rhs = linear_hull(-np.eye(2), J - np.eye(2))
    for rule in (VERTEX_RANDOM, BARYCENTRIC, SelectionRule("fixed-vertex", 1)):
        c = integrate_di(rhs, [3.0, -4.0], 1e-3, 3.0, rule=rule, rng=np.random.default_rng(1))
        norms = np.linalg.norm(c.states, axis=1)
        assert np.all(np.diff(norms) < 0)


# --- bundles ------------------------------------------------------------------------


def test_singleton_bundle_identical_across_rules():
    b = flow_bundle(linear_hull([[-1.0, 0.5], [0.0, -1.0]]), [[1.0, 2.0]], 1e-3, 1.0, rules=ALL_RULES[:4],
                    replicates=2)
    assert len(b.curves) == 8
    for c in b.curves[1:]:
        assert np.array_equal(c.states, b.curves[0].states)


def boundary_points(n=16):
    th = 2 * np.pi * np.arange(n) / n
    return np.c_[np.cos(th), np.sin(th)]


@pytest.mark.parametrize("M", [np.diag([-1.0, -2.0]), np.array([[-1.0, 1.0], [-1.0, -1.0]])])
def test_hurwitz_bundle_contracts(M):
    lam = np.abs(np.max(np.linalg.eigvals(M).real))
    b = flow_bundle(linear_hull(M), boundary_points(), 1e-3, 2 / lam, rules=[BARYCENTRIC, VERTEX_RANDOM])
    assert np.all(b.terminal_norms() < b.start_norms())
    assert not b.blowups


def test_unstable_bundle_grows():
    b = flow_bundle(linear_hull(np.diag([1.0, -1.0])), boundary_points(), 1e-3, 2.0)
    assert np.any(b.terminal_norms() > b.start_norms())
    assert b.max_norm()[-1] == pytest.approx(np.exp(2), rel=1e-2)


def test_bundle_blowups_recorded():
    b = flow_bundle(square, [[0.5], [-0.5]], 1e-3, 5.0)
    assert [i for i, _ in b.blowups] == [0]
    assert b.curves[0].blew_up_at is not None and b.curves[1].blew_up_at is None
    assert np.all(np.isfinite(b.curves[0].states))


def test_batch_path_matches_generic_path():
    rhs = linear_hull(-np.eye(2), J - 0.5 * np.eye(2), np.array([[-2.0, 0.0], [1.0, -1.0]]))
    generic = lambda x: rhs(x)  # noqa: E731  no generators_batch, forces per-curve evaluation
    pts = boundary_points(6)
    rules = [BARYCENTRIC, VERTEX_RANDOM, SelectionRule("custom-weights", weights=(1.0, 2.0, 3.0))]
    a = flow_bundle(rhs, pts, 1e-2, 2.0, rules, rng=np.random.default_rng(5))
    b = flow_bundle(generic, pts, 1e-2, 2.0, rules, rng=np.random.default_rng(5))
    for ca, cb in zip(a.curves, b.curves):
        assert np.allclose(ca.states, cb.states, rtol=1e-12, atol=1e-14)


def test_bundle_deterministic():
    rhs = linear_hull(-np.eye(2), J - np.eye(2))
    a = flow_bundle(rhs, boundary_points(4), 1e-2, 1.0, [VERTEX_RANDOM], rng=np.random.default_rng(9))
    b = flow_bundle(rhs, boundary_points(4), 1e-2, 1.0, [VERTEX_RANDOM], rng=np.random.default_rng(9))
    assert all(np.array_equal(x.states, y.states) for x, y in zip(a.curves, b.curves))


def test_bundle_empty_inputs():
    with pytest.raises(DomainError):
        flow_bundle(linear_hull([[-1.0]]), np.empty((0, 1)), 1e-2, 1.0)
    with pytest.raises(DomainError):
        flow_bundle(linear_hull([[-1.0]]), [[1.0]], 1e-2, 1.0, rules=[])


def test_bundle_csv(tmp_path):
    b = flow_bundle(linear_hull(-np.eye(2)), boundary_points(3), 0.1, 1.0)
    write_bundle_csv(b, tmp_path / "b.csv", stride=5)
    rows = list(csv.reader(open(tmp_path / "b.csv")))
    assert rows[0] == ["curve_id", "t", "x_0", "x_1"]
    assert len(rows) == 1 + 3 * 3
    assert float(rows[2][1]) == pytest.approx(0.5)


def test_default_dt():
    assert default_dt(0.0) == 1e-3
    assert default_dt(9.0) == pytest.approx(1e-4)


# --- T(eps) -------------------------------------------------------------------------


def test_T_epsilon_unit_rate():
    raw = estimate_T_epsilon(linear_hull([[-1.0]]), [[0.0]], 1.0, 0.1, 1e-3, safety=0.0)
    assert raw == pytest.approx(np.log(10), abs=0.1)
    assert estimate_T_epsilon(linear_hull([[-1.0]]), [[0.0]], 1.0, 0.1, 1e-3) == pytest.approx(1.25 * raw)


def test_T_epsilon_rate_two():
    raw = estimate_T_epsilon(linear_hull(-2 * np.eye(2)), [[0.0, 0.0]], 1.0, 0.1, 1e-3, safety=0.0)
    assert raw == pytest.approx(np.log(10) / 2, abs=0.05)


def test_T_epsilon_already_inside():
    assert estimate_T_epsilon(linear_hull([[-1.0]]), [[0.0]], 1.0, 1.0, 1e-2) == 0.0
    assert estimate_T_epsilon(linear_hull([[-1.0]]), [[0.0]], 1.0, 3.0, 1e-2) == 0.0


def test_T_epsilon_antitone():
    rhs = linear_hull(-np.eye(2), J - 0.5 * np.eye(2))
    Ts = [estimate_T_epsilon(rhs, [[0.0, 0.0]], 1.0, eps, 1e-2, rng=np.random.default_rng(4), horizon=30.0)
          for eps in (0.02, 0.05, 0.1, 0.3, 0.7)]
    assert all(a >= b for a, b in zip(Ts, Ts[1:]))


def test_T_epsilon_fails_on_expanding_flow():
    with pytest.raises(EstimationFailed):
        estimate_T_epsilon(linear_hull([[1.0]]), [[0.0]], 1.0, 0.1, 1e-2, horizon=5.0)
    with pytest.raises(DomainError):
        estimate_T_epsilon(linear_hull([[-1.0]]), [[0.0]], 1.0, 0.0, 1e-2)


# --- limit sets ---------------------------------------------------------------------


def test_limit_set_decay():
    b = flow_bundle(linear_hull(-np.eye(2)), 3 * boundary_points(8), 1e-2, 20.0)
    pts = limit_set_estimate(b)
    assert np.all(np.linalg.norm(pts, axis=1) <= 1e-3)


def test_limit_set_constant_curve():
    b = flow_bundle(linear_hull(np.zeros((2, 2))), [[0.4, -0.1]], 1e-2, 1.0)
    assert np.allclose(limit_set_estimate(b), [[0.4, -0.1]])


def test_limit_set_rotation():
    r0 = 1.5
    b = flow_bundle(linear_hull(J), [[r0, 0.0]], 1e-3, 4 * np.pi)
    pts = limit_set_estimate(b, tol=1e-2)
    assert len(pts) > 10
    assert np.allclose(np.linalg.norm(pts, axis=1), r0, rtol=1e-2)
    t = b.times
    exact = r0 * np.c_[np.cos(t), -np.sin(t)]
    assert np.max(np.linalg.norm(b.curves[0].states - exact, axis=1)) <= 1e-2 * r0


def test_limit_set_bad_fraction():
    b = flow_bundle(linear_hull([[-1.0]]), [[1.0]], 1e-2, 1.0)
    with pytest.raises(DomainError):
        limit_set_estimate(b, tail_fraction=1.0)
    short = flow_bundle(linear_hull([[-1.0]]), [[1.0]], 0.1, 1.0)
    with pytest.raises(DomainError):
        limit_set_estimate(short, tail_fraction=0.5)


# --- S2 and Lyapunov audits ---------------------------------------------------------


def test_S2_hurwitz_passes():
    assert verify_S2(linear_hull(np.diag([-1.0, -2.0])), [[0.0, 0.0]], 1e-2).passed


def test_S2_candidate_outside_ball():
    rep = verify_S2(linear_hull(-np.eye(2)), [[1.5, 0.0]], 1e-2)
    assert not rep.passed and not rep.clauses["i"].passed


def test_S2_unstable_fails_ii():
    rep = verify_S2(linear_hull([[1.0]]), [[0.0]], 1e-2, horizon=5.0)
    assert rep.clauses["i"].passed and not rep.clauses["ii"].passed
    assert "estimation_failed" in rep.clauses["ii"].witness


def test_lyapunov_norm_on_contraction():
    rep = lyapunov_decrease_audit(linear_hull([[-1.0]]), LyapunovCandidate("norm"), region_radius=2.0,
                                  zero_set=[[0.0]])
    assert rep.passed, rep.to_dict()


def test_lyapunov_constant_V_fails():
    rep = lyapunov_decrease_audit(linear_hull(-np.eye(2)), lambda x: 1.0, zero_set=[[0.0, 0.0]], horizon=0.5)
    assert not rep.passed
    assert not rep.clauses["iii"].passed
    assert rep.clauses["iii"].witness["V_t"] == 1.0


def test_lyapunov_quadratic_for_hurwitz():
    M = np.array([[-0.5, 3.0], [-1.0, -0.5]])
    P = lyapunov_matrix(M)
    assert np.linalg.eigvalsh(M.T @ P + P @ M).max() < 0
    rep = lyapunov_decrease_audit(linear_hull(M), LyapunovCandidate("quadratic", P=P), region_radius=2.0,
                                  zero_set=[[0.0, 0.0]], horizon=2.0)
    assert rep.passed, rep.to_dict()
