import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import binom

from salab import (DomainError, MultichainError, NoiseModel, StepSchedule, UnknownStateError,
                   run_sa_batch)
from salab.convex import VectorField
from salab.engine import SATrajectory
from salab.markov import (MarkovModel, OccupationMeasure, StationaryPolicy, audit_B1, audit_B2,
                          audit_B3, empirical_occupation, hat_h_eval, invariant_measure,
                          occupation_measure, occupation_vertices, policy_kernel,
                          recurrent_classes, sample_step, tilde_h, total_variation)

P2 = np.array([[0.9, 0.1], [0.2, 0.8]])


def eig_oracle(P):
    """Left Perron vector via a dense eigendecomposition."""
    w, V = np.linalg.eig(P.T)
    v = np.real(V[:, np.argmin(np.abs(w - 1))])
    return v / v.sum()


def controlled_2x2():
    K = np.zeros((2, 2, 2))
    K[0, 0] = [0.9, 0.1]
    K[0, 1] = [0.3, 0.7]
    K[1, 0] = [0.6, 0.4]
    K[1, 1] = [0.2, 0.8]
    return MarkovModel(K)


# --- construction -------------------------------------------------------------------


def test_row_sum_rejected():
    with pytest.raises(DomainError, match="row sum"):
        MarkovModel.uncontrolled([[0.5, 0.4], [0.5, 0.5]])


def test_parametric_kernel_blend():
    P0 = np.array([[1.0, 0.0], [0.0, 1.0]])
    P1 = np.array([[0.0, 1.0], [1.0, 0.0]])
    m = MarkovModel(P0, P1, [1.0, 0.0])
    assert np.allclose(m.kernel_at([0.25, 9.0])[:, 0], 0.75 * P0 + 0.25 * P1)
    assert np.allclose(m.kernel_at([-3.0, 0.0])[:, 0], P0)
    assert np.allclose(m.kernel_at([7.0, 0.0])[:, 0], P1)
    assert m.depends_on_x


def test_audit_B_static_and_sampled(rng):
    m = MarkovModel(np.full((2, 1, 2), 0.5), [[[0.9, 0.1]], [[0.2, 0.8]]], [0.3, -0.2])
    assert audit_B1(m, 2, rng=rng).passed
    assert audit_B2(m).passed and audit_B3(m).passed
    assert audit_B3(m).justification


# --- sampling -----------------------------------------------------------------------


def test_sample_step_point_mass():
    m = MarkovModel.uncontrolled([[0, 1, 0], [0, 0, 1], [1, 0, 0]])
    for seed in range(20):
        assert sample_step(m, 0, 0, None, np.random.default_rng(seed)) == 1


def test_sample_step_uniform_frequency():
    m = MarkovModel.uncontrolled([[0.5, 0.5], [0.5, 0.5]])
    rng = np.random.default_rng(3)
    n = 100_000
    ones = sum(sample_step(m, 0, 0, None, rng) for _ in range(n))
    # a fixed 0.01 tolerance and a 1e-6 two-sided binomial band
    assert abs(ones / n - 0.5) <= 0.01
    lo, hi = binom.ppf([5e-7, 1 - 5e-7], n, 0.5)
    assert lo <= ones <= hi


def test_sample_step_ignores_x_when_constant():
    m = MarkovModel.uncontrolled(P2)
    a = sample_step(m, 0, 0, np.zeros(2), np.random.default_rng(5))
    b = sample_step(m, 0, 0, np.array([1.0, 0.0]), np.random.default_rng(5))
    assert a == b


def test_sample_step_bad_index():
    m = MarkovModel.uncontrolled(P2)
    with pytest.raises(UnknownStateError):
        sample_step(m, 2, 0, None, np.random.default_rng(0))
    with pytest.raises(DomainError):
        sample_step(m, 0, 1, None, np.random.default_rng(0))


# --- chains ---------------------------------------------------------------------------


def test_policy_kernel_examples(rng):
    m = MarkovModel.uncontrolled(P2)
    assert np.array_equal(policy_kernel(m, StationaryPolicy.uniform(2, 1)), P2)
    K = np.zeros((2, 2, 2))
    K[:, 0] = [1, 0]
    K[:, 1] = [0, 1]
    mix = policy_kernel(MarkovModel(K), StationaryPolicy.uniform(2, 2))
    assert np.allclose(mix, 0.5)
    R = rng.random((3, 2, 3))
    R /= R.sum(-1, keepdims=True)
    pol = rng.random((3, 2))
    pol /= pol.sum(-1, keepdims=True)
    Pk = policy_kernel(MarkovModel(R), StationaryPolicy(pol))
    assert np.max(np.abs(Pk.sum(1) - 1)) <= 1e-12


def test_invariant_measure_examples():
    assert np.allclose(invariant_measure([[0.5, 0.5], [0.5, 0.5]]), [0.5, 0.5])
    eta = invariant_measure(P2)
    assert np.max(np.abs(eta - [2 / 3, 1 / 3])) <= 1e-10
    with pytest.raises(MultichainError) as info:
        invariant_measure(np.eye(2))
    assert sorted(info.value.classes) == [[0], [1]]


def test_transient_states_get_zero_mass():
    P = np.array([[0.0, 0.5, 0.5], [0.0, 0.3, 0.7], [0.0, 0.6, 0.4]])
    assert recurrent_classes(P) == [[1, 2]]
    eta = invariant_measure(P)
    assert eta[0] == pytest.approx(0.0, abs=1e-14)
    assert np.allclose(eta, eig_oracle(P))


def test_periodic_chain():
    P = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert np.allclose(invariant_measure(P), [0.5, 0.5])


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2 ** 31))
def test_invariant_measure_matches_eigenvector(n, seed):
    rng = np.random.default_rng(seed)
    P = rng.random((n, n)) + 0.01
    P /= P.sum(1, keepdims=True)
    eta = invariant_measure(P)
    assert np.abs(eta @ P - eta).sum() <= 1e-10
    assert np.allclose(eta, eig_oracle(P), atol=1e-9)


def test_occupation_measure_examples():
    m = MarkovModel.uncontrolled(P2)
    nu = occupation_measure(m, StationaryPolicy.uniform(2, 1))
    assert np.allclose(nu.weights[:, 0], [2 / 3, 1 / 3])
    u = MarkovModel(np.full((2, 2, 2), 0.5))
    assert np.allclose(occupation_measure(u, StationaryPolicy.uniform(2, 2)).weights, 0.25)
    K = np.stack([P2, np.full((2, 2), 0.5)], axis=1)
    nu = occupation_measure(MarkovModel(K), StationaryPolicy.deterministic([0, 0], 2))
    assert np.allclose(nu.weights, [[2 / 3, 0], [1 / 3, 0]])


def test_occupation_vertices_match_per_policy_solves():
    m = controlled_2x2()
    verts = occupation_vertices(m)
    assert len(verts) == m.nU ** m.nS == 4
    for nu in verts:
        K = m.kernel[np.arange(2), list(nu.policy)]
        eta = eig_oracle(K)
        assert np.allclose(nu.marginal, eta, atol=1e-12)
        Pphi = policy_kernel(m, StationaryPolicy.deterministic(nu.policy, 2))
        assert np.abs(nu.marginal @ Pphi - nu.marginal).sum() <= 1e-9
    assert len(occupation_vertices(MarkovModel.uncontrolled(P2))) == 1


def test_occupation_vertices_names_multichain_policy():
    K = np.zeros((2, 2, 2))
    K[0, 0] = [1, 0]
    K[0, 1] = [0.5, 0.5]
    K[1, 0] = [0.5, 0.5]
    K[1, 1] = [0, 1]
    with pytest.raises(MultichainError) as info:
        occupation_vertices(MarkovModel(K))
    assert info.value.policy == (0, 1)


# --- averaged drifts ----------------------------------------------------------------


def test_tilde_h_examples(rng):
    A = rng.standard_normal((3, 2, 2))
    b = rng.standard_normal((3, 2))
    f = VectorField.affine(A, b)
    x = rng.standard_normal(2)
    point = OccupationMeasure(np.eye(3)[1])
    assert np.allclose(tilde_h(f, x, point), f(x, 1))
    eta = rng.dirichlet(np.ones(3))
    nu = OccupationMeasure(eta)
    Abar = np.einsum("y,yij->ij", eta, A)
    bbar = eta @ b
    assert np.allclose(tilde_h(f, x, nu), Abar @ x + bbar)
    assert np.allclose(tilde_h(f, np.zeros(2), nu), bbar)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0, 1))
def test_tilde_h_affine_in_measure(seed, lam):
    rng = np.random.default_rng(seed)
    f = VectorField.affine(rng.standard_normal((3, 2, 2)), rng.standard_normal((3, 2)))
    x = rng.standard_normal(2)
    n1, n2 = (OccupationMeasure(rng.dirichlet(np.ones(3))) for _ in range(2))
    mix = OccupationMeasure(lam * n1.weights + (1 - lam) * n2.weights)
    assert np.allclose(tilde_h(f, x, mix), lam * tilde_h(f, x, n1) + (1 - lam) * tilde_h(f, x, n2))


def test_hat_h_uncontrolled_is_singleton(td_family, td_chain):
    f = td_family.field()
    x = np.array([0.3, -1.0])
    H = hat_h_eval(f, td_chain, x)
    eta = eig_oracle(td_chain.kernel[:, 0])
    assert len(H.generators) == 1
    assert np.allclose(H.generators[0], np.diag([-1, -2]) @ x + eta @ td_family.arrays()[1])


def test_hat_h_two_policies():
    m = MarkovModel(np.stack([np.stack([P2[0], [0.5, 0.5]]), np.stack([P2[1], P2[1]])]))
    f = VectorField.affine([np.zeros((1, 1))] * 2, [[1.0], [-1.0]])
    H = hat_h_eval(f, m, [0.0])
    expected = set()
    for choice in itertools.product(range(2), repeat=2):
        eta = eig_oracle(m.kernel[np.arange(2), list(choice)])
        expected.add(round(float(eta @ [1.0, -1.0]), 12))
    assert {round(float(g[0]), 12) for g in H.generators} == expected
    assert len(expected) == 2


def test_hat_h_bound(rng):
    m = controlled_2x2()
    f = VectorField.affine(rng.standard_normal((2, 2, 2)), rng.standard_normal((2, 2)))
    for _ in range(10):
        x = rng.standard_normal(2) * 10
        for g in hat_h_eval(f, m, x).generators:
            assert np.linalg.norm(g) <= f.bound_K * (1 + np.linalg.norm(x)) + 1e-12


# --- empirical measures -------------------------------------------------------------


def _traj(ys, zs, steps):
    n = len(steps)
    return SATrajectory(np.zeros((n + 1, 1)), np.asarray(ys), np.asarray(zs), np.zeros((n, 1)),
                        np.asarray(steps, float), np.concatenate([[0.0], np.cumsum(steps)]),
                        n_states=2, n_controls=2)


def test_empirical_occupation_small_cases():
    tr = _traj([1, 1, 1, 1], [0, 0, 0], [0.5, 0.5, 0.5])
    assert np.allclose(empirical_occupation(tr, 0.0, 1.5).weights, [[0, 0], [1, 0]])
    tr = _traj([0, 1, 0], [1, 0], [0.25, 0.25])
    assert np.allclose(empirical_occupation(tr, 0.0, 0.5).weights, [[0, 0.5], [0.5, 0]])
    with pytest.raises(DomainError):
        empirical_occupation(tr, 0.3, 0.3)


def test_empirical_occupation_converges_to_eta():
    m = MarkovModel.uncontrolled(P2)
    f = VectorField.affine([np.zeros((1, 1))] * 2, [[0.0], [0.0]])
    eta = invariant_measure(P2)
    lengths = (100, 1_000, 100_000)
    # unit steps (alpha is clamped to a(n) = 1): time weighting is uniform across the run
    trs = run_sa_batch(f, m, StationaryPolicy.uniform(2, 1), StepSchedule("harmonic", 1e9), NoiseModel(),
                       N=lengths[-1], seeds=range(10))
    tvs = np.array([[total_variation(empirical_occupation(tr, 0.0, tr.times[n]).marginal, eta) for n in lengths]
                    for tr in trs])
    assert tvs[:, -1].max() <= 0.02
    mean = tvs.mean(axis=0)
    assert mean[0] > mean[1] > mean[2]


def test_B2_rejects_multichain():
    rep = audit_B2(MarkovModel.uncontrolled(np.eye(2)))
    assert not rep.passed
    assert rep.witness["classes"] == [[0], [1]]
    # mixing at lam = 0 and in between, two closed classes only at lam = 1
    blend = MarkovModel(np.full((2, 1, 2), 0.5), [[[1.0, 0.0]], [[0.0, 1.0]]], [0.3, -0.2])
    rep = audit_B2(blend)
    assert not rep.passed and rep.details["kernel"] == "lam=1"
    K = np.zeros((2, 2, 2))
    K[:, 0] = [[0.9, 0.1], [0.2, 0.8]]
    K[:, 1] = [[1.0, 0.0], [0.0, 1.0]]
    assert not audit_B2(MarkovModel(K)).passed
