import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from srot.bounds import (
    THEOREM_PARITY,
    bound_report,
    check_parity,
    compute_c1_c2,
    compute_c3,
    compute_R,
    compute_U,
    dual_gap_bound,
    dual_norm_cap,
    functional_gap_bound,
    functional_gap_bound_at,
    geometric_term,
    log_ratio_bound,
    marginal_gap_asymptote,
    marginal_gap_bound_general,
    marginal_gap_bound_simplex,
    marginal_gap_log_b_bound,
    ot_gap_asymptote,
    ot_gap_bound,
    prescribe_functional_gap,
    prescribe_marginal_gap,
    prescribe_ot_gap,
    simplex_dual_cap,
    stopping_iteration,
    unregularized_marginal_bound,
)
from srot.core import ParityError, ProblemInstance, SimplexError, generate_instance
from srot.exact import solve_ot_exact
from srot.rounding import round_to_polytope
from srot.solvers import SolverConfig, sr_sinkhorn

U50 = np.full(50, 1 / 50)


def cost_with_norm(n, cinf, seed=0):
    C = np.random.default_rng(seed).uniform(0, cinf, (n, n))
    C[0, 0] = cinf
    return C


# hand-derived values, frozen


def test_R_worked_example():
    C = cost_with_norm(50, 10.0)
    assert compute_R(U50, U50, C, 0.01) == pytest.approx(1000.0, rel=1e-12)


def test_R_large_eta_branch():
    a = np.array([0.1, 0.9])
    C = np.ones((2, 2))
    assert compute_R(a, a, C, 1e9) == pytest.approx(abs(math.log(0.1)) + math.log(2), rel=1e-12)


def test_R_unnormalized_ones_has_no_log_term():
    C = np.full((3, 3), 30.0)
    assert compute_R(np.ones(3), np.ones(3), C, 1.0) == pytest.approx(30 - math.log(3))


def test_c1_worked_example():
    c1, c2 = compute_c1_c2(50, 0.3, 0.3, 1000.0, 1.0)
    assert c1 == pytest.approx(200001.0, rel=1e-15)
    assert c2 == pytest.approx(2 * math.log(50))


def test_c2_hand_values():
    assert compute_c1_c2(math.e, 1, 1, 1, 1.0)[1] == pytest.approx(2.0)
    # c2 = 2 beta log n is linear in beta
    _, c2a = compute_c1_c2(7, 1, 1, 1, 1.0)
    _, c2b = compute_c1_c2(7, 1, 1, 1, 3.0)
    assert c2b == pytest.approx(3 * c2a)


def test_log_b_bound_at_three_with_equal_tau_eta():
    assert marginal_gap_log_b_bound(3, 0.5, 0.5, 7.0) == pytest.approx(28.0, rel=1e-15)
    assert log_ratio_bound(4, 0.5, 0.5, 7.0) == pytest.approx(28.0 * math.sqrt(0.5), rel=1e-14)


def test_uniform_c3_is_log_n():
    for n in (2, 10, 50):
        u = np.full(n, 1 / n)
        assert compute_c3(n, u, u) == pytest.approx(math.log(n), rel=1e-12)


def test_uniform_U_is_cost_norm():
    C = cost_with_norm(50, 10.0)
    assert compute_U(C, 0.37, U50) == pytest.approx(10.0, rel=1e-15)
    assert simplex_dual_cap(C, 3.0, 1.0, U50) == pytest.approx(7.5, rel=1e-15)


def test_marginal_asymptote_order_for_the_experiment_setup():
    p = generate_instance(50, seed=7)
    U = compute_U(p.cost, 0.01, p.a)
    expected = (p.C.max() + 0.01 * math.log(p.a.weights.max() / p.a.weights.min())) / (1e6 + 0.01)
    assert marginal_gap_asymptote(1e6, 0.01, U) == pytest.approx(expected, rel=1e-14)
    assert 1e-6 < expected < 1e-4


def test_unregularized_bound_arithmetic():
    C = cost_with_norm(50, 10.0)
    assert unregularized_marginal_bound(50, C, 1e6) == pytest.approx(5e-4, rel=1e-15)


def test_stopping_iteration_hand_evaluation():
    a = np.array([0.5, 0.5])
    C = np.array([[0.0, 1.0], [1.0, 0.0]])
    eps, tau, beta = 1.0, 1.0, 1.0
    l2 = math.log(2)
    c2 = 2 * l2
    eta = eps / (2 * c2)  # 1 / (4 log 2)
    R = l2 + (1 / eta - l2)  # 4 log 2
    c1 = 2 * 2 * (tau + eta) * R / tau + 1
    rhs = 2 * (1 + 2 * c2 * tau / eps) * (math.log(16 * tau * R) + math.log(c2 * (2 + tau * c1)) + 0) + 3
    pres = prescribe_functional_gap(eps, tau, a, a, C)
    assert pres["eta"] == pytest.approx(eta)
    assert pres["R"] == pytest.approx(4 * l2)
    assert pres["c1"] == pytest.approx(c1)
    assert stopping_iteration(eps, tau, pres["R"], pres["c1"], pres["c2"], C, beta) == math.ceil(rhs)


# prescriptions reproduce their targets


@pytest.mark.parametrize("eps", [1.0, 0.3, 0.05])
def test_functional_gap_prescription_is_tight(eps):
    p = generate_instance(20, 1, 100, 1, 10, seed=1)
    d = prescribe_functional_gap(eps, 10.0, p.a, p.b, p.cost)
    val = functional_gap_bound(d["epsilon_prime"], 10.0, d["eta"], p.cost, d["c1"], d["c2"], p.beta)
    assert val == pytest.approx(eps, rel=1e-12)


def test_marginal_gap_prescription_small_branch():
    a = np.array([0.1, 0.2, 0.3, 0.4])
    C = np.array([[1.0, 2], [3, 4]]).repeat(2, 0).repeat(2, 1)
    L = math.log(4)
    eps_c, eta = 0.5, 0.01
    d = prescribe_marginal_gap(eps_c, C, eta, a)
    assert d["branch"] == "small-epsilon"
    assert d["tau"] == pytest.approx(2 * 4 / eps_c + eta * (2 * L / eps_c - 1))
    assert d["epsilon_prime"] == eps_c / 2
    # eps' plus the asymptotic term stays within eps_c
    assert d["epsilon_prime"] + marginal_gap_asymptote(d["tau"], eta, compute_U(C, eta, a)) <= eps_c + 1e-12


def test_marginal_gap_prescription_branch_boundary_and_large_branch():
    a = np.array([0.2, 0.8])
    L = math.log(4)
    C = np.ones((2, 2))
    assert prescribe_marginal_gap(2 * L, C, 0.01, a)["branch"] == "small-epsilon"
    d = prescribe_marginal_gap(2 * L + 1, C, 0.01, a)
    assert d["branch"] == "large-epsilon"
    assert d["epsilon_prime"] == pytest.approx(2 / (2 * L + 1))
    assert d["epsilon_prime_consistent"] == pytest.approx((2 * L + 1) / 2)
    with pytest.raises(ValueError):
        prescribe_marginal_gap(2 * L + 1, C, 10.0, a)


def test_ot_gap_prescription_reaches_target():
    p = generate_instance(10, seed=2)
    eps = 0.2
    d = prescribe_ot_gap(eps, p.a, p.b, p.cost)
    n = p.n
    lead = 2 * n * p.cost.inf_norm + p.cost.l1_norm
    total = lead * d["epsilon_prime"] + ot_gap_asymptote(d["tau"], d["eta"], d["U"], p.cost, n, d["c3"])
    assert total == pytest.approx(eps, rel=1e-12)


# structure


def test_parity_rules():
    for t, want in THEOREM_PARITY.items():
        for k in range(0, 8):
            ok = want == "any" or (want == "even" and k % 2 == 0 and k >= 2) or (want == "odd" and k % 2 == 1)
            if ok:
                check_parity(t, k)
            else:
                with pytest.raises(ParityError):
                    check_parity(t, k)


def test_parity_errors_from_bound_functions():
    with pytest.raises(ParityError):
        marginal_gap_bound_simplex(3, 1, 1, 1, 1)
    with pytest.raises(ParityError):
        marginal_gap_log_b_bound(4, 1, 1, 1)
    with pytest.raises(ParityError):
        ot_gap_bound(5, 1, 1, 1, 1, np.ones((2, 2)), 2, 1)


def test_simplex_requirements():
    with pytest.raises(SimplexError):
        simplex_dual_cap(np.ones((2, 2)), 1, 1, [1.0, 1.0])
    with pytest.raises(SimplexError):
        prescribe_ot_gap(0.1, [1.0, 1.0], [0.5, 0.5], np.ones((2, 2)))
    p = generate_instance(5, normalize=False, seed=1)
    rep = bound_report(p, 1.0, 0.1, ks=[2, 3])
    assert not rep.simplex and rep.u_star_source == "dual-norm-cap"
    assert {r.theorem for r in rep.records} == set(THEOREM_PARITY) - {"marginal-gap-simplex", "ot-gap"}
    with pytest.raises(SimplexError):
        rep.evaluate("ot-gap", 2)


def test_bounds_asymptotes_as_k_grows():
    C = cost_with_norm(5, 3.0)
    g = marginal_gap_bound_general(10**6, 1.0, 0.1, 50.0, 2.0, 0.4)
    assert g == pytest.approx(2.0 * 0.4 / 1.0, rel=1e-9)
    assert ot_gap_bound(10**7, 1.0, 0.1, 50.0, 3.0, C, 5, 1.0) == pytest.approx(
        ot_gap_asymptote(1.0, 0.1, 3.0, C, 5, 1.0), rel=1e-9
    )


def test_report_contents_and_serialization():
    p = generate_instance(8, seed=3)
    rep = bound_report(p, 2.0, 0.1, ks=[2, 3, 4])
    assert rep.u_star_source == "simplex-cap"
    assert rep.simplex_cap_vs_U == pytest.approx(2.0 / 2.1)
    assert rep.value("marginal-gap-simplex", 4) == pytest.approx(
        marginal_gap_bound_simplex(4, 2.0, 0.1, rep.R, rep.U)
    )
    assert rep.value("functional-gap", 2) == pytest.approx(
        functional_gap_bound_at(2, 2.0, 0.1, rep.R, p.cost, rep.c1, rep.c2, rep.beta)
    )
    assert rep.value("dual-gap", 3) == pytest.approx(dual_gap_bound(3, 2.0, 0.1, rep.R))
    with pytest.raises(KeyError):
        rep.value("marginal-gap-log-b", 2)
    doc = json.loads(rep.to_json())
    assert doc["constants"]["R"] == rep.R
    assert rep.to_csv().splitlines()[0] == "theorem,k,value,asymptote"
    with pytest.raises(ParityError):
        bound_report(p, 2.0, 0.1, ks=[3], theorems=["ot-gap"], strict=True)
    with pytest.raises(ValueError):
        rep.evaluate("4.7", 2)


def test_report_rejects_rectangular_problems():
    p = ProblemInstance.from_arrays(np.ones((2, 3)), [0.5, 0.5], [0.2, 0.3, 0.5])
    with pytest.raises(ValueError):
        bound_report(p, 1.0, 1.0)


def test_stopping_iteration_decreases_in_epsilon():
    p = generate_instance(30, 1, 100, 1, 10, seed=4)
    prev = None
    for eps in (1.0, 0.5, 0.25, 0.125, 0.0625):
        d = prescribe_functional_gap(eps, 10.0, p.a, p.b, p.cost)
        k = stopping_iteration(eps, 10.0, d["R"], d["c1"], d["c2"], p.cost, p.beta)
        assert prev is None or k > prev
        prev = k


# properties


@given(st.floats(0.01, 100), st.floats(0.001, 10), st.floats(1, 1e4), st.integers(2, 400))
def test_bounds_nonincreasing_in_k(tau, eta, R, k):
    k = 2 * (k // 2) + 2
    assert geometric_term(k + 2, tau, eta, R) <= geometric_term(k, tau, eta, R)
    assert dual_gap_bound(k + 1, tau, eta, R) <= dual_gap_bound(k, tau, eta, R)


@given(st.integers(2, 30), st.floats(1e-3, 10), st.integers(0, 10_000))
def test_constants_finite_nonnegative(n, eta, seed):
    p = generate_instance(n, seed=seed)
    rep = bound_report(p, 1.0, eta)
    for key in ("R", "U", "c1", "c2", "c3", "gamma", "dual_norm_cap", "simplex_dual_cap"):
        val = getattr(rep, key)
        assert math.isfinite(val) and val >= 0
    assert rep.simplex_dual_cap <= rep.U
    assert rep.simplex_dual_cap <= rep.dual_norm_cap


@given(st.integers(2, 30), st.integers(0, 10_000))
def test_R_at_least_log_n_in_small_eta_regime(n, seed):
    p = generate_instance(n, seed=seed)
    eta = p.cost.inf_norm / (2 * math.log(n))
    assert compute_R(p.a, p.b, p.cost, eta) >= math.log(n) - 1e-12


@pytest.mark.parametrize("seed", range(4))
def test_empirical_gaps_respect_bounds(seed):
    p = generate_instance(12, seed=seed)
    tau, eta = 5.0, 0.05
    rep = bound_report(p, tau, eta)
    ot = solve_ot_exact(p).objective
    res = sr_sinkhorn(p, SolverConfig(tau=tau, eta=eta, max_iterations=400, record_potentials=True))
    C = p.C
    for rec in res.trace:
        k = rec.iteration
        if k == 0:
            continue
        T = np.exp((rec.u[:, None] + rec.v[None, :] - C) / eta)
        if k % 2 == 0:
            gap = np.abs(T.sum(1) - p.a.weights).max()
            assert gap <= rep.evaluate("marginal-gap-simplex", k).value
            assert gap <= rep.evaluate("marginal-gap", k).value
            Y = round_to_polytope(T, p.a.weights, p.b.weights).entries
            assert float(np.sum(C * Y)) - ot <= rep.evaluate("ot-gap", k).value
        else:
            lg = np.abs(np.log(T.sum(0)) - np.log(p.b.weights)).max()
            assert lg <= rep.evaluate("marginal-gap-log-b", k).value


@pytest.mark.parametrize("seed", range(3))
def test_simplex_cap_dominates_converged_potential(seed):
    p = generate_instance(15, seed=seed)
    tau, eta = 3.0, 0.1
    res = sr_sinkhorn(p, SolverConfig(tau=tau, eta=eta, max_iterations=100_000, trace_every=0, convergence_tol=1e-12))
    ustar = np.abs(res.potentials.u).max()
    assert ustar <= simplex_dual_cap(p.cost, tau, eta, p.a) + 1e-9
    assert ustar <= dual_norm_cap(tau, eta, compute_R(p.a, p.b, p.cost, eta))
