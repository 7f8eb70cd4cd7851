import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from facility_equilibrium.errors import DomainError, InfeasibleError
from facility_equilibrium.gcda import (
    GcdaProblem, UtilityParams, all_or_nothing, gcda_objective, line_search, logit_split, solve_gcda,
    verify_wardrop_logit,
)
from facility_equilibrium.network import Link, Network, TripTable, leg_times, shortest_paths, tree_path

from instances import random_gcda


def parallel_network(alpha=0.15):
    """Two parallel links 1 -> 2 (fft 10 and 20), facility at 2, then 2 -> 3."""
    links = [Link(1, 1, 2, 10.0, 100.0, alpha), Link(2, 1, 2, 20.0, 100.0, alpha), Link(3, 2, 3, 1.0, 1e6, alpha)]
    return Network([1, 2, 3], links, [1], [3], [2])


def test_logit_symmetry():
    trips = TripTable({(1, 2): 100.0})
    q = logit_split({(1, 2, 3): 5.0, (1, 2, 4): 5.0}, {3: 1.0, 4: 1.0}, UtilityParams(1.0, 0.5), trips)
    assert q == {(1, 2, 3): pytest.approx(50.0), (1, 2, 4): pytest.approx(50.0)}


def test_logit_softmax_value():
    trips = TripTable({(1, 2): 100.0})
    q = logit_split({(1, 2, 3): 1.0, (1, 2, 4): 2.0}, {}, UtilityParams(1.0, 0.0), trips)
    assert q[(1, 2, 3)] == pytest.approx(73.1059, abs=1e-4)
    assert q[(1, 2, 4)] == pytest.approx(26.8941, abs=1e-4)
    assert q[(1, 2, 3)] == pytest.approx(100.0 / (1.0 + math.exp(-1.0)), rel=1e-14)


def test_logit_common_price_cancels():
    trips = TripTable({(1, 2): 100.0})
    q = logit_split({(1, 2, 3): 7.0, (1, 2, 4): 7.0}, {3: 340.0, 4: 340.0}, UtilityParams(1.0, 0.06), trips)
    assert q[(1, 2, 3)] == pytest.approx(50.0) and q[(1, 2, 4)] == pytest.approx(50.0)


def test_logit_stable_for_huge_utilities():
    trips = TripTable({(1, 2): 10.0})
    q = logit_split({(1, 2, 3): 1e5, (1, 2, 4): 1e5 + 1.0}, {}, UtilityParams(1.0, 0.0), trips, demand_scale=2.0)
    assert all(math.isfinite(x) for x in q.values())
    assert sum(q.values()) == pytest.approx(20.0)


def test_logit_needs_a_finite_option():
    trips = TripTable({(1, 2): 10.0})
    with pytest.raises(InfeasibleError):
        logit_split({}, {}, UtilityParams(1.0, 0.0), trips)


def test_aon_single_path():
    net = Network([1, 2, 3], [Link(1, 1, 2, 5.0, 100.0), Link(2, 2, 3, 5.0, 100.0)], [1], [3], [2])
    y = all_or_nothing(net, np.array([5.0, 5.0]), {(1, 3, 2): 100.0})
    assert y.tolist() == [100.0, 100.0]


def test_aon_parallel_links():
    net = parallel_network()
    y = all_or_nothing(net, np.array([10.0, 20.0, 1.0]), {(1, 3, 2): 150.0})
    assert y.tolist() == [150.0, 0.0, 150.0]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_aon_conservation_by_incidence(seed):
    net, trips, params, prices = random_gcda(seed)
    rng = np.random.default_rng(seed)
    times = net.free_flow_times() * rng.uniform(1, 2, len(net.links))
    taus = leg_times(net, times, trips)
    q = {t: float(rng.uniform(0, 50)) for t in taus}
    y = all_or_nothing(net, times, q, trips)
    A = net.incidence_matrix()
    pos = net.node_index
    expected = np.zeros(len(net.nodes))
    for (r, s, k), flow in q.items():
        expected[pos[r]] += flow
        expected[pos[s]] -= flow
    assert np.allclose(A @ y, expected, atol=1e-9)
    # and each triple sits on its tree legs
    manual = np.zeros(len(net.links))
    for (r, s, k), flow in q.items():
        for a in tree_path(net, shortest_paths(net, times, r), k) + tree_path(net, shortest_paths(net, times, k), s):
            manual[a] += flow
    assert np.allclose(y, manual, atol=1e-9)


def test_leg_flows_satisfy_incidence():
    net, trips, params, prices = random_gcda(3)
    sol = solve_gcda(GcdaProblem(net, trips, params, prices), tol=1e-8, keep_leg_flows=True)
    up, down = sol.leg_flows
    A = net.incidence_matrix()
    pos = net.node_index
    for i, (r, s, k) in enumerate(sol.triples):
        e_up = np.zeros(len(net.nodes))
        e_down = np.zeros(len(net.nodes))
        if r != k:
            e_up[pos[r]], e_up[pos[k]] = sol.q[i], -sol.q[i]
        if k != s:
            e_down[pos[k]], e_down[pos[s]] = sol.q[i], -sol.q[i]
        assert np.allclose(A @ up[i], e_up, atol=1e-8)
        assert np.allclose(A @ down[i], e_down, atol=1e-8)
    assert np.allclose(up.sum(axis=0) + down.sum(axis=0), sol.v, atol=1e-8)


def one_link():
    net = Network([1, 2], [Link(1, 1, 2, 10.0, 100.0)], [1], [2], [2])
    return net, TripTable({(1, 2): 100.0})


def test_objective_examples():
    net, trips = one_link()
    params = UtilityParams(1.0, 0.06)
    assert gcda_objective(net, [0.0], {(1, 2, 2): 0.0}, {}, params, trips) == 0.0
    value = gcda_objective(net, [100.0], {(1, 2, 2): 100.0}, {2: 0.0}, params, trips)
    assert value == pytest.approx(1030.0 + 100.0 * (math.log(100.0) - 1.0), abs=1e-9)
    assert 100.0 * (math.log(100.0) - 1.0) == pytest.approx(360.517, abs=1e-3)


@settings(max_examples=40, deadline=None)
@given(st.floats(-5, 5), st.floats(0.1, 5))
def test_attractiveness_shift_is_linear(delta, beta1):
    net, trips = one_link()
    base = gcda_objective(net, [100.0], {(1, 2, 2): 100.0}, {}, UtilityParams(beta1, 0.06, {2: 0.3}), trips)
    shifted = gcda_objective(net, [100.0], {(1, 2, 2): 100.0}, {}, UtilityParams(beta1, 0.06, {2: 0.3 + delta}),
                             trips)
    assert base - shifted == pytest.approx(delta * 100.0 / beta1, rel=1e-9, abs=1e-9)


def test_objective_rejects_negative_flow():
    net, trips = one_link()
    with pytest.raises(DomainError):
        gcda_objective(net, [-1.0], {(1, 2, 2): 100.0}, {}, UtilityParams(1.0, 0.0), trips)


def _start_and_direction(seed, congestion=True):
    """A feasible point from off-equilibrium prices and the Evans direction at the true prices."""
    net, trips, params, prices = random_gcda(seed)
    if not congestion:
        net = net.without_congestion()
    rng = np.random.default_rng(seed + 1)
    t0 = net.free_flow_times() * rng.uniform(1.0, 3.0, len(net.links))
    wrong = {k: p + float(rng.uniform(-20, 20)) ** 2 for k, p in prices.items()}
    q = logit_split(leg_times(net, t0, trips), wrong, params, trips)
    v = all_or_nothing(net, t0, q, trips)
    t = net.times(v)
    q_aux = logit_split(leg_times(net, t, trips), prices, params, trips)
    y = all_or_nothing(net, t, q_aux, trips)
    return net, trips, params, prices, v, q, y, q_aux


def _along(net, trips, params, prices, v, q, y, q_aux, a):
    qa = {t: q[t] + a * (q_aux[t] - q[t]) for t in q}
    return gcda_objective(net, v + a * (y - v), qa, prices, params, trips)


def test_line_search_zero_direction():
    net, trips, params, prices, v, q, _, _ = _start_and_direction(0)
    assert line_search(net, v, q, v, q, prices, params, trips) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_direction_is_descent(seed):
    args = _start_and_direction(seed)
    z0 = _along(*args, 0.0)
    h = 1e-7
    assert (_along(*args, h) - z0) / h <= 1e-6 * max(1.0, abs(z0))


def _uncongested_slope(net, trips, params, prices, v, q, y, q_aux, a):
    """Hand-written derivative of the objective along the segment when every link has alpha = 0."""
    slope = float(np.dot(net.free_flow_times(), y - v))
    for (r, s, k), q0 in q.items():
        dq = q_aux[(r, s, k)] - q0
        e = trips.service_quantity[(r, s)]
        qa = q0 + a * dq
        if dq:
            slope += dq * (math.log(qa) + params.beta2 * prices[k] * e - params.beta0.get(k, 0.0)) / params.beta1
    return slope


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_line_search_matches_grid(seed):
    args = _start_and_direction(seed, congestion=False)
    net, trips, params, prices, v, q, y, q_aux = args
    alpha = line_search(net, v, q, y, q_aux, prices, params, trips)
    # convex along the segment, so the closed-form slope is monotone on [0, 1]
    f0, f1 = _uncongested_slope(*args, 0.0), _uncongested_slope(*args, 1.0)
    if f0 >= 0:
        best = 0.0
    elif f1 <= 0:
        best = 1.0
    else:
        best = brentq(lambda a: _uncongested_slope(*args, a), 0.0, 1.0, xtol=1e-14)
    z = _along(*args, alpha)
    # where the objective is flat to round-off the argmin is not identifiable; the slope must vanish instead
    flat = abs(_uncongested_slope(*args, alpha)) <= 1e-12 * max(1.0, abs(z))
    assert alpha == pytest.approx(best, abs=1e-6) or flat
    grid = np.linspace(0.0, 1.0, 2001)
    assert z <= min(_along(*args, a) for a in grid) + 1e-10 * max(1.0, abs(z))


def test_single_path_one_iteration():
    net = Network([1, 2, 3], [Link(1, 1, 2, 5.0, 100.0), Link(2, 2, 3, 5.0, 100.0)], [1], [3], [2])
    trips = TripTable({(1, 3): 100.0})
    params = UtilityParams(1.0, 0.06)
    sol = solve_gcda(GcdaProblem(net, trips, params, {2: 340.0}))
    assert sol.converged and sol.iterations <= 1
    assert sol.q.tolist() == [100.0] and sol.v.tolist() == [100.0, 100.0]
    report = verify_wardrop_logit(net, trips, params, {2: 340.0}, sol, tol=1e-12)
    assert report.passed
    assert report.tau_residual == 0.0 and report.logit_residual == 0.0


def test_corner_solution_on_parallel_links():
    net = parallel_network()
    trips = TripTable({(1, 3): 150.0})
    sol = solve_gcda(GcdaProblem(net, trips, UtilityParams(1.0, 0.0), {}))
    assert 10.0 * (1 + 0.15 * 1.5 ** 4) == pytest.approx(17.59375)
    assert sol.v[0] == pytest.approx(150.0, abs=1e-9)
    assert sol.v[1] == pytest.approx(0.0, abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.5, 1.5))
def test_runs_are_consistent(seed, scale):
    net, trips, params, prices = random_gcda(seed)
    tol = 1e-9
    sol = solve_gcda(GcdaProblem(net, trips, params, prices, scale), tol=tol)
    # heavily saturated draws can need more than max_iter; that must be reported, never hidden
    assert sol.converged or sol.iterations == 2000
    assert sol.rel_gap == pytest.approx(max(sol.history[-1][2], 0.0))
    sums = {}
    for (r, s, _), q in zip(sol.triples, sol.q):
        sums[(r, s)] = sums.get((r, s), 0.0) + q
    for pair, total in sums.items():
        assert total == pytest.approx(scale * trips.demand[pair], rel=1e-9)
    assert np.all(sol.q > 0)
    assert np.all(sol.v >= 0)
    report = verify_wardrop_logit(net, trips, params, prices, sol, tol=max(10 * tol, 1e-6), demand_scale=scale)
    assert report.passed or not sol.converged, report.as_dict()
    assert verify_wardrop_logit(net, trips, params, prices, sol, tol=1e-3, demand_scale=scale).passed


def test_perturbed_share_fails_verification():
    net, trips, params, prices = random_gcda(5)
    sol = solve_gcda(GcdaProblem(net, trips, params, prices), tol=1e-10)
    assert verify_wardrop_logit(net, trips, params, prices, sol, tol=1e-4).passed
    shares = sol.q / np.array([trips.demand[(r, s)] for r, s, _ in sol.triples])
    i = int(np.argmax(shares * (1 - shares)))
    sol.q = sol.q.copy()
    sol.q[i] *= 1.01
    report = verify_wardrop_logit(net, trips, params, prices, sol, tol=1e-4)
    assert report.logit_residual > 1e-4
    assert not report.passed


@pytest.mark.parametrize("seed", range(5))
def test_evans_descent_is_monotone(seed):
    net, trips, params, prices = random_gcda(seed, 20.0, 100.0)
    sol = solve_gcda(GcdaProblem(net, trips, params, prices), tol=1e-6, max_iter=300, method="evans")
    z = [h[0] for h in sol.history]
    gaps = [h[2] for h in sol.history]
    for i in range(1, len(z)):
        if gaps[i - 1] <= 1e-6:
            break
        assert z[i] < z[i - 1]


def test_unknown_method():
    net, trips = one_link()
    with pytest.raises(DomainError):
        solve_gcda(GcdaProblem(net, trips, UtilityParams(1.0, 0.0), {}), method="newton")


def test_invalid_problem():
    net, trips = one_link()
    with pytest.raises(DomainError):
        GcdaProblem(net, trips, UtilityParams(1.0, 0.0), {2: -1.0})
    with pytest.raises(DomainError):
        GcdaProblem(net, trips, UtilityParams(1.0, 0.0), {}, demand_scale=0.0)


def _bpr_integral(fft, cap, v):
    return fft * (v + 0.15 * v ** 5 / (5 * cap ** 4))


def test_matches_brute_force_minimum():
    # facility 2 is reached directly, facility 3 directly or via 2; 2 -> 4 directly or via 3
    links = [Link(1, 1, 2, 4.0, 40.0), Link(2, 2, 4, 6.0, 40.0), Link(3, 1, 3, 7.0, 40.0),
             Link(4, 3, 4, 3.0, 40.0), Link(5, 2, 3, 2.0, 40.0)]
    net = Network([1, 2, 3, 4], links, [1], [4], [2, 3])
    d = 80.0
    trips = TripTable({(1, 4): d})
    params = UtilityParams(0.8, 0.05, {2: 0.2, 3: -0.1})
    prices = {2: 10.0, 3: 4.0}
    sol = solve_gcda(GcdaProblem(net, trips, params, prices), tol=1e-10)
    assert sol.converged

    n = 121
    q2 = np.linspace(0, d, n)[:, None, None]
    x = np.linspace(0, 1, n)[None, :, None]   # share of q3 using 1 -> 2 -> 3
    y = np.linspace(0, 1, n)[None, None, :]   # share of q2 using 2 -> 3 -> 4
    q3 = d - q2
    v = [q2 + x * q3, q2 * (1 - y), (1 - x) * q3, q3 + y * q2, x * q3 + y * q2]
    time_part = sum(_bpr_integral(l.free_flow_time, l.capacity_param, va) for l, va in zip(links, v))

    def entropy(q, k):
        with np.errstate(divide="ignore", invalid="ignore"):
            qlog = np.where(q > 0, q * np.log(np.where(q > 0, q, 1.0)), 0.0)
        return qlog + q * (-1.0 + params.beta2 * prices[k] - params.beta0[k])

    z = time_part + (entropy(q2, 2) + entropy(q3, 3)) / params.beta1
    brute = float(z.min())
    assert sol.objective <= brute + 1e-9 * abs(brute)
    assert abs(sol.objective - brute) <= 1e-3 * abs(brute)


def test_destination_service_collapses_to_assignment():
    links = [Link(1, 1, 2, 4.0, 50.0), Link(2, 2, 3, 4.0, 50.0), Link(3, 1, 3, 10.0, 80.0)]
    net = Network([1, 2, 3], links, [1], [3], [3])
    d = 120.0
    trips = TripTable({(1, 3): d}, {}, {(1, 3): (3,)})
    sol = solve_gcda(GcdaProblem(net, trips, UtilityParams(1.0, 0.1), {3: 50.0}), tol=1e-12)

    def path_a(f):
        return sum(l.free_flow_time * (1 + 0.15 * (f / l.capacity_param) ** 4) for l in links[:2])

    def path_b(f):
        l = links[2]
        return l.free_flow_time * (1 + 0.15 * (f / l.capacity_param) ** 4)

    fa = brentq(lambda f: path_a(f) - path_b(d - f), 0.0, d, xtol=1e-13)
    assert sol.q.tolist() == [pytest.approx(d)]
    assert sol.v == pytest.approx([fa, fa, d - fa], rel=1e-6)
