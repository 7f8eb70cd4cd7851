import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facility_equilibrium.equilibrium import EquilibriumSolution, PriceField, ResidualReport
from facility_equilibrium.errors import DomainError, ParseError
from facility_equilibrium.gcda import GcdaSolution, UtilityParams
from facility_equilibrium.investor import InvestorSolution
from facility_equilibrium.network import TripTable
from facility_equilibrium.stochastic import (
    CaseResults, ScenarioSet, compute_metrics, generate_scenarios, load_scenarios, save_scenarios, solve_case,
    total_utility,
)

from instances import double_toy

TIGHT = dict(tol_mc=1e-9)


def test_generate_examples():
    one = generate_scenarios(1, 1.0, 1.0, seed=3)
    assert one.thetas == (1.0,) and one.probs == (1.0,)
    twenty = generate_scenarios(20, 1.0, 1.2, seed=0)
    assert len(twenty) == 20
    assert all(1.0 <= t <= 1.2 for t in twenty.thetas)
    assert twenty.probs == (0.05,) * 20
    assert generate_scenarios(20, 1.0, 1.2, seed=0) == twenty
    assert generate_scenarios(20, 1.0, 1.2, seed=1).thetas != twenty.thetas
    with pytest.raises(DomainError):
        generate_scenarios(0, 1.0, 1.2)
    with pytest.raises(DomainError):
        generate_scenarios(3, 1.2, 1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.floats(0.0, 5.0), st.floats(0.0, 5.0), st.integers(0, 2 ** 32))
def test_generated_sets_are_valid(n, a, width, seed):
    sc = generate_scenarios(n, a, a + width, seed)
    assert len(sc) == n
    assert sum(sc.probs) == pytest.approx(1.0)
    assert all(a <= t <= a + width for t in sc.thetas)


def test_scenario_file_round_trip(tmp_path):
    sc = generate_scenarios(7, 1.0, 1.2, seed=42)
    path = tmp_path / "sc.json"
    save_scenarios(sc, path)
    assert load_scenarios(path) == sc
    path.write_text("{not json")
    with pytest.raises(ParseError):
        load_scenarios(path)
    path.write_text('{"schema": "other"}')
    with pytest.raises(ParseError):
        load_scenarios(path)


def test_scenario_set_validation():
    with pytest.raises(DomainError):
        ScenarioSet((1.0, 1.1), (0.5, 0.6))
    with pytest.raises(DomainError):
        ScenarioSet((), ())
    with pytest.raises(DomainError):
        ScenarioSet((1.5,), (1.0,), None, 1.0, 1.2)


def _fixed_solution(q, tau, rho):
    gcda = GcdaSolution(((1, 3, 2),), np.array([q]), np.zeros(2), np.array([tau]), 0.0, 0.0, 0.0, 0, True)
    inv = InvestorSolution({2: q}, {(2, 0): q}, 0.0)
    return EquilibriumSolution(inv, [gcda], PriceField({(2, 0): rho}, (1.0,)), ResidualReport(0, 0, 0, 0, True))


def test_total_utility_examples():
    trips = TripTable({(1, 3): 100.0})
    params = UtilityParams(1.0, 0.06)
    value = total_utility(_fixed_solution(100.0, 10.0, 340.0), params, trips)
    assert value == pytest.approx(-50666.67, abs=0.01)
    assert total_utility(_fixed_solution(0.0, 10.0, 340.0), params, trips) == 0.0
    with pytest.raises(DomainError):
        total_utility(_fixed_solution(100.0, 10.0, 340.0), UtilityParams(1.0, 0.0), trips)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 200), st.floats(0, 50), st.floats(0, 500), st.floats(-100, 100))
def test_price_shift_is_linear(q, tau, rho, delta):
    trips = TripTable({(1, 3): 100.0})
    params = UtilityParams(1.0, 0.06)
    base = total_utility(_fixed_solution(q, tau, rho), params, trips)
    moved = total_utility(_fixed_solution(q, tau, rho + delta), params, trips)
    assert moved - base == pytest.approx(-q * delta, rel=1e-9, abs=1e-6)


def _case(mode, provider, user, scenarios):
    return CaseResults(mode, [], provider, user, provider + user, scenarios)


def test_metrics_arithmetic():
    sc = ScenarioSet.single()
    c1, c2, c3 = (_case(m, v, 2 * v, sc) for m, v in zip(("deterministic", "stochastic", "wait_and_see"),
                                                          (10.0, 12.0, 11.0)))
    m = compute_metrics(c1, c2, c3)
    assert (m.vss_provider, m.evpi_provider) == (2.0, -1.0)
    assert (m.vss_user, m.evpi_user) == (4.0, -2.0)
    assert (m.vss_surplus, m.evpi_surplus) == (6.0, -3.0)
    assert "negative" in m.note
    assert [r["stakeholder"] for r in m.rows()] == ["provider", "user", "surplus"]
    same = compute_metrics(*(_case(mo, 5.0, 1.0, sc) for mo in ("deterministic", "stochastic", "wait_and_see")))
    assert all(v == 0.0 for k, v in same.as_dict().items() if k.startswith(("vss_", "evpi_")) and k != "vss_basis")


def test_metrics_errors():
    a, b = ScenarioSet.single(), ScenarioSet((1.0, 1.1), (0.5, 0.5))
    c1, c2, c3 = _case("deterministic", 1, 1, a), _case("stochastic", 1, 1, b), _case("wait_and_see", 1, 1, b)
    with pytest.raises(DomainError):
        compute_metrics(c1, c2, c3)
    with pytest.raises(DomainError):
        compute_metrics(c2, c1, c3)
    same = _case("deterministic", 1, 1, b)
    with pytest.raises(DomainError):
        compute_metrics(same, c2, c3, vss_basis="evaluated")
    with pytest.raises(DomainError):
        compute_metrics(same, c2, c3, vss_basis="other")
    with pytest.raises(DomainError):
        CaseResults("oracle", [], 0.0, 0.0, 0.0, a)


@pytest.fixture(scope="module")
def toy_cases():
    scenarios = generate_scenarios(5, 1.0, 1.2, seed=0)
    problem = double_toy()
    return scenarios, [solve_case(problem, scenarios, mode, **TIGHT)
                       for mode in ("deterministic", "stochastic", "wait_and_see")]


def test_surplus_identity(toy_cases):
    _, cases = toy_cases
    for case in cases:
        assert case.surplus == pytest.approx(case.provider_objective + case.user_utility, abs=1e-9)


def test_stochastic_capacity_covers_supply(toy_cases):
    scenarios, (c1, c2, _) = toy_cases
    cap = c2.capacity()
    sol = c2.solutions[0]
    for k, c in cap.items():
        for xi in range(len(scenarios)):
            assert c >= sol.investor.supply[(k, xi)] - 1e-9
    assert sum(cap.values()) >= sum(c1.capacity().values())


def test_wait_and_see_tracks_deterministic(toy_cases):
    _, (c1, _, c3) = toy_cases
    mean, det = c3.capacity(), c1.capacity()
    for k in det:
        assert abs(mean[k] - det[k]) <= 0.1 * det[k]


def test_deterministic_capacity_cannot_serve_peaks(toy_cases):
    _, (c1, c2, c3) = toy_cases
    # inelastic demand above the mean overloads the mean-demand capacity
    assert c1.evaluation is None and "capacity" in c1.evaluation_error
    with pytest.raises(DomainError):
        compute_metrics(c1, c2, c3, vss_basis="evaluated")
    m = compute_metrics(c1, c2, c3)
    assert m.vss_basis == "nominal"


def test_single_scenario_collapses():
    sc = ScenarioSet.single(1.1)
    problem = double_toy()
    cases = [solve_case(problem, sc, mode, **TIGHT) for mode in ("deterministic", "stochastic", "wait_and_see")]
    assert cases[0].provider_objective == cases[1].provider_objective == cases[2].provider_objective
    assert cases[0].user_utility == cases[1].user_utility == cases[2].user_utility
    for basis in ("nominal", "evaluated"):
        m = compute_metrics(*cases, vss_basis=basis)
        assert all(v == 0.0 for k, v in m.as_dict().items() if k.startswith(("vss_", "evpi_")) and k != "vss_basis")


def test_identical_scenarios_match_wait_and_see():
    sc = ScenarioSet((1.1, 1.1), (0.5, 0.5))
    problem = double_toy()
    c2 = solve_case(problem, sc, "stochastic", **TIGHT)
    c3 = solve_case(problem, sc, "wait_and_see", **TIGHT)
    assert c2.provider_objective == pytest.approx(c3.provider_objective, rel=1e-6)
    assert c2.user_utility == pytest.approx(c3.user_utility, rel=1e-6)


def test_unknown_mode():
    with pytest.raises(DomainError):
        solve_case(double_toy(), ScenarioSet.single(), "clairvoyant")
