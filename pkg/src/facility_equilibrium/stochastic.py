"""Information cases and stochastic-programming metrics.

Case 1 solves a single equilibrium at the mean demand multiplier, case 2 the
two-stage equilibrium with one capacity for all scenarios, case 3 one
independent equilibrium per scenario (wait-and-see). Each case is scored by
the providers' expected profit and the travelers' monetized utility.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .equilibrium import EquilibriumProblem, EquilibriumSolution, solve_equilibrium
from .errors import DomainError, InfeasibleError
from .gcda import UtilityParams
from .investor import investor_objective
from .network import TripTable
from .scenarios import ScenarioSet, generate_scenarios, load_scenarios, save_scenarios

__all__ = [
    "CASE_MODES", "CaseResults", "MetricsReport", "ScenarioSet", "compute_metrics", "generate_scenarios",
    "load_scenarios", "save_scenarios", "solve_case", "total_utility",
]

log = logging.getLogger(__name__)

CASE_MODES = ("deterministic", "stochastic", "wait_and_see")
SIGN_NOTE = "VSS and EVPI may be negative when several agents optimize separately"


def total_utility(solution: EquilibriumSolution, params: UtilityParams, trips: TripTable) -> float:
    """Expected traveler utility in money: ``E sum q (beta0 - beta1 tau - beta2 rho e) / beta2``."""
    if params.beta2 <= 0:
        raise DomainError("utility cannot be expressed in money when beta2 = 0")
    probs = solution.prices.probs
    total = 0.0
    for xi, sol in enumerate(solution.gcda):
        value = 0.0
        for (r, s, k), q, tau in zip(sol.triples, np.asarray(sol.q), np.asarray(sol.tau)):
            if q == 0.0:
                continue
            e = trips.service_quantity[(r, s)]
            b0 = params.beta0.get(k, 0.0)
            value += q * (b0 - params.beta1 * tau - params.beta2 * solution.prices.rho[(k, xi)] * e)
        total += probs[xi] * float(value) / params.beta2
    return total


def _provider_objective(solution: EquilibriumSolution, problem: EquilibriumProblem) -> float:
    return investor_objective(solution.investor, solution.prices, problem.probs, problem.costs)


@dataclass
class CaseResults:
    """Outcome of one information case.

    ``provider_objective`` and ``user_utility`` are expectations over the
    case's own scenarios. For the deterministic case ``evaluation`` holds the
    re-cleared equilibrium under the full scenario set with capacity fixed at
    the case-1 value, when that is feasible (``evaluation_error`` otherwise).
    """

    mode: str
    solutions: list
    provider_objective: float
    user_utility: float
    surplus: float
    scenarios: ScenarioSet
    evaluation: "CaseResults | None" = None
    evaluation_error: str | None = None
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in CASE_MODES and self.mode != "evaluated":
            raise DomainError(f"unknown case mode {self.mode!r}")

    def capacity(self) -> dict:
        """Capacity per location; the probability-weighted mean for wait-and-see."""
        if self.mode != "wait_and_see":
            return dict(self.solutions[0].investor.capacity)
        out: dict = {}
        for p, sol in zip(self.scenarios.probs, self.solutions):
            for k, c in sol.investor.capacity.items():
                out[k] = out.get(k, 0.0) + p * c
        return out

    def summary(self) -> dict:
        return {"mode": self.mode, "provider_objective": self.provider_objective,
                "user_utility": self.user_utility, "surplus": self.surplus}


def _scored(mode, solutions, weights, problems, scenarios) -> CaseResults:
    provider = sum(w * _provider_objective(s, p) for w, s, p in zip(weights, solutions, problems))
    if problems[0].params.beta2 > 0:
        user = sum(w * total_utility(s, p.params, p.trips) for w, s, p in zip(weights, solutions, problems))
    else:
        user = float("nan")
    return CaseResults(mode, list(solutions), provider, user, provider + user, scenarios)


def _require_converged(solution: EquilibriumSolution, label: str) -> None:
    if not solution.residuals.converged:
        log.warning("%s equilibrium did not converge (residual %.3e)", label,
                    solution.residuals.max_market_residual)


def solve_case(problem: EquilibriumProblem, scenarios: ScenarioSet, mode: str, evaluate: bool = True,
               **solver_options) -> CaseResults:
    """Solve one information case; ``solver_options`` go to :func:`solve_equilibrium`.

    The problem's own scenario set is ignored in favour of ``scenarios``.
    """
    if mode not in CASE_MODES:
        raise DomainError(f"unknown case mode {mode!r}; expected one of {CASE_MODES}")
    if mode == "stochastic":
        prob = problem.replace(scenarios=scenarios)
        sol = solve_equilibrium(prob, **solver_options)
        _require_converged(sol, "stochastic")
        return _scored(mode, [sol], [1.0], [prob], scenarios)
    if mode == "wait_and_see":
        sols, probs = [], []
        for xi in range(len(scenarios)):
            prob = problem.replace(scenarios=scenarios.subset(xi))
            sol = solve_equilibrium(prob, **solver_options)
            _require_converged(sol, f"scenario {xi}")
            sols.append(sol)
            probs.append(prob)
        return _scored(mode, sols, scenarios.probs, probs, scenarios)

    nominal = ScenarioSet.single(scenarios.mean_theta)
    prob = problem.replace(scenarios=nominal)
    sol = solve_equilibrium(prob, **solver_options)
    _require_converged(sol, "deterministic")
    case = _scored(mode, [sol], [1.0], [prob], scenarios)
    if not evaluate:
        return case
    if nominal.thetas == scenarios.thetas:
        # one scenario equal to the mean: re-clearing at the same capacity reproduces this equilibrium
        case.evaluation = _scored("evaluated", [sol], [1.0], [prob], scenarios)
        return case
    full = problem.replace(scenarios=scenarios)
    try:
        fixed = solve_equilibrium(full, fixed_capacity=sol.investor.capacity, **solver_options)
    except InfeasibleError as exc:
        case.evaluation_error = str(exc)
        log.info("deterministic capacity cannot be evaluated under uncertainty: %s", exc)
        return case
    _require_converged(fixed, "fixed-capacity")
    case.evaluation = _scored("evaluated", [fixed], [1.0], [full], scenarios)
    return case


@dataclass(frozen=True)
class MetricsReport:
    """Per-stakeholder VSS (case 2 minus case 1) and EVPI (case 3 minus case 2)."""

    vss_provider: float
    vss_user: float
    vss_surplus: float
    evpi_provider: float
    evpi_user: float
    evpi_surplus: float
    vss_basis: str = "nominal"
    note: str = SIGN_NOTE

    def rows(self) -> list:
        return [
            {"stakeholder": "provider", "vss": self.vss_provider, "evpi": self.evpi_provider},
            {"stakeholder": "user", "vss": self.vss_user, "evpi": self.evpi_user},
            {"stakeholder": "surplus", "vss": self.vss_surplus, "evpi": self.evpi_surplus},
        ]

    def as_dict(self) -> dict:
        return {"vss_provider": self.vss_provider, "vss_user": self.vss_user, "vss_surplus": self.vss_surplus,
                "evpi_provider": self.evpi_provider, "evpi_user": self.evpi_user,
                "evpi_surplus": self.evpi_surplus, "vss_basis": self.vss_basis, "note": self.note}


def compute_metrics(case1: CaseResults, case2: CaseResults, case3: CaseResults,
                    vss_basis: str = "nominal") -> MetricsReport:
    """Differences of stakeholder objectives between the three cases.

    ``vss_basis="nominal"`` compares case 2 with case 1 as solved at the mean
    multiplier. ``"evaluated"`` uses case 1's capacity re-cleared under the
    full scenario set instead and needs that evaluation to exist.
    """
    if (case1.mode, case2.mode, case3.mode) != CASE_MODES:
        raise DomainError("cases must be deterministic, stochastic and wait-and-see, in that order")
    if not (case1.scenarios.thetas == case2.scenarios.thetas == case3.scenarios.thetas
            and case1.scenarios.probs == case2.scenarios.probs == case3.scenarios.probs):
        raise DomainError("the three cases were solved for different scenario sets")
    if vss_basis == "nominal":
        base = case1
    elif vss_basis == "evaluated":
        if case1.evaluation is None:
            raise DomainError(f"case 1 has no evaluation under uncertainty: {case1.evaluation_error}")
        base = case1.evaluation
    else:
        raise DomainError(f"unknown VSS basis {vss_basis!r}")
    return MetricsReport(
        case2.provider_objective - base.provider_objective,
        case2.user_utility - base.user_utility,
        case2.surplus - base.surplus,
        case3.provider_objective - case2.provider_objective,
        case3.user_utility - case2.user_utility,
        case3.surplus - case2.surplus,
        vss_basis,
    )
