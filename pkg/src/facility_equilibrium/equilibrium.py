"""Market equilibrium between facility investors and travelers.

Prices at every (location, scenario) are adjusted until investor supply meets
the service demand produced by the travelers' combined facility/route choice.
The equilibrium is the primal-dual solution of one convex program

    min  sum_k phi_c(c_k) + E[ sum_k phi_g(g_k) + (b1/b2) sum_a int t_a
                               + (1/b2) sum q (ln q - 1 - b0) ]
    s.t. g <= c,  g_k = sum_rs e q_rsk  (multiplier lambda = pi * rho),  GCDA constraints,

whose Lagrangian separates into the investor problem and one GCDA problem per
scenario. The dual value is the sum of those optimal values, so every outer
iterate carries a weak-duality certificate.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import DomainError, InfeasibleError, ValidationError
from .gcda import GcdaProblem, GcdaSolution, UtilityParams, solve_gcda, verify_wardrop_logit
from .investor import InvestorSolution, LocationCost, solve_investor
from .network import Network, TripIndex, TripTable, validate_connectivity
from .scenarios import ScenarioSet

log = logging.getLogger(__name__)

INNER_TOL_FLOOR = 1e-12


# --------------------------------------------------------------------------- types

@dataclass
class PriceField:
    """Locational prices ``rho[(k, xi)]``; the program's multipliers are ``pi_xi * rho``."""

    rho: dict
    probs: tuple

    def __post_init__(self):
        self.rho = {(int(k), int(xi)): float(r) for (k, xi), r in dict(self.rho).items()}
        self.probs = tuple(float(p) for p in self.probs)

    @property
    def lam(self) -> dict:
        return {(k, xi): self.probs[xi] * r for (k, xi), r in self.rho.items()}

    @classmethod
    def from_lambda(cls, lam: Mapping, probs) -> "PriceField":
        return cls(recover_prices(lam, probs), probs)

    @classmethod
    def uniform(cls, locations, probs, value: float) -> "PriceField":
        return cls({(k, xi): value for k in locations for xi in range(len(probs))}, probs)

    def scenario(self, xi: int) -> dict:
        return {k: r for (k, x), r in self.rho.items() if x == xi}

    def matrix(self, locations) -> np.ndarray:
        n = len(self.probs)
        return np.array([[self.rho[(k, xi)] for xi in range(n)] for k in locations], dtype=float)

    @classmethod
    def from_matrix(cls, locations, probs, mat) -> "PriceField":
        return cls({(k, xi): float(mat[i, xi]) for i, k in enumerate(locations) for xi in range(len(probs))},
                   probs)


@dataclass
class EquilibriumProblem:
    network: Network
    trips: TripTable
    params: UtilityParams
    costs: Mapping[int, LocationCost]
    scenarios: ScenarioSet

    def __post_init__(self):
        self.costs = {int(k): c for k, c in dict(self.costs).items()}
        missing = [k for k in self.network.candidates if k not in self.costs]
        if missing:
            raise ValidationError(f"no cost data for candidate location(s) {missing}")
        extra = [k for k in self.costs if k not in self.network.candidates]
        if extra:
            raise ValidationError(f"cost data for non-candidate location(s) {extra}")
        validate_connectivity(self.network, self.trips)

    @property
    def locations(self) -> tuple:
        return tuple(self.network.candidates)

    @property
    def probs(self) -> tuple:
        return self.scenarios.probs

    @property
    def strictly_convex(self) -> bool:
        return all(c.strictly_convex for c in self.costs.values())

    def service_demand(self, xi: int) -> float:
        return self.trips.total_service_demand(self.scenarios.thetas[xi])

    def demand_scale(self) -> float:
        """Normaliser for market residuals: the largest scenario's total service demand."""
        return max([self.service_demand(xi) for xi in range(len(self.scenarios))] + [0.0]) or 1.0

    def replace(self, **changes) -> "EquilibriumProblem":
        data = dict(network=self.network, trips=self.trips, params=self.params, costs=self.costs,
                    scenarios=self.scenarios)
        data.update(changes)
        return EquilibriumProblem(**data)


@dataclass
class ResidualReport:
    max_market_residual: float
    duality_gap: float
    wardrop_gap: float
    iterations: int
    converged: bool

    def __post_init__(self):
        self.max_market_residual = abs(self.max_market_residual)
        self.duality_gap = max(self.duality_gap, 0.0)
        self.wardrop_gap = abs(self.wardrop_gap)

    def as_dict(self) -> dict:
        return {"max_market_residual": self.max_market_residual, "duality_gap": self.duality_gap,
                "wardrop_gap": self.wardrop_gap, "iterations": self.iterations, "converged": self.converged}


@dataclass
class EquilibriumSolution:
    investor: InvestorSolution
    gcda: list
    prices: PriceField
    residuals: ResidualReport
    history: list = field(default_factory=list, repr=False)
    fixed_capacity: dict | None = None

    def service_demand(self, problem: EquilibriumProblem) -> dict:
        index = TripIndex(problem.network, problem.trips)
        out = {}
        for xi, sol in enumerate(self.gcda):
            dem = index.service_demand(np.asarray(sol.q))
            for i, k in enumerate(index.locations):
                out[(k, xi)] = float(dem[i])
        return out


# --------------------------------------------------------------------------- elementary operations

def recover_prices(lam: Mapping, probs) -> dict:
    """``rho = lambda / pi`` elementwise."""
    probs = tuple(probs)
    out = {}
    for (k, xi), value in dict(lam).items():
        p = probs[xi]
        if p <= 0:
            raise DomainError(f"scenario {xi} has probability {p}; prices are undefined")
        out[(k, xi)] = value / p
    return out


def excess_supply(investor: InvestorSolution, gcda, trips: TripTable, network: Network | None = None) -> dict:
    """Signed market residual ``g - sum_rs e q`` per (k, xi)."""
    demand: dict = {}
    for xi, sol in enumerate(gcda):
        for (r, s, k), flow in zip(sol.triples, np.asarray(sol.q).tolist()):
            demand[(k, xi)] = demand.get((k, xi), 0.0) + trips.service_quantity.get((r, s), 1.0) * flow
    locations = {k for k, _ in investor.supply}
    if network is not None:
        locations |= set(network.candidates)
    for (k, xi) in demand:
        if k not in locations:
            raise DomainError(f"demand at location {k} has no matching supply entry")
    out = {}
    for (k, xi), g in investor.supply.items():
        if xi >= len(gcda):
            raise DomainError(f"supply given for scenario {xi} but only {len(gcda)} scenario solutions")
        out[(k, xi)] = g - demand.get((k, xi), 0.0)
    missing = [key for key in demand if key not in out]
    if missing:
        raise DomainError(f"no supply entry for {missing[0]}")
    return out


def dual_step(prices: PriceField, excess: Mapping, step: float) -> PriceField:
    """Projected price update ``rho <- max(0, rho - step * excess)``."""
    if not step > 0:
        raise DomainError("step must be positive")
    rho = {key: max(0.0, r - step * excess.get(key, 0.0)) for key, r in prices.rho.items()}
    return PriceField(rho, prices.probs)


# --------------------------------------------------------------------------- objective pieces

def _user_cost(network: Network, index: TripIndex, params: UtilityParams, sol: GcdaSolution) -> float:
    """One scenario's traveler term of the combined objective (money units)."""
    q = np.asarray(sol.q, dtype=float)
    b0 = params.attractiveness(index.locations)[index.loc_of]
    qlogq = np.where(q > 0, q * np.log(np.where(q > 0, q, 1.0)), 0.0)
    integral = float(np.sum(network.time_integrals(np.asarray(sol.v, dtype=float))))
    return (params.beta1 * integral + float(np.sum(qlogq - q * (1.0 + b0)))) / params.beta2


def _provider_cost(problem: EquilibriumProblem, capacity: Mapping, supply: Mapping) -> float:
    total = 0.0
    for k, cost in problem.costs.items():
        total += cost.capital.value(capacity[k])
        for xi, p in enumerate(problem.probs):
            total += p * cost.operating.value(supply[(k, xi)])
    return total


def _restored_primal(problem: EquilibriumProblem, index: TripIndex, gcda, fixed_capacity=None) -> float:
    """Objective at the point that serves exactly the travelers' demand.

    Capacity is the largest supply unless pinned by ``fixed_capacity``.
    """
    supply, capacity = {}, {k: 0.0 for k in problem.locations}
    for xi, sol in enumerate(gcda):
        dem = index.service_demand(np.asarray(sol.q))
        for i, k in enumerate(index.locations):
            supply[(k, xi)] = float(dem[i])
            capacity[k] = max(capacity[k], float(dem[i]))
    if fixed_capacity is not None:
        capacity = {k: fixed_capacity[k] for k in problem.locations}
    value = _provider_cost(problem, capacity, supply)
    if problem.params.beta2 > 0:
        value += sum(p * _user_cost(problem.network, index, problem.params, sol)
                     for p, sol in zip(problem.probs, gcda))
    return value


def _dual_from_parts(problem: EquilibriumProblem, index: TripIndex, prices: PriceField,
                     investor: InvestorSolution, gcda) -> float:
    """Lagrangian dual value from solved subproblems (GCDA enters through its lower bound)."""
    value = -investor.profit
    params = problem.params
    for xi, (p, sol) in enumerate(zip(problem.probs, gcda)):
        if params.beta2 > 0:
            value += p * params.beta1 / params.beta2 * sol.lower_bound
        else:
            # demand does not react to prices: the traveler block only contributes the payments
            dem = index.service_demand(np.asarray(sol.q))
            value += p * sum(prices.rho[(k, xi)] * float(dem[i]) for i, k in enumerate(index.locations))
    return value


def _feasibility(solution: EquilibriumSolution, problem: EquilibriumProblem, index: TripIndex, tol: float) -> None:
    scale = problem.demand_scale()
    inv = solution.investor
    for k in problem.locations:
        c = inv.capacity[k]
        if c < -tol:
            raise DomainError(f"capacity constraint violated: negative capacity at location {k}")
        for xi in range(len(problem.scenarios)):
            g = inv.supply[(k, xi)]
            if g > c + tol * max(1.0, c) or g < -tol:
                raise DomainError(f"capacity constraint violated at location {k}, scenario {xi}: g={g}, c={c}")
    for xi, sol in enumerate(solution.gcda):
        q = np.asarray(sol.q)
        totals = np.bincount(index.pair_of, weights=q, minlength=len(index.pairs))
        target = problem.scenarios.thetas[xi] * index.demand
        if np.any(np.abs(totals - target) > tol * np.maximum(target, 1.0)):
            raise DomainError(f"OD demand conservation violated in scenario {xi}")
        if np.any(q < -tol):
            raise DomainError(f"negative facility flow in scenario {xi}")
        dem = index.service_demand(q)
        for i, k in enumerate(index.locations):
            if abs(inv.supply[(k, xi)] - dem[i]) > tol * scale:
                raise DomainError(f"market clearing violated at location {k}, scenario {xi}: "
                                  f"supply {inv.supply[(k, xi)]:.6g} vs demand {dem[i]:.6g}")


def combined_objective(solution: EquilibriumSolution, problem: EquilibriumProblem, tol: float = 1e-6) -> float:
    """Value of the convex program at ``solution`` (which must be feasible within ``tol``).

    With ``beta2 = 0`` the traveler term is undefined and only the provider
    costs are returned; flows then do not respond to prices at all.
    """
    index = TripIndex(problem.network, problem.trips)
    _feasibility(solution, problem, index, tol)
    value = _provider_cost(problem, solution.investor.capacity, solution.investor.supply)
    if problem.params.beta2 > 0:
        value += sum(p * _user_cost(problem.network, index, problem.params, sol)
                     for p, sol in zip(problem.probs, solution.gcda))
    return value


def _solve_subproblems(problem: EquilibriumProblem, index: TripIndex, prices: PriceField, inner_tol: float,
                       warm=None, threads: int = 1, fixed_capacity=None):
    investor = solve_investor(prices, problem.probs, problem.costs, fixed_capacity)

    def one(xi):
        gp = GcdaProblem(problem.network, problem.trips, problem.params, prices.scenario(xi),
                         problem.scenarios.thetas[xi])
        start = warm[xi] if warm is not None else None
        return solve_gcda(gp, tol=inner_tol, start=start, index=index)

    n = len(problem.scenarios)
    if threads > 1 and n > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            gcda = list(pool.map(one, range(n)))
    else:
        gcda = [one(xi) for xi in range(n)]
    return investor, gcda


def dual_value(prices: PriceField, problem: EquilibriumProblem, inner_tol: float = INNER_TOL_FLOOR,
               fixed_capacity: Mapping[int, float] | None = None) -> float:
    """Lagrangian dual at ``prices``, re-solving both subproblems."""
    index = TripIndex(problem.network, problem.trips)
    investor, gcda = _solve_subproblems(problem, index, prices, inner_tol, fixed_capacity=fixed_capacity)
    return _dual_from_parts(problem, index, prices, investor, gcda)


def duality_gap(solution: EquilibriumSolution, prices: PriceField, problem: EquilibriumProblem,
                inner_tol: float = INNER_TOL_FLOOR) -> float:
    """``(primal - dual) / max(1, |dual|)``.

    The primal side is the objective at the feasible point rebuilt from the
    solution's traveler flows (supply equal to demand, capacity equal to the
    largest supply or to the solution's pinned capacity); the dual side
    re-solves both subproblems at ``prices`` under the same pin.
    """
    index = TripIndex(problem.network, problem.trips)
    primal = _restored_primal(problem, index, solution.gcda, solution.fixed_capacity)
    dual = dual_value(prices, problem, inner_tol, solution.fixed_capacity)
    return (primal - dual) / max(1.0, abs(dual))


# --------------------------------------------------------------------------- solver

def _demand_jacobian(index: TripIndex, params: UtilityParams, sol: GcdaSolution) -> np.ndarray:
    """d(service demand at k) / d(rho at k') for one scenario, holding travel times fixed."""
    n_loc = len(index.locations)
    jac = np.zeros((n_loc, n_loc))
    if params.beta2 == 0:
        return jac
    q = np.asarray(sol.q)
    e = index.e_of
    starts = np.flatnonzero(np.r_[True, index.pair_of[1:] != index.pair_of[:-1]])
    bounds = np.r_[starts, len(q)]
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        total = q[lo:hi].sum()
        if total <= 0:
            continue
        loc = index.loc_of[lo:hi]
        w = e[lo:hi] ** 2 * q[lo:hi]
        share = q[lo:hi] / total
        np.add.at(jac, (loc, loc), -params.beta2 * w)
        jac[np.ix_(loc, loc)] += params.beta2 * np.outer(w, share)
    return jac


class _State:
    """Everything known at one price iterate."""

    def __init__(self, problem, index, prices, investor, gcda, fixed_capacity):
        self.prices = prices
        self.investor = investor
        self.gcda = gcda
        locs = index.locations
        n = len(problem.scenarios)
        self.demand = np.zeros((len(locs), n))
        for xi, sol in enumerate(gcda):
            self.demand[:, xi] = index.service_demand(np.asarray(sol.q))
        supply = np.array([[investor.supply[(k, xi)] for xi in range(n)] for k in locs])
        self.excess = supply - self.demand
        self.residual = float(np.max(np.abs(self.excess))) / problem.demand_scale() if self.excess.size else 0.0
        self.norm = float(np.linalg.norm(self.excess)) / problem.demand_scale()
        self.primal = _restored_primal(problem, index, gcda, fixed_capacity)
        self.dual = _dual_from_parts(problem, index, prices, investor, gcda)
        self.gap = (self.primal - self.dual) / max(1.0, abs(self.dual))
        self.wardrop = max((s.rel_gap for s in gcda), default=0.0)
        self.inner_ok = all(s.converged for s in gcda)


def _initial_prices(problem: EquilibriumProblem, init) -> PriceField:
    locs, probs = problem.locations, problem.probs
    if init is None:
        # marginal cost of the first unit: the lowest price at which anything is built
        return PriceField({(k, xi): problem.costs[k].capital.derivative(0.0) + problem.costs[k].operating.b
                           for k in locs for xi in range(len(probs))}, probs)
    if isinstance(init, PriceField):
        return PriceField(dict(init.rho), probs)
    if isinstance(init, Mapping):
        return PriceField(init, probs)
    return PriceField.uniform(locs, probs, float(init))


def _check_fixed_capacity(problem: EquilibriumProblem, index: TripIndex, fixed_capacity: Mapping) -> None:
    served = {index.locations[i] for i in np.unique(index.loc_of).tolist()}
    total_cap = sum(fixed_capacity[k] for k in problem.locations)
    for xi in range(len(problem.scenarios)):
        need = problem.service_demand(xi)
        if need > 0 and total_cap < need * (1.0 - 1e-12):
            raise InfeasibleError(f"scenario {xi}: total capacity {total_cap:.6g} cannot serve "
                                  f"service demand {need:.6g}")
        if need > 0:
            closed = [k for k in served if fixed_capacity[k] <= 0.0]
            if closed:
                raise InfeasibleError(f"locations {closed} have zero capacity but attract demand under logit choice")


def solve_equilibrium(problem: EquilibriumProblem, tol_mc: float = 1e-4, max_outer: int = 200,
                      step_rule: str = "newton", init_prices=None, step: float | None = None,
                      gap_tol: float = 1e-4, threads: int = 1,
                      fixed_capacity: Mapping[int, float] | None = None) -> EquilibriumSolution:
    """Adjust prices until every facility market clears.

    ``step_rule="newton"`` (default) solves the linearised market-clearing
    system built from investor supply slopes and logit demand slopes, with
    step halving whenever the residual does not fall. ``step_rule="gradient"``
    is plain projected dual ascent ``rho <- max(0, rho - step * excess)`` with
    the step halved when the residual has not improved over five iterations.

    ``fixed_capacity`` pins first-stage capacities, leaving supplies and prices
    to adjust; it raises :class:`InfeasibleError` if some scenario's demand
    cannot be served.
    """
    if step_rule not in ("newton", "gradient"):
        raise DomainError(f"unknown step rule {step_rule!r}")
    if not tol_mc > 0 or not gap_tol > 0:
        raise DomainError("tolerances must be positive")
    index = TripIndex(problem.network, problem.trips)
    locs = problem.locations
    n_sc = len(problem.scenarios)
    probs = problem.probs
    if fixed_capacity is not None:
        fixed_capacity = {int(k): float(v) for k, v in fixed_capacity.items()}
        _check_fixed_capacity(problem, index, fixed_capacity)

    # locations no traveler may use never see demand; their price is zero
    usable = np.zeros(len(locs), dtype=bool)
    if len(index.loc_of):
        usable[np.unique(index.loc_of)] = True
    if problem.trips.total_service_demand(1.0) == 0:
        usable[:] = False

    def clamp(p: PriceField) -> PriceField:
        rho = dict(p.rho)
        for i, k in enumerate(locs):
            if not usable[i]:
                for xi in range(n_sc):
                    rho[(k, xi)] = 0.0
        return PriceField(rho, probs)

    def evaluate(prices, warm, inner_tol):
        investor, gcda = _solve_subproblems(problem, index, prices, inner_tol, warm, threads, fixed_capacity)
        return _State(problem, index, prices, investor, gcda, fixed_capacity)

    state = evaluate(clamp(_initial_prices(problem, init_prices)), None, 1e-8)
    inner_tol = _inner_tol(state.residual)
    state = evaluate(state.prices, state.gcda, inner_tol)
    history = [_record(state, 0)]
    if step is None:
        b = np.mean([problem.costs[k].capital.derivative(0.0) + problem.costs[k].operating.b for k in locs])
        step = 0.05 * max(b, 1.0) / problem.demand_scale()
    omega = 1.0
    dual_window = [state.dual]
    converged = False
    it = 0
    while True:
        if state.residual <= tol_mc and state.gap <= gap_tol and state.inner_ok:
            converged = True
            break
        if it >= max_outer:
            log.warning("equilibrium stopped at max_outer=%d: residual %.3e, gap %.3e", max_outer,
                        state.residual, state.gap)
            break
        it += 1
        inner_tol = _inner_tol(state.residual)
        if step_rule == "gradient":
            excess = {(k, xi): state.excess[i, xi] for i, k in enumerate(locs) for xi in range(n_sc)}
            new = evaluate(clamp(dual_step(state.prices, excess, step)), state.gcda, inner_tol)
            dual_window.append(new.dual)
            if len(dual_window) > 5 and max(dual_window[-5:]) <= dual_window[-6]:
                step *= 0.5
                log.info("dual value has not risen over 5 iterations; step halved to %.3e", step)
                dual_window = [new.dual]
            state = new
        else:
            state, omega = _newton_step(problem, index, state, omega, evaluate, clamp, inner_tol, usable,
                                        fixed_capacity)
        history.append(_record(state, it))

    residuals = ResidualReport(state.residual, state.gap, state.wardrop, it, converged)
    return EquilibriumSolution(state.investor, state.gcda, state.prices, residuals, history, fixed_capacity)


def _inner_tol(residual: float) -> float:
    """GCDA gap target for the next outer iteration.

    The GCDA gap is relative to an objective that includes all price payments,
    so share errors of order ``sqrt(gap)`` survive; the target therefore drops
    quadratically with the market residual.
    """
    return max(INNER_TOL_FLOOR, min(1e-8, 1e-4 * residual * residual))


def _record(state: _State, it: int) -> dict:
    return {"iteration": it, "residual": state.residual, "primal": state.primal, "dual": state.dual,
            "gap": state.gap}


def _supply_model(cost: LocationCost, probs, rho_new, capacity, binding, fixed: bool):
    """Affine supply map of one location for a given set of capacity-bound scenarios.

    Returns ``(A, b)`` with ``g = A @ rho_new + b`` and the capacity implied by
    ``rho_new``. Scenarios below the operating threshold keep the interior
    formula (negative supply is never reached where demand is positive).
    """
    n = len(probs)
    op = cost.operating
    A = np.zeros((n, n))
    b = np.zeros(n)
    if op.a == 0.0:
        binding = [True] * n
    if fixed:
        c = capacity
        for xi in range(n):
            if binding[xi]:
                b[xi] = c
            else:
                A[xi, xi] = 1.0 / (2.0 * op.a)
                b[xi] = -op.b / (2.0 * op.a)
        return A, b, c
    a_c, b_c = cost.capital.local(capacity)
    w = np.array([probs[xi] if binding[xi] else 0.0 for xi in range(n)])
    den = 2.0 * op.a * w.sum() + 2.0 * a_c
    # c = (sum_B pi (rho - b_g) - b_c) / den
    c_row = w / den
    c_const = (-op.b * w.sum() - b_c) / den
    c = float(c_row @ rho_new + c_const)
    for xi in range(n):
        if binding[xi]:
            A[xi] = c_row
            b[xi] = c_const
        else:
            A[xi, xi] = 1.0 / (2.0 * op.a)
            b[xi] = -op.b / (2.0 * op.a)
    return A, b, c


def _classify(cost: LocationCost, rho_row, c: float, fixed: bool) -> list:
    op = cost.operating
    threshold = op.derivative(max(c, 0.0))
    bound = [r >= threshold for r in rho_row]
    if not fixed:
        # capacity always binds in the highest-price scenario
        bound[int(np.argmax(rho_row))] = True
    return bound


def _model_prices(problem, state: "_State", jd, usable, fixed_capacity):
    """Prices solving the piecewise-linear investor model against linearised demand."""
    locs = problem.locations
    n_sc = len(problem.scenarios)
    probs = problem.probs
    rho0 = state.prices.matrix(locs)
    fixed = fixed_capacity is not None
    binding = []
    for i, k in enumerate(locs):
        cap = fixed_capacity[k] if fixed else state.investor.capacity[k]
        if cap > 0.0 or fixed:
            binding.append(_classify(problem.costs[k], rho0[i], cap, fixed))
        else:
            binding.append([True] * n_sc)
    act = [i for i in range(len(locs)) if usable[i]]
    size = len(act) * n_sc
    pos = {i: j for j, i in enumerate(act)}
    rho_new = rho0.copy()
    seen = set()
    for _ in range(50):
        M = np.zeros((size, size))
        rhs = np.zeros(size)
        caps = {}
        for i in act:
            k = locs[i]
            cap = fixed_capacity[k] if fixed else state.investor.capacity[k]
            A, b, _ = _supply_model(problem.costs[k], probs, rho_new[i], cap, binding[i], fixed)
            sl = slice(pos[i] * n_sc, (pos[i] + 1) * n_sc)
            M[sl, sl] += A
            rhs[sl] -= b
        for xi in range(n_sc):
            rows = np.array([pos[i] * n_sc + xi for i in act], dtype=int)
            sub = jd[xi][np.ix_(act, act)]
            M[np.ix_(rows, rows)] -= sub
            # demand model: D = D0 + Jd (rho_new - rho0)
            rhs[rows] += state.demand[act, xi] - sub @ rho0[act, xi]
        reg = 1e-12 * max(1.0, float(np.max(np.abs(np.diag(M))))) if size else 0.0
        try:
            sol = np.linalg.solve(M + reg * np.eye(size), rhs)
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(M, rhs, rcond=None)[0]
        for i in act:
            rho_new[i] = sol[pos[i] * n_sc:(pos[i] + 1) * n_sc]
        changed = False
        for i in act:
            k = locs[i]
            cap = fixed_capacity[k] if fixed else state.investor.capacity[k]
            _, _, c = _supply_model(problem.costs[k], probs, rho_new[i], cap, binding[i], fixed)
            caps[i] = c
            new_b = _classify(problem.costs[k], rho_new[i], c, fixed)
            if new_b != binding[i]:
                binding[i] = new_b
                changed = True
        key = tuple(tuple(b) for b in binding)
        if not changed or key in seen:
            break
        seen.add(key)
    return rho_new


def _newton_step(problem, index, state: _State, omega, evaluate, clamp, inner_tol, usable, fixed_capacity):
    locs = problem.locations
    jd = [_demand_jacobian(index, problem.params, sol) for sol in state.gcda]
    target = _model_prices(problem, state, jd, usable, fixed_capacity)
    base = state.prices.matrix(locs)
    delta = target - base
    best = None
    w = omega
    for _ in range(30):
        trial_rho = np.maximum(base + w * delta, 0.0)
        trial = evaluate(clamp(PriceField.from_matrix(locs, problem.probs, trial_rho)), state.gcda, inner_tol)
        if best is None or trial.norm < best.norm:
            best = trial
        if trial.norm < state.norm * (1.0 - 1e-4 * w) or trial.norm == 0.0:
            return trial, min(1.0, 2.0 * w)
        w *= 0.5
        log.info("market residual did not fall; Newton step halved to %.3e", w)
    log.warning("no decrease found along the Newton direction; taking the best trial point")
    return best, 1.0


# --------------------------------------------------------------------------- verification

@dataclass
class EquilibriumReport:
    """Named checks; each entry is ``(value, passed)``."""

    checks: dict
    tol: float

    @property
    def passed(self) -> bool:
        return all(ok for _, ok in self.checks.values())

    @property
    def failed(self) -> list:
        return [name for name, (_, ok) in self.checks.items() if not ok]

    def as_dict(self) -> dict:
        return {name: {"value": value, "passed": ok} for name, (value, ok) in self.checks.items()}


def verify_equilibrium(solution: EquilibriumSolution, problem: EquilibriumProblem,
                       tol: float = 1e-3) -> EquilibriumReport:
    """Check investor optimality, traveler equilibrium, market clearing and the duality gap."""
    scale = problem.demand_scale()
    checks = {}
    inv = solution.investor
    fresh = solve_investor(solution.prices, problem.probs, problem.costs, solution.fixed_capacity)
    dev = 0.0
    for k in problem.locations:
        dev = max(dev, abs(fresh.capacity[k] - inv.capacity[k]))
        for xi in range(len(problem.scenarios)):
            dev = max(dev, abs(fresh.supply[(k, xi)] - inv.supply[(k, xi)]))
    dev /= scale
    checks["investor_optimality"] = (dev, dev <= tol)

    worst = 0.0
    ok = True
    for xi, sol in enumerate(solution.gcda):
        rep = verify_wardrop_logit(problem.network, problem.trips, problem.params, solution.prices.scenario(xi),
                                   sol, tol, problem.scenarios.thetas[xi])
        worst = max(worst, rep.tau_residual, rep.logit_residual, rep.wardrop_gap, rep.demand_residual)
        ok = ok and rep.passed
    checks["traveler_equilibrium"] = (worst, ok)

    excess = excess_supply(inv, solution.gcda, problem.trips, problem.network)
    market = max((abs(x) for x in excess.values()), default=0.0) / scale
    checks["market_clearing"] = (market, market <= tol)

    gap = duality_gap(solution, solution.prices, problem)
    checks["duality_gap"] = (gap, -1e-9 <= gap <= tol)
    return EquilibriumReport(checks, tol)
