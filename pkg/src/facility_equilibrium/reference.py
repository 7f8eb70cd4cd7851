"""Monolithic convex solve of the equilibrium program, used only as a cross-check.

All simple paths are enumerated, so this is restricted to tiny instances. The
program is handed to cvxpy (Clarabel interior point) in one piece; prices are
read from the multipliers of the market-clearing constraints divided by the
scenario probabilities. Nothing here is shared with the decomposition solver
beyond the data types.
"""

from __future__ import annotations

import logging
import warnings

import cvxpy as cp
import numpy as np

from .equilibrium import EquilibriumProblem, EquilibriumSolution, PriceField, ResidualReport
from .errors import DomainError, InfeasibleError
from .gcda import GcdaSolution
from .investor import InvestorSolution, PiecewiseQuadraticCost, QuadraticCost, investor_objective
from .network import Network, TripIndex

log = logging.getLogger(__name__)

MAX_LOCATIONS = 3
MAX_SCENARIOS = 2
MAX_NODES = 6


def _simple_paths(network: Network, source: int, target: int) -> list:
    """Every simple path as a list of link positions (the empty path when source == target)."""
    if source == target:
        return [[]]
    out = []
    stack = [(source, [], {source})]
    while stack:
        node, path, seen = stack.pop()
        for pos, link in enumerate(network.links):
            if link.tail != node or link.head in seen:
                continue
            if link.head == target:
                out.append(path + [pos])
            else:
                stack.append((link.head, path + [pos], seen | {link.head}))
    return out


def _capital_expr(cost, c):
    if isinstance(cost, QuadraticCost):
        return cost.a * cp.square(c) + cost.b * c
    if isinstance(cost, PiecewiseQuadraticCost):
        raise DomainError("piecewise capital costs need explicit investors for the reference solve")
    raise DomainError(f"unsupported capital cost {type(cost).__name__}")


def solve_reference(problem: EquilibriumProblem) -> EquilibriumSolution:
    """Solve the whole program at once; for instances of at most 3 locations, 2 scenarios and 6 nodes."""
    net = problem.network
    locs = problem.locations
    n_sc = len(problem.scenarios)
    if len(locs) > MAX_LOCATIONS or n_sc > MAX_SCENARIOS or len(net.nodes) > MAX_NODES:
        raise DomainError(f"reference solve limited to {MAX_LOCATIONS} locations, {MAX_SCENARIOS} scenarios "
                          f"and {MAX_NODES} nodes")
    params = problem.params
    if params.beta2 <= 0:
        raise DomainError("reference solve needs beta2 > 0")
    index = TripIndex(net, problem.trips)
    probs = problem.probs
    n_links = len(net.links)
    weight = params.beta1 / params.beta2
    beta0 = params.attractiveness(index.locations)[index.loc_of]

    c = cp.Variable(len(locs), nonneg=True)
    g = cp.Variable((len(locs), n_sc), nonneg=True)
    cons = []
    objective = 0
    for i, k in enumerate(locs):
        cost = problem.costs[k]
        if cost.investors:
            parts = cp.Variable(len(cost.investors), nonneg=True)
            cons.append(cp.sum(parts) == c[i])
            objective += sum(inv.a * cp.square(parts[j]) + inv.b * parts[j] for j, inv in enumerate(cost.investors))
        else:
            objective += _capital_expr(cost.capital, c[i])
        for xi in range(n_sc):
            cons.append(g[i, xi] <= c[i])
            objective += probs[xi] * (cost.operating.a * cp.square(g[i, xi]) + cost.operating.b * g[i, xi])

    up_paths = {}
    down_paths = {}
    for (r, s, k) in index.triples:
        up_paths.setdefault((r, k), _simple_paths(net, r, k))
        down_paths.setdefault((k, s), _simple_paths(net, k, s))
        if not up_paths[(r, k)] or not down_paths[(k, s)]:
            raise InfeasibleError(f"triple {(r, s, k)} has no path")

    market = []
    q_vars, v_vars = [], []
    n_tr = len(index.triples)
    for xi in range(n_sc):
        theta = problem.scenarios.thetas[xi]
        q = cp.Variable(n_tr, nonneg=True)
        columns, owner = [], []
        for t_i, (r, s, k) in enumerate(index.triples):
            for legs in (up_paths[(r, k)], down_paths[(k, s)]):
                f = cp.Variable(len(legs), nonneg=True)
                cons.append(cp.sum(f) == q[t_i])
                owner.append(f)
                for path in legs:
                    col = np.zeros(n_links)
                    col[path] = 1.0
                    columns.append(col)
        v = cp.Variable(n_links, nonneg=True)
        cons.append(v == np.column_stack(columns) @ cp.hstack(owner))
        for p_idx in range(len(index.pairs)):
            members = np.flatnonzero(index.pair_of == p_idx)
            cons.append(cp.sum(q[members]) == theta * index.demand[p_idx])
        for i, k in enumerate(locs):
            members = np.flatnonzero(index.loc_of == i)
            served = index.e_of[members] @ q[members] if len(members) else 0
            con = g[i, xi] == served
            cons.append(con)
            market.append((k, xi, con))
        integral = 0
        for a, link in enumerate(net.links):
            integral += link.free_flow_time * v[a]
            if link.bpr_alpha:
                # written in v/c so the cone data stay well scaled
                integral += (link.free_flow_time * link.bpr_alpha * link.capacity_param / (link.bpr_beta + 1)
                             * cp.power(v[a] / link.capacity_param, link.bpr_beta + 1))
        user = weight * integral + (cp.sum(-cp.entr(q)) - (1.0 + beta0) @ q) / params.beta2
        objective += probs[xi] * user
        q_vars.append(q)
        v_vars.append(v)

    prob = cp.Problem(cp.Minimize(objective), cons)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12, max_iter=500)
    if prob.status == cp.OPTIMAL_INACCURATE:
        # tolerances are set near round-off; the reduced-accuracy point is still far inside 1e-6
        log.info("reference solve stopped at reduced accuracy")
    if prob.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        raise InfeasibleError(f"reference solve ended with status {prob.status}")

    rho = {}
    for k, xi, con in market:
        # the constraint reads g - demand = 0, so its multiplier is minus the marginal cost of supply
        rho[(k, xi)] = max(0.0, -float(con.dual_value)) / probs[xi]
    prices = PriceField(rho, probs)
    capacity = {k: max(0.0, float(c.value[i])) for i, k in enumerate(locs)}
    supply = {(k, xi): min(max(0.0, float(g.value[i, xi])), capacity[k]) for i, k in enumerate(locs)
              for xi in range(n_sc)}
    investor = InvestorSolution(capacity, supply, 0.0, {})
    investor.profit = investor_objective(investor, prices, probs, problem.costs)

    gcda = []
    for xi in range(n_sc):
        qv = np.maximum(np.asarray(q_vars[xi].value, dtype=float), 0.0)
        vv = np.maximum(np.asarray(v_vars[xi].value, dtype=float), 0.0)
        tau = index.leg_times(*index.trees(net.times(vv)))
        gcda.append(GcdaSolution(index.triples, qv, vv, tau, float("nan"), float("nan"), 0.0, 0, True))
    scale = problem.demand_scale()
    residual = max(abs(supply[(k, xi)] - float(index.service_demand(gcda[xi].q)[i]))
                   for i, k in enumerate(locs) for xi in range(n_sc)) / scale
    report = ResidualReport(residual, 0.0, 0.0, 1, True)
    return EquilibriumSolution(investor, gcda, prices, report, [{"objective": float(prob.value)}])
