"""Combined facility choice and route assignment for one demand scenario.

Travelers going from r to s pick a service location k by multinomial logit on
``beta0[k] - beta1 * tau_rsk - beta2 * rho[k] * e_rs`` and route themselves by
Wardrop's first principle. The joint pattern is the minimiser of

    sum_a int_0^{v_a} t_a(u) du + (1/beta1) sum_rsk q (ln q - 1 + beta2 rho e - beta0)

over facility flows ``q`` and link flows ``v``, solved here with Evans' partial
linearization: logit distribution and all-or-nothing loading on current
shortest legs give an auxiliary point, and an exact line search moves toward it.
The paths loaded by those steps are remembered, which lets each iteration add
a Newton sweep that re-balances route and facility shares within every OD pair.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import DomainError, InfeasibleError, ValidationError
from .network import Network, TripIndex, TripTable, load_tree, tree_path

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-300
# gap accepted when the objective has stopped changing in floating point
STALL_GAP = 1e-9
# share and route-cost consistency demanded on top of the gap
KKT_TOL = 1e-8
ROUNDOFF = 1e-14


@dataclass(frozen=True)
class UtilityParams:
    beta1: float = 1.0
    beta2: float = 0.06
    beta0: Mapping[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.beta1 > 0:
            raise DomainError("beta1 must be > 0")
        if self.beta2 < 0:
            raise DomainError("beta2 must be >= 0")
        object.__setattr__(self, "beta0", {int(k): float(b) for k, b in dict(self.beta0).items()})

    def attractiveness(self, locations) -> np.ndarray:
        return np.array([self.beta0.get(k, 0.0) for k in locations], dtype=float)

    def replace(self, **changes) -> "UtilityParams":
        data = {"beta1": self.beta1, "beta2": self.beta2, "beta0": self.beta0}
        data.update(changes)
        return UtilityParams(**data)


@dataclass
class GcdaProblem:
    network: Network
    trips: TripTable
    params: UtilityParams
    prices: Mapping[int, float]
    demand_scale: float = 1.0

    def __post_init__(self):
        if not self.demand_scale > 0:
            raise DomainError("demand_scale must be > 0")
        self.prices = {int(k): float(p) for k, p in dict(self.prices).items()}
        if any(p < 0 for p in self.prices.values()):
            raise DomainError("prices must be nonnegative")

    def price_vector(self, index: TripIndex) -> np.ndarray:
        return np.array([self.prices.get(k, 0.0) for k in index.locations], dtype=float)


@dataclass
class GcdaSolution:
    """Solved scenario. ``q`` and ``tau`` are aligned with ``triples``; ``v`` with links."""

    triples: tuple
    q: np.ndarray
    v: np.ndarray
    tau: np.ndarray
    objective: float
    lower_bound: float
    rel_gap: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list, repr=False)
    leg_flows: tuple | None = field(default=None, repr=False)
    routes: object = field(default=None, repr=False, compare=False)

    def q_by_triple(self) -> dict:
        return dict(zip(self.triples, self.q.tolist()))

    def tau_by_triple(self) -> dict:
        return dict(zip(self.triples, self.tau.tolist()))


class _Kernel:
    """Array-level pieces of the GCDA objective for fixed prices and demand scale."""

    def __init__(self, index: TripIndex, params: UtilityParams, prices: np.ndarray, demand_scale: float):
        self.index = index
        self.net = index.network
        self.beta1 = params.beta1
        self.beta2 = params.beta2
        self.pair_demand = demand_scale * index.demand
        beta0 = params.attractiveness(index.locations)[index.loc_of]
        # constant part of the utility (everything but travel time)
        self.const_utility = beta0 - params.beta2 * prices[index.loc_of] * index.e_of
        self.linear_coef = -self.const_utility  # beta2 rho e - beta0
        pair_of = index.pair_of
        self.starts = np.flatnonzero(np.r_[True, pair_of[1:] != pair_of[:-1]]) if len(pair_of) else np.zeros(0, int)
        self.seg_pair = pair_of[self.starts] if len(pair_of) else np.zeros(0, int)
        self.seg_of = np.repeat(np.arange(len(self.starts)), np.diff(np.r_[self.starts, len(pair_of)]))

    def utilities(self, tau: np.ndarray) -> np.ndarray:
        return self.const_utility - self.beta1 * tau

    def logsumexp(self, V: np.ndarray) -> np.ndarray:
        """Per-pair log-sum-exp of utilities (one entry per pair segment)."""
        if not len(V):
            return np.zeros(0)
        m = np.maximum.reduceat(V, self.starts)
        if np.any(~np.isfinite(m)):
            bad = self.seg_pair[~np.isfinite(m)]
            raise InfeasibleError(f"no finite-utility facility for pair(s) {[self.index.pairs[p] for p in bad]}")
        return m + np.log(np.add.reduceat(np.exp(V - m[self.seg_of]), self.starts))

    def shares(self, tau: np.ndarray) -> np.ndarray:
        V = self.utilities(tau)
        return np.exp(V - self.logsumexp(V)[self.seg_of])

    def logit(self, tau: np.ndarray) -> np.ndarray:
        return self.pair_demand[self.index.pair_of] * self.shares(tau)

    def entropy_part(self, q: np.ndarray) -> float:
        qlogq = np.where(q > 0, q * np.log(np.maximum(q, PROB_FLOOR)), 0.0)
        return float(np.sum(qlogq + q * (self.linear_coef - 1.0)) / self.beta1)

    def objective(self, v: np.ndarray, q: np.ndarray) -> float:
        return float(np.sum(self.net.time_integrals(v))) + self.entropy_part(q)

    def lower_bound(self, v: np.ndarray, t: np.ndarray, tau_min: np.ndarray) -> float:
        """Partial-linearization bound: link part linearized, entropy part minimised exactly."""
        D = self.pair_demand[self.seg_pair]
        lse = self.logsumexp(self.utilities(tau_min))
        with np.errstate(divide="ignore", invalid="ignore"):
            dist = np.where(D > 0, D * (np.log(np.maximum(D, PROB_FLOOR)) - 1.0 - lse), 0.0)
        return float(np.sum(self.net.time_integrals(v)) - t @ v + np.sum(dist) / self.beta1)

    def kkt_residual(self, v, q, t, tau) -> float:
        """Largest of the logit-share error and the relative Wardrop gap."""
        share = q / np.maximum(self.pair_demand[self.index.pair_of], PROB_FLOOR)
        logit = float(np.max(np.abs(share - self.shares(tau)))) if len(q) else 0.0
        shortest = float(q @ tau)
        wardrop = (float(t @ v) - shortest) / shortest if shortest > 0 else 0.0
        return max(logit, wardrop)

    def derivative(self, v, q, dv, dq, alpha) -> float:
        va = np.maximum(v + alpha * dv, 0.0)
        qa = np.maximum(q + alpha * dq, PROB_FLOOR)
        return float(self.net.times(va) @ dv + ((np.log(qa) + self.linear_coef) @ dq) / self.beta1)


def _bisect_step(kernel: _Kernel, v, q, dv, dq) -> float:
    if not np.any(dv) and not np.any(dq):
        return 0.0
    lo, hi = 0.0, 1.0
    if kernel.derivative(v, q, dv, dq, 0.0) >= 0:
        return 0.0
    if kernel.derivative(v, q, dv, dq, 1.0) <= 0:
        return 1.0
    while hi - lo > 1e-12:
        mid = 0.5 * (lo + hi)
        g = kernel.derivative(v, q, dv, dq, mid)
        if abs(g) <= 1e-10:
            return mid
        if g < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _aon(index: TripIndex, from_r, from_k, q: np.ndarray) -> np.ndarray:
    y = np.zeros(len(index.network.links))
    loads_r: dict[int, dict[int, float]] = {}
    loads_k: dict[int, dict[int, float]] = {}
    for (r, s, k), flow in zip(index.triples, q.tolist()):
        if flow == 0.0:
            continue
        lr = loads_r.setdefault(r, {})
        lr[k] = lr.get(k, 0.0) + flow
        lk = loads_k.setdefault(k, {})
        lk[s] = lk.get(s, 0.0) + flow
    for r, loads in loads_r.items():
        load_tree(index.network, from_r[r], loads, y)
    for k, loads in loads_k.items():
        load_tree(index.network, from_k[k], loads, y)
    return y


# --------------------------------------------------------------------------- public ops

def logit_split(tau: Mapping, prices: Mapping[int, float], params: UtilityParams, trips: TripTable,
                demand_scale: float = 1.0, candidates=None) -> dict:
    """Logit facility flows for given leg times ``tau[(r, s, k)]``."""
    order = []
    for (r, s, k), t in tau.items():
        if not math.isfinite(t):
            raise ValidationError(f"non-finite leg time for triple {(r, s, k)}")
        order.append((r, s, k))
    pairs = {}
    for r, s, k in order:
        pairs.setdefault((r, s), []).append(k)
    out = {}
    for (r, s), ks in pairs.items():
        d = demand_scale * trips.demand.get((r, s), 0.0)
        e = trips.service_quantity.get((r, s), 1.0)
        V = np.array([params.beta0.get(k, 0.0) - params.beta1 * tau[(r, s, k)]
                      - params.beta2 * prices.get(k, 0.0) * e for k in ks])
        m = V.max()
        if not np.isfinite(m):
            if d > 0:
                raise InfeasibleError(f"pair {(r, s)} has no finite-utility facility")
            m = 0.0
        w = np.exp(V - m)
        p = w / w.sum()
        for k, share in zip(ks, p):
            out[(r, s, k)] = d * float(share)
    for (r, s), d in trips.demand.items():
        if d > 0 and (r, s) not in pairs:
            raise InfeasibleError(f"pair {(r, s)} has demand but no leg times")
    return out


def all_or_nothing(network: Network, times: np.ndarray, q: Mapping, trips: TripTable | None = None) -> np.ndarray:
    """Load each ``q[(r, s, k)]`` on the current shortest r->k and k->s legs."""
    if trips is None:
        trips = TripTable({(r, s): 0.0 for r, s, _ in q}, {},
                          {(r, s): tuple(k for rr, ss, k in q if (rr, ss) == (r, s)) for r, s, _ in q})
    index = TripIndex(network, trips)
    qa = np.array([q.get(t, 0.0) for t in index.triples])
    return _aon(index, *index.trees(np.asarray(times, dtype=float)), qa)


def gcda_objective(network: Network, v, q: Mapping | np.ndarray, prices: Mapping[int, float],
                   params: UtilityParams, trips: TripTable) -> float:
    """Value of the scenario objective; ``q ln q`` is taken as 0 at ``q = 0``."""
    index = TripIndex(network, trips)
    qa = _as_triple_array(index, q)
    v = np.asarray(v, dtype=float)
    if np.any(v < 0) or np.any(qa < 0):
        raise DomainError("flows must be nonnegative")
    prices_arr = np.array([prices.get(k, 0.0) for k in index.locations])
    return _Kernel(index, params, prices_arr, 1.0).objective(v, qa)


def line_search(network: Network, v, q, y, q_aux, prices: Mapping[int, float], params: UtilityParams,
                trips: TripTable) -> float:
    """Exact step in [0, 1] along ``(y - v, q_aux - q)`` by bisection on the directional derivative."""
    index = TripIndex(network, trips)
    qa, qb = _as_triple_array(index, q), _as_triple_array(index, q_aux)
    v, y = np.asarray(v, float), np.asarray(y, float)
    prices_arr = np.array([prices.get(k, 0.0) for k in index.locations])
    kernel = _Kernel(index, params, prices_arr, 1.0)
    return _bisect_step(kernel, v, qa, y - v, qb - qa)


def _as_triple_array(index: TripIndex, q) -> np.ndarray:
    if isinstance(q, Mapping):
        return np.array([q.get(t, 0.0) for t in index.triples], dtype=float)
    return np.asarray(q, dtype=float)


class _Routes:
    """Path bookkeeping for the link flows produced by the iterations.

    Every path stored here came from a shortest-path tree; ``up[i]`` holds the
    r->k leg paths of triple ``i`` and ``down[i]`` the k->s leg paths, each as
    ``{tuple_of_link_indices: flow}``.
    """

    def __init__(self, index: TripIndex, q: np.ndarray, trees):
        self.index = index
        self.up: list[dict] = []
        self.down: list[dict] = []
        cache = {}
        for i, flow in enumerate(q.tolist()):
            p_up, p_down = self._tree_legs(i, trees, cache)
            self.up.append({p_up: flow})
            self.down.append({p_down: flow})

    def _tree_legs(self, i, trees, cache):
        r, s, k = self.index.triples[i]
        from_r, from_k = trees
        key_up, key_down = ("r", r, k), ("k", k, s)
        if key_up not in cache:
            cache[key_up] = tuple(tree_path(self.index.network, from_r[r], k))
        if key_down not in cache:
            cache[key_down] = tuple(tree_path(self.index.network, from_k[k], s))
        return cache[key_up], cache[key_down]

    def link_flows(self) -> np.ndarray:
        v = np.zeros(len(self.index.network.links))
        for legs in (self.up, self.down):
            for paths in legs:
                for path, f in paths.items():
                    if path:
                        v[list(path)] += f
        return v

    def leg_flow_arrays(self):
        n = len(self.index.network.links)
        up = np.zeros((len(self.up), n))
        down = np.zeros((len(self.down), n))
        for i in range(len(self.up)):
            for path, f in self.up[i].items():
                up[i, list(path)] += f
            for path, f in self.down[i].items():
                down[i, list(path)] += f
        return up, down

    def evans_update(self, alpha: float, q_aux: np.ndarray, trees) -> None:
        cache = {}
        keep = 1.0 - alpha
        for i, aux in enumerate(q_aux.tolist()):
            p_up, p_down = self._tree_legs(i, trees, cache)
            for legs, p in ((self.up, p_up), (self.down, p_down)):
                paths = {path: f * keep for path, f in legs[i].items() if f * keep > 0.0}
                paths[p] = paths.get(p, 0.0) + alpha * aux
                legs[i] = paths

    def copy(self) -> "_Routes":
        other = object.__new__(_Routes)
        other.index = self.index
        other.up = [dict(p) for p in self.up]
        other.down = [dict(p) for p in self.down]
        return other


class _LinkState:
    """Mutable link flows and times for Gauss-Seidel flow shifts."""

    def __init__(self, net: Network, v: np.ndarray):
        self.fft = net.fft.tolist()
        self.alpha = net.alpha.tolist()
        self.cap = net.cap.tolist()
        self.beta = [int(b) for b in net.beta.tolist()]
        self.v = v.tolist()
        self.t = net.times(v).tolist()

    def shift(self, links, delta):
        v, t = self.v, self.t
        for a in links:
            x = v[a] + delta
            v[a] = x if x > 0.0 else 0.0
            t[a] = self.fft[a] * (1.0 + self.alpha[a] * (v[a] / self.cap[a]) ** self.beta[a])

    def slope(self, a) -> float:
        b = self.beta[a]
        return self.fft[a] * self.alpha[a] * b * self.v[a] ** (b - 1) / self.cap[a] ** b

    def cost(self, path) -> float:
        t = self.t
        return sum(t[a] for a in path)


def _equilibrate_leg(paths: dict, shortest: tuple, links: _LinkState) -> None:
    """Newton flow shifts from costlier paths of one leg onto its cheapest path."""
    paths.setdefault(shortest, 0.0)
    if len(paths) < 2:
        return
    best = min(paths, key=links.cost)
    best_set = set(best)
    for p in [p for p in paths if p != best]:
        f = paths[p]
        if f <= 0.0:
            del paths[p]
            continue
        diff = links.cost(p) - links.cost(best)
        if diff <= 0.0:
            continue
        p_set = set(p)
        only_p = [a for a in p if a not in best_set]
        only_b = [a for a in best if a not in p_set]
        dv = {a: -1.0 for a in only_p}
        for a in only_b:
            dv[a] = dv.get(a, 0.0) + 1.0
        delta = _exact_step(links, dv, f, (), 1.0)
        links.shift(only_p, -delta)
        links.shift(only_b, delta)
        if delta >= f:
            del paths[p]
        else:
            paths[p] = f - delta
        paths[best] += delta


def _exact_step(links: "_LinkState", dv: dict, s_max: float, entropy_terms, b1: float) -> float:
    """Minimise the objective along a local direction over ``[0, s_max]``.

    ``dv`` maps link index to flow change per unit step; ``entropy_terms``
    lists ``(q, dq, linear_coef)`` for the facility flows that move.
    Safeguarded Newton on the directional derivative.
    """
    base = {a: links.v[a] for a in dv}
    fft, alpha, cap, beta = links.fft, links.alpha, links.cap, links.beta

    def slope_at(s):
        d1 = d2 = 0.0
        for a, d in dv.items():
            x = base[a] + s * d
            ratio = x / cap[a] if x > 0.0 else 0.0
            b = beta[a]
            d1 += fft[a] * (1.0 + alpha[a] * ratio ** b) * d
            d2 += fft[a] * alpha[a] * b * ratio ** (b - 1) / cap[a] * d * d
        for q0, dq, c in entropy_terms:
            qi = q0 + s * dq
            d1 += (math.log(qi) + c) * dq / b1
            d2 += dq * dq / (b1 * qi)
        return d1, d2

    d0, d2 = slope_at(0.0)
    if d0 >= 0.0:
        return 0.0
    lo, hi = 0.0, s_max
    if slope_at(hi)[0] <= 0.0:
        return hi
    s = min(hi, -d0 / d2) if d2 > 0.0 else 0.5 * hi
    for _ in range(60):
        d1, d2 = slope_at(s)
        if abs(d1) <= 1e-13 * abs(d0):
            break
        if d1 < 0.0:
            lo = s
        else:
            hi = s
        trial = s - d1 / d2 if d2 > 0.0 else 0.5 * (lo + hi)
        s = trial if lo < trial < hi else 0.5 * (lo + hi)
        if hi - lo <= 1e-15 * s_max:
            break
    return s


def _line_search_shift(members, dq, patterns, q, routes, best_up, best_down, links: _LinkState, lin, b1) -> None:
    """Move demand between facilities of one OD pair along ``dq`` with an exact line search.

    Triples losing demand scale their paths down proportionally (``patterns``
    holds the per-unit link usage of each triple); triples gaining demand
    receive it on their cheapest legs.
    """
    dv: dict[int, float] = {}
    for i in members:
        for a, w in patterns[i].items():
            dv[a] = dv.get(a, 0.0) + w * dq[i]
    s_max = 1.0
    for i in members:
        if dq[i] < 0.0:
            s_max = min(s_max, 0.999 * q[i] / -dq[i])
    s = _exact_step(links, dv, s_max, [(q[i], dq[i], lin[i]) for i in members], b1)
    if s <= 0.0:
        return
    for i in members:
        change = s * dq[i]
        if change < 0.0:
            keep = 1.0 + change / q[i]
            routes.up[i] = {p: f * keep for p, f in routes.up[i].items()}
            routes.down[i] = {p: f * keep for p, f in routes.down[i].items()}
        elif change > 0.0:
            routes.up[i][best_up[i]] += change
            routes.down[i][best_down[i]] += change
        q[i] += change
    for a, d in dv.items():
        links.shift((a,), s * d)


def _usage(paths_and_weights) -> dict:
    pat: dict[int, float] = {}
    for path, w in paths_and_weights:
        for a in path:
            pat[a] = pat.get(a, 0.0) + w
    return pat


def _shift_shares(members, q, routes, best_up, best_down, links: _LinkState, lin, b1) -> None:
    """Move demand from each costlier facility of one OD pair onto the cheapest one."""
    members = [i for i in members if q[i] > 0.0]
    if len(members) < 2:
        return
    grad = {i: links.cost(best_up[i]) + links.cost(best_down[i]) + (math.log(q[i]) + lin[i]) / b1
            for i in members}
    b = min(grad, key=grad.get)
    for i in members:
        if i == b or grad[i] <= grad[b]:
            continue
        patterns = {
            i: _usage([(p, f / q[i]) for legs in (routes.up[i], routes.down[i]) for p, f in legs.items()]),
            b: _usage([(best_up[b], 1.0), (best_down[b], 1.0)]),
        }
        _line_search_shift((i, b), {i: -q[i], b: q[i]}, patterns, q, routes, best_up, best_down,
                           links, lin, b1)


def _equilibrate(kernel: _Kernel, routes: _Routes, q: np.ndarray, v: np.ndarray, trees) -> tuple:
    """One Gauss-Seidel sweep of route and facility-choice equilibration per OD pair."""
    index = kernel.index
    links = _LinkState(index.network, v)
    q = q.copy()
    cache = {}
    lin = kernel.linear_coef.tolist()
    b1 = kernel.beta1
    for start, stop in zip(kernel.starts.tolist(), np.r_[kernel.starts[1:], len(q)].tolist()):
        members = range(start, stop)
        best_up, best_down = {}, {}
        for i in members:
            p_up, p_down = routes._tree_legs(i, trees, cache)
            _equilibrate_leg(routes.up[i], p_up, links)
            _equilibrate_leg(routes.down[i], p_down, links)
            best_up[i] = min(routes.up[i], key=links.cost)
            best_down[i] = min(routes.down[i], key=links.cost)
        if stop - start < 2:
            continue
        _shift_shares(list(members), q, routes, best_up, best_down, links, lin, b1)
    return q, routes.link_flows()


def solve_gcda(problem: GcdaProblem, tol: float = 1e-12, max_iter: int = 2000,
               start: GcdaSolution | None = None, keep_leg_flows: bool = False,
               index: TripIndex | None = None, method: str = "hybrid") -> GcdaSolution:
    """Solve the scenario problem to relative gap ``tol``.

    Every iteration is an Evans step: logit distribution and all-or-nothing
    loading at current times, then an exact line search. With
    ``method="hybrid"`` (default) the step is followed by one Newton
    equilibration sweep over the paths and facility shares the iterations have
    generated; the sweep is discarded if it would raise the objective.
    ``method="evans"`` runs the plain partial-linearization iterations.

    The gap is measured against the best partial-linearization lower bound,
    normalised by ``max(|LB|, 1)``. Because that bound is linear in route-cost
    errors it can lag a primal point that is already optimal to round-off; when
    the objective stops decreasing the run ends and counts as converged if the
    gap is below ``max(tol, STALL_GAP)``. ``start`` warm-starts from an earlier
    solution with the same trips and demand scale (prices may differ).
    """
    if method not in ("hybrid", "evans"):
        raise DomainError(f"unknown GCDA method {method!r}")
    if index is None:
        index = TripIndex(problem.network, problem.trips)
    net = problem.network
    kernel = _Kernel(index, problem.params, problem.price_vector(index), problem.demand_scale)
    n_links = len(net.links)
    target = kernel.pair_demand

    if not len(index.triples) or not np.any(target > 0):
        tau = index.leg_times(*index.trees(net.free_flow_times())) if len(index.triples) else np.zeros(0)
        return GcdaSolution(index.triples, np.zeros(len(index.triples)), np.zeros(n_links), tau,
                            0.0, 0.0, 0.0, 0, True, [], None)

    warm = (start is not None and start.routes is not None and len(start.q) == len(index.triples)
            and np.allclose(np.bincount(index.pair_of, weights=start.q, minlength=len(target)), target,
                            rtol=1e-9, atol=1e-12))
    if warm:
        q, routes = start.q.copy(), start.routes.copy()
        v = routes.link_flows()
    else:
        trees = index.trees(net.free_flow_times())
        q = kernel.logit(index.leg_times(*trees))
        routes = _Routes(index, q, trees)
        v = routes.link_flows()

    best_lb = -math.inf
    history = []
    kkt_trace = []
    converged = False
    it = 0
    while True:
        t = net.times(v)
        trees = index.trees(t)
        tau = index.leg_times(*trees)
        z = kernel.objective(v, q)
        best_lb = max(best_lb, kernel.lower_bound(v, t, tau))
        gap = (z - best_lb) / max(abs(best_lb), 1.0)
        history.append((z, best_lb, gap))
        kkt_trace.append(kernel.kkt_residual(v, q, t, tau))
        kkt_ok = kkt_trace[-1] <= KKT_TOL
        if gap <= tol and kkt_ok:
            converged = True
            break
        if it >= max_iter:
            log.warning("GCDA stopped at max_iter=%d with gap %.3e", max_iter, gap)
            break
        it += 1
        q_aux = kernel.logit(tau)
        y = _aon(index, *trees, q_aux)
        alpha = _bisect_step(kernel, v, q, y - v, q_aux - q)
        if alpha > 0.0:
            q = q + alpha * (q_aux - q)
            routes.evans_update(alpha, q_aux, trees)
            v = routes.link_flows()
        if method == "hybrid":
            z_step = kernel.objective(v, q)
            trial_routes = routes.copy()
            q_new, v_new = _equilibrate(kernel, trial_routes, q, v, trees)
            # the sweep's own line searches use exact slopes; only reject it beyond round-off
            if np.all(q_new > 0) and kernel.objective(v_new, q_new) <= z_step + ROUNDOFF * max(abs(z_step), 1.0):
                q, v, routes = q_new, v_new, trial_routes
        elif alpha == 0.0:
            converged = gap <= max(tol, STALL_GAP) and kkt_ok
            break
        if (len(history) > 50 and history[-1][0] <= kernel.objective(v, q) and history[-50][2] <= 10 * gap
                and kkt_trace[-1] >= 0.9 * kkt_trace[-50]):
            # neither the objective nor the optimality residual still moves; the bound lags
            converged = gap <= max(tol, STALL_GAP) and kkt_ok
            break

    legs = routes.leg_flow_arrays() if keep_leg_flows else None
    return GcdaSolution(index.triples, q, v, tau, z, best_lb, max(gap, 0.0), it, converged, history, legs,
                        routes)


# --------------------------------------------------------------------------- verification

@dataclass
class WardropLogitReport:
    tau_residual: float
    logit_residual: float
    wardrop_gap: float
    demand_residual: float
    tol: float

    @property
    def passed(self) -> bool:
        return max(self.tau_residual, self.logit_residual, self.wardrop_gap, self.demand_residual) <= self.tol

    def as_dict(self) -> dict:
        return {"tau_residual": self.tau_residual, "logit_residual": self.logit_residual,
                "wardrop_gap": self.wardrop_gap, "demand_residual": self.demand_residual,
                "tol": self.tol, "passed": self.passed}


def verify_wardrop_logit(network: Network, trips: TripTable, params: UtilityParams, prices: Mapping[int, float],
                         solution: GcdaSolution, tol: float = 1e-4, demand_scale: float = 1.0) -> WardropLogitReport:
    """Check the equilibrium conditions of a GCDA solution.

    (a) stored leg times match shortest legs at the solution's link times,
    (b) facility shares match the logit formula at those times,
    (c) normalised Wardrop gap ``(sum t v - sum q tau_min) / sum q tau_min``,
    plus demand conservation per OD pair, normalised by the pair demand.
    """
    index = TripIndex(network, trips)
    prices_arr = np.array([prices.get(k, 0.0) for k in index.locations])
    kernel = _Kernel(index, params, prices_arr, demand_scale)
    q = np.asarray(solution.q, dtype=float)
    v = np.asarray(solution.v, dtype=float)
    if np.any(q < 0) or np.any(v < 0):
        raise DomainError("solution flows must be nonnegative")
    t = network.times(v)
    tau = index.leg_times(*index.trees(t))
    stored = np.asarray(solution.tau, dtype=float)
    tau_res = float(np.max(np.abs(tau - stored) / np.maximum(tau, 1e-12))) if len(tau) else 0.0

    pair_total = np.bincount(index.pair_of, weights=q, minlength=len(index.pairs))
    target = kernel.pair_demand
    demand_res = float(np.max(np.abs(pair_total - target) / np.maximum(target, 1e-12))) if len(target) else 0.0

    active = target[index.pair_of] > 0
    shares = np.where(active, q / np.maximum(pair_total[index.pair_of], PROB_FLOOR), 0.0)
    logit_res = float(np.max(np.abs(shares - kernel.shares(tau))[active])) if np.any(active) else 0.0

    used = float(t @ v)
    shortest = float(q @ tau)
    wardrop = abs(used - shortest) / shortest if shortest > 0 else abs(used - shortest)
    return WardropLogitReport(tau_res, logit_res, wardrop, demand_res, tol)
