"""Facility investors: capacity and supply decisions at given locational prices.

A representative investor at each location picks a first-stage capacity ``c``
and per-scenario supplies ``g_xi <= c`` to maximise expected revenue minus
quadratic operating cost, minus the capital cost of ``c``. Locations do not
interact, so everything here works one location at a time.

Heterogeneous investors sharing a location are handled either through their
aggregate capital cost (the infimal convolution of the individual costs) or
directly, by clearing a capacity-rent market among them.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .errors import DomainError

CAPACITY_TOL = 1e-10


@dataclass(frozen=True)
class QuadraticCost:
    """``phi(x) = a x^2 + b x`` on ``x >= 0``."""

    a: float
    b: float

    def __post_init__(self):
        if not (self.a >= 0 and self.b >= 0) or not (math.isfinite(self.a) and math.isfinite(self.b)):
            raise DomainError(f"cost coefficients must be finite and nonnegative, got a={self.a}, b={self.b}")

    def value(self, x: float) -> float:
        return self.a * x * x + self.b * x

    def derivative(self, x: float) -> float:
        return 2.0 * self.a * x + self.b

    def curvature(self, x: float) -> float:
        """Second derivative (constant for a single quadratic)."""
        return 2.0 * self.a

    def local(self, x: float) -> tuple[float, float]:
        """Quadratic coefficients ``(a, b)`` whose derivative matches this cost near ``x``."""
        return self.a, self.b

    def scaled(self, factor: float) -> "QuadraticCost":
        return QuadraticCost(self.a * factor, self.b * factor)


@dataclass(frozen=True)
class PiecewiseQuadraticCost:
    """Convex cost with a continuous, piecewise-linear derivative.

    ``breakpoints[j]`` is where piece ``j + 1`` starts; piece ``j`` has
    derivative ``2 a_j x + b_j``. Produced by :func:`aggregate_profiles`.
    """

    breakpoints: tuple
    pieces: tuple

    def __post_init__(self):
        if len(self.pieces) != len(self.breakpoints) + 1:
            raise DomainError("need exactly one more piece than breakpoints")
        if any(b2 <= b1 for b1, b2 in zip(self.breakpoints, self.breakpoints[1:])):
            raise DomainError("breakpoints must be strictly increasing")
        object.__setattr__(self, "pieces", tuple(QuadraticCost(*p) if not isinstance(p, QuadraticCost) else p
                                                 for p in self.pieces))
        # value at the start of each piece, so evaluation is a lookup plus one quadratic
        starts = [0.0]
        for j, x in enumerate(self.breakpoints):
            lo = self.breakpoints[j - 1] if j else 0.0
            p = self.pieces[j]
            starts.append(starts[-1] + p.value(x) - p.value(lo))
        object.__setattr__(self, "_starts", tuple(starts))

    def _piece(self, x: float) -> int:
        return bisect.bisect_right(self.breakpoints, x)

    def value(self, x: float) -> float:
        j = self._piece(x)
        lo = self.breakpoints[j - 1] if j else 0.0
        p = self.pieces[j]
        return self._starts[j] + p.value(x) - p.value(lo)

    def derivative(self, x: float) -> float:
        return self.pieces[self._piece(x)].derivative(x)

    def curvature(self, x: float) -> float:
        return self.pieces[self._piece(x)].curvature(x)

    def local(self, x: float) -> tuple[float, float]:
        p = self.pieces[self._piece(x)]
        return p.a, p.b

    def scaled(self, factor: float) -> "PiecewiseQuadraticCost":
        return PiecewiseQuadraticCost(self.breakpoints, tuple(p.scaled(factor) for p in self.pieces))


@dataclass(frozen=True)
class LocationCost:
    """Capital and operating cost at one location.

    When ``investors`` is given, capacity is supplied by those investors
    (each with its own quadratic capital cost) and ``capital`` defaults to
    their aggregate.
    """

    capital: QuadraticCost | PiecewiseQuadraticCost | None
    operating: QuadraticCost
    investors: tuple = ()

    def __post_init__(self):
        investors = tuple(self.investors)
        object.__setattr__(self, "investors", investors)
        if investors:
            for c in investors:
                if not c.a > 0:
                    raise DomainError("investor capital costs need a > 0")
            if self.capital is None:
                object.__setattr__(self, "capital", _aggregate(investors))
        elif self.capital is None:
            raise DomainError("capital cost required when no investors are listed")

    @property
    def strictly_convex(self) -> bool:
        cap = self.capital
        a_cap = min(p.a for p in cap.pieces) if isinstance(cap, PiecewiseQuadraticCost) else cap.a
        return a_cap > 0 and self.operating.a > 0


@dataclass(frozen=True)
class InvestorProfile:
    """One investor's capital cost, either uniform or per location."""

    name: str
    capital: QuadraticCost | Mapping[int, QuadraticCost]

    def cost_at(self, location: int) -> QuadraticCost:
        if isinstance(self.capital, QuadraticCost):
            return self.capital
        try:
            return self.capital[location]
        except KeyError:
            raise DomainError(f"investor {self.name!r} has no cost for location {location}") from None


@dataclass
class InvestorSolution:
    """``capacity[k]``, ``supply[(k, xi)]`` and expected profit.

    ``shares[k]`` lists per-investor capacities where investors were modelled
    individually.
    """

    capacity: dict
    supply: dict
    profit: float
    shares: dict = field(default_factory=dict)

    def supply_matrix(self, locations: Sequence[int], n_scenarios: int):
        return [[self.supply[(k, xi)] for xi in range(n_scenarios)] for k in locations]


# --------------------------------------------------------------------------- single location

def optimal_supply(price: float, operating: QuadraticCost, cap: float) -> float:
    """Profit-maximising supply at ``price`` under capacity ``cap`` (may be ``inf``)."""
    if cap < 0:
        raise DomainError("capacity must be nonnegative")
    if operating.a == 0.0:
        # linear operating cost: all or nothing, ties go to zero
        return cap if price > operating.b else 0.0
    g = (price - operating.b) / (2.0 * operating.a)
    return min(max(g, 0.0), cap)


def _revenue_slope(c: float, prices, probs, operating: QuadraticCost) -> float:
    """Marginal operating surplus of one more unit of capacity at ``c``."""
    total = 0.0
    for rho, p in zip(prices, probs):
        m = rho - operating.derivative(c)
        if m > 0.0:
            total += p * m
    return total


def _check_probs(prices, probs) -> None:
    if len(prices) != len(probs) or not len(probs):
        raise DomainError("prices and probabilities must be non-empty and aligned")
    if any(p <= 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-9:
        raise DomainError("probabilities must be positive and sum to 1")


def _capacity_upper(prices, probs, cost: LocationCost) -> float:
    op = cost.operating
    if op.a > 0:
        return max(max((rho - op.b) / (2.0 * op.a) for rho in prices), 0.0)
    # linear operating cost: capital cost alone bounds the capacity
    surplus = sum(p * max(rho - op.b, 0.0) for rho, p in zip(prices, probs))
    hi = 1.0
    while cost.capital.derivative(hi) < surplus:
        hi *= 2.0
        if hi > 1e15:
            raise DomainError("capacity is unbounded: capital and operating costs are both linear")
    return hi


def _polish(c: float, prices, probs, cost: LocationCost) -> float:
    """Exact root of the reduced first-order condition on the active set around ``c``."""
    op = cost.operating
    a_c, b_c = cost.capital.local(c)
    weight = num = 0.0
    for rho, p in zip(prices, probs):
        if rho - op.derivative(c) > 0.0:
            weight += p
            num += p * (rho - op.b)
    den = 2.0 * op.a * weight + 2.0 * a_c
    if den <= 0.0:
        return c
    exact = (num - b_c) / den
    if exact >= 0.0 and abs(exact - c) <= 1e-6 * (1.0 + c):
        return exact
    return c


def solve_location(prices: Sequence[float], probs: Sequence[float], cost: LocationCost,
                   fixed_capacity: float | None = None) -> tuple[float, tuple]:
    """Capacity and per-scenario supplies for one location.

    Bisection on the derivative of the reduced profit, which is strictly
    decreasing, followed by an exact solve on the active scenario set.
    With ``fixed_capacity`` only the supplies are optimised.
    """
    prices = [float(x) for x in prices]
    probs = [float(x) for x in probs]
    _check_probs(prices, probs)
    if fixed_capacity is not None:
        c = float(fixed_capacity)
        return c, tuple(optimal_supply(rho, cost.operating, c) for rho in prices)
    if cost.investors:
        c = sum(solve_location_pool(prices, probs, cost.operating, cost.investors))
        return c, tuple(optimal_supply(rho, cost.operating, c) for rho in prices)

    def slope(x):
        return _revenue_slope(x, prices, probs, cost.operating) - cost.capital.derivative(x)

    if slope(0.0) <= 0.0:
        c = 0.0
    else:
        lo, hi = 0.0, _capacity_upper(prices, probs, cost)
        while hi - lo > CAPACITY_TOL * 1e-3 * max(1.0, hi):
            mid = 0.5 * (lo + hi)
            if slope(mid) > 0.0:
                lo = mid
            else:
                hi = mid
        c = _polish(0.5 * (lo + hi), prices, probs, cost)
    return c, tuple(optimal_supply(rho, cost.operating, c) for rho in prices)


def solve_location_pool(prices: Sequence[float], probs: Sequence[float], operating: QuadraticCost,
                        investors: Sequence[QuadraticCost]) -> tuple:
    """Per-investor capacities when several price-taking investors build at one location.

    Capacity earns the rent ``mu = E[(rho - phi_g'(c))^+]`` per unit; each
    investor builds until its marginal capital cost equals ``mu``. The rent
    clearing the capacity market is found by bisection.
    """
    prices = [float(x) for x in prices]
    probs = [float(x) for x in probs]
    _check_probs(prices, probs)
    if not investors:
        raise DomainError("no investors given")
    if operating.a == 0.0:
        raise DomainError("investor pools need a strictly convex operating cost")

    def build(mu):
        return [max(0.0, (mu - inv.b) / (2.0 * inv.a)) for inv in investors]

    def excess(mu):
        return _revenue_slope(sum(build(mu)), prices, probs, operating) - mu

    lo, hi = 0.0, _revenue_slope(0.0, prices, probs, operating)
    if hi <= min(inv.b for inv in investors):
        return tuple(0.0 for _ in investors)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if excess(mid) > 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * max(1.0, hi):
            break
    return tuple(build(0.5 * (lo + hi)))


def supply_slopes(prices: Sequence[float], probs: Sequence[float], cost: LocationCost, capacity: float,
                  fixed: bool = False):
    """Jacobian of the optimal supplies with respect to the scenario prices at one location.

    Returns a dense list of rows ``d g_xi / d rho_xi'``. Used by the Newton
    price update; at kinks the one-sided slope that points into the active
    region is taken.
    """
    op = cost.operating
    n = len(prices)
    jac = [[0.0] * n for _ in range(n)]
    if op.a == 0.0:
        return jac
    binding = [rho - op.derivative(capacity) >= -1e-12 for rho in prices]
    if capacity <= 0.0 and not fixed:
        # capacity would open where the reduced profit slope is largest
        binding = [rho > op.b for rho in prices]
        if not any(binding):
            binding = [True] * n
    for xi in range(n):
        if not binding[xi]:
            jac[xi][xi] = 1.0 / (2.0 * op.a)
    if fixed or not any(binding):
        return jac
    weight = sum(p for p, b in zip(probs, binding) if b)
    denom = cost.capital.curvature(capacity) + 2.0 * op.a * weight
    if denom <= 0.0:
        return jac
    for xi in range(n):
        if binding[xi]:
            for xj in range(n):
                if binding[xj]:
                    jac[xi][xj] = probs[xj] / denom
    return jac


# --------------------------------------------------------------------------- all locations

def _price_table(prices) -> Mapping:
    return getattr(prices, "rho", prices)


def solve_investor(prices, probs: Sequence[float], costs: Mapping[int, LocationCost],
                   fixed_capacity: Mapping[int, float] | None = None) -> InvestorSolution:
    """Solve every location independently. ``prices`` maps ``(k, xi)`` to rho (or is a PriceField)."""
    rho = _price_table(prices)
    n = len(probs)
    capacity, supply, shares = {}, {}, {}
    for k in sorted(costs):
        try:
            row = [rho[(k, xi)] for xi in range(n)]
        except KeyError as exc:
            raise DomainError(f"missing price for location/scenario {exc.args[0]}") from None
        cost = costs[k]
        fixed = None if fixed_capacity is None else fixed_capacity[k]
        if cost.investors and fixed is None:
            split = solve_location_pool(row, probs, cost.operating, cost.investors)
            shares[k] = split
            c = sum(split)
            g = tuple(optimal_supply(r, cost.operating, c) for r in row)
        else:
            c, g = solve_location(row, probs, cost, fixed)
        capacity[k] = c
        for xi, gx in enumerate(g):
            supply[(k, xi)] = gx
    sol = InvestorSolution(capacity, supply, 0.0, shares)
    sol.profit = investor_objective(sol, rho, probs, costs)
    return sol


def investor_objective(solution: InvestorSolution, prices, probs: Sequence[float],
                       costs: Mapping[int, LocationCost]) -> float:
    """Expected revenue minus operating cost, minus capital cost."""
    rho = _price_table(prices)
    total = 0.0
    for k, c in solution.capacity.items():
        cost = costs[k]
        if c < 0:
            raise DomainError(f"negative capacity at location {k}")
        total -= cost.capital.value(c)
        for xi, p in enumerate(probs):
            g = solution.supply[(k, xi)]
            if g < -1e-12 or g > c + 1e-9 * (1.0 + c):
                raise DomainError(f"supply {g} at location {k}, scenario {xi} outside [0, {c}]")
            total += p * (rho[(k, xi)] * g - cost.operating.value(g))
    return total


# --------------------------------------------------------------------------- investor aggregation

def _aggregate(costs: Sequence[QuadraticCost]) -> QuadraticCost | PiecewiseQuadraticCost:
    if not costs:
        raise DomainError("need at least one investor profile")
    if any(not c.a > 0 for c in costs):
        raise DomainError("profiles need a > 0")
    order = sorted(costs, key=lambda c: c.b)
    breakpoints, pieces = [], []
    inv_sum = lin_sum = 0.0
    j = 0
    while j < len(order):
        b = order[j].b
        while j < len(order) and order[j].b == b:
            inv_sum += 1.0 / (2.0 * order[j].a)
            lin_sum += order[j].b / (2.0 * order[j].a)
            j += 1
        # marginal cost m = (c + lin_sum) / inv_sum on this piece
        pieces.append(QuadraticCost(1.0 / (2.0 * inv_sum), lin_sum / inv_sum))
        if j < len(order):
            breakpoints.append(order[j].b * inv_sum - lin_sum)
    if len(pieces) == 1:
        return pieces[0]
    return PiecewiseQuadraticCost(tuple(breakpoints), tuple(pieces))


def _profile_costs(profiles, location) -> list:
    out = []
    for prof in profiles:
        out.append(prof.cost_at(location) if isinstance(prof, InvestorProfile) else prof)
    return out


def aggregate_profiles(profiles: Sequence, location: int | None = None):
    """Least total capital cost of building ``c`` across the given investors.

    ``profiles`` holds :class:`InvestorProfile` or :class:`QuadraticCost`
    items. Returns a :class:`QuadraticCost` when one piece suffices and a
    :class:`PiecewiseQuadraticCost` otherwise.
    """
    if not profiles:
        raise DomainError("need at least one investor profile")
    return _aggregate(_profile_costs(profiles, location))


def allocate_capacity(total: float, profiles: Sequence, location: int | None = None) -> tuple:
    """Split ``total`` so that every active investor has the same marginal cost."""
    if total < 0:
        raise DomainError("total capacity must be nonnegative")
    costs = _profile_costs(profiles, location)
    if total == 0.0:
        return tuple(0.0 for _ in costs)
    order = sorted(range(len(costs)), key=lambda i: costs[i].b)
    inv_sum = lin_sum = 0.0
    j = 0
    while j < len(order):
        b = costs[order[j]].b
        while j < len(order) and costs[order[j]].b == b:
            inv_sum += 1.0 / (2.0 * costs[order[j]].a)
            lin_sum += costs[order[j]].b / (2.0 * costs[order[j]].a)
            j += 1
        if j == len(order) or total <= costs[order[j]].b * inv_sum - lin_sum:
            break
    # share_i = (m - b_i) / (2 a_i) with m = (total + lin_sum) / inv_sum, written so the
    # total enters multiplicatively and tiny totals are not swamped by b_i
    active = order[:j]
    split = [0.0] * len(costs)
    for i in active:
        c = costs[i]
        offset = sum((costs[h].b - c.b) / (2.0 * costs[h].a) for h in active if h != i)
        split[i] = max(0.0, (total + offset) / (2.0 * c.a * inv_sum))
    # shares absorb rounding, largest first, so the parts add up to the total; the
    # low bits of smaller shares can make the total unreachable through one share alone
    order = sorted(range(len(split)), key=split.__getitem__, reverse=True)
    for j in order:
        if split[j] <= 0.0 and j != order[0]:
            break
        hit = _exact_share(split, j, total)
        if hit is not None:
            split[j] = hit
            return tuple(split)
    return tuple(split)


def _exact_share(split: list, j: int, total: float):
    """A value of ``split[j]`` making the floating-point sum equal ``total``, if one exists."""
    def summed(x):
        return sum(split[:j] + [x] + split[j + 1:])

    lo = hi = split[j]
    step = max(abs(total - sum(split)), math.ulp(split[j]))
    # the sum is nondecreasing in one share: bracket the total, then bisect in floats
    while summed(lo) > total:
        if lo == 0.0:
            return None
        lo = max(lo - step, 0.0)
        step *= 2.0
    while summed(hi) < total:
        hi += step
        step *= 2.0
    while True:
        for x in (lo, hi):
            if summed(x) == total:
                return x
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            return None
        if summed(mid) < total:
            lo = mid
        else:
            hi = mid
