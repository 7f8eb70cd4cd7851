"""Network data model, TNTP ingestion, BPR link performance and shortest paths.

Node ids are the integers used in the input files. Links keep file order and
carry a 1-based ``id`` equal to their position in that order.
"""

from __future__ import annotations

import heapq
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import DomainError, ParseError, ValidationError

UNREACHABLE = math.inf


@dataclass(frozen=True)
class Link:
    id: int
    tail: int
    head: int
    free_flow_time: float
    capacity_param: float
    bpr_alpha: float = 0.15
    bpr_beta: int = 4

    def __post_init__(self):
        if not self.free_flow_time > 0:
            raise ValidationError(f"link {self.id}: free-flow time must be > 0")
        if not self.capacity_param > 0:
            raise ValidationError(f"link {self.id}: capacity must be > 0")
        if self.bpr_alpha < 0:
            raise ValidationError(f"link {self.id}: BPR alpha must be >= 0")
        if int(self.bpr_beta) != self.bpr_beta or self.bpr_beta < 1:
            raise ValidationError(f"link {self.id}: BPR exponent must be an integer >= 1")
        if self.tail == self.head:
            raise ValidationError(f"link {self.id}: self loop at node {self.tail}")
        object.__setattr__(self, "bpr_beta", int(self.bpr_beta))


def link_time(link: Link, flow: float) -> float:
    """BPR travel time ``t0 * (1 + alpha * (v / c)**beta)``."""
    if flow < 0:
        raise DomainError(f"negative flow {flow!r} on link {link.id}")
    return link.free_flow_time * (1.0 + link.bpr_alpha * (flow / link.capacity_param) ** link.bpr_beta)


def link_time_integral(link: Link, flow: float) -> float:
    """Closed-form integral of :func:`link_time` from 0 to ``flow``."""
    if flow < 0:
        raise DomainError(f"negative flow {flow!r} on link {link.id}")
    b = link.bpr_beta
    return link.free_flow_time * (
        flow + link.bpr_alpha * flow ** (b + 1) / ((b + 1) * link.capacity_param**b)
    )


class Network:
    """Directed graph with BPR links and the origin/destination/candidate roles.

    Immutable after construction; the per-link parameter arrays are what the
    solvers use in their inner loops.
    """

    def __init__(self, nodes: Iterable[int], links: Sequence[Link], origins: Iterable[int],
                 destinations: Iterable[int], candidates: Iterable[int]):
        self.nodes = tuple(sorted(set(int(n) for n in nodes)))
        self.links = tuple(links)
        self.origins = tuple(sorted(set(int(n) for n in origins)))
        self.destinations = tuple(sorted(set(int(n) for n in destinations)))
        self.candidates = tuple(sorted(set(int(n) for n in candidates)))
        self.node_index = {n: i for i, n in enumerate(self.nodes)}

        for link in self.links:
            for end in (link.tail, link.head):
                if end not in self.node_index:
                    raise ValidationError(f"link {link.id} references unknown node {end}")
        for role, members in (("ORIGINS", self.origins), ("DESTINATIONS", self.destinations),
                              ("CANDIDATES", self.candidates)):
            missing = [n for n in members if n not in self.node_index]
            if missing:
                raise ValidationError(f"{role} node(s) not in network: {missing}")

        adjacency: list[list[int]] = [[] for _ in self.nodes]
        for a, link in enumerate(self.links):
            adjacency[self.node_index[link.tail]].append(a)
        self.adjacency = tuple(tuple(sorted(adj, key=lambda a: self.links[a].id)) for adj in adjacency)

        self.fft = np.array([l.free_flow_time for l in self.links], dtype=float)
        self.cap = np.array([l.capacity_param for l in self.links], dtype=float)
        self.alpha = np.array([l.bpr_alpha for l in self.links], dtype=float)
        self.beta = np.array([l.bpr_beta for l in self.links], dtype=float)
        self.tails = np.array([self.node_index[l.tail] for l in self.links], dtype=int)
        self.heads = np.array([self.node_index[l.head] for l in self.links], dtype=int)
        self.link_ids = np.array([l.id for l in self.links], dtype=int)
        for arr in (self.fft, self.cap, self.alpha, self.beta, self.tails, self.heads, self.link_ids):
            arr.setflags(write=False)

    def __repr__(self):
        return (f"Network(|N|={len(self.nodes)}, |A|={len(self.links)}, R={list(self.origins)}, "
                f"S={list(self.destinations)}, K={list(self.candidates)})")

    # vectorised link performance -------------------------------------------------

    def times(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if np.any(v < 0):
            raise DomainError("negative link flow")
        return self.fft * (1.0 + self.alpha * (v / self.cap) ** self.beta)

    def time_integrals(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if np.any(v < 0):
            raise DomainError("negative link flow")
        return self.fft * (v + self.alpha * v ** (self.beta + 1) / ((self.beta + 1) * self.cap**self.beta))

    def free_flow_times(self) -> np.ndarray:
        return self.fft.copy()

    def incidence_matrix(self) -> np.ndarray:
        """Node-link incidence: +1 at the tail, -1 at the head of every link."""
        A = np.zeros((len(self.nodes), len(self.links)))
        A[self.tails, np.arange(len(self.links))] = 1.0
        A[self.heads, np.arange(len(self.links))] = -1.0
        return A

    def with_links(self, links: Sequence[Link]) -> "Network":
        return Network(self.nodes, links, self.origins, self.destinations, self.candidates)

    def without_congestion(self) -> "Network":
        """Same network with BPR alpha set to zero (times frozen at free flow)."""
        return self.with_links([Link(l.id, l.tail, l.head, l.free_flow_time, l.capacity_param, 0.0, l.bpr_beta)
                                for l in self.links])


# --------------------------------------------------------------------------- paths

class PathTree(NamedTuple):
    """Shortest-path tree: arrays indexed by node position in ``network.nodes``.

    ``dist`` holds :data:`UNREACHABLE` (``inf``) for nodes not reachable from the
    source; ``pred`` holds the predecessor link index or -1.
    """
    source: int
    dist: np.ndarray
    pred: np.ndarray


def shortest_paths(network: Network, times: np.ndarray, source: int) -> PathTree:
    """Label-setting shortest paths from ``source``.

    Among equal-cost predecessors the link with the lowest id wins, so trees are
    deterministic.
    """
    times = np.asarray(times, dtype=float)
    if times.shape != (len(network.links),):
        raise DomainError("time vector does not match the link count")
    if np.any(~(times > 0)):
        raise DomainError("link times must be strictly positive")
    if source not in network.node_index:
        raise ValidationError(f"unknown source node {source}")

    n = len(network.nodes)
    dist = np.full(n, UNREACHABLE)
    pred = np.full(n, -1, dtype=int)
    done = np.zeros(n, dtype=bool)
    s = network.node_index[source]
    dist[s] = 0.0
    heap = [(0.0, s)]
    heads, ids, adjacency = network.heads, network.link_ids, network.adjacency
    t = times.tolist()
    while heap:
        d, u = heapq.heappop(heap)
        if done[u]:
            continue
        done[u] = True
        for a in adjacency[u]:
            h = heads[a]
            nd = d + t[a]
            if nd < dist[h]:
                dist[h] = nd
                pred[h] = a
                heapq.heappush(heap, (nd, h))
            elif nd == dist[h] and ids[a] < ids[pred[h]]:
                pred[h] = a
    return PathTree(source, dist, pred)


def tree_path(network: Network, tree: PathTree, target: int) -> list[int]:
    """Link indices on the tree path from the tree source to ``target``."""
    j = network.node_index[target]
    if math.isinf(tree.dist[j]):
        raise ValidationError(f"node {target} unreachable from {tree.source}")
    path = []
    while tree.pred[j] >= 0:
        a = tree.pred[j]
        path.append(a)
        j = network.tails[a]
    path.reverse()
    return path


def load_tree(network: Network, tree: PathTree, loads: Mapping[int, float], out: np.ndarray) -> None:
    """Push node loads back to the tree source along predecessor links, adding into ``out``."""
    node_load = np.zeros(len(network.nodes))
    for node, amount in loads.items():
        j = network.node_index[node]
        if amount != 0.0 and math.isinf(tree.dist[j]):
            raise ValidationError(f"node {node} unreachable from {tree.source}")
        node_load[j] += amount
    order = np.argsort(-tree.dist, kind="stable")
    for j in order:
        a = tree.pred[j]
        if a >= 0 and node_load[j] != 0.0:
            out[a] += node_load[j]
            node_load[network.tails[a]] += node_load[j]


# --------------------------------------------------------------------------- trips

@dataclass
class TripTable:
    """OD demand ``d``, service quantity per trip ``e`` and allowed facilities per pair."""

    demand: dict[tuple[int, int], float]
    service_quantity: dict[tuple[int, int], float] = field(default_factory=dict)
    allowed_facilities: dict[tuple[int, int], tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        self.demand = {(int(r), int(s)): float(d) for (r, s), d in self.demand.items()}
        self.service_quantity = {(int(r), int(s)): float(e) for (r, s), e in self.service_quantity.items()}
        self.allowed_facilities = {(int(r), int(s)): tuple(sorted(set(int(k) for k in ks)))
                                   for (r, s), ks in self.allowed_facilities.items()}
        for pair, d in self.demand.items():
            if d < 0:
                raise ValidationError(f"negative demand for pair {pair}")
            e = self.service_quantity.setdefault(pair, 1.0)
            if e < 0:
                raise ValidationError(f"negative service quantity for pair {pair}")
        extra = set(self.service_quantity) - set(self.demand)
        if extra:
            raise ValidationError(f"service quantity given for pairs without demand: {sorted(extra)}")

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return list(self.demand)

    def facilities_for(self, pair, candidates: Sequence[int]) -> tuple[int, ...]:
        return self.allowed_facilities.get(pair) or tuple(candidates)

    def total_service_demand(self, scale: float = 1.0) -> float:
        return scale * sum(self.demand[p] * self.service_quantity[p] for p in self.demand)

    def scaled(self, factor: float) -> "TripTable":
        return TripTable({p: d * factor for p, d in self.demand.items()}, dict(self.service_quantity),
                         dict(self.allowed_facilities))


class TripIndex:
    """Flat triple indexing of a trip table on a network, shared by the solvers."""

    def __init__(self, network: Network, trips: TripTable):
        self.network = network
        self.pairs = trips.pairs
        self.locations = network.candidates
        loc_pos = {k: i for i, k in enumerate(self.locations)}
        triples, pair_of, k_pos = [], [], []
        for p, pair in enumerate(self.pairs):
            ks = trips.facilities_for(pair, network.candidates)
            if trips.demand[pair] > 0 and not ks:
                raise ValidationError(f"pair {pair} has demand but no allowed facility")
            for k in ks:
                if k not in loc_pos:
                    raise ValidationError(f"facility {k} for pair {pair} is not a candidate location")
                triples.append((pair[0], pair[1], k))
                pair_of.append(p)
                k_pos.append(loc_pos[k])
        self.triples = tuple(triples)
        self.pair_of = np.array(pair_of, dtype=int)
        self.loc_of = np.array(k_pos, dtype=int)
        self.demand = np.array([trips.demand[p] for p in self.pairs], dtype=float)
        self.service = np.array([trips.service_quantity[p] for p in self.pairs], dtype=float)
        self.e_of = self.service[self.pair_of] if len(triples) else np.zeros(0)
        self.tree_origins = tuple(sorted({r for r, _, _ in triples}))
        self.tree_facilities = tuple(sorted({k for _, _, k in triples}))

    def __len__(self):
        return len(self.triples)

    def trees(self, times: np.ndarray) -> tuple[dict[int, PathTree], dict[int, PathTree]]:
        """One tree per distinct origin and one per distinct facility."""
        from_r = {r: shortest_paths(self.network, times, r) for r in self.tree_origins}
        from_k = {k: shortest_paths(self.network, times, k) for k in self.tree_facilities}
        return from_r, from_k

    def leg_times(self, from_r, from_k) -> np.ndarray:
        idx = self.network.node_index
        tau = np.empty(len(self.triples))
        for i, (r, s, k) in enumerate(self.triples):
            d1 = from_r[r].dist[idx[k]]
            d2 = from_k[k].dist[idx[s]]
            if math.isinf(d1) or math.isinf(d2):
                raise ValidationError(f"triple (r={r}, s={s}, k={k}) has an unreachable leg")
            tau[i] = d1 + d2
        return tau

    def service_demand(self, q: np.ndarray) -> np.ndarray:
        """Service demand per location, ``sum_rs e * q``."""
        return np.bincount(self.loc_of, weights=self.e_of * q, minlength=len(self.locations))


def leg_times(network: Network, times: np.ndarray, trips: TripTable) -> dict[tuple[int, int, int], float]:
    """Minimum r->k plus k->s travel time for every (r, s, k) triple."""
    index = TripIndex(network, trips)
    tau = index.leg_times(*index.trees(times))
    return dict(zip(index.triples, tau.tolist()))


def validate_connectivity(network: Network, trips: TripTable | None = None) -> None:
    """Check that every required r->k and k->s leg exists at free-flow times."""
    if trips is None:
        pairs_rk = {(r, k) for r in network.origins for k in network.candidates}
        pairs_ks = {(k, s) for k in network.candidates for s in network.destinations}
    else:
        index = TripIndex(network, trips)
        pairs_rk = {(r, k) for r, _, k in index.triples}
        pairs_ks = {(k, s) for _, s, k in index.triples}
    times = network.free_flow_times()
    trees = {}
    missing = []
    for a, b in sorted(pairs_rk | pairs_ks):
        if a == b:
            continue
        if a not in trees:
            trees[a] = shortest_paths(network, times, a)
        if math.isinf(trees[a].dist[network.node_index[b]]):
            missing.append((a, b))
    if missing:
        raise ValidationError(f"disconnected required pair(s): {missing}")


# --------------------------------------------------------------------------- parsing

_META = re.compile(r"^<([^>]+)>\s*(.*)$")
ROLE_KEYS = ("ORIGINS", "DESTINATIONS", "CANDIDATES")


def parse_roles(text: str) -> dict[str, list[int]]:
    """Parse the role sidecar: ``ORIGINS``/``DESTINATIONS``/``CANDIDATES`` sections.

    A section keyword starts a section; ids may follow on the same line or on
    later lines. ``#`` starts a comment.
    """
    roles: dict[str, list[int]] = {k: [] for k in ROLE_KEYS}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.replace(",", " ").replace(":", " ").split()
        if tokens[0].upper() in ROLE_KEYS:
            current = tokens[0].upper()
            tokens = tokens[1:]
        if tokens and current is None:
            raise ParseError("node ids before any ORIGINS/DESTINATIONS/CANDIDATES keyword", lineno)
        for tok in tokens:
            try:
                roles[current].append(int(tok))
            except ValueError:
                raise ParseError(f"bad node id {tok!r}", lineno) from None
    return roles


def parse_network(text: str, node_roles: Mapping[str, Iterable[int]] | str,
                  trips: TripTable | None = None) -> Network:
    """Build a :class:`Network` from TNTP ``_net`` text plus role declarations.

    Metadata lines ``<NUMBER OF NODES>`` and ``<NUMBER OF LINKS>`` are required.
    Link records are ``tail head capacity length free_flow_time [B power ...] ;``
    as in the TNTP distribution; missing B/power default to 0.15 and 4.
    """
    if isinstance(node_roles, str):
        node_roles = parse_roles(node_roles)
    meta: dict[str, str] = {}
    records: list[tuple[int, list[str]]] = []
    in_body = False
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if not in_body:
            m = _META.match(line)
            if m:
                key = m.group(1).strip().upper()
                if key == "END OF METADATA":
                    in_body = True
                else:
                    meta[key] = m.group(2).strip()
                continue
            if line.startswith("~"):
                in_body = True
                continue
            raise ParseError(f"unexpected text in metadata section: {line!r}", lineno)
        if line.startswith("~"):
            continue
        body = line.split(";", 1)[0].split()
        if body:
            records.append((lineno, body))

    try:
        n_nodes = int(meta["NUMBER OF NODES"])
        n_links = int(meta["NUMBER OF LINKS"])
    except KeyError as exc:
        raise ParseError(f"missing metadata field <{exc.args[0]}>") from None
    except ValueError as exc:
        raise ParseError(f"bad metadata value: {exc}") from None
    if len(records) != n_links:
        raise ParseError(f"declared {n_links} links but found {len(records)} link records",
                         records[-1][0] if records else None)

    links = []
    for i, (lineno, fields) in enumerate(records, 1):
        if len(fields) < 5:
            raise ParseError(f"link record needs at least 5 fields, got {len(fields)}", lineno)
        try:
            tail, head = int(fields[0]), int(fields[1])
            capacity = float(fields[2])
            fft = float(fields[4])
            alpha = float(fields[5]) if len(fields) > 5 else 0.15
            power = float(fields[6]) if len(fields) > 6 else 4.0
        except ValueError as exc:
            raise ParseError(f"non-numeric link field: {exc}", lineno) from None
        if power != int(power):
            raise ParseError(f"BPR power must be an integer, got {power}", lineno)
        try:
            links.append(Link(i, tail, head, fft, capacity, alpha, int(power)))
        except ValidationError as exc:
            raise ParseError(str(exc), lineno) from None

    nodes = set(range(1, n_nodes + 1))
    for link in links:
        if link.tail not in nodes or link.head not in nodes:
            raise ValidationError(f"link {link.id} uses node outside 1..{n_nodes}")
    net = Network(nodes, links, node_roles.get("ORIGINS", ()), node_roles.get("DESTINATIONS", ()),
                  node_roles.get("CANDIDATES", ()))
    validate_connectivity(net, trips)
    return net


def parse_trips(text: str) -> TripTable:
    """Parse ``r s d e [k1 k2 ...]`` records, one OD pair per line."""
    demand, service, allowed = {}, {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.replace(",", " ").split()
        if len(fields) < 4:
            raise ParseError("trip record needs 'r s d e'", lineno)
        try:
            r, s = int(fields[0]), int(fields[1])
            d, e = float(fields[2]), float(fields[3])
            ks = [int(k) for k in fields[4:]]
        except ValueError as exc:
            raise ParseError(f"bad trip field: {exc}", lineno) from None
        if (r, s) in demand:
            raise ParseError(f"duplicate OD pair ({r}, {s})", lineno)
        demand[(r, s)], service[(r, s)] = d, e
        if ks:
            allowed[(r, s)] = tuple(ks)
    return TripTable(demand, service, allowed)


def format_trips(trips: TripTable) -> str:
    lines = ["# r s demand service_quantity [allowed facilities]"]
    for pair in trips.pairs:
        ks = trips.allowed_facilities.get(pair, ())
        tail = (" " + " ".join(map(str, ks))) if ks else ""
        lines.append(f"{pair[0]} {pair[1]} {trips.demand[pair]!r} {trips.service_quantity[pair]!r}{tail}")
    return "\n".join(lines) + "\n"
