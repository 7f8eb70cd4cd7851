import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from facility_equilibrium.errors import DomainError, ParseError, ValidationError
from facility_equilibrium.network import (
    UNREACHABLE, Link, Network, TripTable, format_trips, leg_times, link_time, link_time_integral, parse_network,
    parse_roles, parse_trips, shortest_paths, tree_path,
)

from instances import DATA, random_gcda, sioux_falls

LINK = Link(1, 1, 2, 10.0, 100.0)

TWO_NODE = """<NUMBER OF NODES> 2
<NUMBER OF LINKS> 1
<END OF METADATA>
~ tail head capacity length fft ;
1 2 100 1 10 ;
"""


def line_network(t12=10.0, t23=20.0):
    return Network([1, 2, 3], [Link(1, 1, 2, t12, 100.0), Link(2, 2, 3, t23, 100.0)], [1], [3], [2])


@pytest.mark.parametrize("flow,expected", [(0.0, 10.0), (100.0, 11.5), (200.0, 34.0)])
def test_link_time_examples(flow, expected):
    assert link_time(LINK, flow) == pytest.approx(expected, abs=1e-12)


def test_link_time_integral_examples():
    assert link_time_integral(LINK, 0.0) == 0.0
    assert link_time_integral(LINK, 100.0) == pytest.approx(1030.0, abs=1e-10)


def test_integral_matches_quadrature():
    value, _ = quad(lambda u: link_time(LINK, u), 0.0, 100.0, epsabs=1e-13, epsrel=1e-13)
    assert abs(link_time_integral(LINK, 100.0) - value) <= 1e-8 * value


def test_negative_flow_rejected():
    with pytest.raises(DomainError):
        link_time(LINK, -1.0)
    with pytest.raises(DomainError):
        link_time_integral(LINK, -1.0)


def test_link_invariants():
    for bad in (dict(free_flow_time=0.0), dict(capacity_param=-1.0), dict(bpr_alpha=-0.1), dict(bpr_beta=0)):
        args = dict(id=1, tail=1, head=2, free_flow_time=1.0, capacity_param=1.0) | bad
        with pytest.raises((ValidationError, DomainError)):
            Link(**args)
    with pytest.raises((ValidationError, DomainError)):
        Link(1, 3, 3, 1.0, 1.0)


links = st.builds(
    lambda fft, cap, alpha, beta: Link(1, 1, 2, fft, cap, alpha, beta),
    st.floats(0.1, 50), st.floats(1, 1e4), st.floats(0.01, 2), st.integers(1, 6),
)


@settings(max_examples=100, deadline=None)
@given(links, st.floats(0.01, 5.0), st.floats(1e-3, 5.0))
def test_link_time_strictly_increasing(link, r1, dr):
    # ratios bounded away from 0 so the increment is above double resolution
    v1 = r1 * link.capacity_param
    v2 = (r1 + dr) * link.capacity_param
    assert link_time(link, v2) > link_time(link, v1)


@settings(max_examples=100, deadline=None)
@given(links, st.floats(1e-2, 3.0))
def test_integral_derivative_is_time(link, ratio):
    v = ratio * link.capacity_param
    h = 1e-5 * v
    fd = (link_time_integral(link, v + h) - link_time_integral(link, v - h)) / (2 * h)
    assert fd == pytest.approx(link_time(link, v), rel=1e-6)


def test_parse_two_node_fixture():
    net = parse_network(TWO_NODE, {"ORIGINS": [1], "DESTINATIONS": [2], "CANDIDATES": [1]})
    assert len(net.nodes) == 2 and len(net.links) == 1
    assert net.links[0].free_flow_time == 10.0 and net.links[0].capacity_param == 100.0


def test_parse_empty_link_section():
    text = TWO_NODE.split("~")[0]
    with pytest.raises(ParseError):
        parse_network(text, {"ORIGINS": [1], "DESTINATIONS": [2], "CANDIDATES": [1]})


def test_parse_error_carries_line_number():
    text = TWO_NODE.replace("1 2 100 1 10 ;", "1 2 abc 1 10 ;")
    with pytest.raises(ParseError) as err:
        parse_network(text, {"ORIGINS": [1], "DESTINATIONS": [2], "CANDIDATES": [1]})
    assert err.value.line == 5
    assert "line 5" in str(err.value)


def test_unknown_role_node():
    with pytest.raises(ValidationError):
        parse_network(TWO_NODE, {"ORIGINS": [1], "DESTINATIONS": [2], "CANDIDATES": [7]})


def test_disconnected_pair_named():
    trips = TripTable({(2, 1): 10.0})
    with pytest.raises(ValidationError, match=r"2.*1"):
        parse_network(TWO_NODE, {"ORIGINS": [2], "DESTINATIONS": [1], "CANDIDATES": [1]}, trips)


def test_roles_parser():
    roles = parse_roles("# comment\nORIGINS 1 2\n3\nDESTINATIONS: 4\nCANDIDATES\n5 6\n")
    assert roles == {"ORIGINS": [1, 2, 3], "DESTINATIONS": [4], "CANDIDATES": [5, 6]}
    with pytest.raises(ParseError):
        parse_roles("1 2 3")


def test_trips_round_trip():
    trips = parse_trips("1 3 100 1\n2 3 50.5 2 4 5\n")
    assert trips.demand == {(1, 3): 100.0, (2, 3): 50.5}
    assert trips.allowed_facilities == {(2, 3): (4, 5)}
    again = parse_trips(format_trips(trips))
    assert again == trips
    with pytest.raises(ParseError):
        parse_trips("1 3 100\n")


def test_sioux_falls_counts():
    problem = sioux_falls()
    assert len(problem.network.nodes) == 24
    assert len(problem.network.links) == 76
    assert len(problem.trips.demand) == 25
    assert len(problem.network.candidates) == 5
    assert (DATA / "SiouxFalls_net.tntp").is_file()


def test_line_network_distances():
    net = line_network()
    tree = shortest_paths(net, np.array([10.0, 20.0]), 1)
    assert tree.dist.tolist() == [0.0, 10.0, 30.0]
    assert tree_path(net, tree, 3) == [0, 1]


def test_isolated_source():
    net = line_network()
    tree = shortest_paths(net, np.array([10.0, 20.0]), 3)
    assert tree.dist[2] == 0.0
    assert math.isinf(tree.dist[0]) and math.isinf(tree.dist[1])
    assert UNREACHABLE == math.inf


def test_nonpositive_time_rejected():
    with pytest.raises(DomainError):
        shortest_paths(line_network(), np.array([0.0, 1.0]), 1)


def test_tie_break_lowest_link_id():
    links = [Link(1, 1, 2, 1.0, 1.0), Link(2, 2, 3, 1.0, 1.0), Link(3, 1, 3, 2.0, 1.0)]
    net = Network([1, 2, 3], links, [1], [3], [2])
    tree = shortest_paths(net, np.array([1.0, 1.0, 2.0]), 1)
    assert tree.pred[2] == 1
    # reversing the ids flips the winner
    links = [Link(3, 1, 2, 1.0, 1.0), Link(2, 2, 3, 1.0, 1.0), Link(1, 1, 3, 2.0, 1.0)]
    net = Network([1, 2, 3], links, [1], [3], [2])
    tree = shortest_paths(net, np.array([1.0, 1.0, 2.0]), 1)
    assert tree.pred[2] == 2


def _brute_force(n, edges, times, source):
    best = {source: 0.0}
    stack = [(source, 0.0, {source})]
    while stack:
        node, d, seen = stack.pop()
        for (a, b), t in zip(edges, times):
            if a == node and b not in seen:
                nd = d + t
                if nd < best.get(b, math.inf):
                    best[b] = nd
                stack.append((b, nd, seen | {b}))
    return [best.get(i, math.inf) for i in range(1, n + 1)]


@st.composite
def graphs(draw):
    n = draw(st.integers(2, 8))
    pairs = [(a, b) for a in range(1, n + 1) for b in range(1, n + 1) if a != b]
    edges = draw(st.lists(st.sampled_from(pairs), min_size=1, max_size=20))
    times = draw(st.lists(st.floats(0.1, 100), min_size=len(edges), max_size=len(edges)))
    source = draw(st.integers(1, n))
    return n, edges, times, source


@settings(max_examples=150, deadline=None)
@given(graphs())
def test_dijkstra_matches_enumeration(graph):
    n, edges, times, source = graph
    links = [Link(i + 1, a, b, 1.0, 1.0) for i, (a, b) in enumerate(edges)]
    net = Network(range(1, n + 1), links, [], [], [])
    tree = shortest_paths(net, np.array(times), source)
    expected = _brute_force(n, edges, times, source)
    for got, want in zip(tree.dist.tolist(), expected):
        assert got == pytest.approx(want, rel=1e-12) or (math.isinf(got) and math.isinf(want))


@settings(max_examples=150, deadline=None)
@given(graphs())
def test_triangle_property(graph):
    n, edges, times, source = graph
    links = [Link(i + 1, a, b, 1.0, 1.0) for i, (a, b) in enumerate(edges)]
    net = Network(range(1, n + 1), links, [], [], [])
    tree = shortest_paths(net, np.array(times), source)
    pos = net.node_index
    for a, (tail, head) in enumerate(edges):
        du, dv = tree.dist[pos[tail]], tree.dist[pos[head]]
        if math.isinf(du):
            continue
        assert du + times[a] >= dv - 1e-9
        if tree.pred[pos[head]] == a:
            assert du + times[a] == pytest.approx(dv, abs=1e-9)


def test_leg_times_examples():
    net = line_network()
    taus = leg_times(net, np.array([10.0, 20.0]), TripTable({(1, 3): 1.0}))
    assert taus == {(1, 3, 2): 30.0}

    links = [Link(1, 1, 2, 1.0, 1.0), Link(2, 2, 1, 1.0, 1.0), Link(3, 2, 3, 1.0, 1.0), Link(4, 3, 1, 1.0, 1.0)]
    ring = Network([1, 2, 3], links, [1], [1, 3], [2, 3])
    times = np.array([4.0, 6.0, 3.0, 2.0])
    taus = leg_times(ring, times, TripTable({(1, 3): 1.0, (1, 1): 1.0}))
    # destination service: k = s reduces to the plain OD time
    assert taus[(1, 3, 3)] == pytest.approx(7.0)
    # round trip r = s
    assert taus[(1, 1, 2)] == pytest.approx(4.0 + 5.0)
    assert taus[(1, 1, 3)] == pytest.approx(7.0 + 2.0)


def test_leg_times_unreachable_named():
    net = Network([1, 2, 3], [Link(1, 1, 2, 1.0, 1.0)], [1], [3], [2])
    with pytest.raises(ValidationError, match=r"r=1, s=3, k=2"):
        leg_times(net, np.array([1.0]), TripTable({(1, 3): 1.0}))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_detour_never_shortens(seed):
    net, trips, _, _ = random_gcda(seed)
    rng = np.random.default_rng(seed)
    times = net.free_flow_times() * rng.uniform(1, 3, len(net.links))
    taus = leg_times(net, times, trips)
    for (r, s, k), tau in taus.items():
        direct = shortest_paths(net, times, r).dist[net.node_index[s]]
        assert tau >= direct - 1e-9


def test_incidence_matrix_columns():
    net = sioux_falls().network
    inc = net.incidence_matrix()
    assert inc.shape == (24, 76)
    assert np.all((inc == 1).sum(axis=0) == 1) and np.all((inc == -1).sum(axis=0) == 1)
