import json
import random

import networkx as nx
import pytest

from ma2c_tsc.network import (Intersection, Lane, NetworkError, NetworkSpec, Phase, Route,
                              fixture_path, grid_network, hop_distances, irregular_network,
                              load_network, neighbor_graph, network_from_dict, pinwheel_network,
                              save_network)


def graph_spec(n, edges, threshold=1):
    """Agents 0..n-1 joined by one lane per edge, each fed by two entry lanes."""
    names = [f"a{k:02d}" for k in range(n)]
    lanes, incoming = [], {a: [] for a in names}
    for u, v in edges:
        lid = f"{names[u]}_{names[v]}"
        lanes.append(Lane(lid, 200.0, 10.0, names[u], names[v]))
        incoming[names[v]].append(lid)
    for a in names:
        for k in range(2):
            lid = f"src{k}_{a}"
            lanes.append(Lane(lid, 200.0, 10.0, f"src{k}{a}", a))
            incoming[a].append(lid)
    xs = []
    for a in names:
        inc = incoming[a]
        xs.append(Intersection(a, tuple(inc), (Phase("p0", tuple(inc[0::2])),
                                               Phase("p1", tuple(inc[1::2])))))
    routes = (Route((f"src0_{names[0]}",), 1.0, "r0"),)
    return NetworkSpec(tuple(lanes), tuple(xs), routes, neighbor_threshold=threshold)


def random_connected(n, rng):
    edges = [(rng.randrange(k), k) for k in range(1, n)]   # random spanning tree
    for _ in range(rng.randrange(n + 1)):
        u, v = rng.sample(range(n), 2)
        if (u, v) not in edges:
            edges.append((u, v))
    return edges


def test_grid2x2_fixture_shape():
    spec = load_network(fixture_path("grid2x2"))
    assert len(spec.agents) == 4
    assert len(spec.lanes) == 12
    assert spec == pinwheel_network()


def test_all_fixtures_load():
    for name in ("grid2x2", "grid3x3", "irregular7"):
        spec = load_network(fixture_path(name))
        assert spec.agents
    assert len(load_network(fixture_path("grid3x3")).agents) == 9
    assert len(load_network(fixture_path("irregular7")).agents) == 7


@pytest.mark.parametrize("spec", [grid_network(2, 2), pinwheel_network()])
def test_grid2x2_each_agent_has_two_neighbors(spec):
    nb = neighbor_graph(spec)
    assert all(len(v) == 2 for v in nb.values())
    assert nb["n00"] == {"n01", "n10"}


def test_pinwheel_routes_cross_one_or_two_signals():
    spec = pinwheel_network()
    for x in spec.intersections:
        assert len(x.incoming_lanes) == 2
    for r in spec.routes:
        crossed = [spec.lane(l).to_node for l in r.lanes[:-1]]
        assert len(crossed) == (2 if r.id.endswith("through") else 1)
    # arterials dominate the demand
    w = {r.id: r.weight for r in spec.routes}
    assert w["r0_turn"] > 5 * w["c0_turn"]


def test_round_trip(tmp_path):
    spec = irregular_network()
    p = tmp_path / "net.json"
    save_network(spec, p)
    assert load_network(p) == spec


def test_route_that_does_not_chain_is_named(tmp_path):
    doc = grid_network(2, 2).to_dict()
    doc["routes"].append({"id": "broken", "lanes": ["W0_n00", "N1_n01"], "weight": 1.0})
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(NetworkError, match="broken"):
        load_network(p)


def test_lane_in_no_phase_is_rejected():
    doc = grid_network(2, 2).to_dict()
    x = doc["intersections"][0]
    x["phases"][0]["green_lanes"] = [l for l in x["phases"][0]["green_lanes"]
                                     if l != x["incoming_lanes"][0]] or [x["incoming_lanes"][1]]
    x["phases"][1]["green_lanes"] = [x["incoming_lanes"][1]]
    with pytest.raises(NetworkError, match=x["incoming_lanes"][0]):
        network_from_dict(doc)


def test_malformed_file(tmp_path):
    p = tmp_path / "x.json"
    p.write_text("{not json")
    with pytest.raises(NetworkError):
        load_network(p)
    with pytest.raises(NetworkError):
        network_from_dict({"lanes": [{"id": "a"}], "intersections": []})


def test_lane_invariants():
    with pytest.raises(NetworkError):
        Lane("x", 0.0, 10.0, "a", "b")
    with pytest.raises(NetworkError):
        Lane("x", 30.0, 10.0, "a", "b", sensor_zone=50.0)


def test_single_agent_has_no_neighbors():
    spec = graph_spec(1, [])
    assert neighbor_graph(spec) == {"a00": set()}


def test_threshold_at_diameter_reaches_everyone():
    rng = random.Random(3)
    edges = random_connected(8, rng)
    diam = nx.diameter(nx.Graph(edges))
    spec = graph_spec(8, edges, threshold=diam)
    for a, nb in neighbor_graph(spec).items():
        assert nb == set(spec.agents) - {a}


@pytest.mark.parametrize("seed", range(25))
def test_neighbors_match_networkx_oracle(seed):
    rng = random.Random(seed)
    n = rng.randint(2, 20)
    thr = rng.randint(1, 3)
    edges = random_connected(n, rng)
    spec = graph_spec(n, edges, threshold=thr)
    g = nx.Graph()
    g.add_nodes_from(range(n))
    g.add_edges_from(edges)
    lengths = dict(nx.all_pairs_shortest_path_length(g))
    nb = neighbor_graph(spec)
    for i in range(n):
        want = {f"a{j:02d}" for j, d in lengths[i].items() if j != i and d <= thr}
        assert nb[f"a{i:02d}"] == want
    # symmetry, and the local region includes the agent itself
    for i, js in nb.items():
        assert all(i in nb[j] for j in js)
        assert i not in js
        assert hop_distances(spec)[i][i] == 0


def test_disconnected_agents_rejected():
    with pytest.raises(NetworkError, match="connected"):
        graph_spec(3, [(0, 1)])
