import json

import numpy as np
import pytest

from mpgat.graph import GraphLoadError, IntersectionGraph, build_adjacency, default_graph, load_graph, path_graph


def write(tmp_path, doc):
    p = tmp_path / "g.json"
    p.write_text(json.dumps(doc))
    return p


def test_load_two_node_graph(tmp_path):
    g = load_graph(write(tmp_path, {"n": 2, "edges": [[0, 1]]}))
    assert g.n == 2 and g.edges == ((0, 1),)


def test_out_of_range_edge(tmp_path):
    with pytest.raises(GraphLoadError, match=r"\[0, 5\]"):
        load_graph(write(tmp_path, {"n": 2, "edges": [[0, 5]]}))


@pytest.mark.parametrize("doc", [{"edges": []}, {"n": 2, "edges": [[0]]}, {"n": 2, "edges": [[1, 1]]},
                                 {"n": 2, "edges": [[0, 1], [0, 1]]}, {"n": 2, "labels": ["a"]}])
def test_malformed_files(tmp_path, doc):
    with pytest.raises(GraphLoadError):
        load_graph(write(tmp_path, doc))


def test_missing_file(tmp_path):
    with pytest.raises(GraphLoadError, match="no such"):
        load_graph(tmp_path / "nope.json")


def test_bundled_graph_has_six_nodes():
    g = default_graph()
    assert g.n == 6
    assert len(g.labels) == 6


def test_forward_and_backward_neighbours():
    g = path_graph(3)
    fwd = build_adjacency(g, "forward").neighbor_sets
    bwd = build_adjacency(g, "backward").neighbor_sets
    assert [set(s) for s in fwd] == [{0}, {0, 1}, {1, 2}]
    assert [set(s) for s in bwd] == [{0, 1}, {1, 2}, {2}]


def test_backward_is_forward_of_transpose():
    g = default_graph()
    a = build_adjacency(g, "backward").neighbor_sets
    b = build_adjacency(g.transpose(), "forward").neighbor_sets
    assert a == b


def test_global_neighbours():
    sets = build_adjacency(path_graph(3), "global").neighbor_sets
    assert all(set(s) == {0, 1, 2} for s in sets)


def test_mask_blocks_non_neighbours():
    m = build_adjacency(path_graph(3), "forward").mask()
    np.testing.assert_array_equal(m, [[False, True, True], [False, False, True], [True, False, False]])


def test_unknown_direction():
    with pytest.raises(ValueError):
        build_adjacency(path_graph(2), "sideways")


def test_relabel_and_round_trip(tmp_path):
    g = IntersectionGraph(3, ((0, 1), (1, 2)), ("a", "b", "c"))
    r = g.relabel([2, 0, 1])
    assert set(r.edges) == {(2, 0), (0, 1)}
    assert r.labels == ("b", "c", "a")
    g.save(tmp_path / "x.json")
    assert load_graph(tmp_path / "x.json") == g
