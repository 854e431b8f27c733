import numpy as np
import pytest
from hypothesis import given, strategies as st

from scoregraph.graph import (EnumerationTooLarge, Graph, GraphError, Permutation, StateSpaces,
                              apply_permutation, canonical_index, decode_index, edge_pairs, enumerate_graphs,
                              iter_sites, permutation_index_map, token_flip, token_table)

SPACES = StateSpaces(2, 3)


@st.composite
def graphs(draw, n_max=4, spaces=SPACES):
    n = draw(st.integers(1, n_max))
    nodes = draw(st.lists(st.integers(0, spaces.node_cardinality - 1), min_size=n, max_size=n))
    m = n * (n - 1) // 2
    edges = draw(st.lists(st.integers(0, spaces.edge_cardinality - 1), min_size=m, max_size=m))
    return Graph(tuple(nodes), tuple(edges))


def test_edge_order_is_row_major():
    assert edge_pairs(4) == ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))


def test_matrix_round_trip():
    G = Graph((0, 1, 1), (2, 0, 1))
    mat = G.edges
    assert np.array_equal(mat, mat.T) and np.all(np.diag(mat) == 0)
    assert Graph.from_matrix(G.nodes, mat) == G


@pytest.mark.parametrize("bad", [np.array([[0, 1], [0, 0]]), np.array([[1, 0], [0, 0]]), np.zeros((3, 3))])
def test_from_matrix_rejects(bad):
    with pytest.raises(GraphError):
        Graph.from_matrix((0, 0), bad)


def test_wrong_edge_count():
    with pytest.raises(GraphError):
        Graph((0, 0, 0), (1,))


def test_enumeration_order_matches_index():
    gs = enumerate_graphs(3, SPACES)
    assert len(gs) == SPACES.space_size(3) == 2**3 * 3**3
    assert [canonical_index(G, SPACES) for G in gs] == list(range(len(gs)))
    assert gs[0] == Graph((0, 0, 0), (0, 0, 0))


def test_enumeration_guard():
    with pytest.raises(EnumerationTooLarge):
        enumerate_graphs(5, StateSpaces(2, 2))
    with pytest.raises(EnumerationTooLarge):
        token_table(4, StateSpaces(6, 6))


@given(graphs())
def test_index_round_trip(G):
    assert decode_index(canonical_index(G, SPACES), G.n, SPACES) == G


def test_decode_out_of_range():
    with pytest.raises(GraphError):
        decode_index(SPACES.space_size(2), 2, SPACES)


def test_token_table_agrees_with_enumeration():
    tab = token_table(3, SPACES)
    for k, G in enumerate(enumerate_graphs(3, SPACES)):
        assert tuple(tab.nodes[k]) == G.nodes and tuple(tab.edges[k]) == G.edges_upper
    assert np.array_equal(tab.index_of(tab.nodes, tab.edges), np.arange(tab.size))


@given(graphs(n_max=4), st.data())
def test_permutation_group_action(G, data):
    perms = Permutation.all(G.n)
    p = data.draw(st.sampled_from(perms))
    q = data.draw(st.sampled_from(perms))
    assert apply_permutation(apply_permutation(G, q), p) == apply_permutation(G, p.compose(q))
    identity = Permutation(tuple(range(G.n)))
    assert apply_permutation(G, identity) == G


def test_permutation_moves_node_states():
    G = Graph((1, 0, 0), (2, 0, 0))  # edge 0-1 in state 2
    H = apply_permutation(G, Permutation((2, 0, 1)))
    assert H.nodes == (0, 0, 1)
    assert H.edges[2, 0] == 2 and H.edges.sum() == 4


def test_permutation_index_map_agrees():
    for perm in Permutation.all(3):
        mp = permutation_index_map(3, SPACES, perm)
        for k, G in enumerate(enumerate_graphs(3, SPACES)):
            assert mp[k] == canonical_index(apply_permutation(G, perm), SPACES)


def test_not_a_permutation():
    with pytest.raises(GraphError):
        Permutation((0, 0, 1))


def test_token_flip():
    G = Graph((0, 0, 0), (0, 0, 0))
    assert token_flip(G, 1, 1).nodes == (0, 1, 0)
    assert token_flip(G, (1, 2), 2).edges_upper == (0, 0, 2)
    for bad in [(1, 1), (2, 1)]:
        with pytest.raises(GraphError):
            token_flip(G, bad, 1)
    with pytest.raises(GraphError):
        token_flip(G, 0, 5, SPACES)
    assert list(iter_sites(3)) == [0, 1, 2, (0, 1), (0, 2), (1, 2)]


def test_mask_detection():
    sp = StateSpaces(3, 3, absorbing=True)
    assert sp.mask_node_index == 2
    assert Graph((0, 2), (0,)).has_mask(sp)
    assert not Graph((0, 1), (1,)).has_mask(sp)
    with pytest.raises(GraphError):
        StateSpaces(1, 2)


def test_single_node_graph():
    assert len(enumerate_graphs(1, SPACES)) == 2
    assert Graph((1,), ()).edges.shape == (1, 1)
