import numpy as np
import pytest
from hypothesis import given, strategies as st

from meshrom.errors import FormatError, ValidationError
from meshrom.mesh import (FieldSnapshot, MeshGraph, build_graph, format_mesh, neighbors, parse_mesh,
                          permute_nodes, read_snapshot, snapshot_bytes, snapshot_from_bytes, write_mesh,
                          write_snapshot)

from conftest import grid_graph, random_graph


def test_two_node_file(tmp_path):
    p = tmp_path / "m.txt"
    p.write_text("[nodes]\n0 0 0\n1 1 0\n[edges]\n0 1 1\n")
    g = build_graph(p)
    assert g.edge_count == 1
    np.testing.assert_array_equal(g.edge_features[0], [1.0, 0.0, 1.0, 1.0])


def test_triangle_edge_count():
    g = MeshGraph.from_adjacency([[0, 0], [1, 0], [0, 1]], np.ones((3, 3)) - np.eye(3), 1.0)
    assert g.edge_count == 3
    assert neighbors(g, 0) == [1, 2]


def test_structured_patch_counts():
    g = grid_graph(10, 10)
    # interior 4-neighbour edges: 10 rows x 9 + 10 columns x 9
    assert (g.node_count, g.edge_count) == (100, 180)


def test_path_and_isolated_neighbors():
    path = MeshGraph([[0, 0], [1, 0], [2, 0]], [[0, 1], [1, 2]], [1.0, 1.0])
    assert neighbors(path, 1) == [0, 2]
    iso = MeshGraph([[0, 0], [1, 0], [5, 5]], [[0, 1]], [1.0], allow_components=True)
    assert neighbors(iso, 2) == []
    with pytest.raises(IndexError):
        neighbors(path, 3)


@pytest.mark.parametrize("edges, msg", [
    ([[0, 0]], "self"),
    ([[1, 0]], "i < j"),
    ([[0, 1], [0, 1]], "duplicate"),
])
def test_invalid_edges_rejected(edges, msg):
    with pytest.raises(ValidationError):
        MeshGraph([[0, 0], [1, 0]], edges, np.ones(len(edges)))


def test_asymmetric_adjacency_rejected():
    a = np.array([[0, 1], [0, 0]])
    with pytest.raises(ValidationError):
        MeshGraph.from_adjacency([[0, 0], [1, 0]], a, 1.0)


def test_disconnected_rejected_by_default():
    with pytest.raises(ValidationError):
        MeshGraph([[0, 0], [1, 0], [5, 5]], [[0, 1]], [1.0])


def test_parse_error_reports_line():
    with pytest.raises(FormatError) as info:
        parse_mesh("[nodes]\n0 0 0\n1 oops 0\n")
    assert info.value.line == 3


def test_roundtrip_text(tmp_path):
    g = random_graph(30, seed=3)
    write_mesh(g, tmp_path / "m.txt")
    g2 = build_graph(tmp_path / "m.txt")
    assert g.same_as(g2)
    assert format_mesh(g2) == format_mesh(g)


def test_edge_feature_invariants():
    g = random_graph(40, seed=5)
    i, j = g.edges.T
    d = g.coords[j] - g.coords[i]
    np.testing.assert_allclose(g.edge_features[:, :2], d, rtol=1e-12, atol=0)
    np.testing.assert_allclose(g.edge_features[:, 3], np.hypot(*d.T), rtol=1e-12)
    assert np.all(g.edge_features[:, 3] > 0)
    assert g.edge_count == g.adjacency.sum() // 2


def test_directed_edges_negate_reverse_displacement():
    g = grid_graph(3, 2)
    src, dst, f = g.directed_edges()
    ne = g.edge_count
    np.testing.assert_array_equal(src[ne:], dst[:ne])
    np.testing.assert_array_equal(f[ne:, :2], -f[:ne, :2])
    np.testing.assert_array_equal(f[ne:, 2:], f[:ne, 2:])


def test_permute_identity_and_involution(rng):
    g = random_graph(10, seed=1)
    s = FieldSnapshot(rng.normal(size=(3, 10)))
    g1, s1 = permute_nodes(g, s, np.arange(10))
    assert g1.same_as(g) and np.array_equal(s1.values, s.values)
    swap = np.arange(10)
    swap[[0, 1]] = [1, 0]
    g2, s2 = permute_nodes(*permute_nodes(g, s, swap), swap)
    assert g2.same_as(g) and np.array_equal(s2.values, s.values)


def test_permute_rejects_non_bijection():
    g = grid_graph(2, 2)
    with pytest.raises(ValidationError):
        permute_nodes(g, None, [0, 0, 1, 2])


def _feature_multiset(g):
    i, j = g.edges.T
    # orientation-free description: unordered endpoint coordinates plus face and distance
    a, b = g.coords[i], g.coords[j]
    key = np.where((a[:, :1] < b[:, :1]) | ((a[:, :1] == b[:, :1]) & (a[:, 1:] < b[:, 1:])),
                   np.hstack([a, b]), np.hstack([b, a]))
    rows = np.column_stack([key, g.face_measure, g.edge_features[:, 3]])
    return rows[np.lexsort(rows.T[::-1])]


@given(st.integers(0, 2**32 - 1))
def test_permutation_preserves_edge_multiset(seed):
    g = random_graph(10, seed=7)
    perm = np.random.default_rng(seed).permutation(10)
    g2, _ = permute_nodes(g, None, perm)
    assert (g2.node_count, g2.edge_count) == (g.node_count, g.edge_count)
    np.testing.assert_array_equal(_feature_multiset(g2), _feature_multiset(g))
    pairs = lambda h: sorted(zip(h.face_measure.tolist(), h.edge_features[:, 3].tolist()))
    assert pairs(g2) == pairs(g)


def test_snapshot_validation(grid5):
    with pytest.raises(ValidationError):
        FieldSnapshot(np.array([[np.nan, 1.0, 2.0]] * 3))
    s = FieldSnapshot(np.zeros((3, 4)))
    with pytest.raises(ValidationError):
        s.check_against(grid5)


@given(st.integers(1, 4), st.integers(1, 20), st.floats(-1e3, 1e3), st.integers(0, 3))
def test_snapshot_binary_roundtrip(nu, n, t, npar):
    rng = np.random.default_rng(nu * 100 + n)
    s = FieldSnapshot(rng.normal(size=(nu, n)), tuple(f"f{k}" for k in range(nu)), t, rng.normal(size=npar))
    s2 = snapshot_from_bytes(snapshot_bytes(s), s.field_names)
    assert np.array_equal(s2.values, s.values) and s2.time == s.time
    assert np.array_equal(s2.param, s.param)


def test_snapshot_header_layout(tmp_path):
    s = FieldSnapshot(np.arange(6.0).reshape(3, 2), time=0.5, param=[2.0])
    write_snapshot(s, tmp_path / "s.gled")
    raw = (tmp_path / "s.gled").read_bytes()
    assert raw[:4] == b"GLED"
    assert len(raw) == 4 + 4 * 3 + 8 + 4 + 8 + 8 * 6
    assert np.array_equal(read_snapshot(tmp_path / "s.gled").values, s.values)


def test_snapshot_corruption_detected():
    buf = snapshot_bytes(FieldSnapshot(np.zeros((3, 2))))
    with pytest.raises(FormatError):
        snapshot_from_bytes(b"XXXX" + buf[4:])
    with pytest.raises(FormatError):
        snapshot_from_bytes(buf[:-8])
