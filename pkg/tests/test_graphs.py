"""Patch-graph construction, merging, augmentation, persistence."""

import numpy as np
import pytest

from tmegraph.graphs import (
    PatchGraph,
    augment_graph,
    build_patch_graph,
    load_graph,
    merge_patient_graphs,
    save_graph,
    _grid_edges,
)


class FakeEmbedded:
    def __init__(self, rows, cols, g=4, image_id="img0", seed=0):
        rng = np.random.default_rng(seed)
        self.embeddings = rng.normal(size=(rows, cols, g)).astype(np.float32)
        self.image_id = image_id
        self.patch_size = 10


def test_single_patch_has_no_edges():
    g = build_patch_graph(FakeEmbedded(1, 1), "p0")
    assert g.num_nodes == 1
    assert g.num_edges == 0
    g.validate()


def test_2x2_grid_counts():
    g = build_patch_graph(FakeEmbedded(2, 2), "p0")
    assert g.num_nodes == 4
    assert g.num_edges == 8
    g.validate()


def test_3x3_grid_counts():
    g = build_patch_graph(FakeEmbedded(3, 3), "p0")
    assert g.num_edges == 24
    g.validate()


def test_degree_bounds_on_grids():
    for rows, cols in [(2, 2), (3, 5), (6, 4)]:
        g = build_patch_graph(FakeEmbedded(rows, cols), "p0")
        deg = np.bincount(g.edges[:, 1], minlength=g.num_nodes)
        assert deg.min() >= 2 and deg.max() <= 4


def test_edge_list_memory_is_linear_in_nodes():
    # 100x100 grid: dense boolean matrix would hold 1e8 entries vs ~8e4
    L = 100 * 100
    e = _grid_edges(100, 100)
    dense_entries = L * L
    edge_entries = e.size
    assert dense_entries / edge_entries > 1e3  # ~4 orders of magnitude


def test_merge_identity_and_counts():
    g1 = build_patch_graph(FakeEmbedded(20, 20, image_id="a"), "p0", label=1)
    assert merge_patient_graphs([g1]) is g1
    g2 = build_patch_graph(FakeEmbedded(20, 20, image_id="b", seed=1), "p0", label=1)
    assert g1.num_edges == 1520  # 2*(20*19*2)
    merged = merge_patient_graphs([g1, g2])
    assert merged.num_nodes == 800
    assert merged.num_edges == 3040
    assert merged.image_ids == ["a", "b"]
    assert set(merged.coords[:400, 0]) == {0} and set(merged.coords[400:, 0]) == {1}
    merged.validate()
    # no cross-image edges: components add up
    assert (merged.edges[:, 0] < 400).sum() == (merged.edges[:, 1] < 400).sum()
    cross = ((merged.edges[:, 0] < 400) != (merged.edges[:, 1] < 400)).sum()
    assert cross == 0


def test_merge_rejects_mixed_patients():
    g1 = build_patch_graph(FakeEmbedded(2, 2), "p0")
    g2 = build_patch_graph(FakeEmbedded(2, 2), "p1")
    with pytest.raises(ValueError):
        merge_patient_graphs([g1, g2])


def test_augment_rho_zero_is_identity():
    g = build_patch_graph(FakeEmbedded(5, 5), "p0")
    out = augment_graph(g, 0.0, ("drop_edge", "add_edge", "mask_node"), seed=3)
    np.testing.assert_array_equal(out.edges, g.edges)
    np.testing.assert_array_equal(out.z, g.z)
    assert out is not g


def test_augment_drop_saturates_to_empty():
    g = build_patch_graph(FakeEmbedded(3, 3), "p0")  # 12 undirected, L=9
    out = augment_graph(g, 1.0, ("drop_edge",), seed=4)  # floor(1*9)=9 < 12
    assert out.num_edges == (12 - 9) * 2
    g2 = build_patch_graph(FakeEmbedded(2, 2), "p0")  # 4 undirected, L=4
    out2 = augment_graph(g2, 1.0, ("drop_edge",), seed=4)
    assert out2.num_edges == 0


def test_augment_mask_node_exact_count():
    g = build_patch_graph(FakeEmbedded(20, 20), "p0")
    out = augment_graph(g, 0.1, ("mask_node",), seed=5)
    zero_rows = int((np.abs(out.z).sum(axis=1) == 0).sum())
    assert zero_rows == 40
    np.testing.assert_array_equal(out.edges, g.edges)


def test_augment_add_edges_no_dups_no_self_loops():
    g = build_patch_graph(FakeEmbedded(4, 4), "p0")
    before = g.num_edges // 2
    out = augment_graph(g, 0.5, ("add_edge",), seed=6)  # +floor(0.5*16)=8
    out.validate()
    assert out.num_edges // 2 == before + 8


def test_augment_sequential_order_and_determinism():
    g = build_patch_graph(FakeEmbedded(6, 6), "p0")
    a = augment_graph(g, 0.2, ("drop_edge", "add_edge", "mask_node"), seed=7)
    b = augment_graph(g, 0.2, ("drop_edge", "add_edge", "mask_node"), seed=7)
    np.testing.assert_array_equal(a.edges, b.edges)
    np.testing.assert_array_equal(a.z, b.z)
    c = augment_graph(g, 0.2, ("drop_edge", "add_edge", "mask_node"), seed=8)
    assert not np.array_equal(a.edges, c.edges)


def test_augment_rejects_bad_rho():
    g = build_patch_graph(FakeEmbedded(2, 2), "p0")
    with pytest.raises(ValueError):
        augment_graph(g, 1.5, ("drop_edge",), seed=0)
    with pytest.raises(ValueError):
        augment_graph(g, -0.1, ("drop_edge",), seed=0)


def test_graph_save_load_roundtrip(tmp_path):
    g = build_patch_graph(FakeEmbedded(8, 5, g=6, image_id="imgX"), "p9", label=2)
    path = tmp_path / "p9.graph"
    save_graph(path, g)
    loaded = load_graph(path)
    np.testing.assert_allclose(loaded.z, g.z, atol=1e-6)  # float32 round-trip
    np.testing.assert_array_equal(loaded.edges, g.edges)
    np.testing.assert_array_equal(loaded.coords, g.coords)
    assert loaded.patient_id == "p9" and loaded.label == 2
    assert loaded.image_ids == ["imgX"]
    side = path.with_suffix(".json")
    assert side.exists()
