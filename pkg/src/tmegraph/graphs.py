"""Per-patient sparse patch-graphs: grid 4-adjacency, merging, augmentation.

Edges are stored as a directed list containing both directions of every
undirected adjacency, with no self-loops and no duplicates, so downstream
aggregation is a plain gather over incoming edges. For an r x c grid the
true border-corrected count is E = 2*(r*(c-1) + c*(r-1)) directed edges.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import io as tio


@dataclass
class PatchGraph:
    """Node matrix Z (L x g), directed edge list (E x 2), patch coordinates.

    coords rows are (image_index, grid_row, grid_col); image_index points
    into ``image_ids`` so multi-image patients stay traceable.
    """
    z: np.ndarray
    edges: np.ndarray
    coords: np.ndarray
    patient_id: str
    label: int | None = None
    image_ids: list = field(default_factory=list)

    @property
    def num_nodes(self) -> int:
        return self.z.shape[0]

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]

    def validate(self):
        L = self.num_nodes
        e = self.edges
        if e.size:
            if e.min() < 0 or e.max() >= L:
                raise ValueError("edge endpoint out of range")
            if np.any(e[:, 0] == e[:, 1]):
                raise ValueError("self-loop in edge list")
            keys = e[:, 0].astype(np.int64) * L + e[:, 1]
            if np.unique(keys).size != e.shape[0]:
                raise ValueError("duplicate edges")
            rev = e[:, 1].astype(np.int64) * L + e[:, 0]
            if not np.isin(rev, keys).all():
                raise ValueError("edge list is not symmetric")
        return self


def _grid_edges(rows: int, cols: int) -> np.ndarray:
    """Directed 4-adjacency edges for an r x c grid, both directions."""
    idx = np.arange(rows * cols).reshape(rows, cols)
    pairs = []
    if cols > 1:
        right = np.stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()], axis=1)
        pairs.append(right)
    if rows > 1:
        down = np.stack([idx[:-1, :].ravel(), idx[1:, :].ravel()], axis=1)
        pairs.append(down)
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    und = np.concatenate(pairs, axis=0)
    return np.concatenate([und, und[:, ::-1]], axis=0).astype(np.int64)


def build_patch_graph(embedded, patient_id: str, label=None) -> PatchGraph:
    """Connect each patch of an embedded image to its 4 grid neighbors."""
    emb = embedded.embeddings
    rows, cols, g = emb.shape
    z = emb.reshape(rows * cols, g).astype(np.float64)
    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    coords = np.stack([np.zeros(rows * cols, dtype=np.int64),
                       rr.ravel(), cc.ravel()], axis=1)
    return PatchGraph(z=z, edges=_grid_edges(rows, cols), coords=coords,
                      patient_id=patient_id, label=label,
                      image_ids=[embedded.image_id])


def merge_patient_graphs(graphs: list[PatchGraph]) -> PatchGraph:
    """Disjoint union of one patient's image graphs (no cross-image edges)."""
    if not graphs:
        raise ValueError("no graphs to merge")
    if len(graphs) == 1:
        return graphs[0]
    pid = graphs[0].patient_id
    g = graphs[0].z.shape[1]
    for gr in graphs:
        if gr.patient_id != pid:
            raise ValueError(f"mixed patient ids: {pid!r} vs {gr.patient_id!r}")
        if gr.z.shape[1] != g:
            raise ValueError("mixed embedding dimensions")
    zs, edges, coords, image_ids = [], [], [], []
    node_off = 0
    img_off = 0
    for gr in graphs:
        zs.append(gr.z)
        edges.append(gr.edges + node_off)
        c = gr.coords.copy()
        c[:, 0] += img_off
        coords.append(c)
        image_ids.extend(gr.image_ids)
        node_off += gr.num_nodes
        img_off += len(gr.image_ids)
    return PatchGraph(z=np.concatenate(zs, axis=0),
                      edges=np.concatenate(edges, axis=0),
                      coords=np.concatenate(coords, axis=0),
                      patient_id=pid, label=graphs[0].label,
                      image_ids=image_ids)


def _undirected_pairs(edges: np.ndarray) -> np.ndarray:
    if edges.size == 0:
        return edges.reshape(0, 2)
    lo = np.minimum(edges[:, 0], edges[:, 1])
    hi = np.maximum(edges[:, 0], edges[:, 1])
    pairs = np.unique(np.stack([lo, hi], axis=1), axis=0)
    return pairs


def augment_graph(graph: PatchGraph, rho: float, modes, seed) -> PatchGraph:
    """Stochastic graph perturbation: drop/add floor(rho*L) undirected edges,
    mask floor(rho*L) node embeddings. Modes apply sequentially in the
    given order; the input graph is never mutated.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must be in [0, 1], got {rho}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    L = graph.num_nodes
    count = int(np.floor(rho * L))
    z = graph.z
    edges = graph.edges
    if count == 0 or not modes:
        return replace(graph, z=z.copy(), edges=edges.copy(), coords=graph.coords.copy())

    for mode in modes:
        if mode == "drop_edge":
            pairs = _undirected_pairs(edges)
            k = min(count, pairs.shape[0])
            if k:
                keep = np.ones(pairs.shape[0], dtype=bool)
                keep[rng.choice(pairs.shape[0], size=k, replace=False)] = False
                pairs = pairs[keep]
            edges = np.concatenate([pairs, pairs[:, ::-1]], axis=0) if pairs.size \
                else np.zeros((0, 2), dtype=np.int64)
        elif mode == "add_edge":
            pairs = _undirected_pairs(edges)
            existing = set(map(tuple, pairs.tolist()))
            max_new = L * (L - 1) // 2 - len(existing)
            k = min(count, max_new)
            new = []
            while len(new) < k:
                u, v = rng.integers(0, L, size=2)
                if u == v:
                    continue
                key = (min(u, v), max(u, v))
                if key in existing:
                    continue
                existing.add(key)
                new.append(key)
            if new:
                pairs = np.concatenate([pairs, np.asarray(new, dtype=np.int64)], axis=0)
            edges = np.concatenate([pairs, pairs[:, ::-1]], axis=0) if pairs.size \
                else np.zeros((0, 2), dtype=np.int64)
        elif mode == "mask_node":
            z = z.copy()
            idx = rng.choice(L, size=min(count, L), replace=False)
            z[idx] = 0.0
        else:
            raise ValueError(f"unknown augmentation mode {mode!r}")
    return replace(graph, z=z, edges=edges.astype(np.int64), coords=graph.coords.copy())


# -- persistence -----------------------------------------------------------------

def save_graph(path, graph: PatchGraph, meta=None):
    """Binary container (Z float32, edges uint32, coords) + JSON sidecar."""
    from pathlib import Path
    path = Path(path)
    header = {"patient_id": graph.patient_id, "label": graph.label,
              "image_ids": graph.image_ids}
    tio.write_container(path, {
        "z": graph.z.astype(np.float32),
        "edges": graph.edges.astype(np.uint32),
        "coords": graph.coords.astype(np.int32),
    }, header=header)
    side = {"patient_id": graph.patient_id, "label": graph.label,
            "g": int(graph.z.shape[1]), "L": int(graph.num_nodes),
            "E": int(graph.num_edges), "image_ids": graph.image_ids}
    if meta:
        side["meta"] = meta
    tio.write_json(path.with_suffix(".json"), side)
    return path


def load_graph(path) -> PatchGraph:
    arrays, header = tio.read_container(path)
    return PatchGraph(z=arrays["z"].astype(np.float64),
                      edges=arrays["edges"].astype(np.int64),
                      coords=arrays["coords"].astype(np.int64),
                      patient_id=header["patient_id"], label=header["label"],
                      image_ids=list(header.get("image_ids", [])))
