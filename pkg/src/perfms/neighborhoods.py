"""Coarse neighborhoods: the local regions all snapshot and online work
lives on.

A node neighborhood is the union of coarse elements sharing a coarse node;
an edge neighborhood the union of the one or two elements adjacent to a
coarse edge. Ordinals number node neighborhoods first (by node id) and edge
neighborhoods after (by edge id), which keeps them aligned with the anchors
of the quadratic partition of unity.
"""

from dataclasses import dataclass

import numpy as np

from .meshing import _tri_adjacency


@dataclass(frozen=True)
class Neighborhood:
    kind: str
    anchor: int
    ordinal: int
    elements: np.ndarray
    tri_ids: np.ndarray
    mesh: object = None

    def __repr__(self):
        return ("Neighborhood(%s %d, ordinal %d, %d coarse elems, %d tris)"
                % (self.kind, self.anchor, self.ordinal,
                   len(self.elements), len(self.tri_ids)))


def element_tris(mesh, num_elements):
    """Fine triangle ids per coarse element, each ascending."""
    order = np.argsort(mesh.parent, kind="stable")
    counts = np.bincount(mesh.parent, minlength=num_elements)
    return np.split(order, np.cumsum(counts)[:-1])


def build_neighborhoods(grid, mesh, kinds=("node",)):
    """One neighborhood per coarse node, plus per coarse edge if requested."""
    kinds = set(kinds) | {"node"}
    etris = element_tris(mesh, grid.num_elements)
    node_elems = [[] for _ in range(grid.num_nodes)]
    for e, tri in enumerate(grid.elements):
        for v in tri:
            node_elems[int(v)].append(e)

    def make(kind, anchor, ordinal, elems):
        elems = np.asarray(sorted(elems), dtype=np.int64)
        tris = np.sort(np.concatenate([etris[e] for e in elems]))
        return Neighborhood(kind, anchor, ordinal, elems, tris, mesh)

    out = [make("node", i, i, node_elems[i]) for i in range(grid.num_nodes)]
    if "edge" in kinds:
        base = grid.num_nodes
        for e in range(grid.num_edges):
            out.append(make("edge", e, base + e, grid.edge_elements[e]))
    return out


def oversample(nb, layers):
    """Grow the fine patch by rings of edge-adjacent triangles.

    Growth saturates at the domain boundary; layers=0 returns nb itself.
    """
    if layers < 0:
        raise ValueError("layers must be >= 0")
    if layers == 0:
        return nb
    mesh = nb.mesh
    adj = getattr(mesh, "_tri_adj", None)
    if adj is None:
        adj, _ = _tri_adjacency(mesh.tris, mesh.tri_edges, len(mesh.edges))
        mesh._tri_adj = adj
    ind = np.zeros(mesh.num_tris, dtype=bool)
    ind[nb.tri_ids] = True
    for _ in range(layers):
        ind |= adj @ ind > 0
    tris = np.flatnonzero(ind)
    elems = np.unique(mesh.parent[tris])
    return Neighborhood(nb.kind, nb.anchor, nb.ordinal, elems, tris, mesh)
