"""Partitions of unity over the coarse grid, sampled at fine nodes.

Two kinds: linear hats anchored at coarse nodes (P1 fine layout) and
quadratic Lagrange functions anchored at coarse nodes and coarse-edge
midpoints (P2 fine layout). Anchor ordinals equal neighborhood ordinals:
nodes first, then edges.

Evaluation uses the integer lattice coordinates from before vertex
projection, so values are exact barycentric polynomials, the nodal sum is
1 to rounding, and supports match the parent-element combinatorics even
for vertices that were snapped onto a circle.
"""

import numpy as np

from .spaces import FineSpace

KINDS = ("linear_hat", "quadratic_lagrange")


class PartitionOfUnity:
    """Per-anchor sparse nodal values chi_i over a scalar fine space.

    anchors[i] is a pair (node_ids, values) with node_ids ascending; nodes
    absent from the pair carry the value 0.
    """

    def __init__(self, kind, space, num_anchors):
        self.kind = kind
        self.space = space
        self.num_anchors = num_anchors
        self.anchors = [None] * num_anchors

    def nodal(self, anchor):
        """Dense nodal vector of chi_anchor."""
        out = np.zeros(self.space.num_nodes)
        idx, val = self.anchors[anchor]
        out[idx] = val
        return out

    def multiply(self, anchor, dof_values, ncomp):
        """chi_anchor * field, for interleaved ncomp dof vectors/matrices."""
        idx, val = self.anchors[anchor]
        out = np.zeros_like(np.asarray(dof_values, dtype=float))
        for c in range(ncomp):
            dofs = ncomp * idx + c
            out[dofs] = val.reshape(-1, *([1] * (out.ndim - 1))) \
                * dof_values[dofs]
        return out

    def partition_residual(self):
        """max |sum_i chi_i - 1| over fine nodes."""
        acc = np.zeros(self.space.num_nodes)
        for idx, val in self.anchors:
            acc[idx] += val
        return float(np.abs(acc - 1.0).max())


def build_pou(grid, mesh, kind):
    """Evaluate the chosen partition of unity at every fine node."""
    if kind not in KINDS:
        raise ValueError("unknown partition-of-unity kind %r" % kind)
    quad = kind == "quadratic_lagrange"
    space = FineSpace(mesh, 2 if quad else 1, 1)
    lat2 = space.node_lattice2
    n = grid.n
    T = 2 * (2 ** mesh.levels)  # doubled lattice steps per coarse cell
    i2, j2 = lat2[:, 0], lat2[:, 1]
    Ic = np.minimum(i2 // T, n - 1)
    Jc = np.minimum(j2 // T, n - 1)
    fx = (i2 - Ic * T) / T
    fy = (j2 - Jc * T) / T
    low = fx >= fy
    elem = 2 * (Jc * n + Ic) + np.where(low, 0, 1)
    lam = np.empty((space.num_nodes, 3))
    # Lower half (v00, v10, v11); upper half (v00, v11, v01).
    lam[low, 0] = 1.0 - fx[low]
    lam[low, 1] = fx[low] - fy[low]
    lam[low, 2] = fy[low]
    up = ~low
    lam[up, 0] = 1.0 - fy[up]
    lam[up, 1] = fx[up]
    lam[up, 2] = fy[up] - fx[up]

    if not quad:
        vals = lam
        anchor_ids = grid.elements[elem]
        num_anchors = grid.num_nodes
    else:
        vals = np.empty((space.num_nodes, 6))
        for i in range(3):
            vals[:, i] = lam[:, i] * (2.0 * lam[:, i] - 1.0)
        vals[:, 3] = 4.0 * lam[:, 0] * lam[:, 1]
        vals[:, 4] = 4.0 * lam[:, 1] * lam[:, 2]
        vals[:, 5] = 4.0 * lam[:, 0] * lam[:, 2]
        anchor_ids = np.hstack([grid.elements[elem],
                                grid.num_nodes + grid.element_edges[elem]])
        num_anchors = grid.num_nodes + grid.num_edges

    pou = PartitionOfUnity(kind, space, num_anchors)
    k = anchor_ids.shape[1]
    flat_a = anchor_ids.ravel()
    flat_n = np.repeat(np.arange(space.num_nodes), k)
    flat_v = vals.ravel()
    keep = flat_v != 0.0
    flat_a, flat_n, flat_v = flat_a[keep], flat_n[keep], flat_v[keep]
    order = np.argsort(flat_a, kind="stable")
    flat_a, flat_n, flat_v = flat_a[order], flat_n[order], flat_v[order]
    starts = np.searchsorted(flat_a, np.arange(num_anchors + 1))
    for a in range(num_anchors):
        s, e = starts[a], starts[a + 1]
        pou.anchors[a] = (flat_n[s:e], flat_v[s:e])
    return pou
