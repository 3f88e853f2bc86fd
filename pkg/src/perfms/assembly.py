"""Matrix and vector assembly on triangle patches.

All assemblers take a TriGeometry (coordinates, areas, P1 barycentric
gradients) plus an explicit triangle->node table, so they serve both the
global mesh and LocalSpace patches. Vector operators interleave components:
dof = ncomp * node + comp; scalar matrices are expanded with a Kronecker
product, which preserves that ordering.

P2 shape functions are ordered vertices first, then midpoints of the local
edges (01), (12), (02); their derivatives are taken via the chain rule
through the barycentric gradients, so no reference-element Jacobians appear.
"""

import numpy as np
from scipy.sparse import coo_matrix, identity, kron

from .quadrature import triangle_rule


class AssemblyError(ValueError):
    pass


class TriGeometry:
    """Areas and barycentric gradients of a triangle patch.

    grads[t, i] is the constant gradient of the barycentric coordinate of
    local vertex i on triangle t. Degenerate triangles are an error.
    """

    def __init__(self, verts_xy, tris):
        p = verts_xy[tris]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        a2 = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        bad = np.flatnonzero(a2 <= 1e-14)
        if len(bad):
            raise AssemblyError(
                "degenerate or inverted triangle %d (doubled area %g)"
                % (bad[0], a2[bad[0]]))
        self.verts_xy = verts_xy
        self.tris = tris
        self.areas = 0.5 * a2
        g = np.empty((len(tris), 3, 2))
        for i in range(3):
            q1 = p[:, (i + 1) % 3]
            q2 = p[:, (i + 2) % 3]
            g[:, i, 0] = q1[:, 1] - q2[:, 1]
            g[:, i, 1] = q2[:, 0] - q1[:, 0]
        self.grads = g / a2[:, None, None]

    def points(self, bary):
        """Physical quadrature points, shape (nt, nq, 2)."""
        p = self.verts_xy[self.tris]
        return np.einsum("qk,tkx->tqx", bary, p)


def _p2_shapes(bary):
    l0, l1, l2 = bary[:, 0], bary[:, 1], bary[:, 2]
    return np.column_stack([
        l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
        4 * l0 * l1, 4 * l1 * l2, 4 * l0 * l2,
    ])


def _p2_dshapes(bary):
    """d(shape)/d(barycentric), shape (nq, 6, 3)."""
    nq = len(bary)
    l0, l1, l2 = bary[:, 0], bary[:, 1], bary[:, 2]
    out = np.zeros((nq, 6, 3))
    out[:, 0, 0] = 4 * l0 - 1
    out[:, 1, 1] = 4 * l1 - 1
    out[:, 2, 2] = 4 * l2 - 1
    out[:, 3, 0] = 4 * l1
    out[:, 3, 1] = 4 * l0
    out[:, 4, 1] = 4 * l2
    out[:, 4, 2] = 4 * l1
    out[:, 5, 0] = 4 * l2
    out[:, 5, 2] = 4 * l0
    return out


def p2_gradients(geom, bary):
    """Physical P2 shape gradients, shape (nt, nq, 6, 2)."""
    dsh = _p2_dshapes(bary)
    return np.einsum("qdk,tkx->tqdx", dsh, geom.grads)


def _to_csr(elem, tri_nodes, nn):
    nd = tri_nodes.shape[1]
    rows = np.repeat(tri_nodes, nd, axis=1)
    cols = np.tile(tri_nodes, (1, nd))
    mat = coo_matrix((elem.reshape(len(tri_nodes), -1).ravel(),
                      (rows.ravel(), cols.ravel())), shape=(nn, nn))
    return mat.tocsr()


def stiffness_p1(geom, tri_nodes, nn):
    elem = np.einsum("t,tix,tjx->tij", geom.areas, geom.grads, geom.grads)
    return _to_csr(elem, tri_nodes, nn)


def mass_p1(geom, tri_nodes, nn, weight=None):
    """P1 mass matrix, optionally with a per-triangle weight."""
    base = (np.ones((3, 3)) + np.eye(3)) / 12.0
    w = geom.areas if weight is None else geom.areas * np.asarray(weight)
    elem = w[:, None, None] * base
    return _to_csr(elem, tri_nodes, nn)


def elastic_p1(geom, tri_nodes, nn, mu, xi):
    """Plane-strain elasticity on P1 vectors: 2 mu e(u):e(v) + xi div u div v."""
    g = geom.grads
    gg = np.einsum("tix,tjx->tij", g, g)
    elem = np.zeros((len(tri_nodes), 6, 6))
    for c in range(2):
        for d in range(2):
            blk = mu * g[:, :, d][:, :, None] * g[:, :, c][:, None, :] \
                + xi * g[:, :, c][:, :, None] * g[:, :, d][:, None, :]
            if c == d:
                blk = blk + mu * gg
            elem[:, c::2, d::2] = blk
    elem *= geom.areas[:, None, None]
    dofs = 2 * np.repeat(tri_nodes, 2, axis=1)
    dofs[:, 1::2] += 1
    return _to_csr(elem, dofs, 2 * nn)


def stiffness_p2(geom, tri_nodes, nn):
    bary, w = triangle_rule(2)
    gn = p2_gradients(geom, bary)
    elem = np.einsum("q,t,tqax,tqbx->tab", w, geom.areas, gn, gn)
    return _to_csr(elem, tri_nodes, nn)


def mass_p2(geom, tri_nodes, nn, qp_weight=None):
    """P2 mass matrix; qp_weight (nt, nq) on the degree-4 rule if given."""
    bary, w = triangle_rule(4)
    sh = _p2_shapes(bary)
    if qp_weight is None:
        elem = np.einsum("q,t,qa,qb->tab", w, geom.areas, sh, sh)
    else:
        elem = np.einsum("q,t,tq,qa,qb->tab", w, geom.areas, qp_weight, sh, sh)
    return _to_csr(elem, tri_nodes, nn)


def gradsq_weight_p2(geom, tri_nodes, nodal):
    """|grad chi|^2 at the degree-4 rule points for a P2 nodal field chi."""
    bary, _ = triangle_rule(4)
    gn = p2_gradients(geom, bary)
    gchi = np.einsum("tqax,ta->tqx", gn, nodal[tri_nodes])
    return np.einsum("tqx,tqx->tq", gchi, gchi)


def vector_expand(scalar_mat, ncomp):
    """Expand a scalar nodal matrix to ncomp interleaved components."""
    if ncomp == 1:
        return scalar_mat.tocsr()
    return kron(scalar_mat, identity(ncomp), format="csr")


def div_p2_p0(geom, tri_nodes, nn):
    """Integrated divergence: row t of (B u) equals the integral of div u
    over triangle t, for interleaved 2-component P2 vectors u."""
    bary, w = triangle_rule(2)
    gn = p2_gradients(geom, bary)
    ig = np.einsum("q,t,tqdx->tdx", w, geom.areas, gn)
    nt, nd = tri_nodes.shape
    rows = np.repeat(np.arange(nt), 2 * nd)
    cols = np.empty((nt, nd, 2), dtype=np.int64)
    cols[:, :, 0] = 2 * tri_nodes
    cols[:, :, 1] = 2 * tri_nodes + 1
    return coo_matrix((ig.reshape(nt, -1).ravel(), (rows, cols.ravel())),
                      shape=(nt, 2 * nn)).tocsr()


def load_p1(geom, tri_nodes, nn, spec):
    bary, w = triangle_rule(2)
    xq = geom.points(bary)
    nt, nq = len(tri_nodes), len(w)
    fv = spec.f_at(xq.reshape(-1, 2)).reshape(nt, nq, spec.ncomp)
    elem = np.einsum("q,t,qa,tqc->tac", w, geom.areas, bary, fv)
    return _scatter_load(elem, tri_nodes, nn, spec.ncomp)


def load_p2(geom, tri_nodes, nn, spec):
    bary, w = triangle_rule(4)
    sh = _p2_shapes(bary)
    xq = geom.points(bary)
    nt, nq = len(tri_nodes), len(w)
    fv = spec.f_at(xq.reshape(-1, 2)).reshape(nt, nq, spec.ncomp)
    elem = np.einsum("q,t,qa,tqc->tac", w, geom.areas, sh, fv)
    return _scatter_load(elem, tri_nodes, nn, spec.ncomp)


def _scatter_load(elem, tri_nodes, nn, ncomp):
    F = np.zeros(ncomp * nn)
    dofs = (ncomp * tri_nodes[:, :, None]
            + np.arange(ncomp)[None, None, :])
    np.add.at(F, dofs.ravel(), elem.ravel())
    return F


def outward_normals(verts_xy, edge_rows, owners, tris_l):
    """Unit outward normals and lengths for boundary edges of a patch.

    edge_rows holds (a, b, mid) local vertex rows; owners the adjacent local
    triangle. Outward means away from the owner's third vertex.
    """
    a = verts_xy[edge_rows[:, 0]]
    b = verts_xy[edge_rows[:, 1]]
    t = b - a
    lengths = np.hypot(t[:, 0], t[:, 1])
    n = np.column_stack([t[:, 1], -t[:, 0]]) / lengths[:, None]
    mids = 0.5 * (a + b)
    for k, tri in enumerate(owners):
        pts = verts_xy[tris_l[tri]]
        cen = pts.mean(axis=0)
        if n[k] @ (mids[k] - cen) < 0:
            n[k] = -n[k]
    return n, lengths
