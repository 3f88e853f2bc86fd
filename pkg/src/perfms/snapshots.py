"""Per-neighborhood snapshot spaces.

Standard mode solves one local problem per admissible interface datum:
nodal deltas per component for the P1 operators, per-interface-fine-edge
data for Stokes. Randomized mode solves a handful of local problems with
Gaussian interface data on an oversampled patch, restricts them to the base
patch, and appends one constant-trace extension per component.

Stokes local problems always carry the compatibility constant c: the
divergence target is the constant net-boundary-flux / patch-area, so the
saddle systems are solvable; local pressures are discarded.

Randomized mode is operator-generic; for elasticity it is provided as an
experimental variant (the reference studies use it for Stokes).
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import splu

from .neighborhoods import oversample
from .solvers import LocalStokesSolver, assemble, boundary_flux_p2
from .spaces import LocalSpace


@dataclass
class SnapshotSpace:
    """Columns are local-dof vectors over ls; meta tags each column."""

    nb: object
    ls: LocalSpace
    mode: str
    columns: np.ndarray
    meta: list = field(default_factory=list)
    A_loc: object = None
    B_loc: object = None

    @property
    def num_columns(self):
        return self.columns.shape[1]


def interface_delta_dofs(ls):
    """Admissible interface (node, component) dofs, deterministic order."""
    nc = ls.space.ncomp
    dofs, meta = [], []
    for node in ls.rim_nodes:
        for c in range(nc):
            d = nc * int(node) + c
            if not ls.mask_l[d]:
                dofs.append(d)
                meta.append((int(ls.l2g_nodes[node]), c))
    return np.asarray(dofs, dtype=np.int64), meta


def constant_trace(ls, comp):
    """Unit trace in one component on the admissible interface nodes."""
    nc = ls.space.ncomp
    data = np.zeros(ls.ndof)
    if len(ls.rim_nodes):
        dofs = nc * ls.rim_nodes + comp
        data[dofs] = np.where(ls.mask_l[dofs], 0.0, 1.0)
    return data


def _edge_trace_columns(ls):
    """Per-interface-edge P2 trace data: 1 at the edge midpoint, averaged
    at shared endpoints (1/#incident interface edges), 0 on hole nodes."""
    nc = ls.space.ncomp
    rows = ls.interface_edges
    incid = np.zeros(ls.num_nodes)
    np.add.at(incid, rows[:, 0], 1.0)
    np.add.at(incid, rows[:, 1], 1.0)
    hole = np.zeros(ls.num_nodes, dtype=bool)
    hole[ls.hole_nodes] = True
    cols, meta = [], []
    for k in range(len(rows)):
        a, b, mid = rows[k]
        for c in range(nc):
            data = np.zeros(ls.ndof)
            data[nc * mid + c] = 1.0
            for v in (a, b):
                if not hole[v]:
                    data[nc * v + c] = 1.0 / incid[v]
            data[ls.mask_l] = 0.0
            cols.append(data)
            meta.append((k, c))
    return np.column_stack(cols) if cols else np.zeros((ls.ndof, 0)), meta


def standard_snapshots(spec, nb, space):
    """One column per admissible interface datum and component."""
    ls = LocalSpace(space, nb.tri_ids)
    A, B, _ = assemble(spec, space, region=ls)
    if spec.kind in ("laplace", "elasticity"):
        dofs, meta = interface_delta_dofs(ls)
        X = np.zeros((ls.ndof, len(dofs)))
        X[dofs, np.arange(len(dofs))] = 1.0
        i, b = ls.interior_dofs, ls.boundary_dofs
        if len(i) and len(dofs):
            Aii = A[i][:, i].tocsc()
            X[np.ix_(i, np.arange(len(dofs)))] = splu(Aii).solve(
                -(A[i][:, b] @ X[b]))
        return SnapshotSpace(nb, ls, "standard", X, meta, A_loc=A)

    X, meta = _edge_trace_columns(ls)
    solver = LocalStokesSolver(spec, ls, "fine-p0", A=A, B=B)
    area = solver.areas.sum()
    if X.shape[1]:
        flux = np.atleast_1d(boundary_flux_p2(ls, X))
        c = flux / area
        moments = solver.areas[:, None] * c[None, :]
        U, _ = solver.solve(X, moments)
    else:
        U = X
    # Meta edge index k -> global fine edge id, for reporting.
    gmeta = []
    for k, comp in meta:
        mid = ls.interface_edges[k, 2]
        ge = int(ls.gedges[mid - len(ls.gverts)])
        gmeta.append((ge, comp))
    return SnapshotSpace(nb, ls, "standard", U, gmeta, A_loc=A, B_loc=B)


def randomized_snapshots(spec, nb, space, n_target, extra=4, layers=4,
                         seed=0):
    """Gaussian interface data on the oversampled patch, restricted back.

    Column order: n_target+extra random columns (components alternating),
    then one constant-trace extension per component. Deterministic for a
    given (seed, neighborhood ordinal).
    """
    if n_target < 1:
        raise ValueError("n_target must be >= 1")
    nbp = oversample(nb, layers)
    if layers > 0 and len(nbp.tri_ids) == len(nb.tri_ids):
        warnings.warn("oversampled region equals the base neighborhood "
                      "(ordinal %d); proceeding" % nb.ordinal)
    ls = LocalSpace(space, nb.tri_ids)
    lsp = LocalSpace(space, nbp.tri_ids)
    nc = space.ncomp
    K = n_target + extra
    rng = np.random.default_rng([seed, nb.ordinal])

    dofs_by_comp = []
    for c in range(nc):
        if len(lsp.rim_nodes):
            d = nc * lsp.rim_nodes + c
            dofs_by_comp.append(d[~lsp.mask_l[d]])
        else:
            dofs_by_comp.append(np.empty(0, dtype=np.int64))
    X = np.zeros((lsp.ndof, K))
    metas = []
    for k in range(K):
        c = k % nc
        d = dofs_by_comp[c]
        X[d, k] = rng.standard_normal(len(d))
        metas.append(("random", k, c))

    A, B, _ = assemble(spec, space, region=lsp)
    if spec.kind in ("laplace", "elasticity"):
        i, b = lsp.interior_dofs, lsp.boundary_dofs
        if len(i):
            X[np.ix_(i, np.arange(K))] = splu(A[i][:, i].tocsc()).solve(
                -(A[i][:, b] @ X[b]))
        U = X
    else:
        solver = LocalStokesSolver(spec, lsp, "fine-p0", A=A, B=B)
        flux = np.atleast_1d(boundary_flux_p2(lsp, X))
        c_vals = flux / solver.areas.sum()
        U, _ = solver.solve(X, solver.areas[:, None] * c_vals[None, :])

    lookup = np.full(space.ndof, -1, dtype=np.int64)
    lookup[lsp.l2g_dofs] = np.arange(lsp.ndof)
    idx = lookup[ls.l2g_dofs]
    restricted = U[idx]

    const_cols = []
    A0, B0, _ = assemble(spec, space, region=ls)
    if spec.kind in ("laplace", "elasticity"):
        lu = None
        i, b = ls.interior_dofs, ls.boundary_dofs
        for c in range(nc):
            data = constant_trace(ls, c)
            if len(i):
                if lu is None:
                    lu = splu(A0[i][:, i].tocsc())
                data[i] = lu.solve(-(A0[i][:, b] @ data[b]))
            const_cols.append(data)
            metas.append(("const", c))
    else:
        solver0 = LocalStokesSolver(spec, ls, "fine-p0", A=A0, B=B0)
        area0 = solver0.areas.sum()
        for c in range(nc):
            data = constant_trace(ls, c)
            fl = boundary_flux_p2(ls, data)
            u, _ = solver0.solve(data, solver0.areas * (fl / area0))
            const_cols.append(u)
            metas.append(("const", c))

    cols = np.column_stack([restricted] + const_cols)
    return SnapshotSpace(nb, ls, "randomized", cols, metas,
                         A_loc=A0, B_loc=B0)
