"""Nodal finite element spaces on fine meshes and their local restrictions.

FineSpace handles P1 (vertex) and P2 (vertex + edge midpoint) nodal layouts
with any number of interleaved components; degrees of freedom are numbered
ncomp * node + comp. Pressure spaces are piecewise constants and live as plain
per-triangle arrays, they need no node bookkeeping.

LocalSpace restricts a FineSpace to a patch of fine triangles and classifies
its boundary into interface (shared with the rest of the domain), hole
(perforation), and outer-box parts. Interface and hole dofs are essential in
local solves; outer-box dofs stay free unless the global problem masks them,
so a zero-extended local function remains conforming while natural outer
conditions keep their freedom.
"""

from dataclasses import dataclass

import numpy as np

from .meshing import TAG_LEFT, TAG_RIGHT, TAG_BOTTOM, TAG_TOP, TAG_PERFORATION

_SIDE_TAGS = {"left": TAG_LEFT, "right": TAG_RIGHT,
              "bottom": TAG_BOTTOM, "top": TAG_TOP}


@dataclass
class FieldVector:
    """Coefficient vector over a space; pressures may carry a gauge flag."""

    space: object
    values: np.ndarray
    name: str = ""
    zero_mean: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.space is not None and len(self.values) != self.space.ndof:
            raise ValueError("coefficient length %d does not match space dim %d"
                             % (len(self.values), self.space.ndof))


class P0Space:
    """Piecewise constants, one dof per fine triangle."""

    def __init__(self, mesh):
        self.mesh = mesh
        self.ndof = mesh.num_tris


class FineSpace:
    """Scalar or vector nodal space on a FineMesh.

    Attributes
    ----------
    degree : 1 or 2
    ncomp : components per node
    tri_nodes : (nt, 3) or (nt, 6) int array
        Nodes per triangle; P2 order is vertices then midpoints of the local
        edges (01), (12), (02).
    node_xy : (num_nodes, 2) float array
    node_lattice2 : (num_nodes, 2) int array or None
        Doubled lattice coordinates (vertex 2*(i, j), midpoint sum of its
        endpoints), exact integers on 0..2N.
    """

    def __init__(self, mesh, degree, ncomp):
        if degree not in (1, 2):
            raise ValueError("degree must be 1 or 2")
        self.mesh = mesh
        self.degree = degree
        self.ncomp = ncomp
        self.num_vnodes = mesh.num_verts
        self.num_enodes = len(mesh.edges) if degree == 2 else 0
        self.num_nodes = self.num_vnodes + self.num_enodes
        if degree == 1:
            self.tri_nodes = mesh.tris
            self.node_xy = mesh.verts
            self.node_lattice2 = None if mesh.lattice is None else 2 * mesh.lattice
        else:
            self.tri_nodes = np.hstack([mesh.tris, self.num_vnodes + mesh.tri_edges])
            mids = 0.5 * (mesh.verts[mesh.edges[:, 0]] + mesh.verts[mesh.edges[:, 1]])
            self.node_xy = np.vstack([mesh.verts, mids])
            if mesh.lattice is None:
                self.node_lattice2 = None
            else:
                esum = mesh.lattice[mesh.edges[:, 0]] + mesh.lattice[mesh.edges[:, 1]]
                self.node_lattice2 = np.vstack([2 * mesh.lattice, esum])

    @property
    def ndof(self):
        return self.ncomp * self.num_nodes

    def dof(self, nodes, comp):
        return self.ncomp * np.asarray(nodes) + comp

    def node_dofs(self, nodes):
        """All dofs of the given nodes, shape (len(nodes), ncomp)."""
        nodes = np.asarray(nodes)
        return self.ncomp * nodes[:, None] + np.arange(self.ncomp)[None, :]

    def edge_node(self, edge_ids):
        return self.num_vnodes + np.asarray(edge_ids)

    def outer_side_nodes(self, tag):
        lat2 = self.node_lattice2
        N2 = 2 * self.mesh.N
        i, j = lat2[:, 0], lat2[:, 1]
        sel = {TAG_LEFT: i == 0, TAG_RIGHT: i == N2,
               TAG_BOTTOM: j == 0, TAG_TOP: j == N2}[tag]
        return np.flatnonzero(sel)

    def perforation_nodes(self):
        nodes = [self.mesh.perforation_vertices()]
        if self.degree == 2:
            eids = np.flatnonzero(self.mesh.edge_tag == TAG_PERFORATION)
            nodes.append(self.num_vnodes + eids)
        return np.concatenate(nodes)


def space_for(mesh, spec):
    """Velocity/displacement space matching an OperatorSpec.

    Attaches the essential data: dirichlet_mask, dirichlet_values, free_dofs.
    """
    if spec.kind == "laplace":
        space = FineSpace(mesh, 1, 1)
    elif spec.kind == "elasticity":
        space = FineSpace(mesh, 1, 2)
    else:
        space = FineSpace(mesh, 2, 2)
    space.dirichlet_mask, space.dirichlet_values = dirichlet_data(space, spec)
    space.free_dofs = np.flatnonzero(~space.dirichlet_mask)
    return space


def dirichlet_data(space, spec):
    """Essential boundary mask and values for the primary space.

    Returns (mask, values) over all dofs. Outer sides are set per component
    from the operator's bc table; fixed perforations clamp every component.
    """
    mask = np.zeros(space.ndof, dtype=bool)
    values = np.zeros(space.ndof)
    for side, tag in _SIDE_TAGS.items():
        bc = spec.outer_bc[side]
        nodes = None
        for comp, mode in enumerate(bc):
            if mode == "free":
                continue
            if nodes is None:
                nodes = space.outer_side_nodes(tag)
            dofs = space.dof(nodes, comp)
            mask[dofs] = True
            values[dofs] = mode[1]
    if spec.perforation_bc == "fixed":
        dofs = space.node_dofs(space.perforation_nodes()).ravel()
        mask[dofs] = True
        values[dofs] = 0.0
    return mask, values


class LocalSpace:
    """Restriction of a FineSpace to a patch of fine triangles.

    Attributes
    ----------
    tri_ids : (ntl,) int array
        Global fine triangle ids, sorted.
    l2g_nodes : (nln,) int array
        Local node -> global node.
    l2g_dofs : (nld,) int array
    verts_xy : (nlv, 2) float array
    tris_l : (ntl, 3) int array into verts_xy
    tri_nodes_l : (ntl, 3|6) int array into local nodes
    interface_edges, hole_edges, outer_edges : (k, 3) int arrays
        Rows (a, b, mid) of local node ids per local-boundary fine edge; mid
        is -1 for P1. Interface edges are shared with triangles outside the
        patch; outer edges lie on the global box and have no neighbor.
    interface_owner, hole_owner, outer_owner : (k,) int arrays
        Local triangle adjacent to each boundary edge.
    rim_nodes, hole_nodes : int arrays of local node ids
        Hole nodes win when a node touches both edge classes; outer-edge
        nodes are rim only where an interface edge claims them.
    open_boundary : bool
        True when some outer-box dof of the patch stays unconstrained, so
        divergence constraint rows are independent.
    mask_l, values_l : essential data restricted to local dofs
    interior_dofs, boundary_dofs : local dof index arrays
        Boundary = rim or hole or globally masked.

    closed=True folds outer-box edges into the interface class, making the
    whole topological boundary essential. Trace-preserving element
    extensions need this; patch solves for snapshots and residuals keep
    the natural freedom of the open default.
    """

    def __init__(self, space, tri_ids, closed=False):
        mesh = space.mesh
        self.space = space
        self.tri_ids = tri_ids = np.sort(np.asarray(tri_ids, dtype=np.int64))
        tris = mesh.tris[tri_ids]
        self.gverts = np.unique(tris.ravel())
        vmap = {int(v): i for i, v in enumerate(self.gverts)}
        self.tris_l = np.vectorize(vmap.__getitem__, otypes=[np.int64])(tris)
        self.verts_xy = mesh.verts[self.gverts]

        gtri_edges = mesh.tri_edges[tri_ids]
        self.gedges = np.unique(gtri_edges.ravel())
        emap = {int(e): i for i, e in enumerate(self.gedges)}
        tri_edges_l = np.vectorize(emap.__getitem__, otypes=[np.int64])(gtri_edges)
        nlv = len(self.gverts)

        if space.degree == 1:
            self.l2g_nodes = self.gverts
            self.tri_nodes_l = self.tris_l
        else:
            self.l2g_nodes = np.concatenate([self.gverts,
                                             space.edge_node(self.gedges)])
            self.tri_nodes_l = np.hstack([self.tris_l, nlv + tri_edges_l])
        self.num_nodes = len(self.l2g_nodes)
        nc = space.ncomp
        self.l2g_dofs = (nc * self.l2g_nodes[:, None]
                         + np.arange(nc)[None, :]).ravel()

        # Local boundary edges: used once within the patch.
        counts = np.bincount(tri_edges_l.ravel(), minlength=len(self.gedges))
        bnd_local = np.flatnonzero(counts == 1)
        owner = np.full(len(self.gedges), -1, dtype=np.int64)
        for k in range(3):
            owner[tri_edges_l[:, k]] = np.arange(len(tri_ids))
        iface, holes, outer = [], [], []
        iown, hown, oown = [], [], []
        for le in bnd_local:
            ge = self.gedges[le]
            a, b = mesh.edges[ge]
            mid = nlv + le if space.degree == 2 else -1
            row = (vmap[int(a)], vmap[int(b)], mid)
            tag = mesh.edge_tag[ge]
            if tag == TAG_PERFORATION:
                holes.append(row)
                hown.append(owner[le])
            elif tag >= 0 and not closed:
                outer.append(row)
                oown.append(owner[le])
            else:
                iface.append(row)
                iown.append(owner[le])
        self.interface_edges = np.asarray(iface, dtype=np.int64).reshape(-1, 3)
        self.hole_edges = np.asarray(holes, dtype=np.int64).reshape(-1, 3)
        self.outer_edges = np.asarray(outer, dtype=np.int64).reshape(-1, 3)
        self.interface_owner = np.asarray(iown, dtype=np.int64)
        self.hole_owner = np.asarray(hown, dtype=np.int64)
        self.outer_owner = np.asarray(oown, dtype=np.int64)

        def edge_nodes(rows):
            if len(rows) == 0:
                return np.empty(0, dtype=np.int64)
            cols = rows[:, :3 if space.degree == 2 else 2]
            return np.unique(cols[cols >= 0])

        hole_nodes = edge_nodes(self.hole_edges)
        rim_nodes = np.setdiff1d(edge_nodes(self.interface_edges), hole_nodes)
        self.hole_nodes = hole_nodes
        self.rim_nodes = rim_nodes

        gmask = getattr(space, "dirichlet_mask", None)
        if gmask is None:
            self.mask_l = np.zeros(len(self.l2g_dofs), dtype=bool)
            self.values_l = np.zeros(len(self.l2g_dofs))
        else:
            self.mask_l = gmask[self.l2g_dofs]
            self.values_l = space.dirichlet_values[self.l2g_dofs]

        essential = np.zeros(len(self.l2g_dofs), dtype=bool)
        for nodes in (rim_nodes, hole_nodes):
            if len(nodes):
                essential[(nc * nodes[:, None]
                           + np.arange(nc)[None, :]).ravel()] = True
        essential |= self.mask_l
        self.boundary_dofs = np.flatnonzero(essential)
        self.interior_dofs = np.flatnonzero(~essential)

        outer_nodes = edge_nodes(self.outer_edges)
        self.open_boundary = bool(len(outer_nodes)) and not essential[
            (nc * outer_nodes[:, None] + np.arange(nc)[None, :]).ravel()].all()

    @property
    def ndof(self):
        return self.space.ncomp * self.num_nodes

    def node_dofs(self, nodes):
        nc = self.space.ncomp
        nodes = np.asarray(nodes)
        return nc * nodes[:, None] + np.arange(nc)[None, :]

    def scatter(self, local_values, out=None):
        """Add local dof values into a global-length array."""
        if out is None:
            out = np.zeros(self.space.ndof)
        np.add.at(out, self.l2g_dofs, local_values)
        return out

    def gather(self, global_values):
        return np.asarray(global_values)[self.l2g_dofs]
