"""Structured coarse grids and perforated fine meshes.

The coarse grid is a uniform right-triangle partition of the box: n x n square
cells, each split by the diagonal running from its lower-left to its upper-right
corner. The fine mesh is the uniform red refinement of every coarse triangle
(`levels` rounds), with triangles inside inclusions removed and nearby vertices
projected onto the circles so polygonal holes approximate them.

Fine vertices carry their integer lattice coordinates from before projection;
all combinatorial queries (parent elements, coarse-edge membership, partition
of unity evaluation) use the lattice and are exact.
"""

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

BOUNDARY_TAGS = ("outer_left", "outer_right", "outer_bottom", "outer_top", "perforation")
TAG_LEFT, TAG_RIGHT, TAG_BOTTOM, TAG_TOP, TAG_PERFORATION = range(5)

SNAP_FACTOR = 0.3


class MeshError(ValueError):
    """Raised when a mesh cannot be built or fails validation."""


class CoarseGrid:
    """Uniform triangulation of the outer box.

    Attributes
    ----------
    n : int
        Cells per side; H = side length / n.
    nodes : (N_v, 2) float array
    node_lattice : (N_v, 2) int array
        Lattice coordinates (i, j), node = (i/n, j/n) in box coordinates.
    elements : (2 n^2, 3) int array
        Vertex triples, counterclockwise. Element 2*(J*n+I) is the lower-right
        half of cell (I, J), 2*(J*n+I)+1 the upper-left half.
    edges : (N_e, 2) int array
        Unique sorted vertex pairs.
    edge_elements : list of tuple
        Elements adjacent to each edge (length 1 or 2).
    """

    def __init__(self, geom, n):
        self.geom = geom
        self.n = n
        x0, y0, x1, y1 = geom.box
        self.H = (x1 - x0) / n
        ii, jj = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="xy")
        self.node_lattice = np.column_stack([ii.ravel(), jj.ravel()])
        self.nodes = np.column_stack([
            x0 + self.node_lattice[:, 0] * (x1 - x0) / n,
            y0 + self.node_lattice[:, 1] * (y1 - y0) / n,
        ])
        I, J = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
        I, J = I.ravel(), J.ravel()
        v00 = J * (n + 1) + I
        v10 = v00 + 1
        v01 = v00 + (n + 1)
        v11 = v01 + 1
        lower = np.column_stack([v00, v10, v11])
        upper = np.column_stack([v00, v11, v01])
        elems = np.empty((2 * n * n, 3), dtype=np.int64)
        elems[0::2] = lower
        elems[1::2] = upper
        self.elements = elems
        pairs = np.vstack([elems[:, [0, 1]], elems[:, [1, 2]], elems[:, [0, 2]]])
        pairs.sort(axis=1)
        self.edges, inv = np.unique(pairs, axis=0, return_inverse=True)
        self.element_edges = inv.reshape(3, -1).T  # local order (01), (12), (02)
        self.edge_elements = [[] for _ in range(len(self.edges))]
        for t in range(len(elems)):
            for k in range(3):
                self.edge_elements[self.element_edges[t, k]].append(t)
        self._edge_index = {(int(a), int(b)): e for e, (a, b) in enumerate(self.edges)}

    @property
    def num_nodes(self):
        return len(self.nodes)

    @property
    def num_edges(self):
        return len(self.edges)

    @property
    def num_elements(self):
        return len(self.elements)

    def edge_id(self, a, b):
        return self._edge_index[(a, b) if a < b else (b, a)]


def _perimeter_components_in_disk(tri_xy, circle):
    """Number of components of (triangle boundary) intersect (open disk).

    Used by the analytic split check: two or more components mean the disk
    cuts the (convex) triangle into disconnected pieces.
    """
    eps = 1e-12
    intervals = []  # (edge index, t0, t1)
    for k in range(3):
        a = tri_xy[k]
        b = tri_xy[(k + 1) % 3]
        d = b - a
        f = a - np.array([circle.cx, circle.cy])
        A = d @ d
        B = 2.0 * (f @ d)
        C = f @ f - circle.r * circle.r
        disc = B * B - 4.0 * A * C
        if disc <= 0.0:
            continue
        sq = np.sqrt(disc)
        t0 = max((-B - sq) / (2.0 * A), 0.0)
        t1 = min((-B + sq) / (2.0 * A), 1.0)
        if t1 - t0 > eps:
            intervals.append([k, t0, t1])
    if not intervals:
        return 0, False
    covered = sum(iv[2] - iv[1] for iv in intervals)
    full_cover = covered >= 3.0 - 3.0 * eps and len(intervals) == 3
    # Merge intervals that meet at a shared vertex, cyclically.
    comp = len(intervals)
    for iv in intervals:
        k, t0, t1 = iv
        if t1 >= 1.0 - eps:
            for jv in intervals:
                if jv[0] == (k + 1) % 3 and jv[1] <= eps:
                    comp -= 1
                    break
    return max(comp, 1), full_cover


def build_coarse_grid(geom, n):
    """Build the uniform coarse grid and vet it against the perforations.

    Raises MeshError if an inclusion covers a coarse element or cuts one into
    disconnected pieces (analytic check on the exact circles; the fine-level
    check in refine_to_fine is authoritative for the discrete domain).
    """
    if n < 1:
        raise MeshError("n_per_side must be >= 1, got %d" % n)
    x0, y0, x1, y1 = geom.box
    if abs((x1 - x0) - (y1 - y0)) > 1e-12 * max(x1 - x0, y1 - y0):
        raise MeshError("outer box must be square for the uniform grid")
    geom.validate()
    grid = CoarseGrid(geom, n)
    for e in range(grid.num_elements):
        tri_xy = grid.nodes[grid.elements[e]]
        for k, c in enumerate(geom.inclusions):
            ncomp, full = _perimeter_components_in_disk(tri_xy, c)
            if full:
                raise MeshError("inclusion %d covers coarse element %d" % (k, e))
            if ncomp >= 2:
                # Two separate boundary arcs inside the disk cut the convex
                # triangle unless the piece between them is inside the disk
                # too; treat it as a hard error, the layout is too tight.
                raise MeshError(
                    "inclusion %d would split coarse element %d; "
                    "shrink or move the inclusion" % (k, e))
    return grid


class FineMesh:
    """Perforated triangulation obtained by refining a CoarseGrid.

    Attributes
    ----------
    verts : (nv, 2) float array
        Vertex coordinates after projection onto the circles.
    lattice : (nv, 2) int array or None
        Integer lattice coordinates before projection (i, j), 0..N.
    tris : (nt, 3) int array
    parent : (nt,) int array
        Owning coarse element of each fine triangle.
    edges : (ne, 2) int array
        Unique sorted vertex pairs.
    tri_edges : (nt, 3) int array
        Edge ids per triangle, local order (01), (12), (02).
    edge_tag : (ne,) int array
        Index into BOUNDARY_TAGS for boundary edges, -1 for interior.
    """

    def __init__(self, grid, levels, verts, lattice, tris, parent,
                 removed_per_inclusion=None):
        self.grid = grid
        self.levels = levels
        self.N = None if grid is None else grid.n * (2 ** levels)
        self.verts = verts
        self.lattice = lattice
        self.tris = tris
        self.parent = parent
        self.removed_per_inclusion = removed_per_inclusion
        x0, y0, x1, y1 = (0.0, 0.0, 1.0, 1.0) if grid is None else grid.geom.box
        side = (x1 - x0)
        self.h = np.sqrt(2.0) * side / self.N if self.N else None
        self._build_edges()

    def _build_edges(self):
        tris = self.tris
        pairs = np.vstack([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [0, 2]]])
        pairs.sort(axis=1)
        self.edges, inv = np.unique(pairs, axis=0, return_inverse=True)
        self.tri_edges = inv.reshape(3, -1).T
        counts = np.bincount(inv, minlength=len(self.edges))
        self.edge_tag = np.full(len(self.edges), -1, dtype=np.int8)
        boundary = np.flatnonzero(counts == 1)
        if self.lattice is not None:
            N = self.N
            la = self.lattice[self.edges[boundary, 0]]
            lb = self.lattice[self.edges[boundary, 1]]
            tag = np.full(len(boundary), TAG_PERFORATION, dtype=np.int8)
            tag[(la[:, 0] == 0) & (lb[:, 0] == 0)] = TAG_LEFT
            tag[(la[:, 0] == N) & (lb[:, 0] == N)] = TAG_RIGHT
            tag[(la[:, 1] == 0) & (lb[:, 1] == 0)] = TAG_BOTTOM
            tag[(la[:, 1] == N) & (lb[:, 1] == N)] = TAG_TOP
            self.edge_tag[boundary] = tag
        else:
            # File-loaded mesh: caller assigns real tags afterwards.
            self.edge_tag[boundary] = TAG_PERFORATION
        self.boundary_edges = boundary
        self._edge_index = None

    def edge_id(self, a, b):
        if self._edge_index is None:
            self._edge_index = {(int(p), int(q)): e for e, (p, q) in enumerate(self.edges)}
        return self._edge_index[(a, b) if a < b else (b, a)]

    @property
    def num_verts(self):
        return len(self.verts)

    @property
    def num_tris(self):
        return len(self.tris)

    def tri_areas(self):
        p = self.verts[self.tris]
        return 0.5 * np.abs(
            (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
            - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))

    def perforation_vertices(self):
        """Vertex ids incident to at least one perforation-tagged edge."""
        eids = np.flatnonzero(self.edge_tag == TAG_PERFORATION)
        return np.unique(self.edges[eids].ravel())

    def outer_side_vertices(self, tag):
        """Vertex ids on one outer side, by lattice (exact)."""
        i, j = self.lattice[:, 0], self.lattice[:, 1]
        N = self.N
        sel = {TAG_LEFT: i == 0, TAG_RIGHT: i == N,
               TAG_BOTTOM: j == 0, TAG_TOP: j == N}[tag]
        return np.flatnonzero(sel)


def _tri_adjacency(tris, tri_edges, nedges):
    """Sparse triangle adjacency across shared edges."""
    nt = len(tris)
    owner = np.full(nedges, -1, dtype=np.int64)
    pairs = []
    for k in range(3):
        e = tri_edges[:, k]
        t = np.arange(nt)
        first = owner[e] < 0
        owner[e[first]] = t[first]
        shared = ~first
        pairs.append(np.column_stack([owner[e[shared]], t[shared]]))
    pairs = np.vstack(pairs)
    if len(pairs) == 0:
        return coo_matrix((nt, nt)).tocsr(), pairs
    data = np.ones(len(pairs))
    adj = coo_matrix((data, (pairs[:, 0], pairs[:, 1])), shape=(nt, nt))
    return (adj + adj.T).tocsr(), pairs


def refine_to_fine(grid, levels):
    """Red-refine the coarse grid `levels` times and carve out the inclusions.

    Steps: build the uniform N x N lattice mesh (N = n 2^levels); project
    vertices within 0.3 h of a circle onto it; drop triangles whose centroid
    lies inside a disk or that still have a vertex strictly inside one; tag
    boundary edges; validate connectivity of the domain and of every coarse
    element's fine patch.
    """
    if levels < 0:
        raise MeshError("levels must be >= 0")
    n = grid.n
    N = n * (2 ** levels)
    L2 = 2 ** levels
    x0, y0, x1, y1 = grid.geom.box
    sx = (x1 - x0) / N
    h = np.sqrt(2.0) * sx
    snap_tol = SNAP_FACTOR * h

    ii, jj = np.meshgrid(np.arange(N + 1), np.arange(N + 1), indexing="xy")
    lattice = np.column_stack([ii.ravel(), jj.ravel()])
    verts = np.column_stack([x0 + lattice[:, 0] * sx, y0 + lattice[:, 1] * sx])

    I, J = np.meshgrid(np.arange(N), np.arange(N), indexing="xy")
    I, J = I.ravel(), J.ravel()
    v00 = J * (N + 1) + I
    v10 = v00 + 1
    v01 = v00 + (N + 1)
    v11 = v01 + 1
    nt = 2 * N * N
    tris = np.empty((nt, 3), dtype=np.int64)
    tris[0::2] = np.column_stack([v00, v10, v11])
    tris[1::2] = np.column_stack([v00, v11, v01])

    Ic, Jc = I // L2, J // L2
    fx, fy = I - Ic * L2, J - Jc * L2
    half_lower = np.where(fx >= fy, 0, 1)
    half_upper = np.where(fx > fy, 0, 1)
    parent = np.empty(nt, dtype=np.int64)
    parent[0::2] = 2 * (Jc * n + Ic) + half_lower
    parent[1::2] = 2 * (Jc * n + Ic) + half_upper

    # Vertex projection; outer-box vertices never move.
    on_box = ((lattice[:, 0] == 0) | (lattice[:, 0] == N)
              | (lattice[:, 1] == 0) | (lattice[:, 1] == N))
    for c in grid.geom.inclusions:
        dx = verts[:, 0] - c.cx
        dy = verts[:, 1] - c.cy
        d = np.hypot(dx, dy)
        band = (np.abs(d - c.r) <= snap_tol) & (d > 1e-14) & ~on_box
        scale = c.r / d[band]
        verts[band, 0] = c.cx + dx[band] * scale
        verts[band, 1] = c.cy + dy[band] * scale

    # Removal: centroid inside, or any vertex still strictly inside.
    centroids = verts[tris].mean(axis=1)
    removed = np.zeros(nt, dtype=bool)
    removed_per_inclusion = np.zeros(len(grid.geom.inclusions), dtype=np.int64)
    for k, c in enumerate(grid.geom.inclusions):
        inside_c = np.hypot(centroids[:, 0] - c.cx, centroids[:, 1] - c.cy) < c.r
        dv = np.hypot(verts[:, 0] - c.cx, verts[:, 1] - c.cy) - c.r
        inside_v = (dv < -1e-12)[tris].any(axis=1)
        rem = inside_c | inside_v
        removed_per_inclusion[k] = int(rem.sum())
        removed |= rem
        if removed_per_inclusion[k] == 0:
            raise MeshError(
                "inclusion %d (r=%g) removed no fine triangle at levels=%d; "
                "increase levels to resolve it" % (k, c.r, levels))

    keep = ~removed
    tris = tris[keep]
    parent = parent[keep]
    used = np.unique(tris.ravel())
    remap = np.full((N + 1) * (N + 1), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    tris = remap[tris]
    verts = verts[used]
    lattice = lattice[used]

    mesh = FineMesh(grid, levels, verts, lattice, tris, parent,
                    removed_per_inclusion=removed_per_inclusion)

    counts = np.bincount(parent, minlength=grid.num_elements)
    empty = np.flatnonzero(counts == 0)
    if len(empty):
        raise MeshError("coarse element %d has no fine triangles left" % empty[0])

    adj, pairs = _tri_adjacency(tris, mesh.tri_edges, len(mesh.edges))
    ncomp, _ = connected_components(adj, directed=False)
    if ncomp != 1:
        raise MeshError("perforated domain is disconnected (%d components)" % ncomp)
    if len(pairs):
        same = parent[pairs[:, 0]] == parent[pairs[:, 1]]
        sub = coo_matrix((np.ones(same.sum()), (pairs[same, 0], pairs[same, 1])),
                         shape=adj.shape)
        _, labels = connected_components(sub + sub.T, directed=False)
        for e in range(grid.num_elements):
            lab = labels[parent == e]
            if len(np.unique(lab)) > 1:
                raise MeshError(
                    "perforations split coarse element %d into %d pieces"
                    % (e, len(np.unique(lab))))
    return mesh


def coarse_edge_of_fine_edges(mesh):
    """Map each fine edge to the coarse edge it lies on, or -1.

    Exact lattice arithmetic: a fine edge lies on a coarse edge iff both its
    endpoints do and its direction matches (axis steps for horizontal/vertical
    coarse edges, the (1,1) step for diagonals).
    """
    grid = mesh.grid
    L2 = 2 ** mesh.levels
    n = grid.n
    la = mesh.lattice[mesh.edges[:, 0]]
    lb = mesh.lattice[mesh.edges[:, 1]]
    out = np.full(len(mesh.edges), -1, dtype=np.int64)

    def coarse_node(ci, cj):
        return cj * (n + 1) + ci

    di = lb[:, 0] - la[:, 0]
    dj = lb[:, 1] - la[:, 1]
    horiz = (dj == 0) & (la[:, 1] % L2 == 0)
    vert = (di == 0) & (la[:, 0] % L2 == 0)
    diag = (di == dj) & (di != 0) & ((la[:, 0] - la[:, 1]) % L2 == 0) \
        & (la[:, 0] % L2 == la[:, 1] % L2)
    for idx in np.flatnonzero(horiz):
        i0 = min(la[idx, 0], lb[idx, 0]) // L2
        jc = la[idx, 1] // L2
        a, b = coarse_node(i0, jc), coarse_node(i0 + 1, jc)
        out[idx] = grid.edge_id(a, b)
    for idx in np.flatnonzero(vert):
        j0 = min(la[idx, 1], lb[idx, 1]) // L2
        ic = la[idx, 0] // L2
        a, b = coarse_node(ic, j0), coarse_node(ic, j0 + 1)
        out[idx] = grid.edge_id(a, b)
    for idx in np.flatnonzero(diag):
        i0 = min(la[idx, 0], lb[idx, 0]) // L2
        j0 = min(la[idx, 1], lb[idx, 1]) // L2
        a, b = coarse_node(i0, j0), coarse_node(i0 + 1, j0 + 1)
        out[idx] = grid.edge_id(a, b)
    return out


def write_mesh(mesh, path):
    """Write the fine mesh in the line-oriented `perfmesh v1` text format."""
    with open(path, "w") as fh:
        fh.write("perfmesh v1\n")
        for x, y in mesh.verts:
            fh.write("vertex %.17g %.17g\n" % (x, y))
        for t, (a, b, c) in enumerate(mesh.tris):
            fh.write("tri %d %d %d %d\n" % (a, b, c, mesh.parent[t]))
        for e in mesh.boundary_edges:
            a, b = mesh.edges[e]
            fh.write("bedge %d %d %s\n" % (a, b, BOUNDARY_TAGS[mesh.edge_tag[e]]))


def read_mesh(path):
    """Read a `perfmesh v1` file.

    The lattice (and with it any combinatorial coarse-grid queries) is not part
    of the format; loaded meshes support inspection and export, while pipeline
    stages rebuild their meshes deterministically from config.
    """
    verts, tris, parent, bedges = [], [], [], []
    with open(path) as fh:
        head = fh.readline().strip()
        if head != "perfmesh v1":
            raise MeshError("not a perfmesh v1 file: %r" % head)
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "vertex":
                verts.append((float(parts[1]), float(parts[2])))
            elif parts[0] == "tri":
                tris.append((int(parts[1]), int(parts[2]), int(parts[3])))
                parent.append(int(parts[4]))
            elif parts[0] == "bedge":
                bedges.append((int(parts[1]), int(parts[2]), parts[3]))
            else:
                raise MeshError("unknown record %r" % parts[0])
    mesh = FineMesh.__new__(FineMesh)
    mesh.grid = None
    mesh.levels = None
    mesh.N = None
    mesh.h = None
    mesh.verts = np.asarray(verts)
    mesh.lattice = None
    mesh.tris = np.asarray(tris, dtype=np.int64)
    mesh.parent = np.asarray(parent, dtype=np.int64)
    mesh.removed_per_inclusion = None
    # Recover boundary tags by matching pairs after edge construction.
    tag_of_pair = {}
    for a, b, t in bedges:
        key = (a, b) if a < b else (b, a)
        tag_of_pair[key] = BOUNDARY_TAGS.index(t)
    mesh._build_edges()
    for e in mesh.boundary_edges:
        a, b = int(mesh.edges[e, 0]), int(mesh.edges[e, 1])
        mesh.edge_tag[e] = tag_of_pair.get((a, b), TAG_PERFORATION)
    return mesh
