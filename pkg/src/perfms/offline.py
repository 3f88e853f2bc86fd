"""Offline multiscale spaces: per-neighborhood eigenproblems, partition-of-
unity localization, divergence-correcting element extensions for Stokes, and
the coarse-scale Galerkin solves.

Basis columns live in one sparse matrix over fine dofs and are tagged by
(neighborhood ordinal, eigen index, component); component is -1 where a
column carries all field components at once, as the elastic and scalar
columns do. The Stokes pressure space is one constant per coarse element
and is represented by aggregation rows, not explicit columns.
"""

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, eigh, lu_factor, \
    lu_solve
from scipy.sparse import csc_matrix, csr_matrix
from scipy.sparse import hstack as sparse_hstack

from .assembly import TriGeometry
from .meshing import coarse_edge_of_fine_edges
from .neighborhoods import build_neighborhoods, element_tris
from .pou import build_pou
from .snapshots import randomized_snapshots, standard_snapshots
from .solvers import LocalStokesSolver, SolverError, assemble, \
    boundary_flux_p2
from .spaces import FieldVector, LocalSpace, space_for
from .spectral import local_gevp, spectral_weight

DROP_RTOL = 1e-13
DEPENDENT_RTOL = 1e-10
SINGULAR_RTOL = 1e-12
PIVOT_RTOL = 1e-14


class OfflineError(RuntimeError):
    pass


class ElementExtensionCache:
    """Shared per-coarse-element extension solvers.

    Column assembly revisits each coarse element once per neighborhood
    containing it; the local factorization depends only on the element, so
    it is built once and reused.
    """

    def __init__(self, spec, space, grid, mesh):
        self.spec = spec
        self.space = space
        self.tris_of = element_tris(mesh, grid.num_elements)
        self._entries = {}

    def entry(self, element):
        got = self._entries.get(element)
        if got is None:
            # Closed element space: the stitched column must keep its trace
            # at every boundary node it shares with a neighboring element,
            # outer-box nodes included.
            ls = LocalSpace(self.space, self.tris_of[element], closed=True)
            solver = None
            if len(ls.interior_dofs):
                solver = LocalStokesSolver(self.spec, ls, "fine-p0")
            got = (ls, solver)
            self._entries[element] = got
        return got


def stokes_extension(spec, ls, trace, solver=None):
    """Minimum-gradient extension of a boundary trace into one coarse
    element, holding the divergence at the constant value flux / area.

    trace: local dof vector, or a matrix with one column per trace;
    interior entries are ignored. An element without interior dofs returns
    the trace unchanged.
    """
    data = np.asarray(trace, dtype=float)
    if not len(ls.interior_dofs):
        return data.copy()
    if solver is None:
        solver = LocalStokesSolver(spec, ls, "fine-p0")
    flux = np.atleast_1d(boundary_flux_p2(ls, data))
    c = flux / solver.areas.sum()
    moments = solver.areas[:, None] * c[None, :]
    if data.ndim == 1:
        u, _ = solver.solve(data, moments[:, 0], check_compat=False)
    else:
        u, _ = solver.solve(data, moments, check_compat=False)
    return u


def edge_flux_matrix(space):
    """Normal-flux integrals over interior coarse edges, as sparse rows.

    Returns (coarse_edge_ids, M) with M of shape (len(ids), ndof); M @ u
    gives the integral of u . n over each listed coarse edge. The normal
    follows the edge's lattice direction, so the sign is consistent along
    an edge. Simpson weights, exact for P2 traces.
    """
    if space.degree != 2 or space.ncomp != 2:
        raise ValueError("edge fluxes need a P2 vector space")
    mesh = space.mesh
    ce = coarse_edge_of_fine_edges(mesh)
    sel = np.flatnonzero((ce >= 0) & (mesh.edge_tag < 0))
    if sel.size == 0:
        return np.zeros(0, dtype=np.int64), csr_matrix((0, space.ndof))
    ids = np.unique(ce[sel])
    row = np.searchsorted(ids, ce[sel])
    a, b = mesh.edges[sel, 0], mesh.edges[sel, 1]
    mid = space.num_vnodes + sel
    t = mesh.verts[b] - mesh.verts[a]
    L = np.hypot(t[:, 0], t[:, 1])
    nrm = np.column_stack([t[:, 1], -t[:, 0]]) / L[:, None]
    w = np.column_stack([L / 6.0, 4.0 * L / 6.0, L / 6.0])
    rows, cols, data = [], [], []
    for j, nodes in enumerate((a, mid, b)):
        for c in range(2):
            rows.append(row)
            cols.append(2 * nodes + c)
            data.append(w[:, j] * nrm[:, c])
    M = csr_matrix((np.concatenate(data),
                    (np.concatenate(rows), np.concatenate(cols))),
                   shape=(len(ids), space.ndof))
    return ids, M


@dataclass
class OfflineSpace:
    """Global multiscale basis with its per-neighborhood bookkeeping."""

    spec: object
    grid: object
    mesh: object
    space: object
    columns: object
    meta: list
    counts: np.ndarray
    neighborhoods: list
    eigenvalues: list
    pou: object
    A: object
    F: np.ndarray
    B: object = None
    Agg: object = None
    C: object = None
    tri_areas: np.ndarray = None
    decomps: list = None
    snaps: list = None

    @property
    def dimension(self):
        return self.columns.shape[1]

    @property
    def q_dim(self):
        return 0 if self.Agg is None else self.Agg.shape[0]

    @property
    def cell_areas(self):
        return self.Agg @ self.tri_areas


@dataclass
class MultiscaleState:
    """One enrichment level: basis registry, coefficients, fields."""

    off: OfflineSpace
    level: int
    registry: list
    coef: np.ndarray
    u: FieldVector
    q_coarse: np.ndarray = None
    pressure_zero_mean: bool = False
    online: object = None
    online_meta: list = field(default_factory=list)

    @property
    def dof(self):
        return len(self.registry)

    @property
    def p_coarse(self):
        # Multiplier sign convention matches the fine solver: p = -q.
        return None if self.q_coarse is None else -self.q_coarse

    def basis(self):
        if self.online is None or self.online.shape[1] == 0:
            return self.off.columns
        return sparse_hstack([self.off.columns, self.online], format="csc")

    def online_count(self, ordinal):
        return sum(1 for tag in self.online_meta if tag[1] == ordinal)


def _resolve_counts(counts, num):
    arr = np.asarray(counts, dtype=np.int64)
    if arr.ndim == 0:
        arr = np.full(num, int(arr), dtype=np.int64)
    if len(arr) != num:
        raise ValueError("counts length %d for %d neighborhoods"
                         % (len(arr), num))
    if (arr < 0).any():
        raise ValueError("negative basis count")
    return arr


def _anchor_values_local(pou, ordinal, ls):
    idx, val = pou.anchors[ordinal]
    pos = np.searchsorted(ls.l2g_nodes, idx)
    clip = np.minimum(pos, ls.num_nodes - 1)
    if (pos >= ls.num_nodes).any() or (ls.l2g_nodes[clip] != idx).any():
        raise OfflineError(
            "partition anchor %d leaks outside its neighborhood" % ordinal)
    chi = np.zeros(ls.num_nodes)
    chi[pos] = val
    return chi


def assemble_offline(spec, space, grid, snaps, decomps, pou, counts):
    """Select eigenpairs, localize with the partition of unity, and stack
    the global basis columns.

    counts: eigenpairs kept per neighborhood (scalar or array), clamped to
    each spectrum. Columns that vanish after localization are dropped with
    a warning; the bookkeeping stays exact.

    A Stokes neighborhood that keeps at least one eigen mode also
    contributes the two partition-constant columns (the anchor function
    times a unit velocity, masked on holes and re-extended) ahead of the
    eigen splits, tagged with mode index -1. They reproduce the coarse
    velocity space and carry the net flux through the anchor's coarse
    edges, which the pressure stability of the coarse saddle rests on.
    On a hole-free patch the lowest eigen modes duplicate them and are
    removed as dependent.
    """
    mesh = space.mesh
    stokes = spec.kind == "stokes"
    A, B, F = assemble(spec, space)
    geom = TriGeometry(mesh.verts, mesh.tris)
    Agg = C = None
    if stokes:
        nt = mesh.num_tris
        Agg = csr_matrix((np.ones(nt), (mesh.parent, np.arange(nt))),
                         shape=(grid.num_elements, nt))
        C = (Agg @ B).tocsr()
    counts = _resolve_counts(counts, len(snaps))
    actual = np.minimum(counts,
                        [dec.num_modes for dec in decomps]).astype(np.int64)

    cache = ElementExtensionCache(spec, space, grid, mesh) if stokes else None
    buf = np.zeros(space.ndof)
    colbuf = np.zeros(space.ndof)
    nc = space.ncomp
    indices, data, lengths, meta = [], [], [], []
    dependent = 0

    def split_extended(ls, nb, v, k):
        out = []
        for c in range(2):
            vc = np.zeros(ls.ndof)
            vc[c::2] = v[c::2]
            buf[ls.l2g_dofs] = vc
            for K in nb.elements:
                ls_K, solver = cache.entry(int(K))
                ext = stokes_extension(spec, ls_K, buf[ls_K.l2g_dofs],
                                       solver)
                colbuf[ls_K.l2g_dofs] = ext
            out.append((colbuf[ls.l2g_dofs].copy(), (nb.ordinal, k, c)))
            buf[ls.l2g_dofs] = 0.0
            colbuf[ls.l2g_dofs] = 0.0
        return out

    for snap, dec, want in zip(snaps, decomps, actual):
        if want == 0:
            continue
        ls = snap.ls
        ordinal = snap.nb.ordinal
        chi = np.repeat(_anchor_values_local(pou, ordinal, ls), nc)
        cand = []
        if stokes:
            ones = np.ones(ls.ndof)
            ones[ls.mask_l] = 0.0
            ref = np.linalg.norm(chi * ones)
            for values, tag in split_extended(ls, snap.nb, chi * ones, -1):
                cand.append((values, tag, ref))
        W = snap.columns @ dec.eigenvectors[:, :want]
        for k in range(want):
            w = W[:, k]
            ref = np.linalg.norm(w)
            v = chi * w
            if not stokes:
                cand.append((v, (ordinal, k, -1), ref))
                continue
            for values, tag in split_extended(ls, snap.nb, v, k):
                cand.append((values, tag, ref))
        # A degenerate eigenspace makes component-split columns coincide
        # up to scale; keep the first independent representatives so the
        # selection stays a prefix of the eigen ordering.
        ortho = []
        for values, tag, ref in cand:
            nv = np.linalg.norm(values)
            if nv <= DROP_RTOL * max(ref, 1.0):
                warnings.warn("dropping vanished offline column %s" % (tag,))
                continue
            r = values.copy()
            for _ in range(2):
                for qv in ortho:
                    r -= (qv @ r) * qv
            nr = np.linalg.norm(r)
            if nr <= DEPENDENT_RTOL * nv:
                dependent += 1
                continue
            ortho.append(r / nr)
            indices.append(ls.l2g_dofs)
            data.append(values)
            lengths.append(len(values))
            meta.append(tag)
    if dependent:
        warnings.warn("dropped %d offline columns dependent within their "
                      "neighborhood" % dependent)

    if meta:
        columns = csc_matrix(
            (np.concatenate(data), np.concatenate(indices),
             np.concatenate([[0], np.cumsum(lengths)])),
            shape=(space.ndof, len(meta)))
    else:
        columns = csc_matrix((space.ndof, 0))
    return OfflineSpace(
        spec=spec, grid=grid, mesh=mesh, space=space, columns=columns,
        meta=meta, counts=actual, neighborhoods=[s.nb for s in snaps],
        eigenvalues=[dec.eigenvalues for dec in decomps], pou=pou,
        A=A, F=F, B=B, Agg=Agg, C=C, tri_areas=geom.areas,
        decomps=list(decomps), snaps=list(snaps))


def build_offline(spec, grid, mesh, counts, snapshot_mode="standard",
                  rand_count=None, oversample_layers=4, seed=0, threads=1):
    """Snapshot, eigensolve, and assemble the offline space end to end.

    threads parallelizes the per-neighborhood stage; results do not depend
    on the thread count because every neighborhood is self-contained and
    the reduction order is fixed.
    """
    space = space_for(mesh, spec)
    stokes = spec.kind == "stokes"
    nbs = build_neighborhoods(grid, mesh,
                              kinds=("node", "edge") if stokes else ("node",))
    pou = build_pou(grid, mesh,
                    "quadratic_lagrange" if stokes else "linear_hat")
    if snapshot_mode == "randomized" and rand_count is None:
        raise ValueError("randomized snapshots need rand_count")

    def stage(nb):
        if snapshot_mode == "standard":
            snap = standard_snapshots(spec, nb, space)
        elif snapshot_mode == "randomized":
            rc = rand_count if np.ndim(rand_count) == 0 \
                else rand_count[nb.ordinal]
            snap = randomized_snapshots(spec, nb, space, int(rc),
                                        layers=oversample_layers, seed=seed)
        else:
            raise ValueError("unknown snapshot mode %r" % (snapshot_mode,))
        chi = pou.nodal(nb.ordinal) if stokes else None
        S = spectral_weight(spec, snap.ls, chi_nodal=chi)
        return snap, local_gevp(nb, snap.columns, snap.A_loc, S)

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=int(threads)) as pool:
            staged = list(pool.map(stage, nbs))
    else:
        staged = [stage(nb) for nb in nbs]
    return assemble_offline(spec, space, grid, [s for s, _ in staged],
                            [d for _, d in staged], pou, counts)


def _try_solve(M, rhs):
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", RuntimeWarning)
            piv = lu_factor(M)
            x = lu_solve(piv, rhs)
    except (LinAlgError, RuntimeWarning, ValueError):
        return None, False
    resid = np.linalg.norm(M @ x - rhs)
    scale = max(np.linalg.norm(rhs), np.linalg.norm(M, "fro")
                * np.linalg.norm(x), 1.0)
    if not np.isfinite(resid) or resid > 1e-8 * scale:
        return x, False
    return x, True


def _dependent_columns_error(G, registry):
    lam, V = eigh(G)
    top = max(lam[-1], 0.0)
    bad = np.flatnonzero(lam <= SINGULAR_RTOL * max(top, 1e-300))
    cols = set()
    for j in bad:
        v = np.abs(V[:, j])
        cols.update(np.flatnonzero(v > 0.5 * v.max()).tolist())
    tags = [registry[c] for c in sorted(cols)][:8]
    return SolverError(
        "coarse matrix singular; dependent columns: %s%s"
        % (", ".join(map(str, tags)), ", ..." if len(cols) > 8 else ""))


def solve_coarse(spec, off, online=None, online_meta=None, level=1):
    """Galerkin solve in the offline span plus optional online columns.

    Returns a MultiscaleState carrying coefficients and the assembled fine
    representation. The Stokes pressure is gauged to area-weighted zero
    mean only when the saddle is otherwise singular, mirroring the fine
    solver's convention.
    """
    online_meta = list(online_meta or [])
    if online is not None and online.shape[1] != len(online_meta):
        raise ValueError("online columns and tags disagree")
    Z = off.columns
    if online is not None and online.shape[1]:
        Z = sparse_hstack([Z, online], format="csc")
    registry = [("off",) + tag for tag in off.meta] + online_meta
    n = Z.shape[1]
    if n == 0:
        raise OfflineError("empty coarse space")
    lift = off.space.dirichlet_values
    r = off.F - off.A @ lift
    G = np.asarray((Z.T @ (off.A @ Z)).todense())
    G = 0.5 * (G + G.T)
    b = Z.T @ r

    # Independent columns make the Gram matrix positive definite, so a
    # collapsed normalized pivot flags dependence even when the singular
    # system happens to stay consistent.
    try:
        cf = cho_factor(G)
    except LinAlgError:
        raise _dependent_columns_error(G, registry)
    pivots = np.diag(cf[0]) ** 2
    if (pivots <= PIVOT_RTOL * np.maximum(np.diag(G), 1e-300)).any():
        raise _dependent_columns_error(G, registry)

    zero_mean = False
    if spec.kind != "stokes":
        c = cho_solve(cf, b)
        q = None
    else:
        Cz = np.asarray((off.C @ Z).todense())
        g = -(off.C @ lift)
        m = Cz.shape[0]
        M = np.zeros((n + m, n + m))
        M[:n, :n] = G
        M[:n, n:] = Cz.T
        M[n:, :n] = Cz
        rhs = np.concatenate([b, g])
        sol, ok = _try_solve(M, rhs)
        if not ok:
            ids, W = edge_flux_matrix(off.space)
            if len(ids):
                F_edge = np.abs(np.asarray((W @ Z).todense()))
                peak = F_edge.max(axis=1)
                missing = ids[peak <= SINGULAR_RTOL * max(peak.max(), 1e-300)]
                if len(missing):
                    raise SolverError(
                        "coarse stokes saddle singular; interior coarse "
                        "edges without flux witnesses: %s"
                        % ", ".join(map(str, missing.tolist())))
            # Pressure gauge freedom: pin the area-weighted mean.
            w = off.cell_areas
            M2 = np.zeros((n + m + 1, n + m + 1))
            M2[:n + m, :n + m] = M
            M2[n:n + m, -1] = w
            M2[-1, n:n + m] = w
            sol, ok = _try_solve(M2, np.concatenate([rhs, [0.0]]))
            if not ok:
                raise SolverError("coarse stokes saddle singular")
            zero_mean = True
        c, q = sol[:n], sol[n:n + m]

    u = FieldVector(off.space, lift + Z @ c, name="u_ms")
    return MultiscaleState(off=off, level=level, registry=registry, coef=c,
                           u=u, q_coarse=q, pressure_zero_mean=zero_mean,
                           online=online, online_meta=online_meta)


OFFLINE_FORMAT = "perfms-offline-1"


def save_offline(path, off):
    """Versioned binary export of the basis columns and their tags."""
    meta = np.asarray(off.meta, dtype=np.int64).reshape(-1, 3)
    lens = [len(e) for e in off.eigenvalues]
    np.savez_compressed(
        path, format=np.asarray(OFFLINE_FORMAT), kind=np.asarray(off.spec.kind),
        ndof=np.asarray([off.columns.shape[0]]), counts=off.counts,
        col_data=off.columns.data, col_indices=off.columns.indices,
        col_indptr=off.columns.indptr, meta=meta,
        eig_offsets=np.concatenate([[0], np.cumsum(lens)]),
        eig_values=(np.concatenate(off.eigenvalues) if sum(lens)
                    else np.zeros(0)))


def load_offline(path, spec, grid, mesh):
    """Rebuild an OfflineSpace from a save_offline file.

    Fine operators, neighborhoods, and the partition of unity are cheap
    and are reassembled; snapshot columns and eigenvectors are not stored,
    so decomps and snaps come back as None.
    """
    with np.load(path, allow_pickle=False) as zf:
        if str(zf["format"]) != OFFLINE_FORMAT:
            raise OfflineError("unsupported offline file format %r"
                               % str(zf["format"]))
        if str(zf["kind"]) != spec.kind:
            raise OfflineError("offline file holds a %r basis, spec wants %r"
                               % (str(zf["kind"]), spec.kind))
        space = space_for(mesh, spec)
        if int(zf["ndof"][0]) != space.ndof:
            raise OfflineError("offline file was built on a different mesh")
        columns = csc_matrix(
            (zf["col_data"], zf["col_indices"], zf["col_indptr"]),
            shape=(space.ndof, len(zf["meta"])))
        meta = [tuple(row) for row in zf["meta"]]
        off = zf["eig_offsets"]
        eigenvalues = [zf["eig_values"][off[i]:off[i + 1]]
                       for i in range(len(off) - 1)]
        counts = zf["counts"]
    stokes = spec.kind == "stokes"
    nbs = build_neighborhoods(grid, mesh,
                              kinds=("node", "edge") if stokes else ("node",))
    pou = build_pou(grid, mesh,
                    "quadratic_lagrange" if stokes else "linear_hat")
    A, B, F = assemble(spec, space)
    geom = TriGeometry(mesh.verts, mesh.tris)
    Agg = C = None
    if stokes:
        nt = mesh.num_tris
        Agg = csr_matrix((np.ones(nt), (mesh.parent, np.arange(nt))),
                         shape=(grid.num_elements, nt))
        C = (Agg @ B).tocsr()
    return OfflineSpace(
        spec=spec, grid=grid, mesh=mesh, space=space, columns=columns,
        meta=meta, counts=counts, neighborhoods=nbs,
        eigenvalues=eigenvalues, pou=pou, A=A, F=F, B=B, Agg=Agg, C=C,
        tri_areas=geom.areas, decomps=None, snaps=None)
