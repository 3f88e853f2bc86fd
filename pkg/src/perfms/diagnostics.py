"""Reference solutions, error norms, and stability diagnostics.

The snapshot solution is the Galerkin solve in the span of every local
snapshot column, glued into the global fine space. Its distance to the
fine solution is the irreducible error of the reduction; its distance to
a multiscale state is what the residual bound controls. Error reports,
the computable residual bound, the coarse pressure stability estimate,
and field export all live here so the pipeline and the tests share one
set of definitions.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, eigh, \
    lu_factor, lu_solve, solve_triangular
from scipy.linalg.lapack import dpstrf
from scipy.sparse import csc_matrix

from .assembly import TriGeometry, mass_p1, mass_p2, vector_expand
from .offline import SINGULAR_RTOL, MultiscaleState, edge_flux_matrix
from .solvers import SolverError
from .spaces import FieldVector

# Rank cut for the global snapshot Gram, relative to its largest diagonal.
DEFLATE_RTOL = 1e-10


@dataclass
class ErrorReport:
    """Relative errors of one approximate solution against a reference."""

    e_L2: float
    e_H1: float
    e_p: float
    dofs: int
    reference: str


@dataclass
class BoundCheck:
    """Residual bound versus the actual squared distance to the snapshot
    solution, with the overlap constant that scales the bound."""

    bound: float
    actual: float
    ratio: float
    overlap: int
    passed: bool
    irreducible: float = None


def _solve_dense(M, rhs):
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", RuntimeWarning)
            x = lu_solve(lu_factor(M), rhs)
    except (LinAlgError, RuntimeWarning, ValueError):
        return None, False
    resid = np.linalg.norm(M @ x - rhs)
    scale = max(np.linalg.norm(rhs), np.linalg.norm(M) * np.linalg.norm(x),
                1.0)
    return x, bool(np.isfinite(resid) and resid <= 1e-8 * scale)


def snapshot_matrix(off):
    """Stack all local snapshot columns as one global sparse matrix."""
    if off.snaps is None:
        raise ValueError("offline space carries no snapshot columns")
    indices, data, lengths = [], [], []
    for snap in off.snaps:
        if snap.mode != "standard":
            raise ValueError("snapshot solution needs standard snapshots, "
                             "neighborhood %d is %r"
                             % (snap.nb.ordinal, snap.mode))
        cols = snap.columns
        for j in range(cols.shape[1]):
            indices.append(snap.ls.l2g_dofs)
            data.append(cols[:, j])
            lengths.append(snap.ls.ndof)
    if not lengths:
        return csc_matrix((off.space.ndof, 0))
    return csc_matrix(
        (np.concatenate(data), np.concatenate(indices),
         np.concatenate([[0], np.cumsum(lengths)])),
        shape=(off.space.ndof, len(lengths)))


def snapshot_solution(spec, off):
    """Galerkin solve in the glued snapshot span; returns (u, p).

    The snapshot Gram in the energy form is rank deficient wherever
    neighborhoods overlap, so the span is deflated first: a pivoted
    Cholesky factorization keeps the leading independent columns at
    tolerance DEFLATE_RTOL times the largest diagonal, with a warning
    stating how many directions were dropped. The reduced system is then
    solved exactly in the surviving columns; for Stokes the coarse
    pressure moments constrain the solve and the multiplier comes back
    as the pressure, gauged to zero area mean only if the saddle is
    otherwise singular. p is None for the scalar and elasticity kinds.
    """
    Psi = snapshot_matrix(off)
    m = Psi.shape[1]
    if m == 0:
        raise ValueError("empty snapshot space")
    G = np.asarray((Psi.T @ (off.A @ Psi)).todense())
    G = 0.5 * (G + G.T)
    lift = off.space.dirichlet_values
    g = Psi.T @ (off.F - off.A @ lift)

    tol = DEFLATE_RTOL * max(float(G.diagonal().max()), 1e-300)
    c_fac, piv, rank, info = dpstrf(G, tol=tol, lower=1, overwrite_a=1)
    if info < 0:
        raise SolverError("snapshot Gram factorization failed")
    if rank < m:
        warnings.warn("deflated %d of %d snapshot directions"
                      % (m - rank, m))
    keep = piv[:rank] - 1
    L = np.tril(c_fac[:rank, :rank])
    gr = g[keep]

    if spec.kind != "stokes":
        y = solve_triangular(L, gr, lower=True)
        cr = solve_triangular(L.T, y, lower=False)
        u = FieldVector(off.space, lift + Psi[:, keep] @ cr, name="u_snap")
        return u, None

    Cz = np.asarray((off.C @ Psi).todense())[:, keep]
    gc = -(off.C @ lift)
    nq = Cz.shape[0]
    M = np.zeros((rank + nq, rank + nq))
    M[:rank, :rank] = L @ L.T
    M[:rank, rank:] = Cz.T
    M[rank:, :rank] = Cz
    rhs = np.concatenate([gr, gc])
    sol, ok = _solve_dense(M, rhs)
    if not ok:
        # Pressure gauge freedom: pin the area-weighted mean.
        w = off.cell_areas
        M2 = np.zeros((rank + nq + 1, rank + nq + 1))
        M2[:rank + nq, :rank + nq] = M
        M2[rank:rank + nq, -1] = w
        M2[-1, rank:rank + nq] = w
        sol, ok = _solve_dense(M2, np.concatenate([rhs, [0.0]]))
        if not ok:
            raise SolverError("snapshot stokes saddle singular")
    cr, q = sol[:rank], sol[rank:rank + nq]
    u = FieldVector(off.space, lift + Psi[:, keep] @ cr, name="u_snap")
    return u, -q


def velocity_mass(spec, space):
    """Mass matrix for the primary field, weighted the way the error
    norms are defined: elasticity carries the constant (xi + 2 mu)."""
    mesh = space.mesh
    geom = TriGeometry(mesh.verts, mesh.tris)
    if space.degree == 1:
        M = mass_p1(geom, space.tri_nodes, space.num_nodes)
    else:
        M = mass_p2(geom, space.tri_nodes, space.num_nodes)
    M = vector_expand(M, space.ncomp)
    if spec.kind == "elasticity":
        M = M * (spec.xi + 2.0 * spec.mu)
    return M


def _as_pair(obj):
    if isinstance(obj, (tuple, list)):
        if len(obj) != 2:
            raise ValueError("expected a (u, p) pair")
        return obj[0], obj[1]
    return obj, None


def errors(reference, state, kind=None):
    """Relative errors of a multiscale state against a reference pair.

    reference: (u, p) from the fine solver, or (u, p) from
    snapshot_solution; a bare FieldVector works when there is no
    pressure. The pressure comparison is done on coarse cells: a fine
    pressure is averaged per coarse cell with area weights first, a
    snapshot pressure is already cellwise constant. A reference with
    zero norm leaves relative errors undefined and raises.
    """
    u_ref, p_ref = _as_pair(reference)
    if isinstance(state, MultiscaleState):
        off = state.off
        u_val, p_c, dofs = state.u.values, state.q_coarse, state.dof
        if p_c is not None:
            p_c = -p_c
    else:
        raise TypeError("state must be a MultiscaleState")
    spec = off.spec

    M = velocity_mass(spec, off.space)
    d = u_val - u_ref.values
    den2 = float(u_ref.values @ (M @ u_ref.values))
    dh2 = float(u_ref.values @ (off.A @ u_ref.values))
    if den2 <= 0.0 or dh2 <= 0.0:
        raise ValueError("zero-norm reference field")
    e_L2 = float(np.sqrt(max(d @ (M @ d), 0.0) / den2))
    e_H1 = float(np.sqrt(max(d @ (off.A @ d), 0.0) / dh2))

    e_p = None
    if spec.kind == "stokes" and p_c is not None and p_ref is not None:
        w = off.cell_areas
        if isinstance(p_ref, FieldVector):
            pbar = (off.Agg @ (off.tri_areas * p_ref.values)) / w
            if kind is None:
                kind = "fine"
        else:
            pbar = np.asarray(p_ref, dtype=float)
            if kind is None:
                kind = "snapshot"
        dp = p_c - pbar
        den_p = float(w @ (pbar * pbar))
        if den_p <= 0.0:
            raise ValueError("zero-norm reference pressure")
        e_p = float(np.sqrt(max(w @ (dp * dp), 0.0) / den_p))
    if kind is None:
        kind = "fine"
    if kind not in ("fine", "snapshot"):
        raise ValueError("reference kind %r" % (kind,))
    return ErrorReport(e_L2=e_L2, e_H1=e_H1, e_p=e_p, dofs=dofs,
                       reference=kind)


def max_neighborhood_overlap(off):
    """Largest number of neighborhoods sharing one coarse element."""
    cnt = np.zeros(off.grid.num_elements, dtype=np.int64)
    for nb in off.neighborhoods:
        cnt[np.asarray(nb.elements, dtype=np.int64)] += 1
    return int(cnt.max())


def aposteriori_bound(state, report, reference, fine=None, rtol=1e-8):
    """Evaluate the residual bound against the snapshot distance.

    bound = overlap * sum (1 + 1/lambda_next) |R_i|^2 with the plain dual
    norms from the report; an exhausted spectrum contributes factor one
    (the limit of the eigenvalue weight), a zero next eigenvalue makes
    the bound infinite. actual is the squared energy distance between
    the state and the snapshot solution. When the fine reference is
    passed as well, the irreducible distance fine-to-snapshot rides
    along in the result.
    """
    off = state.off
    u_hat, _ = _as_pair(reference)
    d = state.u.values - u_hat.values
    actual = float(max(d @ (off.A @ d), 0.0))
    lam = np.asarray(report.next_lambda, dtype=float)
    dual = np.asarray(report.dual_norms, dtype=float)
    with np.errstate(divide="ignore"):
        fac = 1.0 + 1.0 / lam
    fac[np.isinf(lam)] = 1.0
    # A vanished residual contributes nothing even at a zero eigenvalue.
    terms = np.where(dual == 0.0, 0.0, fac * dual * dual)
    overlap = max_neighborhood_overlap(off)
    bound = float(overlap * np.sum(terms))
    ratio = np.inf if actual == 0.0 else bound / actual
    passed = bool(bound >= (1.0 - rtol) * actual)
    irr = None
    if fine is not None:
        u_fine, _ = _as_pair(fine)
        e = u_fine.values - u_hat.values
        irr = float(np.sqrt(max(e @ (off.A @ e), 0.0)))
    return BoundCheck(bound=bound, actual=actual, ratio=ratio,
                      overlap=overlap, passed=passed, irreducible=irr)


def infsup_diagnostic(off, tol=1e-12):
    """Smallest coarse pressure stability constant of an offline space.

    Generalized smallest eigenvalue of the pressure Schur complement
    against the cell-area pressure mass, restricted to zero-mean
    pressures. A value at or below tol times the largest eigenvalue
    means the coarse saddle cannot control some pressure mode; the
    failure names interior coarse edges whose normal flux no basis
    column witnesses, since a lost edge is the way this breaks in
    practice.
    """
    if off.C is None:
        raise ValueError("pressure diagnostic needs a stokes offline space")
    Z = off.columns
    if Z.shape[1] == 0:
        raise ValueError("empty offline space")
    G = np.asarray((Z.T @ (off.A @ Z)).todense())
    G = 0.5 * (G + G.T)
    try:
        cf = cho_factor(G)
    except LinAlgError:
        raise SolverError("offline velocity Gram singular; dependent "
                          "columns defeat the pressure diagnostic")
    Cz = np.asarray((off.C @ Z).todense())
    S = Cz @ cho_solve(cf, Cz.T)
    S = 0.5 * (S + S.T)

    w = off.cell_areas
    nq = len(w)
    if nq < 2:
        return np.inf
    N = np.zeros((nq, nq - 1))
    N[:nq - 1, :] = np.eye(nq - 1)
    N[nq - 1, :] = -w[:nq - 1] / w[nq - 1]
    Sr = N.T @ S @ N
    Mr = N.T @ (w[:, None] * N)
    sig = eigh(Sr, Mr, eigvals_only=True)
    smin, smax = float(sig[0]), float(sig[-1])
    if smin <= tol * max(smax, 1e-300):
        ids, W = edge_flux_matrix(off.space)
        if len(ids):
            F_edge = np.abs(np.asarray((W @ Z).todense()))
            peak = F_edge.max(axis=1)
            missing = ids[peak <= SINGULAR_RTOL * max(peak.max(), 1e-300)]
            if len(missing):
                raise SolverError(
                    "pressure stability lost; interior coarse edges "
                    "without flux witnesses: %s"
                    % ", ".join(map(str, missing.tolist())))
        raise SolverError("no positive pressure stability constant "
                          "(min %.3e of max %.3e)" % (smin, smax))
    return smin


def _fmt(x):
    return "%.9e" % x


def export_fields(obj, path):
    """Write a solution as a legacy ASCII VTK unstructured grid.

    Accepts a MultiscaleState or a (u, p) reference pair. Velocity or
    displacement goes out as point data on the vertices, pressure as
    cell data per fine triangle; a coarse pressure is expanded through
    the parent map. Output is deterministic, so re-exporting the same
    state reproduces the file byte for byte.
    """
    if isinstance(obj, MultiscaleState):
        u = obj.u
        p_tri = None
        if obj.p_coarse is not None:
            p_tri = np.asarray(obj.p_coarse)[obj.off.mesh.parent]
    else:
        u, p = _as_pair(obj)
        p_tri = None if p is None else p.values
    space = u.space
    mesh = space.mesh
    nv = len(mesh.verts)
    nt = len(mesh.tris)
    nc = space.ncomp

    lines = [
        "# vtk DataFile Version 2.0",
        "perfms fields",
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        "POINTS %d double" % nv,
    ]
    for x, y in mesh.verts:
        lines.append("%s %s 0" % (_fmt(x), _fmt(y)))
    lines.append("CELLS %d %d" % (nt, 4 * nt))
    for a, b, c in mesh.tris:
        lines.append("3 %d %d %d" % (a, b, c))
    lines.append("CELL_TYPES %d" % nt)
    lines.extend(["5"] * nt)
    lines.append("POINT_DATA %d" % nv)
    if nc == 2:
        lines.append("VECTORS %s double" % (u.name or "u"))
        vals = u.values
        for v in range(nv):
            lines.append("%s %s 0" % (_fmt(vals[2 * v]),
                                      _fmt(vals[2 * v + 1])))
    else:
        lines.append("SCALARS %s double 1" % (u.name or "u"))
        lines.append("LOOKUP_TABLE default")
        for v in range(nv):
            lines.append(_fmt(u.values[v]))
    if p_tri is not None:
        lines.append("CELL_DATA %d" % nt)
        lines.append("SCALARS p double 1")
        lines.append("LOOKUP_TABLE default")
        for t in range(nt):
            lines.append(_fmt(p_tri[t]))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines))
        fh.write("\n")
    return path
