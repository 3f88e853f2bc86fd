"""Fine-scale reference solves and the local solves behind snapshot bases.

Essential conditions are handled by elimination with a value lift, never by
penalties, so energy inner products stay exact. Definite systems go through
a sparse LU by default with an optional conjugate-gradient path; saddle
systems always use the direct factorization of the full indefinite block
matrix (CG does not apply to them).

Stokes saddle convention: the solved block system is
    [A  B^T] [u]   [F]
    [B  0  ] [q] = [G]
where row t of B u is the integral of div u over triangle t; the physical
pressure is p = -q.
"""

import numpy as np
from scipy.sparse import bmat, csr_matrix
from scipy.sparse.linalg import splu, cg

from .assembly import (TriGeometry, stiffness_p1, elastic_p1, stiffness_p2,
                       vector_expand, div_p2_p0, load_p1, load_p2,
                       outward_normals)
from .spaces import FieldVector, P0Space, space_for

SOLVER_RTOL = 1e-10


class SolverError(RuntimeError):
    pass


def _check_residual(M, x, b, what):
    r = np.linalg.norm(M @ x - b)
    scale = max(np.linalg.norm(b), 1.0)
    if r > SOLVER_RTOL * scale:
        raise SolverError("%s: residual %.3e exceeds %.1e (rhs scale %.3e)"
                          % (what, r, SOLVER_RTOL, scale))


def solve_spd(K, rhs, method="direct", what="system"):
    """Solve a symmetric positive definite sparse system for 1 or many rhs."""
    if method == "cg":
        b = np.atleast_2d(rhs.T).T
        out = np.empty_like(b, dtype=float)
        for j in range(b.shape[1]):
            x, info = cg(K, b[:, j], rtol=SOLVER_RTOL, atol=0.0,
                         maxiter=10 * K.shape[0])
            if info != 0:
                raise SolverError("%s: cg failed to converge (info=%d, "
                                  "residual %.3e)" % (what, info,
                                  np.linalg.norm(K @ x - b[:, j])))
            out[:, j] = x
        return out.reshape(np.shape(rhs))
    return splu(K.tocsc()).solve(np.asarray(rhs))


def assemble(spec, space, region=None):
    """Assemble (A, B, F) for an operator on the whole mesh or a LocalSpace.

    B is the integrated-divergence block for Stokes, else None. F is the
    forcing load vector (zero forcing on local regions is the caller's
    choice via spec).
    """
    if region is None:
        mesh = space.mesh
        geom = TriGeometry(mesh.verts, mesh.tris)
        tri_nodes = space.tri_nodes
        nn = space.num_nodes
    else:
        geom = TriGeometry(region.verts_xy, region.tris_l)
        tri_nodes = region.tri_nodes_l
        nn = region.num_nodes
    if spec.kind == "laplace":
        A = stiffness_p1(geom, tri_nodes, nn)
        F = load_p1(geom, tri_nodes, nn, spec)
        B = None
    elif spec.kind == "elasticity":
        A = elastic_p1(geom, tri_nodes, nn, spec.mu, spec.xi)
        F = load_p1(geom, tri_nodes, nn, spec)
        B = None
    else:
        A = vector_expand(stiffness_p2(geom, tri_nodes, nn), 2)
        F = load_p2(geom, tri_nodes, nn, spec)
        B = div_p2_p0(geom, tri_nodes, nn)
    return A, B, F


class FineProblem:
    """Assembled fine-scale problem: matrices, loads, essential data.

    Shared by the fine reference solve, the offline coarse system, and the
    online residual machinery, so everything sees identical matrices.
    """

    def __init__(self, mesh, spec, method="direct"):
        self.mesh = mesh
        self.spec = spec
        self.method = method
        self.space = space_for(mesh, spec)
        self.geom = TriGeometry(mesh.verts, mesh.tris)
        self.A, self.B, self.F = assemble(spec, self.space)
        self.pressure_space = P0Space(mesh) if spec.kind == "stokes" else None
        self.tri_areas = self.geom.areas
        self._free_outer = None

    @property
    def mask(self):
        return self.space.dirichlet_mask

    @property
    def lift(self):
        return self.space.dirichlet_values

    def energy_norm(self, u):
        return float(np.sqrt(max(u @ (self.A @ u), 0.0)))

    def has_free_outer_velocity(self):
        """True when some outer-boundary dof is unconstrained; then the
        Stokes pressure is determined by the natural condition, no gauge."""
        if self._free_outer is None:
            space = self.space
            outer = np.unique(np.concatenate(
                [space.outer_side_nodes(t) for t in range(4)]))
            dofs = space.node_dofs(outer).ravel()
            self._free_outer = bool((~space.dirichlet_mask[dofs]).any())
        return self._free_outer

    def solve(self):
        """Reference solution; (u, None) or (u, p) FieldVectors."""
        if self.spec.kind != "stokes":
            if not self.mask.any():
                raise SolverError("no essential boundary anywhere; "
                                  "the %s system is singular" % self.spec.kind)
            u = np.array(self.lift)
            free = ~self.mask
            rhs = self.F[free] - self.A[free][:, self.mask] @ self.lift[self.mask]
            Kff = self.A[free][:, free]
            uf = solve_spd(Kff, rhs, self.method, "fine %s" % self.spec.kind)
            _check_residual(Kff, uf, rhs, "fine %s" % self.spec.kind)
            u[free] = uf
            return FieldVector(self.space, u, name="u"), None

        if not self.mask.any():
            raise SolverError("no essential velocity dofs anywhere; "
                              "the stokes system is singular")
        free = np.flatnonzero(~self.mask)
        nf = len(free)
        nt = self.mesh.num_tris
        Aff = self.A[free][:, free]
        Bf = self.B[:, free]
        fixed = np.flatnonzero(self.mask)
        rhs_u = self.F[free] - self.A[free][:, fixed] @ self.lift[fixed]
        rhs_p = -self.B[:, fixed] @ self.lift[fixed]
        gauge = not self.has_free_outer_velocity()
        if gauge:
            col = csr_matrix((self.tri_areas,
                              (np.arange(nt), np.zeros(nt, dtype=int))),
                             shape=(nt, 1))
            M = bmat([[Aff, Bf.T, None],
                      [Bf, None, col],
                      [None, col.T, None]], format="csc")
            rhs = np.concatenate([rhs_u, rhs_p, [0.0]])
        else:
            M = bmat([[Aff, Bf.T], [Bf, None]], format="csc")
            rhs = np.concatenate([rhs_u, rhs_p])
        sol = splu(M).solve(rhs)
        _check_residual(M, sol, rhs, "fine stokes saddle")
        u = np.array(self.lift)
        u[free] = sol[:nf]
        q = sol[nf:nf + nt]
        p = -q
        return (FieldVector(self.space, u, name="u"),
                FieldVector(self.pressure_space, p, name="p", zero_mean=gauge))


def solve_fine(spec, mesh, method="direct"):
    """Fine reference solve; returns (u, p) with p None unless Stokes."""
    return FineProblem(mesh, spec, method=method).solve()


def solve_local_dirichlet(spec, ls, boundary_data, A=None, rhs=None):
    """Energy-minimal extension of essential data into a LocalSpace patch.

    boundary_data: (ndof,) or (ndof, k) local coefficient array(s); only the
    rows of ls.boundary_dofs are read. rhs adds an interior load (same
    shape); default zero (discrete harmonic/elastic extension).
    """
    if A is None:
        A, _, _ = assemble(spec, ls.space, region=ls)
    data = np.asarray(boundary_data, dtype=float)
    single = data.ndim == 1
    X = np.array(np.atleast_2d(data.T).T)
    i, b = ls.interior_dofs, ls.boundary_dofs
    if len(i):
        load = np.zeros((len(i), X.shape[1]))
        if rhs is not None:
            load += np.atleast_2d(np.asarray(rhs, dtype=float).T).T[i]
        Aii = A[i][:, i]
        sol = splu(Aii.tocsc()).solve(load - A[i][:, b] @ X[b])
        X[i] = sol
        _check_residual(Aii, sol[:, 0], (load - A[i][:, b] @ X[b])[:, 0],
                        "local dirichlet solve")
    return X[:, 0] if single else X


def boundary_flux_p2(ls, values):
    """Net outward flux of local P2 2-vector fields through the patch
    boundary (interface plus holes), Simpson per fine edge (exact for P2).

    values: (ndof,) or (ndof, k); returns a scalar or (k,).
    """
    V = np.atleast_2d(np.asarray(values, dtype=float).T).T
    total = np.zeros(V.shape[1])
    for rows, owner in ((ls.interface_edges, ls.interface_owner),
                        (ls.hole_edges, ls.hole_owner)):
        if len(rows) == 0:
            continue
        normals, lengths = outward_normals(ls.verts_xy, rows, owner, ls.tris_l)
        un = []
        for col in range(3):
            dofs = ls.node_dofs(rows[:, col])
            un.append(np.einsum("eck,ec->ek", V[dofs], normals))
        total += (lengths[:, None] / 6.0
                  * (un[0] + 4.0 * un[2] + un[1])).sum(axis=0)
    return total[0] if np.asarray(values).ndim == 1 else total


class LocalStokesSolver:
    """Factorized local saddle solver for one patch and one constraint set.

    pressure_space: "fine-p0" constrains the divergence integral on every
    local fine triangle; "coarse-p0" only its sums over coarse elements
    (the offline pressure space restricted to the patch); "none" drops the
    divergence constraint entirely. When every boundary dof carries
    essential data the row sums are implied by compatibility and one
    redundant row is removed (its multiplier pinned to zero); a patch with
    free outer-box dofs keeps all rows, the unknown flux through the open
    part makes them independent.
    """

    def __init__(self, spec, ls, pressure_space="fine-p0", A=None, B=None):
        self.spec = spec
        self.ls = ls
        self.pressure_space = pressure_space
        if A is None:
            A, B, _ = assemble(spec, ls.space, region=ls)
        self.A, self.B = A, B
        geom = TriGeometry(ls.verts_xy, ls.tris_l)
        self.areas = geom.areas
        i = ls.interior_dofs
        self.Aii = A[i][:, i].tocsc()
        if pressure_space == "none":
            self.C = None
            self.M = self.Aii
        else:
            if pressure_space == "fine-p0":
                C = B
            else:
                parents = ls.space.mesh.parent[ls.tri_ids]
                self.coarse_ids = np.unique(parents)
                rows = np.searchsorted(self.coarse_ids, parents)
                Agg = csr_matrix((np.ones(len(parents)),
                                  (rows, np.arange(len(parents)))),
                                 shape=(len(self.coarse_ids), len(parents)))
                self.Agg = Agg
                C = Agg @ B
            nrows = C.shape[0]
            keep = np.arange(nrows if ls.open_boundary else nrows - 1)
            self.keep = keep
            self.C = C
            Ci = C[:, i][keep]
            self.M = bmat([[self.Aii, Ci.T], [Ci, None]], format="csc")
        self.lu = splu(self.M)

    def integrated_targets(self, divergence_target):
        """Per-constraint-row integrals of the divergence target."""
        if self.pressure_space == "fine-p0":
            return np.asarray(divergence_target) * self.areas
        agg_areas = self.Agg @ self.areas
        return np.asarray(divergence_target) * agg_areas

    def solve(self, boundary_data, moments=None, rhs=None, check_compat=True):
        """Solve for one or many columns of essential data.

        moments: integrated divergence per constraint row (before removing
        the redundant one), shape (nrows,) or (nrows, k); zero when omitted.
        Returns (velocity, multiplier) local arrays; the multiplier is the
        constraint dual q (physical pressure is -q), None for "none".
        """
        ls = self.ls
        data = np.asarray(boundary_data, dtype=float)
        single = data.ndim == 1
        X = np.array(np.atleast_2d(data.T).T)
        ncol = X.shape[1]
        i, b = ls.interior_dofs, ls.boundary_dofs
        load = np.zeros((len(i), ncol))
        if rhs is not None:
            load += np.atleast_2d(np.asarray(rhs, dtype=float).T).T[i]
        if self.C is None:
            sol = self.lu.solve(load - self.A[i][:, b] @ X[b])
            X[i] = sol
            return (X[:, 0], None) if single else (X, None)

        if moments is None:
            targets = np.zeros((self.C.shape[0], ncol))
        else:
            targets = np.atleast_2d(np.asarray(moments, dtype=float).T).T
        if check_compat and not ls.open_boundary:
            flux = np.atleast_1d(boundary_flux_p2(ls, X))
            vol = targets.sum(axis=0)
            bad = np.abs(flux - vol) > 1e-9 * np.maximum(
                np.maximum(np.abs(flux), np.abs(vol)), 1.0)
            if bad.any():
                j = int(np.flatnonzero(bad)[0])
                raise SolverError(
                    "incompatible local stokes data (column %d): boundary "
                    "flux %.6e vs divergence integral %.6e" %
                    (j, flux[j], vol[j]))
        rhs_u = load - self.A[i][:, b] @ X[b]
        rhs_c = targets[self.keep] - self.C[:, b][self.keep] @ X[b]
        sol = self.lu.solve(np.vstack([rhs_u, rhs_c]))
        X[i] = sol[:len(i)]
        Q = np.zeros((self.C.shape[0], ncol))
        Q[self.keep] = sol[len(i):len(i) + len(self.keep)]
        return (X[:, 0], Q[:, 0]) if single else (X, Q)


def solve_local_stokes(spec, ls, boundary_data, divergence_target=None,
                       pressure_space="fine-p0", rhs=None):
    """One-shot local Stokes solve.

    divergence_target: constant target value per constraint row (per local
    fine triangle or per coarse element, by pressure_space); integrated
    against the row measures internally. See LocalStokesSolver.
    """
    solver = LocalStokesSolver(spec, ls, pressure_space)
    moments = None
    if divergence_target is not None and solver.C is not None:
        moments = solver.integrated_targets(divergence_target)
    return solver.solve(boundary_data, moments, rhs=rhs)
