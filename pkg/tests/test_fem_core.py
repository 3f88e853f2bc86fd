"""Assembly and solver layer.

Hand-derived oracles used below:
- unit right triangle, P1 stiffness: grad(l0)=(-1,-1), grad(l1)=(1,0),
  grad(l2)=(0,1), area 1/2 -> K = [[1,-1/2,-1/2],[-1/2,1/2,0],[-1/2,0,1/2]].
- empty unit square: int |grad x^2|^2 = 4/3, int (x^2)^2 = 1/5, area 1.
- u=(x,y): div u = 2, net outward flux through any patch boundary equals
  2 * patch area.
- E=1e9, nu=0.22: mu = 1e9/2.44 = 409836065.57...,
  xi = 0.22e9/(1.22*0.56) = 322014051.52...
"""

import numpy as np
import pytest

from perfms.assembly import (AssemblyError, TriGeometry, div_p2_p0,
                             elastic_p1, mass_p1, mass_p2, stiffness_p1,
                             stiffness_p2, vector_expand)
from perfms.geometry import build_geometry
from perfms.meshing import build_coarse_grid, refine_to_fine
from perfms.operators import OperatorSpec
from perfms.solvers import (FineProblem, LocalStokesSolver, SolverError,
                            assemble, boundary_flux_p2, solve_fine,
                            solve_local_dirichlet)
from perfms.spaces import FineSpace, LocalSpace, space_for


@pytest.fixture(scope="module")
def empty_mesh():
    grid = build_coarse_grid(build_geometry("empty"), 2)
    return refine_to_fine(grid, 2)


@pytest.fixture(scope="module")
def perf_mesh():
    grid = build_coarse_grid(build_geometry("small-inclusions"), 5)
    return refine_to_fine(grid, 2)


def test_lame_constants():
    spec = OperatorSpec.elasticity(E=1.0e9, nu=0.22)
    assert spec.mu == pytest.approx(4.09836e8, rel=1e-6)
    assert spec.mu == pytest.approx(1.0e9 / 2.44, rel=1e-14)
    assert spec.xi == pytest.approx(0.22e9 / (1.22 * 0.56), rel=1e-14)
    assert spec.xi > 0 and spec.mu > 0


def test_reference_triangle_stiffness():
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    tris = np.array([[0, 1, 2]])
    K = stiffness_p1(TriGeometry(verts, tris), tris, 3).toarray()
    expect = np.array([[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0], [-0.5, 0.0, 0.5]])
    np.testing.assert_allclose(K, expect, atol=1e-15)
    np.testing.assert_allclose(K.sum(axis=1), 0.0, atol=1e-15)


def test_degenerate_triangle_rejected():
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    tris = np.array([[0, 1, 2]])
    with pytest.raises(AssemblyError, match="triangle 0"):
        TriGeometry(verts, tris)


def test_p1_mass_total_area(empty_mesh):
    geom = TriGeometry(empty_mesh.verts, empty_mesh.tris)
    M = mass_p1(geom, empty_mesh.tris, empty_mesh.num_verts)
    ones = np.ones(empty_mesh.num_verts)
    assert ones @ (M @ ones) == pytest.approx(1.0, rel=1e-13)


def test_elastic_rigid_body_kernel(empty_mesh):
    geom = TriGeometry(empty_mesh.verts, empty_mesh.tris)
    K = elastic_p1(geom, empty_mesh.tris, empty_mesh.num_verts,
                   mu=4.1e8, xi=3.2e8)
    x, y = empty_mesh.verts[:, 0], empty_mesh.verts[:, 1]
    modes = [np.column_stack([np.ones_like(x), np.zeros_like(x)]),
             np.column_stack([np.zeros_like(x), np.ones_like(x)]),
             np.column_stack([-y, x])]
    scale = abs(K).max()
    for m in modes:
        v = m.ravel()
        assert np.abs(K @ v).max() <= 1e-9 * scale * np.abs(v).max()


def test_p2_exact_on_quadratics(empty_mesh):
    space = FineSpace(empty_mesh, 2, 1)
    geom = TriGeometry(empty_mesh.verts, empty_mesh.tris)
    K = stiffness_p2(geom, space.tri_nodes, space.num_nodes)
    M = mass_p2(geom, space.tri_nodes, space.num_nodes)
    u = space.node_xy[:, 0] ** 2
    assert u @ (K @ u) == pytest.approx(4.0 / 3.0, rel=1e-12)
    assert u @ (M @ u) == pytest.approx(1.0 / 5.0, rel=1e-12)
    ones = np.ones(space.num_nodes)
    assert ones @ (M @ ones) == pytest.approx(1.0, rel=1e-12)


def test_divergence_rows(empty_mesh):
    space = FineSpace(empty_mesh, 2, 2)
    geom = TriGeometry(empty_mesh.verts, empty_mesh.tris)
    B = div_p2_p0(geom, space.tri_nodes, space.num_nodes)
    const = np.tile([2.0, -3.0], space.num_nodes)
    assert np.abs(B @ const).max() <= 1e-14
    u = np.zeros(2 * space.num_nodes)
    u[0::2] = space.node_xy[:, 0]
    np.testing.assert_allclose(B @ u, geom.areas, rtol=1e-12)


@pytest.mark.parametrize("make_spec", [
    lambda: OperatorSpec.laplace(),
    lambda: OperatorSpec.elasticity(),
    lambda: OperatorSpec.stokes(),
])
def test_assembled_blocks_symmetric(perf_mesh, make_spec):
    spec = make_spec()
    space = space_for(perf_mesh, spec)
    A, _, _ = assemble(spec, space)
    d = A - A.T
    assert abs(d).max() <= 1e-14 * abs(A).max()


def test_coercivity_on_free_dofs(perf_mesh):
    for spec in (OperatorSpec.laplace(), OperatorSpec.elasticity()):
        prob = FineProblem(perf_mesh, spec)
        free = np.flatnonzero(~prob.mask)
        rng = np.random.default_rng(7)
        for _ in range(10):
            x = np.zeros(prob.space.ndof)
            x[free] = rng.standard_normal(len(free))
            assert x @ (prob.A @ x) > 0.0


def test_laplace_linear_exactness(empty_mesh):
    spec = OperatorSpec.laplace(f=0.0)
    prob = FineProblem(empty_mesh, spec)
    g = 1.0 + 2.0 * empty_mesh.verts[:, 0] + 3.0 * empty_mesh.verts[:, 1]
    prob.space.dirichlet_values[:] = np.where(prob.mask, g, 0.0)
    u, _ = prob.solve()
    np.testing.assert_allclose(u.values, g, rtol=0, atol=1e-12)


def test_zero_forcing_zero_solution(perf_mesh):
    u, _ = solve_fine(OperatorSpec.laplace(f=0.0), perf_mesh)
    assert np.abs(u.values).max() == 0.0


def test_all_natural_laplace_is_singular(empty_mesh):
    spec = OperatorSpec.laplace(f=1.0, outer="free", perforation="free")
    with pytest.raises(SolverError, match="singular"):
        solve_fine(spec, empty_mesh)


def test_cg_matches_direct(perf_mesh):
    spec = OperatorSpec.laplace()
    u_d, _ = solve_fine(spec, perf_mesh)
    u_cg, _ = solve_fine(spec, perf_mesh, method="cg")
    scale = np.abs(u_d.values).max()
    assert np.abs(u_d.values - u_cg.values).max() <= 1e-8 * scale


def test_elasticity_fine_energy_reproducible(perf_mesh):
    spec = OperatorSpec.elasticity()
    energies = []
    for _ in range(2):
        prob = FineProblem(perf_mesh, spec)
        u, _ = prob.solve()
        energies.append(prob.energy_norm(u.values))
    assert energies[0] > 0.0
    assert energies[0] == pytest.approx(energies[1], rel=1e-12)


def test_stokes_fine_solve(perf_mesh):
    spec = OperatorSpec.stokes()
    prob = FineProblem(perf_mesh, spec)
    u, p = prob.solve()
    # Natural outer data leaves free outer dofs, so the pressure needs no
    # gauge and carries no zero-mean flag.
    assert prob.has_free_outer_velocity()
    assert not p.zero_mean
    div = prob.B @ u.values
    assert np.abs(div).max() <= 1e-10 * max(1.0, np.abs(u.values).max())
    assert np.isfinite(p.values).all()
    u2, p2 = solve_fine(spec, perf_mesh)
    assert np.array_equal(u.values, u2.values)
    assert np.array_equal(p.values, p2.values)


def _patch(space, mesh, parents, closed=False):
    tri_ids = np.flatnonzero(np.isin(mesh.parent, parents))
    return LocalSpace(space, tri_ids, closed=closed)


def test_local_dirichlet_constant_extension(empty_mesh):
    spec = OperatorSpec.laplace()
    space = space_for(empty_mesh, spec)
    ls = _patch(space, empty_mesh, [0, 1])
    c = 2.5
    ext = solve_local_dirichlet(spec, ls, np.full(ls.ndof, c))
    np.testing.assert_allclose(ext, c, rtol=0, atol=1e-12)


def test_local_dirichlet_zero_data(perf_mesh):
    spec = OperatorSpec.elasticity()
    space = space_for(perf_mesh, spec)
    ls = _patch(space, perf_mesh, [0, 1, 10, 11])
    ext = solve_local_dirichlet(spec, ls, np.zeros(ls.ndof))
    assert np.abs(ext).max() == 0.0


def test_local_dirichlet_energy_minimality(perf_mesh):
    spec = OperatorSpec.elasticity()
    space = space_for(perf_mesh, spec)
    ls = _patch(space, perf_mesh, [12, 13, 22, 23])
    A, _, _ = assemble(spec, space, region=ls)
    rng = np.random.default_rng(42)
    data = np.zeros(ls.ndof)
    data[ls.boundary_dofs] = rng.standard_normal(len(ls.boundary_dofs))
    ext = solve_local_dirichlet(spec, ls, data, A=A)
    e0 = ext @ (A @ ext)
    for _ in range(5):
        cand = np.array(ext)
        cand[ls.interior_dofs] += rng.standard_normal(len(ls.interior_dofs))
        assert cand @ (A @ cand) >= e0 - 1e-9 * abs(e0)


def test_local_stokes_zero_pair(perf_mesh):
    spec = OperatorSpec.stokes()
    space = space_for(perf_mesh, spec)
    ls = _patch(space, perf_mesh, [0, 1])
    u, q = LocalStokesSolver(spec, ls).solve(np.zeros(ls.ndof))
    assert np.abs(u).max() == 0.0
    assert np.abs(q).max() == 0.0


def test_local_stokes_divergence_identity(empty_mesh):
    # Trace of (x, y) has net flux 2*|patch|; constant target 2 matches it
    # and the solve reproduces the per-triangle divergence integrals. The
    # closed flavor prescribes the whole topological boundary.
    spec = OperatorSpec.stokes()
    space = space_for(empty_mesh, spec)
    ls = _patch(space, empty_mesh, [2, 3], closed=True)
    data = np.zeros(ls.ndof)
    xy = space.node_xy[ls.l2g_nodes]
    bnodes = np.unique(np.concatenate([ls.rim_nodes, ls.hole_nodes]))
    for comp in range(2):
        data[2 * bnodes + comp] = xy[bnodes, comp]
    solver = LocalStokesSolver(spec, ls, "fine-p0")
    area = solver.areas.sum()
    flux = boundary_flux_p2(ls, data)
    assert flux == pytest.approx(2.0 * area, rel=1e-12)
    u, q = solver.solve(data, moments=2.0 * solver.areas)
    np.testing.assert_allclose(solver.B @ u, 2.0 * solver.areas, rtol=1e-9)

    with pytest.raises(SolverError, match="incompatible"):
        solver.solve(data, moments=None)


def test_local_stokes_coarse_constraints(perf_mesh):
    spec = OperatorSpec.stokes()
    space = space_for(perf_mesh, spec)
    ls = _patch(space, perf_mesh, [24, 25, 34])
    rng = np.random.default_rng(3)
    data = np.zeros(ls.ndof)
    bdofs = ls.boundary_dofs[~ls.mask_l[ls.boundary_dofs]]
    data[bdofs] = 0.0
    solver = LocalStokesSolver(spec, ls, "coarse-p0")
    load = np.zeros(ls.ndof)
    load[ls.interior_dofs] = rng.standard_normal(len(ls.interior_dofs))
    u, q = solver.solve(data, rhs=load)
    # Constrained rows: aggregated divergence integrals vanish.
    agg = solver.Agg @ (solver.B @ u)
    assert np.abs(agg).max() <= 1e-10 * max(1.0, np.abs(u).max())
    # Dual consistency: A u + C^T q = load on interior rows.
    i = ls.interior_dofs
    res = (solver.A @ u)[i] + (solver.C.T @ q)[i] - load[i]
    scale = max(np.abs(load).max(), 1.0)
    assert np.abs(res).max() <= 1e-9 * scale
