"""Local generalized eigenproblems and spectral weights."""

import numpy as np
import pytest
from scipy.sparse import csr_matrix, identity

from perfms.geometry import build_geometry
from perfms.meshing import build_coarse_grid, refine_to_fine
from perfms.assembly import TriGeometry, mass_p2, vector_expand
from perfms.neighborhoods import build_neighborhoods
from perfms.operators import OperatorSpec
from perfms.spaces import LocalSpace, space_for
from perfms.spectral import SpectralError, local_gevp, spectral_weight


def _rand_spd(n, seed):
    rng = np.random.default_rng(seed)
    R = rng.standard_normal((n, n))
    return csr_matrix(R.T @ R + n * np.eye(n))


def test_identical_forms_all_unit_eigenvalues():
    S = _rand_spd(8, 0)
    Z = np.eye(8)
    dec = local_gevp(None, Z, S, S)
    np.testing.assert_allclose(dec.eigenvalues, 1.0, rtol=1e-10)
    SZ = dec.eigenvectors.T @ (S @ dec.eigenvectors)
    np.testing.assert_allclose(SZ, np.eye(8), atol=1e-8)


def test_diagonal_pencil_ordering():
    A = csr_matrix(np.diag([4.0, 1.0]))
    S = identity(2, format="csr")
    dec = local_gevp(None, np.eye(2), A, S)
    np.testing.assert_allclose(dec.eigenvalues, [1.0, 4.0], rtol=1e-12)
    diag = dec.eigenvectors.T @ (A @ dec.eigenvectors)
    np.testing.assert_allclose(diag, np.diag([1.0, 4.0]), atol=1e-10)


def test_duplicate_column_deflates():
    S = _rand_spd(6, 1)
    A = _rand_spd(6, 2)
    rng = np.random.default_rng(3)
    Z = rng.standard_normal((6, 3))
    Z[:, 2] = Z[:, 0]
    dec = local_gevp(None, Z, A, S)
    assert dec.deflated == 1
    assert dec.num_modes == 2
    assert (np.diff(dec.eigenvalues) >= -1e-12).all()


def test_zero_columns_rejected():
    S = _rand_spd(4, 4)
    Z = np.zeros((4, 2))
    with pytest.raises(SpectralError, match="rank 0"):
        local_gevp(None, Z, S, S)


def test_elastic_weight_scaling():
    grid = build_coarse_grid(build_geometry("small-inclusions"), 5)
    mesh = refine_to_fine(grid, 2)
    spec = OperatorSpec.elasticity()
    space = space_for(mesh, spec)
    nb = build_neighborhoods(grid, mesh)[14]
    ls = LocalSpace(space, nb.tri_ids)
    S = spectral_weight(spec, ls)
    ones = np.ones(ls.ndof)
    area = TriGeometry(ls.verts_xy, ls.tris_l).areas.sum()
    want = (spec.xi + 2.0 * spec.mu) * 2.0 * area
    assert ones @ (S @ ones) == pytest.approx(want, rel=1e-12)


def test_stokes_weight_against_plain_mass():
    # chi = x has |grad chi|^2 = 1, so the weighted mass equals the plain
    # P2 vector mass; chi = const makes it vanish.
    grid = build_coarse_grid(build_geometry("small-inclusions"), 5)
    mesh = refine_to_fine(grid, 2)
    spec = OperatorSpec.stokes()
    space = space_for(mesh, spec)
    nb = build_neighborhoods(grid, mesh)[14]
    ls = LocalSpace(space, nb.tri_ids)

    chi_x = space.node_xy[:, 0]
    S = spectral_weight(spec, ls, chi_nodal=chi_x)
    geom = TriGeometry(ls.verts_xy, ls.tris_l)
    M = vector_expand(mass_p2(geom, ls.tri_nodes_l, ls.num_nodes), 2)
    assert abs(S - M).max() <= 1e-12 * abs(M).max()

    S0 = spectral_weight(spec, ls, chi_nodal=np.ones(space.num_nodes))
    assert abs(S0).max() <= 1e-14 * abs(M).max()
