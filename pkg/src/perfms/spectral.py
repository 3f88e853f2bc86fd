"""Local generalized eigenproblems over snapshot columns.

The pencil is (Z^T A Z) Psi = lambda (Z^T S Z) Psi with Z the snapshot
columns, A the local operator energy and S a weighted mass: plain mass for
the scalar operator, (xi + 2 mu)-scaled mass for elasticity, and the
|grad chi_i|^2-weighted velocity mass for Stokes. Near-dependent snapshot
directions are deflated out of S before inversion.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh

from .assembly import (TriGeometry, gradsq_weight_p2, mass_p1, mass_p2,
                       vector_expand)

DEFLATION_RTOL = 1e-12


class SpectralError(RuntimeError):
    pass


@dataclass
class SpectralDecomposition:
    """Eigenpairs of one neighborhood, in snapshot coordinates."""

    nb: object
    A_off: np.ndarray
    S_off: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # (ncols, nkept), S-orthonormal columns
    deflated: int
    meta: dict = field(default_factory=dict)

    @property
    def num_modes(self):
        return len(self.eigenvalues)


def spectral_weight(spec, ls, chi_nodal=None):
    """Assemble the weighted mass S on a local patch.

    chi_nodal: global nodal values of the anchor's partition function,
    required for Stokes (the |grad chi|^2 weight).
    """
    geom = TriGeometry(ls.verts_xy, ls.tris_l)
    if spec.kind == "laplace":
        return mass_p1(geom, ls.tri_nodes_l, ls.num_nodes)
    if spec.kind == "elasticity":
        M = mass_p1(geom, ls.tri_nodes_l, ls.num_nodes)
        return vector_expand((spec.xi + 2.0 * spec.mu) * M, 2)
    if chi_nodal is None:
        raise ValueError("stokes spectral weight needs chi_nodal")
    chi_l = np.asarray(chi_nodal)[ls.l2g_nodes]
    w = gradsq_weight_p2(geom, ls.tri_nodes_l, chi_l)
    return vector_expand(mass_p2(geom, ls.tri_nodes_l, ls.num_nodes,
                                 qp_weight=w), 2)


def local_gevp(nb, columns, A_loc, S_loc):
    """Solve the snapshot-coordinate pencil; ascending, S-orthonormal.

    columns: (local ndof, ncols) snapshot matrix Z.
    """
    Z = np.asarray(columns)
    AZ = A_loc @ Z
    SZ = S_loc @ Z
    Ag = Z.T @ AZ
    Sg = Z.T @ SZ
    Ag = 0.5 * (Ag + Ag.T)
    Sg = 0.5 * (Sg + Sg.T)
    s, U = eigh(Sg)
    tol = DEFLATION_RTOL * max(np.trace(Sg), 0.0)
    keep = s > tol
    if not keep.any():
        raise SpectralError(
            "weighted mass numerically singular: rank 0 of %d snapshot "
            "columns (trace %.3e)" % (Z.shape[1], np.trace(Sg)))
    W = U[:, keep] / np.sqrt(s[keep])
    Ahat = W.T @ Ag @ W
    Ahat = 0.5 * (Ahat + Ahat.T)
    lam, V = eigh(Ahat)
    Psi = W @ V
    scale = np.abs(Ag).max() + np.abs(lam).max() * np.abs(Sg).max()
    resid = Ag @ Psi - Sg @ Psi * lam[None, :]
    worst = np.abs(resid).max()
    if worst > 1e-8 * max(scale, 1e-30):
        raise SpectralError("eigen residual %.3e exceeds tolerance "
                            "(scale %.3e)" % (worst, scale))
    # A hole-free patch carries exact zero-energy translations; roundoff
    # must not leak a negative eigenvalue into 1/lambda indicators.
    lam = np.maximum(lam, 0.0)
    return SpectralDecomposition(
        nb=nb, A_off=Ag, S_off=Sg, eigenvalues=lam, eigenvectors=Psi,
        deflated=int((~keep).sum()))
