"""Operator descriptions: scalar diffusion, linear elasticity, Stokes flow.

Boundary conditions are encoded per outer side and per component as either
("fixed", value) or "free"; perforation boundaries are "fixed" (zero) or
"free". The multiscale pipeline requires fixed holes; "free" holes are only
supported by the plain fine solver for the scalar operator.
"""

from dataclasses import dataclass, field

KINDS = ("laplace", "elasticity", "stokes")
SIDES = ("left", "right", "bottom", "top")


class OperatorError(ValueError):
    pass


def _norm_bc(bc, ncomp):
    out = []
    for comp in bc:
        if comp == "free":
            out.append("free")
        elif isinstance(comp, (tuple, list)) and comp[0] == "fixed":
            out.append(("fixed", float(comp[1])))
        elif comp == "fixed":
            out.append(("fixed", 0.0))
        else:
            raise OperatorError("bad component bc %r" % (comp,))
    if len(out) != ncomp:
        raise OperatorError("expected %d component bcs, got %r" % (ncomp, bc))
    return tuple(out)


@dataclass(frozen=True)
class OperatorSpec:
    """What to solve: operator kind, material constants, forcing, BCs.

    f is a constant (scalar or 2-vector) or a callable f(x, y) returning one.
    """

    kind: str
    f: object
    E: float = 0.0
    nu: float = 0.0
    outer_bc: dict = field(default_factory=dict)
    perforation_bc: str = "fixed"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise OperatorError("unknown operator kind %r" % self.kind)
        if self.kind == "elasticity" and not (0.0 < self.nu < 0.5):
            raise OperatorError("Poisson ratio must be in (0, 0.5), got %g" % self.nu)
        if self.perforation_bc not in ("fixed", "free"):
            raise OperatorError("perforation_bc must be fixed or free")
        if self.perforation_bc == "free" and self.kind != "laplace":
            raise OperatorError("free perforations only supported for laplace")
        bc = {side: _norm_bc(self.outer_bc.get(side, ("free",) * self.ncomp), self.ncomp)
              for side in SIDES}
        object.__setattr__(self, "outer_bc", bc)

    @property
    def ncomp(self):
        return 1 if self.kind == "laplace" else 2

    @property
    def mu(self):
        return self.E / (2.0 * (1.0 + self.nu))

    @property
    def xi(self):
        return self.E * self.nu / ((1.0 + self.nu) * (1.0 - 2.0 * self.nu))

    def f_at(self, xy):
        """Evaluate the forcing at points xy (npts, 2) -> (npts, ncomp)."""
        import numpy as np
        if callable(self.f):
            vals = np.asarray([self.f(x, y) for x, y in xy], dtype=float)
            return vals.reshape(len(xy), self.ncomp)
        vals = np.broadcast_to(np.atleast_1d(np.asarray(self.f, dtype=float)),
                               (len(xy), self.ncomp))
        return vals

    @staticmethod
    def laplace(f=1.0, outer="fixed", perforation="fixed"):
        bc = {side: (outer,) for side in SIDES}
        return OperatorSpec(kind="laplace", f=f, outer_bc=bc,
                            perforation_bc=perforation)

    @staticmethod
    def elasticity(E=1.0e9, nu=0.22, f=(1.0e7, 1.0e7)):
        # Rollers: normal displacement fixed on the left and bottom sides,
        # traction-free right and top, fully clamped holes.
        bc = {
            "left": ("fixed", "free"),
            "bottom": ("free", "fixed"),
            "right": ("free", "free"),
            "top": ("free", "free"),
        }
        return OperatorSpec(kind="elasticity", f=f, E=E, nu=nu, outer_bc=bc)

    @staticmethod
    def stokes(f=(1.0, 1.0)):
        bc = {side: ("free", "free") for side in SIDES}
        return OperatorSpec(kind="stokes", f=f, outer_bc=bc)
