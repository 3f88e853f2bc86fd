"""Multiscale finite element toolkit for PDEs in perforated 2-D domains."""

__version__ = "0.1.0"

from .geometry import Circle, PerforatedGeometry, GeometryError, build_geometry
from .meshing import (CoarseGrid, FineMesh, MeshError, build_coarse_grid,
                      refine_to_fine, read_mesh, write_mesh)

__all__ = [
    "Circle", "PerforatedGeometry", "GeometryError", "build_geometry",
    "CoarseGrid", "FineMesh", "MeshError", "build_coarse_grid",
    "refine_to_fine", "read_mesh", "write_mesh",
]
