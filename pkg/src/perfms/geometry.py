"""Perforated domain descriptions: a rectangular box minus circular inclusions.

A geometry is purely analytic; meshes are built from it by
:func:`perfms.meshing.build_coarse_grid` and :func:`perfms.meshing.refine_to_fine`.
"""

from dataclasses import dataclass

import numpy as np


class GeometryError(ValueError):
    """Raised when a perforation layout is inconsistent."""


@dataclass(frozen=True)
class Circle:
    """A circular inclusion with center (cx, cy) and radius r > 0."""

    cx: float
    cy: float
    r: float

    def signed_distance(self, x, y):
        """Distance to the circle, negative inside the disk."""
        return np.hypot(np.asarray(x) - self.cx, np.asarray(y) - self.cy) - self.r


@dataclass(frozen=True)
class PerforatedGeometry:
    """An axis-aligned box with disjoint circular holes strictly inside it.

    Attributes
    ----------
    inclusions : tuple of Circle
        Perforations; pairwise disjoint with positive gaps.
    box : tuple
        (x0, y0, x1, y1) of the outer rectangle.
    label : str
        Human-readable name, used in reports and cache keys.
    """

    inclusions: tuple
    box: tuple = (0.0, 0.0, 1.0, 1.0)
    label: str = ""

    def validate(self):
        x0, y0, x1, y1 = self.box
        if not (x1 > x0 and y1 > y0):
            raise GeometryError("outer box is degenerate: %r" % (self.box,))
        for k, c in enumerate(self.inclusions):
            if c.r <= 0.0:
                raise GeometryError("inclusion %d has non-positive radius %g" % (k, c.r))
            if not (x0 < c.cx - c.r and c.cx + c.r < x1
                    and y0 < c.cy - c.r and c.cy + c.r < y1):
                raise GeometryError(
                    "inclusion %d (center (%g, %g), r=%g) is not strictly inside the box"
                    % (k, c.cx, c.cy, c.r))
        for i in range(len(self.inclusions)):
            for j in range(i + 1, len(self.inclusions)):
                a, b = self.inclusions[i], self.inclusions[j]
                gap = np.hypot(a.cx - b.cx, a.cy - b.cy) - a.r - b.r
                if gap <= 0.0:
                    raise GeometryError(
                        "inclusions %d and %d overlap or touch (gap %g)" % (i, j, gap))
        return self


def _small_inclusions():
    # 16 circles near the centers of 16 cells of the 5x5 coarse layout (the
    # middle row/column left open). Cell-centered circles straddle the cell
    # diagonal symmetrically and stay clear of the legs, so they never cut a
    # coarse triangle into pieces. Radii < 0.1, below H for n_per_side <= 10.
    rng = np.random.default_rng(1234)
    circles = []
    for j in (0, 1, 3, 4):
        for i in (0, 1, 3, 4):
            cx = 0.1 + 0.2 * i + rng.uniform(-0.015, 0.015)
            cy = 0.1 + 0.2 * j + rng.uniform(-0.015, 0.015)
            r = rng.uniform(0.035, 0.050)
            circles.append(Circle(round(cx, 6), round(cy, 6), round(r, 6)))
    return tuple(circles)


def _big_inclusions():
    # A few large holes centered on coarse nodes of the 5x5 layout (corner
    # bites keep every coarse triangle connected), plus small cell-centered
    # satellites.
    return (
        Circle(0.40, 0.60, 0.13),
        Circle(0.80, 0.40, 0.12),
        Circle(0.60, 0.80, 0.10),
        Circle(0.30, 0.30, 0.032),
        Circle(0.10, 0.70, 0.032),
        Circle(0.50, 0.30, 0.032),
    )


BUILTIN_GEOMETRIES = {
    "empty": lambda: (),
    "small-inclusions": _small_inclusions,
    "big-inclusions": _big_inclusions,
}


def build_geometry(layout, label=None):
    """Construct and validate a geometry.

    Parameters
    ----------
    layout : str or iterable
        A built-in name (``empty``, ``small-inclusions``, ``big-inclusions``)
        or an iterable of (cx, cy, r) triples.
    label : str, optional
        Overrides the stored label.
    """
    if isinstance(layout, str):
        try:
            circles = BUILTIN_GEOMETRIES[layout]()
        except KeyError:
            raise GeometryError("unknown geometry %r (built-ins: %s)"
                                % (layout, ", ".join(sorted(BUILTIN_GEOMETRIES))))
        name = layout
    else:
        circles = tuple(Circle(float(cx), float(cy), float(r)) for cx, cy, r in layout)
        name = "custom"
    geom = PerforatedGeometry(inclusions=circles, label=label or name)
    return geom.validate()
