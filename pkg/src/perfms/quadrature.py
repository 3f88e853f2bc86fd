"""Quadrature rules on the reference triangle and on edges.

Barycentric points are returned as (npts, 3) arrays; weights sum to one and
are scaled by the physical element area at assembly time.
"""

import numpy as np

# 3-point interior rule, exact for degree 2.
_DEG2_BARY = np.array([
    [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0],
    [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0],
    [1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0],
])
_DEG2_W = np.full(3, 1.0 / 3.0)

# Dunavant 6-point rule, exact for degree 4.
_A1, _B1 = 0.108103018168070, 0.445948490915965
_A2, _B2 = 0.816847572980459, 0.091576213509771
_DEG4_BARY = np.array([
    [_A1, _B1, _B1],
    [_B1, _A1, _B1],
    [_B1, _B1, _A1],
    [_A2, _B2, _B2],
    [_B2, _A2, _B2],
    [_B2, _B2, _A2],
])
_DEG4_W = np.array([0.223381589678011] * 3 + [0.109951743655322] * 3)


def triangle_rule(degree):
    """Return (bary, weights) exact for polynomials of the given degree.

    Degrees up to 2 get the 3-point rule, up to 4 the Dunavant 6-point rule.
    """
    if degree <= 2:
        return _DEG2_BARY, _DEG2_W
    if degree <= 4:
        return _DEG4_BARY, _DEG4_W
    raise ValueError("no rule of degree %d" % degree)


def edge_simpson(values_a, values_mid, values_b, length):
    """Simpson integral along a straight edge; exact for quadratic traces."""
    return (length / 6.0) * (values_a + 4.0 * values_mid + values_b)
