"""Exact face enumeration for small central hyperplane arrangements.

Everything here runs on Python integers.  Real inputs are converted with
:class:`fractions.Fraction` (exact for binary floats) and every normal is
scaled to a primitive integer vector, which preserves all signs.

For a central arrangement in ``R^k`` (``k <= 3``) :func:`face_points`
returns integer points, at least one in the relative interior of every
face, so evaluating ``1{z . u >= 0}`` at those points yields every
realizable sign pattern, including those realized only on lower-dimensional
faces.
"""

from __future__ import annotations

import math
from fractions import Fraction
from functools import cmp_to_key

import numpy as np

MAX_DIM = 3


class BudgetExceeded(ValueError):
    pass


def to_integer_rows(Z) -> list:
    """Rows of ``Z`` as primitive integer tuples with the same signs."""
    out = []
    for row in np.asarray(Z, dtype=np.float64):
        fr = [Fraction(float(v)) for v in row]
        if not all(math.isfinite(float(v)) for v in row):
            raise ValueError("non-finite arrangement entry")
        out.append(primitive(fr))
    return out


def primitive(vec) -> tuple:
    """Scale a rational vector by a positive factor to a primitive integer vector."""
    fr = [Fraction(v) for v in vec]
    den = 1
    for v in fr:
        den = den * v.denominator // math.gcd(den, v.denominator)
    ints = [int(v * den) for v in fr]
    g = 0
    for v in ints:
        g = math.gcd(g, abs(v))
    if g > 1:
        ints = [v // g for v in ints]
    return tuple(ints)


def _dot(a, b) -> int:
    return sum(x * y for x, y in zip(a, b))


def _cross(a, b) -> tuple:
    return (a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0])


def _neg(a) -> tuple:
    return tuple(-x for x in a)


def _add(a, b) -> tuple:
    return tuple(x + y for x, y in zip(a, b))


def _scale(c, a) -> tuple:
    return tuple(c * x for x in a)


def _plane_key(z) -> tuple:
    """Canonical representative of the hyperplane ``z . u = 0``."""
    z = primitive(z)
    for v in z:
        if v:
            return z if v > 0 else _neg(z)
    return z


def _ray_key(r) -> tuple:
    return primitive(r)


def _angular_sort(rays, coords):
    """Sort rays counter-clockwise given exact 2D coordinates ``coords[r]``."""

    def half(c):
        x, y = c
        return 0 if (y > 0 or (y == 0 and x > 0)) else 1

    def cmp(a, b):
        ca, cb = coords[a], coords[b]
        ha, hb = half(ca), half(cb)
        if ha != hb:
            return ha - hb
        cr = ca[0] * cb[1] - ca[1] * cb[0]
        return -1 if cr > 0 else (1 if cr < 0 else 0)

    return sorted(rays, key=cmp_to_key(cmp))


def _faces_2d(planes) -> list:
    if not planes:
        return [(0, 0), (1, 0)]
    rays = set()
    for z in planes:
        r = _ray_key((-z[1], z[0]))
        rays.add(r)
        rays.add(_neg(r))
    order = _angular_sort(list(rays), {r: r for r in rays})
    points = [(0, 0)] + order
    for a, b in zip(order, order[1:] + order[:1]):
        cr = a[0] * b[1] - a[1] * b[0]
        points.append(_add(a, b) if cr > 0 else (-a[1], a[0]))
    return points


def _faces_3d(planes) -> list:
    if not planes:
        return [(0, 0, 0), (1, 0, 0)]
    points = [(0, 0, 0)]
    rays = set()
    for i in range(len(planes)):
        for j in range(i + 1, len(planes)):
            c = _cross(planes[i], planes[j])
            if any(c):
                c = _ray_key(c)
                rays.add(c)
                rays.add(_neg(c))
    points.extend(rays)
    for z in planes:
        on = [r for r in rays if _dot(z, r) == 0]
        if not on:
            basis = (1, 0, 0) if (z[1] or z[2]) else (0, 1, 0)
            v1 = _cross(z, basis)
            points.extend([v1, _neg(v1), z, _neg(z)])
            continue
        b1 = on[0]
        b2 = _cross(z, b1)
        coords = {r: (_dot(r, b1), _dot(r, b2)) for r in on}
        order = _angular_sort(on, coords)
        for a, b in zip(order, order[1:] + order[:1]):
            ca, cb = coords[a], coords[b]
            cr = ca[0] * cb[1] - ca[1] * cb[0]
            mid = _add(a, b) if cr > 0 else _cross(z, a)
            points.append(mid)
            # step off the plane without crossing any other plane
            big = 0
            for zj in planes:
                dm = _dot(zj, mid)
                if dm:
                    big = max(big, abs(_dot(zj, z)) // abs(dm))
            N = big + 1
            points.append(_add(_scale(N, mid), z))
            points.append(_add(_scale(N, mid), _neg(z)))
    return points


def face_points(normals, k: int) -> list:
    """Integer points covering every face of the arrangement ``{z . u = 0}``."""
    if k > MAX_DIM:
        raise BudgetExceeded("exact enumeration out of budget")
    planes = sorted({_plane_key(z) for z in normals if any(z)})
    if k == 1:
        return [(-1,), (0,), (1,)]
    if k == 2:
        return _faces_2d(planes)
    return _faces_3d(planes)


def sign_patterns(normals, points) -> np.ndarray:
    """Boolean matrix ``[point, normal] = 1{z . u >= 0}`` in exact arithmetic."""
    out = np.empty((len(points), len(normals)), dtype=bool)
    for a, u in enumerate(points):
        for b, z in enumerate(normals):
            out[a, b] = _dot(z, u) >= 0
    return out


def exact_enumerate_arrangement(Z, n_max: int = 12) -> set:
    """All realizable patterns ``1{Z u >= 0}`` for ``u`` in ``R^d``."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    n, d = Z.shape
    if n > n_max or d > MAX_DIM:
        raise BudgetExceeded("exact enumeration out of budget")
    normals = to_integer_rows(Z)
    pats = sign_patterns(normals, face_points(normals, d))
    return {tuple(int(v) for v in row) for row in pats}
