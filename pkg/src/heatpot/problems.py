"""Built-in problem definitions for the experiment driver.

All periodic problems live on the box ``[-0.5, 0.5]^2``; lattice sums are
truncated to the stated image radius.
"""

import math

import numpy as np

from .boundary import Boundary, Curve
from .errors import InvalidArgument
from .solvers import BvpProblem, PeriodicProblem

TWO_PI = 2.0 * math.pi


def lattice_gaussian(x1, x2, c, delta, images):
    """``sum_{|j|_inf <= images} exp(-|x - c - j|^2 / delta)``."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    out = np.zeros(np.broadcast_shapes(x1.shape, x2.shape))
    # 1D factors: the sum separates over the two coordinates
    j = np.arange(-images, images + 1)
    g1 = np.exp(-((x1[..., None] - c[0] - j) ** 2) / delta).sum(-1)
    g2 = np.exp(-((x2[..., None] - c[1] - j) ** 2) / delta).sum(-1)
    out += g1 * g2
    return out


def orbit_centers(t):
    """Centers of the two orbiting Gaussians at time ``t``."""
    c1 = (0.25 * math.cos(20 * math.pi * t), 0.25 * math.sin(20 * math.pi * t))
    c2 = (0.25 * math.cos(40 * math.pi * t + math.pi), 0.25 * math.sin(40 * math.pi * t + math.pi))
    return c1, c2


def orbiting_forcing(delta_f, images=2):
    """Forcing of two Gaussians moving on a circle at different speeds.

    ``F = G_1 - 0.5 G_2`` with ``G_i`` a periodized Gaussian of width
    parameter ``delta_f`` centered at the orbit points.
    """
    if delta_f <= 0:
        raise InvalidArgument("delta_f must be positive")

    def F(u, x1, x2, t):
        c1, c2 = orbit_centers(t)
        return (lattice_gaussian(x1, x2, c1, delta_f, images)
                - 0.5 * lattice_gaussian(x1, x2, c2, delta_f, images))
    return F


def orbiting_reference(x1, x2, T, delta_f, images=2, panels=64, order=16):
    """Exact solution at time ``T`` of the orbiting-Gaussian problem with zero data.

    Heat flow maps ``exp(-|x|^2/d)`` to ``d/(d + 4 tau) exp(-|x|^2/(d + 4 tau))``,
    so the Duhamel integral is a smooth 1D integral in time, done by
    composite Gauss-Legendre.
    """
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    g, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(0.0, T, panels + 1)
    out = np.zeros(np.broadcast_shapes(x1.shape, x2.shape))
    for a, b in zip(edges[:-1], edges[1:]):
        for gj, wj in zip(g, w):
            s = 0.5 * (a + b) + 0.5 * (b - a) * gj
            d = delta_f + 4.0 * (T - s)
            c1, c2 = orbit_centers(s)
            val = (lattice_gaussian(x1, x2, c1, d, images)
                   - 0.5 * lattice_gaussian(x1, x2, c2, d, images))
            out += (0.5 * (b - a) * wj * delta_f / d) * val
    return out


def manufactured_exact(x1, x2, t):
    """``sin(2 pi x1) cos(2 pi x2) e^-t + cos(2 pi x1) sin(2 pi x2) e^-3t``."""
    return (np.sin(TWO_PI * x1) * np.cos(TWO_PI * x2) * math.exp(-t)
            + np.cos(TWO_PI * x1) * np.sin(TWO_PI * x2) * math.exp(-3.0 * t))


def manufactured_forcing(u, x1, x2, t):
    """``u^2 - f^2 + f_t - lap f`` for :func:`manufactured_exact`."""
    a = np.sin(TWO_PI * x1) * np.cos(TWO_PI * x2)
    b = np.cos(TWO_PI * x1) * np.sin(TWO_PI * x2)
    ea, eb = math.exp(-t), math.exp(-3.0 * t)
    f = a * ea + b * eb
    f_t = -a * ea - 3.0 * b * eb
    lap = -8.0 * math.pi ** 2 * f
    return u * u - f * f + f_t - lap


def fujita_initial(x1, x2, amplitude=5.0, width=0.1, images=4):
    """Periodized Gaussian ``amplitude * sum_j exp(-|x - j|^2 / width)``."""
    return amplitude * lattice_gaussian(x1, x2, (0.0, 0.0), width, images)


def power_forcing(p):
    def F(u, x1, x2, t):
        return u ** p
    return F


def inclusion_curves(panels=16):
    """Eight stationary closed curves in the periodic box.

    Curves sit on the 3x3 lattice of spacing 0.3 with the middle site left
    free; shapes alternate between circles, ellipses and star shapes.
    """
    sites = [(i * 0.3, j * 0.3) for j in (-1, 0, 1) for i in (-1, 0, 1) if i or j]
    curves = []
    for n, c in enumerate(sites):
        if n % 3 == 0:
            curves.append(Curve("circle", c, radius=0.08, panels=panels))
        elif n % 3 == 1:
            curves.append(Curve("ellipse", c, axes=(0.1, 0.06), angle=0.4 * n, panels=panels))
        else:
            curves.append(Curve("fourier", c, cos_coeffs=(0.08, 0.0, 0.0, 0.0, 0.0, 0.015),
                                panels=panels))
    return curves


def inscribed_radius(curve):
    th = np.linspace(0.0, TWO_PI, 721)
    return float(np.linalg.norm(curve.position(th) - np.asarray(curve.center), axis=-1).min())


def inclusion_data(curves, rate=8.0 * math.pi ** 2):
    """Boundary data and initial data for the inclusion problem.

    The exact solution ``sin(2 pi x1) cos(2 pi x2) e^{-rate t}`` is used on
    the boundary.  Inside each curve the initial data is damped by a
    Gaussian of width ``R/6`` (``R`` the inscribed radius), which is below
    round-off on the curve, so the density is not identically zero.
    """
    holes = [(np.asarray(c.center), inscribed_radius(c) / 6.0) for c in curves]

    def exact(x1, x2, t):
        return np.sin(TWO_PI * x1) * np.cos(TWO_PI * x2) * math.exp(-rate * t)

    def data(x1, x2, t):
        return exact(x1, x2, t)

    def u0(x1, x2):
        damp = np.ones(np.broadcast_shapes(np.shape(x1), np.shape(x2)))
        for c, s in holes:
            damp = damp - np.exp(-((x1 - c[0]) ** 2 + (x2 - c[1]) ** 2) / (s * s))
        return exact(x1, x2, 0.0) * damp

    return data, u0, exact


PROBLEMS = ("orbiting_gaussians", "manufactured", "fujita", "inclusions")


def builtin_problem(name, **params):
    """Problem definition by name.

    Parameters
    ----------
    name : {"orbiting_gaussians", "manufactured", "fujita", "inclusions"}
    **params
        ``delta_f`` (orbiting_gaussians), ``p`` (fujita), ``panels``
        (inclusions).

    Returns
    -------
    PeriodicProblem or BvpProblem
        ``inclusions`` returns a BvpProblem whose ``u0`` is the callable
        initial data; callers sample it on a tree.
    """
    if name == "orbiting_gaussians":
        F = orbiting_forcing(params.get("delta_f", 0.01), params.get("images", 2))
        return PeriodicProblem(lambda a, b: np.zeros(np.broadcast_shapes(np.shape(a),
                                                                         np.shape(b))),
                               F, None, name=name)
    if name == "manufactured":
        return PeriodicProblem(lambda a, b: manufactured_exact(a, b, 0.0),
                               manufactured_forcing, manufactured_exact, name=name)
    if name == "fujita":
        p = params.get("p", 2)
        return PeriodicProblem(fujita_initial, power_forcing(p), None, name=name)
    if name == "inclusions":
        curves = inclusion_curves(params.get("panels", 16))
        data, u0, exact = inclusion_data(curves)
        bd = Boundary(curves, k=16)
        return BvpProblem(bd, data, u0=u0, exterior=True, periodic=True, exact=exact,
                          name=name)
    raise InvalidArgument(f"unknown problem {name!r}; choose from {', '.join(PROBLEMS)}")
