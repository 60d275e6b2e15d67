import math

import numpy as np
import pytest
from scipy.integrate import quad

from heatpot.errors import InvalidArgument
from heatpot.problems import (
    builtin_problem, inclusion_curves, orbit_centers, orbiting_reference,
)


def image_sum(x, c, delta, images):
    tot = 0.0
    for i in range(-images, images + 1):
        for j in range(-images, images + 1):
            tot += math.exp(-((x[0] - c[0] - i) ** 2 + (x[1] - c[1] - j) ** 2) / delta)
    return tot


def test_orbiting_forcing_at_first_center():
    df = 1e-2
    pr = builtin_problem("orbiting_gaussians", delta_f=df)
    c1, c2 = (0.25, 0.0), (-0.25, 0.0)
    assert np.allclose(orbit_centers(0.0), (c1, c2), atol=1e-15)
    got = float(pr.forcing(0.0, np.array(c1[0]), np.array(c1[1]), 0.0))
    expect = image_sum(c1, c1, df, 2) - 0.5 * image_sum(c1, c2, df, 2)
    assert got == pytest.approx(expect, rel=1e-14)
    # image tails are of the same size as the second term here
    assert got == pytest.approx(1 - 0.5 * math.exp(-0.25 / df), abs=1e-10)


def test_orbiting_reference_duhamel():
    df, T = 1e-2, 0.02
    pr = builtin_problem("orbiting_gaussians", delta_f=df)
    x = (0.2, 0.1)

    # heat flow of the forcing slice at s, evaluated at T, by direct image sums
    def slab(s):
        d = df + 4 * (T - s)
        c1, c2 = orbit_centers(s)
        return df / d * (image_sum(x, c1, d, 2) - 0.5 * image_sum(x, c2, d, 2))
    ref = quad(slab, 0, T, epsabs=1e-15, epsrel=1e-13, limit=200)[0]
    got = float(orbiting_reference(np.array(x[0]), np.array(x[1]), T, df))
    assert got == pytest.approx(ref, rel=1e-12)
    assert pr.u0(np.zeros(3), np.zeros(3)).tolist() == [0.0, 0.0, 0.0]


def test_manufactured_initial_data():
    pr = builtin_problem("manufactured")
    x1, x2 = np.meshgrid(np.linspace(-0.5, 0.5, 9), np.linspace(-0.5, 0.5, 9))
    expect = (np.sin(2 * np.pi * x1) * np.cos(2 * np.pi * x2)
              + np.cos(2 * np.pi * x1) * np.sin(2 * np.pi * x2))
    assert np.abs(pr.u0(x1, x2) - expect).max() <= 1e-15


def test_manufactured_forcing_is_residual():
    # for u = f the forcing must equal f_t - lap f; check by central differences
    pr = builtin_problem("manufactured")
    f = pr.exact
    x1, x2, t, h = 0.13, -0.21, 0.07, 1e-3
    ft = (f(x1, x2, t + h) - f(x1, x2, t - h)) / (2 * h)
    lap = (f(x1 + h, x2, t) + f(x1 - h, x2, t) + f(x1, x2 + h, t) + f(x1, x2 - h, t)
           - 4 * f(x1, x2, t)) / h ** 2
    u = f(x1, x2, t)
    assert pr.forcing(u, x1, x2, t) == pytest.approx(ft - lap, abs=2e-3)
    assert pr.forcing(u + 0.5, x1, x2, t) - pr.forcing(u, x1, x2, t) == pytest.approx(
        (u + 0.5) ** 2 - u ** 2, rel=1e-12)


def test_fujita_initial_max():
    pr = builtin_problem("fujita")
    series = 5 * image_sum((0.0, 0.0), (0.0, 0.0), 0.1, 4)
    at0 = float(pr.u0(np.array(0.0), np.array(0.0)))
    assert at0 == pytest.approx(series, rel=1e-14)
    g = np.linspace(-0.5, 0.5, 101)
    x1, x2 = np.meshgrid(g, g)
    assert pr.u0(x1, x2).max() == pytest.approx(at0, rel=1e-15)
    assert at0 > 5.0
    assert pr.forcing(np.array(3.0), 0.0, 0.0, 0.0) == 9.0


def test_inclusions_geometry_and_compatibility():
    curves = inclusion_curves()
    assert len(curves) == 8
    pr = builtin_problem("inclusions")
    fr = pr.boundary.frame(0.0)
    x = fr.nodes
    assert np.abs(x).max() < 0.5
    # distinct curves stay apart
    for a in range(len(curves)):
        for b in range(a + 1, len(curves)):
            d = np.linalg.norm(x[fr.curve_id == a].reshape(-1, 1, 2)
                               - x[fr.curve_id == b].reshape(1, -1, 2), axis=-1)
            assert d.min() > 0.05
    nodes = fr.flat("nodes")
    gap = np.abs(pr.data(nodes[:, 0], nodes[:, 1], 0.0) - pr.u0(nodes[:, 0], nodes[:, 1]))
    assert gap.max() <= 1e-12
    assert pr.exterior and pr.periodic


def test_unknown_problem():
    with pytest.raises(InvalidArgument):
        builtin_problem("burgers")
