"""Quick oracle and property checks behind ``heatpot verify``."""

import math

import numpy as np

from .fgt import fgt_apply, make_plan
from .potentials import initial_potential
from .solvers import AmScheme, PeriodicProblem, am_solve, secant_solve
from .treegrid import GridFunction, QuadTree, build_resolving_tree, is_balanced


def _direct(y, q, x, delta, images=0):
    out = np.zeros(len(x))
    for a in range(-images, images + 1):
        for b in range(-images, images + 1):
            d2 = ((x[:, None, :] - y[None, :, :] - (a, b)) ** 2).sum(-1)
            out += np.exp(-d2 / delta) @ q
    return out


def check_fgt_direct(rng):
    root = QuadTree.root((0.0, 0.0), 0.5, 8)
    y = rng.uniform(-0.5, 0.5, (800, 2))
    q = rng.uniform(-1, 1, 800)
    x = rng.uniform(-0.5, 0.5, (200, 2))
    worst = 0.0
    for delta in (1e-4, 1e-2, 1.0):
        _, v = fgt_apply(make_plan(root, delta, 1e-9), charges=y, strengths=q, points=x)
        worst = max(worst, np.abs(v - _direct(y, q, x, delta)).max() / np.abs(q).sum())
    return worst <= 1e-9, f"max error / Q = {worst:.2e}"


def check_periodic_images(rng):
    root = QuadTree.root((0.0, 0.0), 0.5, 8, periodic=True)
    y = rng.uniform(-0.5, 0.5, (300, 2))
    q = rng.uniform(-1, 1, 300)
    x = rng.uniform(-0.5, 0.5, (100, 2))
    worst = 0.0
    for delta in (1e-3, 0.05, 0.3):
        _, v = fgt_apply(make_plan(root, delta, 1e-11), charges=y, strengths=q, points=x)
        worst = max(worst, np.abs(v - _direct(y, q, x, delta, images=5)).max())
    return worst <= 1e-9, f"max deviation from 11x11 image sum = {worst:.2e}"


def check_constant_exactness(rng):
    tree, _ = build_resolving_tree(lambda a, b: 0 * a + 1.0, 1e-12, k=8, periodic=True)
    c = float(rng.uniform(0.5, 2.0))
    gf = GridFunction(tree, np.full((len(tree.active), 8, 8), c))
    delta = 0.02
    g, _ = fgt_apply(make_plan(tree, delta, 1e-12), density=gf)
    err = np.abs(g.values - c * math.pi * delta).max()
    return err <= 1e-10 * c, f"constant input error = {err:.2e}"


def check_semigroup(rng):
    c = rng.uniform(-0.2, 0.2, 2)
    f = lambda a, b: np.exp(-((a - c[0]) ** 2 + (b - c[1]) ** 2) / 0.01)
    tree, gf = build_resolving_tree(f, 1e-10, k=8, periodic=True)
    t1, t2 = 0.002, 0.003
    two = initial_potential(initial_potential(gf, t1, 1e-12), t2, 1e-12)
    one = initial_potential(gf, t1 + t2, 1e-12)
    err = (two - one).max_abs() / one.max_abs()
    return err <= 1e-8, f"relative semigroup defect = {err:.2e}"


def check_secant(rng):
    F = lambda u, x1, x2, t: u * u
    u = secant_solve(1.0, 0.1, F, np.zeros(2), 0.0, 1.0, 1.1)
    exact = (1.0 - math.sqrt(1.0 - 0.4)) / 0.2
    err = abs(u - exact)
    return err <= 1e-12, f"root error = {err:.2e}"


def check_am2_linear_ode(rng):
    lam = -2.0
    pr = PeriodicProblem(lambda a, b: 1.0 + 0 * a, lambda u, a, b, t: lam * u)
    dt, n = 0.01, 20
    st = am_solve(pr, AmScheme(2), dt, n, eps=1e-10, adapt=False)
    exact = ((1 + lam * dt / 2) / (1 - lam * dt / 2)) ** n
    err = float(np.abs(st.u.values - exact).max())
    return err <= 1e-12, f"deviation from trapezoidal iterate = {err:.2e}"


def check_balance(rng):
    c = rng.uniform(-0.3, 0.3, 2)
    f = lambda a, b: np.exp(-((a - c[0]) ** 2 + (b - c[1]) ** 2) / 1e-3)
    tree, _ = build_resolving_tree(f, 1e-8, k=8)
    area = float(np.sum(tree.side(tree.level[tree.leaves]) ** 2))
    ok = is_balanced(tree) and abs(area - 1.0) < 1e-12
    return ok, f"balanced={is_balanced(tree)} leaf area={area:.15f}"


CHECKS = (check_fgt_direct, check_periodic_images, check_constant_exactness,
          check_semigroup, check_secant, check_am2_linear_ode, check_balance)


def run_checks(seed=0, stream=print):
    rng = np.random.default_rng(seed)
    ok_all = True
    for chk in CHECKS:
        try:
            ok, msg = chk(rng)
        except Exception as exc:  # report and continue with the other checks
            ok, msg = False, f"{type(exc).__name__}: {exc}"
        ok_all &= bool(ok)
        stream(f"{'PASS' if ok else 'FAIL'} {chk.__name__[6:]}: {msg}")
    return ok_all
