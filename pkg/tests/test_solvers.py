import math
from fractions import Fraction

import numpy as np
import pytest
from scipy.integrate import quad

from heatpot.boundary import Boundary, Curve
from heatpot.errors import InvalidArgument, InvalidState, OutOfDomain, StepFailure
from heatpot.potentials import initial_potential
from heatpot.problems import builtin_problem
from heatpot.solvers import (
    AmScheme, BvpProblem, PeriodicProblem, SolverState, am_solve, am_step, dirichlet_march,
    evaluate_solution, relative_l2_error, richardson_bootstrap, secant_solve, spatial_adapt,
)
from heatpot.treegrid import GridFunction, QuadTree, balance, build_resolving_tree, check_points

XS = np.array([0.8, 0.0])


def source_solution(x1, x2, t):
    """Free-space heat solution from a point source outside the unit-half circle."""
    if t <= 0:
        return 0 * x1
    return np.exp(-((x1 - XS[0]) ** 2 + (x2 - XS[1]) ** 2) / (4 * t)) / (4 * math.pi * t)


def half_circle(panels=16):
    return Boundary([Curve("circle", (0, 0), radius=0.5, panels=panels)], k=16)


def interior_targets(count=10, seed=0, rmax=0.45):
    rng = np.random.default_rng(seed)
    r = rmax * np.sqrt(rng.random(count))
    th = 2 * np.pi * rng.random(count)
    return np.stack([r * np.cos(th), r * np.sin(th)], -1)


def bisect(f, lo, hi, tol=1e-15):
    flo = f(lo)
    while hi - lo > tol * max(1.0, abs(lo)):
        mid = 0.5 * (lo + hi)
        if (f(mid) > 0) == (flo > 0):
            lo, flo = mid, f(mid)
        else:
            hi = mid
    return 0.5 * (lo + hi)


# {{{ schemes and scalar solves

@pytest.mark.parametrize("s", range(1, 7))
def test_am_weights_sum_to_one(s):
    assert sum(AmScheme(s).exact) == 1


def test_am_tables():
    assert AmScheme(1).exact == (1,)
    assert AmScheme(2).exact == (Fraction(1, 2), Fraction(1, 2))
    assert AmScheme(3).exact == (Fraction(5, 12), Fraction(2, 3), Fraction(-1, 12))
    assert AmScheme(4).exact == tuple(Fraction(n, 24) for n in (9, 19, -5, 1))


@pytest.mark.parametrize("s", [0, 7])
def test_am_order_range(s):
    with pytest.raises(InvalidArgument):
        AmScheme(s)


def test_secant_zero_forcing():
    u = secant_solve(1.7, 0.3, lambda u, a, b, t: 0 * u, (0.1, 0.2), 0.0, 1.0, 1.7)
    assert u == 1.7


def test_secant_linear():
    g, c = 2.0, 0.25
    u = secant_solve(g, c, lambda u, a, b, t: u, (0.0, 0.0), 0.0, 1.0, 1.5)
    assert u == pytest.approx(g / (1 - c), rel=1e-14)


def test_secant_quadratic_vs_bisection():
    g, c = 1.0, 0.1
    u = secant_solve(g, c, lambda u, a, b, t: u * u, (0.0, 0.0), 0.0, 1.0, g + c)
    ref = bisect(lambda v: v - g - c * v * v, 0.0, 2.0)
    assert abs(u - ref) <= 1e-12


def test_secant_vectorized_nodes():
    g = np.linspace(0.5, 1.5, 7)
    x = np.stack([np.linspace(0, 1, 7), np.zeros(7)], -1)
    u = secant_solve(g, 0.1, lambda u, a, b, t: u * u + a, x, 0.0, g, g + 0.1)
    assert np.all(np.abs(u - g - 0.1 * (u * u + x[:, 0])) <= 1e-12 * (1 + np.abs(u)))


def test_secant_no_root():
    with pytest.raises(StepFailure) as err:
        secant_solve(5.0, 1.0, lambda u, a, b, t: np.exp(u), (0.3, -0.1), 0.0, 0.0, 1.0)
    assert err.value.location == (0.3, -0.1)

# }}}


# {{{ adams-moulton steps

def uniform_tree(level, k=8):
    tree = QuadTree.root((0.0, 0.0), 0.5, k, True)
    for _ in range(level):
        tree = balance(tree.refined(tree.leaves))
    return tree


def test_am_step_pure_diffusion():
    tree = uniform_tree(2)
    u = GridFunction.from_function(tree, lambda a, b: np.sin(2 * np.pi * a) + np.cos(4 * np.pi * b))
    zero = lambda u, a, b, t: 0 * u
    for s in (1, 2):
        st = SolverState(0.0, 0, u, [GridFunction.zeros(tree)])
        new = am_step(st, zero, AmScheme(s), 1e-3, 1e-8, adapt=False)
        expect = initial_potential(u, 1e-3, 1e-12, periodic=True)
        assert np.abs(new.u.values - expect.values).max() <= 1e-15 * u.max_abs() + 1e-15


def test_am2_linear_ode_matches_trapezoid():
    lam, dt = -2.0, 0.05
    tree = uniform_tree(1)
    F = lambda u, a, b, t: lam * u
    u = GridFunction.from_function(tree, lambda a, b: 1 + 0 * a)
    st = SolverState(0.0, 0, u, [u * lam])
    amp = (1 + lam * dt / 2) / (1 - lam * dt / 2)
    for n in range(1, 21):
        st = am_step(st, F, AmScheme(2), dt, 1e-10)
        assert np.abs(st.u.values - amp ** n).max() <= 1e-13


def test_am_step_needs_forcing_history():
    tree = uniform_tree(1)
    st = SolverState(0.0, 0, GridFunction.zeros(tree), [])
    with pytest.raises(InvalidState):
        am_step(st, lambda u, a, b, t: u, AmScheme(4), 0.01, 1e-8)


def test_richardson_self_starting():
    pr = PeriodicProblem(lambda a, b: 1 + 0 * a, lambda u, a, b, t: u)
    assert richardson_bootstrap(pr, 2, 0.01) == []


def test_richardson_linear_mode_order():
    lam = -3.0
    pr = PeriodicProblem(lambda a, b: 1 + 0 * a, lambda u, a, b, t: lam * u)
    errs = []
    for dt in (0.1, 0.05, 0.025):
        out = richardson_bootstrap(pr, 4, dt, eps=1e-10)
        assert len(out) == 3
        errs.append([np.abs(o.values - math.exp(lam * (j + 1) * dt)).max()
                     for j, o in enumerate(out)])
    errs = np.array(errs)
    assert np.all(errs[:-1] / errs[1:] >= 14.0)


def test_richardson_manufactured_order():
    pr = builtin_problem("manufactured")
    errs = []
    for nt in (20, 40, 80):
        dt = 0.2 / nt
        out = richardson_bootstrap(pr, 4, dt, eps=1e-10)
        errs.append(relative_l2_error(out[0], pr.exact, dt))
    assert errs[0] / errs[1] >= 14.0 and errs[1] / errs[2] >= 14.0


def test_short_run_stops_inside_bootstrap():
    pr = PeriodicProblem(lambda a, b: 1 + 0 * a, lambda u, a, b, t: -u)
    for n in (1, 2):
        st = am_solve(pr, 4, 0.01, n, eps=1e-8)
        assert st.n == n and st.t == pytest.approx(n * 0.01)

# }}}


# {{{ spatial adaptivity

def test_adapt_keeps_resolved_state():
    f = lambda a, b: np.sin(2 * np.pi * a) * np.cos(2 * np.pi * b)
    tree, g = build_resolving_tree(f, 1e-8, k=8, periodic=True, min_level=1)
    zero = lambda u, a, b, t: 0 * u
    u, _, info = spatial_adapt(g, g, GridFunction.zeros(tree), zero, 0.0, 0.01, 1e-8)
    assert info["refined"] == 0 and info["coarsened"] == 0
    assert u.tree.same_boxes(tree)
    assert np.array_equal(u.values, g.values)


def test_adapt_follows_moving_bump():
    bump = lambda c: (lambda a, b: np.exp(-((a - c) ** 2 + b ** 2) / 0.002))
    eps = 1e-6
    tree, _ = build_resolving_tree(bump(-0.1), eps, k=8, periodic=True)
    new = bump(0.15)
    F = lambda u, a, b, t: new(a, b)
    g = GridFunction.zeros(tree)
    u0 = GridFunction.from_function(tree, new)
    u, fu, info = spatial_adapt(g, u0, u0, F, 0.0, 1.0, eps)
    t2 = u.tree
    assert info["refined"] > 0 and info["coarsened"] > 0
    lv = lambda tr, p: int(tr.level[tr.locate(np.array([p]))[0]])
    assert lv(t2, (0.15, 0.0)) > lv(tree, (0.15, 0.0))
    assert lv(t2, (-0.1, 0.0)) < lv(tree, (-0.1, 0.0))
    # independent audit: exact function on each leaf's child grid
    chk = check_points(t2, t2.active)
    ex = new(chk[..., 0], chk[..., 1])
    got = u(chk.reshape(-1, 2)).reshape(ex.shape)
    rms = np.sqrt(np.mean((got - ex) ** 2, axis=(-2, -1)))
    assert rms.max() <= 2 * eps

# }}}


# {{{ dirichlet marching

def test_zero_data_gives_zero_density():
    pr = BvpProblem(half_circle(8), lambda a, b, t: 0 * a)
    st, setup = dirichlet_march(pr, 0.01, 4)
    assert all(np.all(s == 0) for s in st.density.slices)
    u = evaluate_solution(st, setup, interior_targets(5))
    assert np.all(u == 0)


def test_on_boundary_target_rejected():
    pr = BvpProblem(half_circle(8), lambda a, b, t: 0 * a)
    st, setup = dirichlet_march(pr, 0.01, 2)
    x0 = setup.evaluator.frame(st.t).flat("nodes")[:1]
    with pytest.raises(OutOfDomain):
        evaluate_solution(st, setup, x0)


def test_march_rejects_bad_arguments():
    pr = BvpProblem(half_circle(8), lambda a, b, t: 0 * a)
    with pytest.raises(InvalidArgument):
        dirichlet_march(pr, 0.01, 2, scheme="rk4")
    with pytest.raises(InvalidArgument):
        dirichlet_march(BvpProblem(half_circle(8), lambda a, b, t: 0 * a, condition="neumann"),
                        0.01, 2)


def march_error(scheme, T, n):
    pr = BvpProblem(half_circle(), source_solution, exact=source_solution)
    st, setup = dirichlet_march(pr, T / n, n, scheme=scheme, eps=1e-10)
    x = interior_targets()
    u = evaluate_solution(st, setup, x)
    ex = source_solution(x[:, 0], x[:, 1], st.t)
    return np.abs(u - ex).max() / np.abs(ex).max()


def test_euler_first_order():
    e1, e2 = march_error("euler", 0.04, 4), march_error("euler", 0.04, 8)
    assert 1.7 <= e1 / e2 <= 2.4


def test_predictor_corrector_second_order():
    e1, e2 = march_error("predictor-corrector", 0.05, 10), march_error("predictor-corrector", 0.05, 20)
    assert 3.4 <= e1 / e2 <= 5.0


def test_short_run_vs_brute_force():
    dt = 0.01
    pr = BvpProblem(half_circle(), source_solution)
    st, setup = dirichlet_march(pr, dt, 3, eps=1e-12)
    x = interior_targets(10, seed=4, rmax=0.4)
    got = evaluate_solution(st, setup, x)
    fr = setup.evaluator.frame(0.0)
    y = fr.flat("nodes")
    nrm = fr.flat("normal")
    w = fr.weights.ravel()
    hist = st.density
    t = st.t

    def integrand(tau, xi):
        s = t - tau
        r = xi - y
        k = np.exp(-(r * r).sum(-1) / (4 * s)) / (4 * math.pi * s) * (r * nrm).sum(-1) / (2 * s)
        return float(np.sum(k * w * hist.at(tau).ravel()))

    ref = []
    for xi in x:
        # the history is piecewise in time; integrate slice by slice
        ref.append(sum(quad(integrand, a * dt, (a + 1) * dt, args=(xi,), epsabs=1e-14,
                            epsrel=1e-12, limit=200)[0] for a in range(3)))
    ref = np.array(ref)
    assert np.abs(got - ref).max() <= 1e-7 * max(1.0, np.abs(ref).max())


def test_march_is_deterministic():
    pr = BvpProblem(half_circle(8), source_solution)
    runs = [dirichlet_march(pr, 0.01, 3)[0] for _ in range(2)]
    for a, b in zip(runs[0].density.slices, runs[1].density.slices):
        assert np.array_equal(a, b)

# }}}
