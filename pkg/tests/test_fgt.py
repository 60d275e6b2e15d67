import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import erf

from heatpot.errors import AccuracyFailure, InvalidArgument
from heatpot.fgt import (
    Expansion, choose_order, extend_free_space_grid, fgt_apply, form_hermite,
    hermite_error_bound, make_plan, periodic_fgt_apply, planewave_self_test, q_total,
    shift_planewave, to_planewave, translate,
)
from heatpot.treegrid import GridFunction, QuadTree, build_resolving_tree

from helpers import dense_patch_gauss, direct_gauss, random_tree

K = 1.09


def gauss(x, y, delta):
    return np.exp(-((np.atleast_2d(x) - y) ** 2).sum(-1) / delta)


# {{{ expansions

def test_unit_charge_at_center():
    e = form_hermite((0.1, 0.2), 0.01, 6, charges=[[0.1, 0.2]], strengths=[1.0])
    expect = np.zeros((6, 6))
    expect[0, 0] = 1.0
    assert np.array_equal(e.coeffs, expect)


def test_single_charge_far_target(rng):
    delta = 0.04
    y = np.array([0.03, -0.02])
    e = form_hermite((0.0, 0.0), delta, 20, charges=[y], strengths=[1.0], box_halfwidth=0.05)
    x = np.array([[0.3, 0.1], [-0.2, -0.25]])
    assert np.abs(e(x) - gauss(x, y, delta)).max() <= 1e-12


def test_charge_outside_box_rejected():
    with pytest.raises(InvalidArgument):
        form_hermite((0, 0), 0.01, 4, charges=[[0.3, 0.0]], box_halfwidth=0.1)


@pytest.mark.parametrize("r", [0.5, 1.0])
def test_truncation_error_within_bound(rng, r):
    delta = 0.01
    sd = math.sqrt(delta)
    hw = 0.5 * r * sd
    y = rng.uniform(-hw, hw, (40, 2))
    q = rng.uniform(-1, 1, 40)
    x = rng.uniform(-6 * sd, 6 * sd, (400, 2))
    ref = direct_gauss(y, q, x, delta)
    qb = np.abs(q).sum()
    for p in range(4, 17):
        e = form_hermite((0, 0), delta, p, charges=y, strengths=q, box_halfwidth=hw)
        assert np.abs(e(x) - ref).max() <= hermite_error_bound(p, r, qb) + 1e-15 * qb


def test_bound_zero_charge_and_monotone():
    assert hermite_error_bound(5, 0.7, 0.0) == 0.0
    for r in (0.25, 0.5, 1.0):
        vals = [hermite_error_bound(p, r) for p in range(2, 41)]
        assert all(b < a for a, b in zip(vals, vals[1:]) if a > 1e-300)


def series_bound(p, r, q):
    # the tail sums written out term by term
    s = sum(r ** n / math.sqrt(math.factorial(n)) for n in range(p + 1))
    t = sum(math.exp(n * math.log(r) - 0.5 * math.lgamma(n + 1)) for n in range(p, p + 1000))
    return K * K * q * (2 * s + t) * t


@pytest.mark.parametrize("p,r", [(3, 0.5), (8, 1.0), (15, 0.8)])
def test_bound_matches_series(p, r):
    assert hermite_error_bound(p, r, 2.0) == pytest.approx(series_bound(p, r, 2.0), rel=1e-3)


def test_chosen_order_is_minimal():
    for r in (0.3, 0.7, 1.0):
        p = choose_order(1e-9, r)
        assert series_bound(p, r, 1.0) <= 1e-9 * 1.01
        assert series_bound(p - 1, r, 1.0) > 1e-9 * 0.99


def test_local_shift_by_zero_is_identity(rng):
    e = Expansion("local", (0.1, 0.1), 0.1, rng.normal(size=(6, 6)))
    assert np.allclose(translate(e, (0.1, 0.1), "local").coeffs, e.coeffs, rtol=0, atol=1e-15)


def test_unsupported_translation():
    e = Expansion("local", (0, 0), 0.1, np.zeros((4, 4)))
    with pytest.raises(InvalidArgument):
        translate(e, (0, 0), "hermite")


def test_hermite_merge_of_children(rng):
    delta, p = 0.01, 20
    hw = 0.05
    y = rng.uniform(-2 * hw, 2 * hw, (60, 2))
    q = rng.uniform(-1, 1, 60)
    parent = form_hermite((0, 0), delta, p, charges=y, strengths=q)
    merged = None
    for sx in (-hw, hw):
        for sy in (-hw, hw):
            sel = (np.sign(y[:, 0]) == np.sign(sx)) & (np.sign(y[:, 1]) == np.sign(sy))
            ch = form_hermite((sx, sy), delta, p, charges=y[sel], strengths=q[sel])
            t = translate(ch, (0, 0), "hermite")
            merged = t if merged is None else Expansion("hermite", (0, 0), t.scale,
                                                        merged.coeffs + t.coeffs)
    x = rng.uniform(0.4, 0.6, (50, 2))
    ref = direct_gauss(y, q, x, delta)
    assert np.abs(merged(x) - ref).max() <= 1e-9 * np.abs(q).sum()
    assert np.abs(merged(x) - parent(x)).max() <= 1e-9 * np.abs(q).sum()


def test_hermite_to_local(rng):
    delta, p = 0.01, 24
    sd = math.sqrt(delta)
    y = rng.uniform(-0.5 * sd, 0.5 * sd, (30, 2))
    q = rng.uniform(-1, 1, 30)
    e = form_hermite((0, 0), delta, p, charges=y, strengths=q)
    tc = np.array([2.0 * sd, 1.0 * sd])
    loc = translate(e, tc, "local")
    x = tc + rng.uniform(-0.5 * sd, 0.5 * sd, (40, 2))
    bound = hermite_error_bound(p, 1.0, np.abs(q).sum())
    assert np.abs(loc(x) - e(x)).max() <= 2 * bound + 1e-12


def test_planewave_zero_and_random(rng):
    z = Expansion("hermite", (0, 0), 0.1, np.zeros((10, 10)))
    assert np.all(to_planewave(z, 40).coeffs == 0)
    e = Expansion("hermite", (0.1, -0.2), 0.1, rng.normal(size=(10, 10)))
    pw = planewave_self_test(e, 80, 1e-10)
    pts = e.center + 0.1 * rng.uniform(-4, 4, (50, 2))
    ref = e(pts)
    assert np.abs(pw(pts) - ref).max() <= 1e-10 * np.abs(ref).max()


def test_planewave_too_coarse():
    e = Expansion("hermite", (0, 0), 0.1, np.ones((10, 10)))
    with pytest.raises(AccuracyFailure):
        planewave_self_test(e, 6, 1e-10)


def test_planewave_shift_matches_hermite_field(rng):
    e = Expansion("hermite", (0, 0), 0.1, rng.normal(size=(10, 10)))
    pw = shift_planewave(to_planewave(e, 80), (0.15, 0.05))
    pts = rng.uniform(-0.3, 0.3, (50, 2))
    ref = e(pts)
    assert np.abs(pw(pts) - ref).max() <= 1e-10 * np.abs(ref).max()

# }}}


# {{{ transforms

def test_random_charges_direct(rng):
    y = rng.uniform(-0.5, 0.5, (100, 2))
    q = rng.uniform(-1, 1, 100)
    x = rng.uniform(-0.5, 0.5, (100, 2))
    _, v = fgt_apply(make_plan(QuadTree.root(), 0.05, 1e-9), charges=y, strengths=q, points=x)
    assert np.abs(v - direct_gauss(y, q, x, 0.05)).max() <= 1e-9 * np.abs(q).sum()


def test_unit_box_source_erf():
    tree = QuadTree.root().refined([0])
    gf = GridFunction(tree, np.ones((4, 8, 8)))
    delta = 1.0
    g, _ = fgt_apply(make_plan(tree, delta, 1e-13), density=gf)
    x = tree.leaf_nodes()
    sd = math.sqrt(delta)

    def one(a):
        return 0.5 * math.sqrt(math.pi) * sd * (erf((0.5 - a) / sd) + erf((0.5 + a) / sd))
    ref = one(x[..., 0]) * one(x[..., 1])
    assert np.abs(g.values - ref).max() <= 1e-12


def test_flat_kernel_limit(rng):
    y = rng.uniform(-0.5, 0.5, (50, 2))
    q = rng.uniform(0, 1, 50)
    x = rng.uniform(-0.5, 0.5, (20, 2))
    delta = 2e6
    _, v = fgt_apply(make_plan(QuadTree.root(), delta, 1e-12), charges=y, strengths=q, points=x)
    Q = q.sum()
    first = Q - (((x[:, None] - y[None]) ** 2).sum(-1) @ q) / delta
    assert np.abs(v - Q).max() <= 2 * 2.0 / delta * Q
    assert np.abs(v - first).max() <= 1e-11 * Q


def test_nonpositive_delta():
    with pytest.raises(InvalidArgument):
        make_plan(QuadTree.root(), 0.0, 1e-9)


def test_density_oracle_on_adaptive_tree():
    f = lambda a, b: np.exp(-((a - 0.1) ** 2 + b ** 2) / 0.01) + 0.1 * np.sin(3 * a)
    tree, gf = build_resolving_tree(f, 1e-10, k=8)
    x = np.random.default_rng(3).uniform(-0.5, 0.5, (40, 2))
    for delta in (1e-3, 1e-1):
        _, v = fgt_apply(make_plan(tree, delta, 1e-10), density=gf, points=x)
        ref = dense_patch_gauss(tree, gf, x, delta)
        assert np.abs(v - ref).max() <= 1e-10 * q_total(gf)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(-2, 2), st.floats(-2, 2))
def test_linearity(seed, a, b):
    r = np.random.default_rng(seed)
    tree = random_tree(r, steps=3, k=6)
    f = GridFunction(tree, r.normal(size=(len(tree.active), 6, 6)))
    g = GridFunction(tree, r.normal(size=(len(tree.active), 6, 6)))
    plan = make_plan(tree, 0.01, 1e-10)
    lhs, _ = fgt_apply(plan, density=a * f + b * g)
    fa, _ = fgt_apply(plan, density=f)
    gb, _ = fgt_apply(plan, density=g)
    scale = (abs(a) + abs(b) + 1) * max(fa.max_abs(), gb.max_abs())
    assert np.abs(lhs.values - (a * fa.values + b * gb.values)).max() <= 1e-12 * scale


def test_periodic_constant_exact():
    tree, _ = build_resolving_tree(lambda a, b: 0 * a + 1.0, 1e-12, periodic=True)
    tree = tree.refined([0])
    gf = GridFunction(tree, np.full((4, 8, 8), 1.7))
    for delta in (1e-3, 0.02, 0.5):
        g, _ = periodic_fgt_apply(make_plan(tree, delta, 1e-12), density=gf)
        assert np.abs(g.values - 1.7 * math.pi * delta).max() <= 1e-11


def test_periodic_against_images(rng):
    root = QuadTree.root(periodic=True)
    y = rng.uniform(-0.5, 0.5, (200, 2))
    q = rng.uniform(-1, 1, 200)
    x = rng.uniform(-0.5, 0.5, (50, 2))
    for delta in (1e-3, 0.05, 0.3):
        _, v = periodic_fgt_apply(make_plan(root, delta, 1e-11), charges=y, strengths=q, points=x)
        assert np.abs(v - direct_gauss(y, q, x, delta, images=5)).max() <= 1e-9


def poisson_theta(delta, terms=30):
    # sum_n exp(-n^2/delta) written in its dual (Poisson) form
    k = np.arange(1, terms)
    return math.sqrt(math.pi * delta) * (1 + 2 * np.exp(-math.pi ** 2 * k ** 2 * delta).sum())


@pytest.mark.parametrize("delta", [0.05, 0.5, 2.0])
def test_periodic_single_charge_theta(delta):
    _, v = periodic_fgt_apply(make_plan(QuadTree.root(periodic=True), delta, 1e-13),
                              charges=[[0.0, 0.0]], strengths=[1.0], points=[[0.0, 0.0]])
    ref = poisson_theta(delta) ** 2
    assert abs(v[0] - ref) <= 1e-12 * ref


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(-3, 3), st.integers(-3, 3))
def test_periodic_shift_invariance(seed, i, j):
    r = np.random.default_rng(seed)
    root = QuadTree.root(periodic=True)
    y = r.uniform(-0.5, 0.5, (40, 2))
    q = r.uniform(-1, 1, 40)
    x = r.uniform(-0.5, 0.5, (10, 2))
    plan = make_plan(root, 0.03, 1e-10)
    _, v0 = periodic_fgt_apply(plan, charges=y, strengths=q, points=x)
    _, v1 = periodic_fgt_apply(plan, charges=y + (i, j), strengths=q, points=x + (j, i))
    assert np.abs(v0 - v1).max() <= 1e-10 * np.abs(q).sum()


def test_dipoles_against_direct(rng):
    tree = QuadTree.root()
    y = rng.uniform(-0.5, 0.5, (80, 2))
    m = rng.normal(size=(80, 2))
    x = rng.uniform(-0.5, 0.5, (40, 2))
    delta = 0.01
    _, v = fgt_apply(make_plan(tree, delta, 1e-12), dipoles=y, moments=m, points=x)
    d = x[:, None, :] - y[None]
    ref = (2 / delta * (d * m[None]).sum(-1) * np.exp(-(d ** 2).sum(-1) / delta)).sum(1)
    assert np.abs(v - ref).max() <= 1e-11 * np.abs(m).sum() / math.sqrt(delta)

# }}}


# {{{ free-space extension

def test_extension_side():
    tree = QuadTree.root((0, 0), 0.5)
    ext = extend_free_space_grid(tree, 1.0, 1e-9)
    assert 2 * ext.halfwidth >= 1 + 2 * math.sqrt(math.log(1e9))
    assert np.allclose(ext.center, tree.center)
    # the original box is covered by non-empty leaves, added ones start empty
    area = np.sum(ext.side(ext.level[ext.active]) ** 2)
    assert area == pytest.approx(1.0, rel=1e-14)


def test_extension_leaf_growth():
    tree = QuadTree.root((0, 0), 0.5)
    eps = 1e-9
    added = lambda T: len(extend_free_space_grid(tree, T, eps).leaves) - 1
    n1, n16 = added(1.0), added(16.0)
    bound = ((math.log(16) + math.log(1 / eps)) / math.log(1 / eps)) ** 2 * 1.5
    assert n16 / n1 <= bound


def test_zero_outside_stays_small():
    from heatpot.potentials import initial_potential
    f = lambda a, b: np.exp(-(a ** 2 + b ** 2) / 0.002)
    tree, _ = build_resolving_tree(f, 1e-9)
    T = 0.05
    ext = extend_free_space_grid(tree, T, 1e-9)
    ext = ext.with_empty(np.zeros(ext.n_boxes, dtype=bool))
    u = initial_potential(GridFunction.from_function(ext, f), T, 1e-10)
    x = u.tree.leaf_nodes()
    edge = np.abs(x).max(-1) >= 0.9 * ext.halfwidth
    assert edge.any()
    assert np.abs(u.values[edge]).max() <= 1e-9

# }}}
