"""Independent oracles shared by the test modules."""

import math

import numpy as np
import pytest
from numpy.polynomial import chebyshev as npcheb

from heatpot.treegrid import QuadTree, balance, compute_lists


def random_tree(rng, steps=12, k=4, periodic=False, max_level=6):
    """A balanced tree built from random leaf refinements."""
    tree = QuadTree.root((0.0, 0.0), 0.5, k, periodic)
    for _ in range(steps):
        leaves = tree.leaves
        leaves = leaves[tree.level[leaves] < max_level]
        pick = rng.choice(leaves, size=min(len(leaves), int(rng.integers(1, 3))), replace=False)
        tree = balance(tree.refined(pick))
    return tree


def leaf_rect(tree, b):
    """Integer rectangle of box ``b`` at the finest level of the tree."""
    lf = tree.level_count - 1
    s = 1 << (lf - int(tree.level[b]))
    return int(tree.ix[b]) * s, int(tree.iy[b]) * s, s


def share_point(tree, a, b):
    ax, ay, sa = leaf_rect(tree, a)
    bx, by, sb = leaf_rect(tree, b)
    return ax <= bx + sb and bx <= ax + sa and ay <= by + sb and by <= ay + sa


def naive_cheb2(coeffs, xi, eta):
    """Double-sum evaluation of a tensor Chebyshev series at one point."""
    k = coeffs.shape[0]
    tot = 0.0
    for i in range(k):
        ti = np.cos(i * np.arccos(xi))
        for j in range(k):
            tot += coeffs[i, j] * ti * np.cos(j * np.arccos(eta))
    return tot


def direct_gauss(y, q, x, delta, images=0):
    out = np.zeros(len(x))
    for a in range(-images, images + 1):
        for b in range(-images, images + 1):
            d2 = ((x[:, None, :] - y[None, :, :] - (a, b)) ** 2).sum(-1)
            out += np.exp(-d2 / delta) @ q
    return out


def dense_patch_gauss(tree, gf, x, delta, n=48, images=0):
    """Gauss transform of a grid function by n x n Gauss-Legendre per leaf."""
    s, w = np.polynomial.legendre.leggauss(n)
    out = np.zeros(len(x))
    for m, b in enumerate(tree.active):
        c = tree.box_center([b])[0]
        hw = 0.5 * tree.side(tree.level[b])
        vx = npcheb.chebvander(s, tree.k - 1)
        vals = vx @ gf.coeffs[m] @ vx.T
        px, py = c[0] + hw * s, c[1] + hw * s
        ww = hw * hw * np.outer(w, w) * vals
        for a in range(-images, images + 1):
            for bb in range(-images, images + 1):
                gx = np.exp(-(x[:, 0, None] - px[None] - a) ** 2 / delta)
                gy = np.exp(-(x[:, 1, None] - py[None] - bb) ** 2 / delta)
                out += np.einsum("ti,ij,tj->t", gx, ww, gy)
    return out


def all_pairs_balanced(tree):
    lv = tree.leaves
    for a in lv:
        for b in lv:
            if a < b and share_point(tree, a, b) and abs(int(tree.level[a]) - int(tree.level[b])) > 1:
                return False
    return True


def audit_structure(tree):
    for b in range(tree.n_boxes):
        ch = tree.children[b]
        if ch[0] >= 0:
            assert all(tree.parent[c] == b for c in ch)
            assert all(tree.level[c] == tree.level[b] + 1 for c in ch)
            offs = {(int(tree.ix[c]) - 2 * int(tree.ix[b]), int(tree.iy[c]) - 2 * int(tree.iy[b]))
                    for c in ch}
            assert offs == {(0, 0), (1, 0), (0, 1), (1, 1)}
        if tree.parent[b] >= 0:
            assert b in tree.children[tree.parent[b]]
    area = np.sum(tree.side(tree.level[tree.leaves]) ** 2)
    assert area == pytest.approx((2 * tree.halfwidth) ** 2, rel=1e-14)


def coverage_counts(tree):
    lists = compute_lists(tree)
    chain = {b: [b] + tree.ancestors(b) for b in range(tree.n_boxes)}
    sets = {name: {b: set(getattr(lists, name)[b]) for b in range(tree.n_boxes)}
            for name in ("interaction_list", "coarse_interaction_list", "s_list")}
    counts = {}
    for T in tree.leaves:
        near = set(lists.near(T))
        for S in tree.leaves:
            n = int(S in near)
            for A in chain[T]:
                n += sum(B in sets["interaction_list"][A] for B in chain[S])
                n += int(S in sets["coarse_interaction_list"][A])
            n += sum(B in sets["s_list"][T] for B in chain[S])
            counts[(S, T)] = n
    return counts


def uniform_tree(level, k=8, periodic=True):
    tree = QuadTree.root((0.0, 0.0), 0.5, k, periodic)
    for _ in range(level):
        tree = balance(tree.refined(tree.leaves))
    return tree


def random_periodic(seed, nonneg=False):
    r = np.random.default_rng(seed)
    kx, ky = r.integers(0, 3, (2, 3))
    ph = r.uniform(0, 2 * math.pi, 3)
    amp = r.uniform(-1, 1, 3)
    def f(a, b):
        v = sum(c * np.cos(2 * math.pi * (i * a + j * b) + p) for c, i, j, p in zip(amp, kx, ky, ph))
        return v + np.abs(amp).sum() if nonneg else v
    return f


def composite_patch_gauss(tree, gf, x, delta, n=20):
    """Gauss transform of a grid function by composite Gauss-Legendre with
    panels no wider than ``sqrt(delta)``, so narrow kernels stay resolved."""
    s, w = np.polynomial.legendre.leggauss(n)
    sd = math.sqrt(delta)
    out = np.zeros(len(x))
    for m, b in enumerate(tree.active):
        c = tree.box_center([b])[0]
        hw = 0.5 * tree.side(tree.level[b])
        panels = max(1, int(math.ceil(2 * hw / sd)))
        edges = np.linspace(-1.0, 1.0, panels + 1)
        u = (0.5 * (edges[:-1, None] + edges[1:, None]) + 0.5 * np.diff(edges)[:, None] * s).ravel()
        wu = (0.5 * np.diff(edges)[:, None] * w).ravel()
        vx = npcheb.chebvander(u, tree.k - 1)
        vals = vx @ gf.coeffs[m] @ vx.T
        px, py = c[0] + hw * u, c[1] + hw * u
        ww = hw * hw * np.outer(wu, wu) * vals
        gx = np.exp(-(x[:, 0, None] - px[None]) ** 2 / delta)
        gy = np.exp(-(x[:, 1, None] - py[None]) ** 2 / delta)
        out += np.einsum("ti,ij,tj->t", gx, ww, gy)
    return out
