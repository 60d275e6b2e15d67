"""Fast Gauss transform on quadtrees.

Computes ``sum_j q_j exp(-|x - y_j|^2/delta) + int f(y) exp(-|x - y|^2/delta) dy``
for charges ``q_j`` and a piecewise-Chebyshev density ``f`` at the Chebyshev
nodes of a target tree and/or at scattered points.

Scheme
------
Let ``sd = sqrt(delta)`` and ``R = r_c * sd`` with ``r_c = sqrt(log(1/eps))``;
interactions at distance ``>= R`` are dropped.  The *expansion level* is the
coarsest level whose box side is at most ``sd``.  Leaves at or below it are
*fine*: their sources are collected into Hermite expansions of their
expansion-level ancestor, and targets there receive Taylor (local)
expansions, all interactions between expansion-level boxes going through
hermite-to-local translation.  *Coarse* leaves, larger than ``sd``, interact
by direct separable quadrature against precomputed 1D tables.  Charges and
scattered targets in sparsely populated expansion-level boxes interact by
direct summation instead of expansions.

Periodic mode treats the root box as the unit cell of a lattice; every pair
search and every translation offset runs over the relevant lattice images.
"""

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.polynomial import chebyshev as npcheb
from numpy.polynomial import legendre as nplegendre
from scipy import sparse
from scipy.spatial import cKDTree
from scipy.special import gammaln

from .errors import AccuracyFailure, InvalidArgument
from .treegrid import GridFunction, QuadTree, balance, cheb_nodes, compute_lists

K_CRAMER = 1.09
R_MAX = 1.0


# {{{ 1D building blocks

def hermite_functions(x, n):
    """``h_0..h_{n-1}`` at ``x``; ``h_m(x) = (-1)^m d^m/dx^m exp(-x^2)``.

    Returns an array of shape ``x.shape + (n,)``.
    """
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape + (max(n, 1),))
    out[..., 0] = np.exp(-x * x)
    if n > 1:
        out[..., 1] = 2 * x * out[..., 0]
    for m in range(1, n - 1):
        out[..., m + 1] = 2 * x * out[..., m] - 2 * m * out[..., m - 1]
    return out[..., :n]


def scaled_powers(x, n):
    """``x^m / m!`` for m < n, shape ``x.shape + (n,)``."""
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape + (n,))
    out[..., 0] = 1.0
    for m in range(1, n):
        out[..., m] = out[..., m - 1] * x / m
    return out


def powers(x, n):
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape + (n,))
    out[..., 0] = 1.0
    for m in range(1, n):
        out[..., m] = out[..., m - 1] * x
    return out


@lru_cache(maxsize=None)
def _factorials(n):
    return np.exp(gammaln(np.arange(n) + 1.0))


@lru_cache(maxsize=None)
def _gauss_legendre(n):
    return nplegendre.leggauss(n)


def hh_matrix(w, p):
    """1D Hermite shift: ``A_new = M @ A_old`` for centers moved by ``-w*sd``.

    ``w = (s_old - s_new)/sd``; broadcasts over leading axes of ``w``.
    """
    w = np.asarray(w, dtype=float)
    a = np.arange(p)
    d = a[:, None] - a[None, :]
    sp = scaled_powers(w, p)
    m = np.where(d >= 0, sp[..., np.maximum(d, 0)], 0.0)
    return m


def hl_matrix(z, p):
    """1D hermite-to-local: ``L = M @ A`` with ``z = (t - s)/sd``."""
    z = np.asarray(z, dtype=float)
    h = hermite_functions(z, 2 * p - 1)
    a = np.arange(p)
    sign = (-1.0) ** a / _factorials(p)
    return np.ascontiguousarray(sign[:, None] * h[..., a[:, None] + a[None, :]])


def ll_matrix(d, p):
    """1D local shift: ``L_new = M @ L_old`` with ``d = (t_new - t_old)/sd``."""
    d = np.asarray(d, dtype=float)
    a = np.arange(p)
    e = a[None, :] - a[:, None]
    fact = _factorials(p)
    binom = np.where(e >= 0, fact[a[None, :]] / (fact[a[:, None]] * fact[np.maximum(e, 0)]), 0.0)
    pw = powers(d, p)
    return np.where(e >= 0, binom * pw[..., np.maximum(e, 0)], 0.0)


def gauss_cheb_integrals(lo, hi, x, sd, k, cut, nq=64):
    """``int_lo^hi T_i((y-c)/hw) exp(-(x-y)^2/sd^2) dy`` for i < k.

    ``lo``/``hi`` broadcast against ``x``; the integration range is clipped to
    ``[x - cut, x + cut]``.  Returns shape ``x.shape + (k,)``.
    """
    lo, hi, x = np.broadcast_arrays(np.asarray(lo, float), np.asarray(hi, float),
                                    np.asarray(x, float))
    c = 0.5 * (lo + hi)
    hw = 0.5 * (hi - lo)
    a = np.maximum(lo, x - cut)
    b = np.minimum(hi, x + cut)
    length = np.maximum(b - a, 0.0)
    t, w = _gauss_legendre(nq)
    y = 0.5 * (a + b)[..., None] + 0.5 * length[..., None] * t
    g = np.exp(-((x[..., None] - y) / sd) ** 2) * (0.5 * length[..., None] * w)
    xi = np.clip((y - c[..., None]) / hw[..., None], -1.0, 1.0)
    tv = npcheb.chebvander(xi, k - 1)
    return np.einsum("...q,...qi->...i", g, tv)

# }}}


# {{{ expansions

@dataclass
class Expansion:
    """A Hermite, local (Taylor) or plane-wave expansion.

    For ``kind="hermite"`` the field is ``sum A_a h_a1(z1) h_a2(z2)``, for
    ``kind="local"`` it is ``sum L_b z1^b1 z2^b2``, with ``z = (x - center)/scale``.
    Plane-wave expansions store complex weights on a tensor grid of
    wavenumbers ``knodes``.
    """
    kind: str
    center: np.ndarray
    scale: float
    coeffs: np.ndarray
    knodes: np.ndarray = None

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(2)
        if self.scale <= 0:
            raise InvalidArgument("expansion scale must be positive")
        if self.kind not in ("hermite", "local", "planewave"):
            raise InvalidArgument(f"unknown expansion kind {self.kind!r}")
        if self.coeffs.ndim != 2 or self.coeffs.shape[0] != self.coeffs.shape[1]:
            raise InvalidArgument("expansion coefficients must be p x p")

    @property
    def p(self):
        return self.coeffs.shape[0]

    def __call__(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        z = (pts - self.center) / self.scale
        if self.kind == "hermite":
            h1 = hermite_functions(z[:, 0], self.p)
            h2 = hermite_functions(z[:, 1], self.p)
            return np.einsum("na,ab,nb->n", h1, self.coeffs, h2)
        if self.kind == "local":
            z1 = powers(z[:, 0], self.p)
            z2 = powers(z[:, 1], self.p)
            return np.einsum("na,ab,nb->n", z1, self.coeffs, z2)
        e1 = np.exp(1j * np.outer(z[:, 0], self.knodes))
        e2 = np.exp(1j * np.outer(z[:, 1], self.knodes))
        return np.einsum("na,ab,nb->n", e1, self.coeffs, e2).real


def form_hermite(center, delta, p, charges=None, strengths=None, patches=None,
                 box_halfwidth=None):
    """Hermite expansion of charges and/or Chebyshev patches about ``center``.

    Parameters
    ----------
    center : array_like, shape (2,)
    delta : float
        Kernel parameter, kernel ``exp(-|x-y|^2/delta)``.
    p : int
        Terms per dimension.
    charges : ndarray, shape (n, 2), optional
    strengths : ndarray, shape (n,), optional
    patches : list of ChebPatch, optional
    box_halfwidth : float, optional
        When given, sources must lie in the box ``center +- box_halfwidth``.

    Returns
    -------
    Expansion
    """
    if p < 1:
        raise InvalidArgument("p must be >= 1")
    if delta <= 0:
        raise InvalidArgument("delta must be positive")
    center = np.asarray(center, dtype=float)
    sd = math.sqrt(delta)
    coeffs = np.zeros((p, p))
    tol = 1e-12 * (box_halfwidth or 1.0)
    if charges is not None:
        charges = np.atleast_2d(np.asarray(charges, dtype=float))
        q = np.ones(len(charges)) if strengths is None else np.asarray(strengths, float)
        if box_halfwidth is not None and np.any(
                np.abs(charges - center) > box_halfwidth + tol):
            raise InvalidArgument("charge outside the expansion box")
        u = (charges - center) / sd
        coeffs += np.einsum("n,na,nb->ab", q, scaled_powers(u[:, 0], p),
                            scaled_powers(u[:, 1], p))
    for patch in patches or ():
        if box_halfwidth is not None and (
                np.any(np.abs(patch.center - center) + patch.halfwidth
                       > box_halfwidth + tol)):
            raise InvalidArgument("patch outside the expansion box")
        m1 = _moment_matrix(patch.k, p, patch.halfwidth, sd,
                            (patch.center[0] - center[0]) / sd)
        m2 = _moment_matrix(patch.k, p, patch.halfwidth, sd,
                            (patch.center[1] - center[1]) / sd)
        coeffs += m1 @ patch.coeffs @ m2.T
    return Expansion("hermite", center, sd, coeffs)


def _moment_matrix(k, p, hw, sd, w):
    """``(1/a!) int ((y - s)/sd)^a T_i((y - c)/hw) dy`` with ``(c - s)/sd = w``."""
    t, wq = _gauss_legendre((p + k) // 2 + 2)
    u = w + hw * t / sd
    return hw * np.einsum("qa,q,qi->ai", scaled_powers(u, p), wq,
                          npcheb.chebvander(t, k - 1))


def translate(e, target_center, target_kind):
    """Re-center an expansion.

    Supported pairs: hermite->hermite, hermite->local, local->local.
    """
    target_center = np.asarray(target_center, dtype=float)
    p, sd = e.p, e.scale
    if e.kind == "hermite" and target_kind == "hermite":
        w = (e.center - target_center) / sd
        m1, m2 = hh_matrix(w[0], p), hh_matrix(w[1], p)
    elif e.kind == "hermite" and target_kind == "local":
        z = (target_center - e.center) / sd
        m1, m2 = hl_matrix(z[0], p), hl_matrix(z[1], p)
    elif e.kind == "local" and target_kind == "local":
        d = (target_center - e.center) / sd
        m1, m2 = ll_matrix(d[0], p), ll_matrix(d[1], p)
    else:
        raise InvalidArgument(f"unsupported translation {e.kind}->{target_kind}")
    return Expansion(target_kind, target_center, sd, m1 @ e.coeffs @ m2.T)


def _tail_terms(r, start, stop):
    n = np.arange(start, stop)
    with np.errstate(divide="ignore"):
        logs = n * np.log(r) - 0.5 * gammaln(n + 1.0)
    return np.exp(logs)


def hermite_error_bound(p, r, q_b=1.0):
    """Truncation bound ``K^2 Q_B (2 S_r(p) + T_r(p)) T_r(p)``.

    ``r`` is the box side divided by ``sqrt(delta)``; the tail series is
    truncated after 1000 terms.
    """
    if q_b == 0:
        return 0.0
    s = float(np.sum(_tail_terms(r, 0, p + 1)))
    t = float(np.sum(_tail_terms(r, p, p + 1000)))
    return K_CRAMER ** 2 * q_b * (2 * s + t) * t


def choose_order(eps, r, p_max=80):
    """Smallest p with ``hermite_error_bound(p, r) <= eps``."""
    for p in range(1, p_max + 1):
        if hermite_error_bound(p, r) <= eps:
            return p
    return p_max


def to_planewave(e, n_nodes, k_max=None):
    """Plane-wave representation of a Hermite expansion.

    Uses ``h_a(z) = (1/(2 sqrt(pi))) int exp(-k^2/4) (-ik)^a exp(ikz) dk`` per
    dimension, discretized by the trapezoidal rule on ``[-k_max, k_max]``.
    """
    if e.kind != "hermite":
        raise InvalidArgument("to_planewave needs a Hermite expansion")
    p = e.p
    if k_max is None:
        k_max = 2 * math.sqrt(36.0 + 2 * p)
    knodes = np.linspace(-k_max, k_max, n_nodes)
    dk = knodes[1] - knodes[0]
    f = (dk / (2 * math.sqrt(math.pi))) * np.exp(-knodes ** 2 / 4)
    v = f[:, None] * (-1j * knodes[:, None]) ** np.arange(p)[None, :]
    return Expansion("planewave", e.center, e.scale, v @ e.coeffs @ v.T, knodes)


def shift_planewave(e, target_center):
    """Diagonal re-centering of a plane-wave expansion."""
    if e.kind != "planewave":
        raise InvalidArgument("shift_planewave needs a plane-wave expansion")
    target_center = np.asarray(target_center, dtype=float)
    d = (target_center - e.center) / e.scale
    ph1 = np.exp(1j * e.knodes * d[0])
    ph2 = np.exp(1j * e.knodes * d[1])
    return Expansion("planewave", target_center, e.scale,
                     ph1[:, None] * e.coeffs * ph2[None, :], e.knodes)


def planewave_self_test(e, n_nodes, eps, radius=6.0, n_samples=50, seed=0):
    """Convert and compare against Hermite evaluation.

    Raises
    ------
    AccuracyFailure
        If the plane-wave discretization misses ``eps`` (relative to the
        coefficient magnitude) at sample targets within ``radius`` scales.
    """
    pw = to_planewave(e, n_nodes)
    rng = np.random.default_rng(seed)
    pts = e.center + e.scale * rng.uniform(-radius, radius, (n_samples, 2))
    ref = e(pts)
    err = np.max(np.abs(pw(pts) - ref))
    if err > eps * max(np.abs(ref).max(), 1e-300):
        raise AccuracyFailure(f"plane-wave error {err:.3e} with {n_nodes} nodes")
    return pw

# }}}


# {{{ plan

@dataclass
class FgtPlan:
    """Parameters of one Gauss transform.

    Attributes
    ----------
    eps, delta : float
    p : int
        Expansion order per dimension.
    r_c : float
        Cutoff radius in units of ``sqrt(delta)``.
    cutoff_level : int
        Finest tree level whose box side is at least ``r_c*sqrt(delta)``
        (-1 when even the root is smaller).
    expansion_level : int
        Level of the boxes carrying Hermite/local expansions.
    periodic : bool
    tree : QuadTree
        Source tree.
    """
    eps: float
    delta: float
    p: int
    r_c: float
    cutoff_level: int
    expansion_level: int
    periodic: bool
    tree: QuadTree
    verbose: bool = False
    dense_threshold: int = 0
    stats: dict = field(default_factory=dict)
    _lists: object = None
    _tables: dict = field(default_factory=dict)

    @property
    def lists(self):
        if self._lists is None:
            self._lists = compute_lists(self.tree)
        return self._lists

    @property
    def sd(self):
        return math.sqrt(self.delta)

    @property
    def radius(self):
        return self.r_c * self.sd


def make_plan(tree, delta, eps, periodic=None, verbose=False):
    """Build an :class:`FgtPlan` for sources on ``tree``."""
    if delta <= 0:
        raise InvalidArgument("delta must be positive")
    if not 0 < eps < 1:
        raise InvalidArgument("eps must lie in (0, 1)")
    periodic = tree.periodic if periodic is None else bool(periodic)
    sd = math.sqrt(delta)
    r_c = math.sqrt(math.log(1.0 / eps))
    width = 2.0 * tree.halfwidth
    cutoff = -1
    lev = 0
    while width / 2 ** lev >= r_c * sd and lev <= tree.level_count + 60:
        cutoff = lev
        lev += 1
    e = 0
    while width / 2 ** e > R_MAX * sd:
        e += 1
    # safety factor: hermite and taylor truncations compound
    p = choose_order(eps / 4, width / 2 ** e / sd)
    return FgtPlan(eps, float(delta), p, r_c, cutoff, e, periodic, tree, verbose,
                   dense_threshold=4)

# }}}


# {{{ pair searches

def _images(plan, radius):
    if not plan.periodic:
        return np.zeros((1, 2))
    w = 2.0 * plan.tree.halfwidth
    j = int(math.ceil(radius / w))
    r = np.arange(-j, j + 1)
    return w * np.stack(np.meshgrid(r, r, indexing="ij"), axis=-1).reshape(-1, 2)


def _box_bounds(tree, ids):
    h = tree.side(tree.level[ids])
    lo = tree.lower_left + np.stack([tree.ix[ids] * h, tree.iy[ids] * h], axis=-1)
    return lo, lo + h[:, None]


def _tree_pairs(tree, qlo, qhi, radius, images, max_level=None):
    """Leaves of ``tree`` within ``radius`` of query rectangles.

    Returns query index, leaf id and image index arrays; the leaf interacts
    with the query shifted by ``images[image]``.
    """
    qs, ls, ims = [], [], []
    nq = len(qlo)
    for s, shift in enumerate(images):
        lo, hi = qlo + shift, qhi + shift
        qi = np.arange(nq)
        b = np.zeros(nq, dtype=np.int64)
        while len(qi):
            blo, bhi = _box_bounds(tree, b)
            gap = np.maximum(0.0, np.maximum(blo - hi[qi], lo[qi] - bhi))
            keep = np.einsum("ij,ij->i", gap, gap) < radius * radius
            qi, b = qi[keep], b[keep]
            leaf = tree.children[b, 0] < 0
            if max_level is not None:
                leaf &= tree.level[b] <= max_level
            qs.append(qi[leaf])
            ls.append(b[leaf])
            ims.append(np.full(int(leaf.sum()), s))
            inner = tree.children[b, 0] >= 0
            if max_level is not None:
                inner &= tree.level[b] < max_level
            qi = np.repeat(qi[inner], 4)
            b = tree.children[b[inner]].ravel()
    if not qs:
        return np.zeros(0, int), np.zeros(0, int), np.zeros(0, int)
    return np.concatenate(qs), np.concatenate(ls), np.concatenate(ims)


def _point_pairs(plan, src, tgt, radius):
    """Index pairs with |tgt - src| < radius and the (image-corrected) displacement."""
    if len(src) == 0 or len(tgt) == 0:
        return np.zeros(0, int), np.zeros(0, int), np.zeros((0, 2))
    tree = plan.tree
    if plan.periodic:
        w = 2.0 * tree.halfwidth
        a = np.mod(src - tree.lower_left, w)
        b = np.mod(tgt - tree.lower_left, w)
        ka, kb = cKDTree(a, boxsize=w), cKDTree(b, boxsize=w)
    else:
        a, b = src, tgt
        ka, kb = cKDTree(a), cKDTree(b)
    m = ka.sparse_distance_matrix(kb, radius, output_type="coo_matrix")
    i, j = m.row.astype(np.int64), m.col.astype(np.int64)
    d = b[j] - a[i]
    if plan.periodic:
        d -= w * np.round(d / w)
    return i, j, d


def _segment_add(out, values, index):
    """``out[index[m]] += values[m]`` for stacked blocks, in place."""
    if len(index) == 0:
        return out
    rows, inv = np.unique(index, return_inverse=True)
    inv = np.asarray(inv).ravel()
    S = sparse.csr_matrix((np.ones(len(index)), (inv, np.arange(len(index)))),
                          shape=(len(rows), len(index)))
    flat = values.reshape(len(index), -1)
    out[rows] += (S @ flat).reshape((len(rows),) + values.shape[1:])
    return out


def _codes(keys, base):
    return (keys[:, 0] + base) * (4 * base) + (keys[:, 1] + base)


def _lookup(sorted_codes, order, codes):
    pos = np.searchsorted(sorted_codes, codes)
    pos = np.minimum(pos, len(sorted_codes) - 1)
    hit = sorted_codes[pos] == codes
    return np.where(hit, order[pos], -1)

# }}}


# {{{ the transform

def _normalize_sources(charges, strengths, dipoles, moments):
    """Stack charges and dipoles; ``m`` is None when there are no dipoles."""
    if charges is None:
        y, q = np.zeros((0, 2)), np.zeros(0)
    else:
        y = np.atleast_2d(np.asarray(charges, dtype=float))
        q = np.ones(len(y)) if strengths is None else np.asarray(strengths, dtype=float)
    if dipoles is None:
        return y, q, None
    yd = np.atleast_2d(np.asarray(dipoles, dtype=float))
    md = np.atleast_2d(np.asarray(moments, dtype=float))
    if md.shape != yd.shape:
        raise InvalidArgument("dipole moments must match dipole positions")
    m = np.concatenate([np.zeros((len(y), 2)), md])
    return np.concatenate([y, yd]), np.concatenate([q, np.zeros(len(yd))]), m


def q_total(density=None, strengths=None):
    """``int |f| + sum |q|`` for error normalization."""
    out = 0.0
    if density is not None:
        out += density.abs_integral()
    if strengths is not None:
        out += float(np.abs(strengths).sum())
    return out


def fgt_apply(plan, density=None, charges=None, strengths=None,
              target_tree=None, points=None, dipoles=None, moments=None):
    """Evaluate the Gauss transform.

    Parameters
    ----------
    plan : FgtPlan
    density : GridFunction, optional
        Continuous source on ``plan.tree``.
    charges, strengths : ndarray, optional
        Point sources and their weights.
    target_tree : QuadTree, optional
        Tree whose active leaf nodes receive values; defaults to the source
        tree when ``points`` is not given.  Must share the root box.
    points : ndarray, shape (m, 2), optional
    dipoles, moments : ndarray, shape (n, 2), optional
        Dipole positions and moment vectors; a dipole contributes
        ``moment . grad_y exp(-|x - y|^2/delta)``.

    Returns
    -------
    grid : GridFunction or None
    values : ndarray or None
        Values at ``points``.
    """
    tree = plan.tree
    if density is not None and density.tree is not tree and not (
            density.tree.same_boxes(tree)):
        raise InvalidArgument("density does not live on the plan's tree")
    if target_tree is None and points is None:
        target_tree = tree
    if target_tree is not None and (
            not np.allclose(target_tree.center, tree.center)
            or not np.isclose(target_tree.halfwidth, tree.halfwidth)):
        raise InvalidArgument("target tree must share the source root box")
    if plan.delta <= 0:
        raise InvalidArgument("delta must be positive")
    y, q, m = _normalize_sources(charges, strengths, dipoles, moments)
    if plan.periodic:
        y = tree.wrap(y)
    pts = None if points is None else np.atleast_2d(np.asarray(points, dtype=float))
    if pts is not None and plan.periodic:
        pts = tree.wrap(pts)
    ev = _Evaluator(plan, density, y, q, target_tree, pts, m)
    grid_vals, point_vals = ev.run()
    if plan.verbose:
        plan.stats.update(ev.stats)
    grid = None if target_tree is None else GridFunction(target_tree, grid_vals)
    return grid, point_vals


def periodic_fgt_apply(plan, density=None, charges=None, strengths=None,
                       target_tree=None, points=None, dipoles=None, moments=None):
    """Gauss transform of the lattice-periodized sources."""
    if not plan.periodic:
        raise InvalidArgument("plan is not periodic")
    return fgt_apply(plan, density, charges, strengths, target_tree, points,
                     dipoles, moments)


class _Evaluator:
    def __init__(self, plan, density, y, q, target_tree, pts, m=None):
        self.plan = plan
        self.tree = plan.tree
        self.density = density
        self.y, self.q, self.m = y, q, m
        self.ttree = target_tree
        self.pts = pts
        self.sd = plan.sd
        self.p = plan.p
        self.e = plan.expansion_level
        self.h_e = 2.0 * self.tree.halfwidth / 2 ** self.e
        self.R = plan.radius
        if not plan.periodic:
            # no pair is farther apart than the data extent
            parts = [self.tree.lower_left[None], (self.tree.lower_left + 2 * self.tree.halfwidth)[None]]
            parts += [a for a in (y, pts) if a is not None and len(a)]
            allp = np.concatenate(parts)
            ext = float(np.hypot(*(allp.max(0) - allp.min(0))))
            self.R = min(self.R, ext + 1e-12 * ext)
        # generous cut for 1D quadrature supports
        self.cut = self.sd * math.sqrt(math.log(1.0 / plan.eps) + 8.0)
        self.stats = {}
        w = 2.0 * self.tree.halfwidth
        self.direct_ok = (not plan.periodic) or (self.R + 2 * self.h_e < 0.5 * w)

    # {{{ bookkeeping

    def _vkeys(self, x):
        k = np.floor((x - self.tree.lower_left) / self.h_e).astype(np.int64)
        if self.plan.periodic:
            k %= 2 ** self.e
        else:
            k = np.clip(k, -(2 ** 40), 2 ** 40)
        return k

    def _vcenter(self, keys):
        return self.tree.lower_left + (keys + 0.5) * self.h_e

    def _leaf_vkeys(self, tree, ids):
        s = (tree.level[ids] - self.e).astype(np.int64)
        return np.stack([tree.ix[ids] >> s, tree.iy[ids] >> s], axis=-1)

    # }}}

    def run(self):
        tree, ttree = self.tree, self.ttree
        e = self.e
        nt = 0 if ttree is None else len(ttree.active)
        k_t = 0 if ttree is None else ttree.k
        grid = np.zeros((nt, k_t, k_t))
        npts = 0 if self.pts is None else len(self.pts)
        pvals = np.zeros(npts)

        # source classification
        if self.density is not None:
            s_act = tree.active
            s_coef = self.density.coeffs
            s_fine = tree.level[s_act] >= e
        else:
            s_act = np.zeros(0, int)
            s_coef = np.zeros((0, tree.k, tree.k))
            s_fine = np.zeros(0, bool)
        if ttree is not None:
            t_act = ttree.active
            t_fine = ttree.level[t_act] >= e
        else:
            t_act = np.zeros(0, int)
            t_fine = np.zeros(0, bool)

        # expansion-level boxes
        ykeys = self._vkeys(self.y) if len(self.y) else np.zeros((0, 2), int)
        pkeys = self._vkeys(self.pts) if npts else np.zeros((0, 2), int)
        sfkeys = self._leaf_vkeys(tree, s_act[s_fine])
        tfkeys = self._leaf_vkeys(ttree, t_act[t_fine]) if ttree is not None else np.zeros((0, 2), int)

        base = 2 ** (e + 1) + 2
        if len(self.y) or npts:
            allk = np.concatenate([ykeys, pkeys])
            base = max(base, int(np.abs(allk).max()) + 2)
        self.base = base

        # dense source boxes: carry fine leaves or many charges
        src_keys, yinv = (np.unique(np.concatenate([sfkeys, ykeys]), axis=0, return_inverse=True)
                          if len(sfkeys) + len(ykeys) else (np.zeros((0, 2), int), np.zeros(0, int)))
        yinv = np.asarray(yinv).ravel()
        y_box = yinv[len(sfkeys):]
        counts = np.bincount(y_box, minlength=len(src_keys))
        threshold = self.plan.dense_threshold
        if len(self.y) >= 3 * max(1, np.count_nonzero(counts)):
            # well-filled boxes: expansions everywhere beat any direct path
            threshold = 1
        self.threshold = threshold
        dense_src = counts >= threshold
        if len(sfkeys):
            dense_src[yinv[:len(sfkeys)]] = True
        if not self.direct_ok:
            dense_src[:] = True
        y_dense = dense_src[y_box] if len(self.y) else np.zeros(0, bool)

        tgt_keys, pinv = (np.unique(np.concatenate([tfkeys, pkeys]), axis=0, return_inverse=True)
                          if len(tfkeys) + len(pkeys) else (np.zeros((0, 2), int), np.zeros(0, int)))
        pinv = np.asarray(pinv).ravel()
        p_box = pinv[len(tfkeys):]
        tcounts = np.bincount(p_box, minlength=len(tgt_keys))
        dense_tgt = tcounts >= self.threshold
        if len(tfkeys):
            dense_tgt[pinv[:len(tfkeys)]] = True
        if not self.direct_ok:
            dense_tgt[:] = True
        p_dense = dense_tgt[p_box] if npts else np.zeros(0, bool)

        ds_idx = np.flatnonzero(dense_src)
        dt_idx = np.flatnonzero(dense_tgt)
        remap_s = -np.ones(len(src_keys), int)
        remap_s[ds_idx] = np.arange(len(ds_idx))
        remap_t = -np.ones(len(tgt_keys), int)
        remap_t[dt_idx] = np.arange(len(dt_idx))
        skeys = src_keys[ds_idx]
        tkeys = tgt_keys[dt_idx]

        # upward: hermite expansions of dense boxes
        A = np.zeros((len(skeys), self.p, self.p))
        if s_fine.any():
            fine_ids = s_act[s_fine]
            A += self._hermite_from_leaves(fine_ids, s_coef[s_fine],
                                           remap_s[yinv[:len(sfkeys)]], len(skeys), skeys)
        if y_dense.any():
            A += self._hermite_from_charges(self.y[y_dense], self.q[y_dense],
                                            remap_s[y_box[y_dense]], len(skeys), skeys,
                                            self._moments(y_dense))

        # hermite -> local between dense boxes
        L = self._hl(A, skeys, tkeys)

        # sparse charges -> dense target boxes (direct local formation)
        ysp = ~y_dense
        if ysp.any() and len(tkeys):
            L += self._local_from_charges(self.y[ysp], self.q[ysp], tkeys,
                                          self._moments(ysp))

        # evaluate locals
        if t_fine.any():
            slot = np.flatnonzero(t_fine)
            grid[slot] += self._eval_local_on_leaves(
                ttree, t_act[t_fine], L, remap_t[pinv[:len(tfkeys)]], tkeys)
        if p_dense.any():
            ip = np.flatnonzero(p_dense)
            pvals[ip] += self._eval_local_at_points(
                self.pts[ip], L, remap_t[p_box[ip]], tkeys)

        # dense source boxes -> sparse points and coarse target leaves
        if npts and (~p_dense).any() and len(skeys):
            ip = np.flatnonzero(~p_dense)
            pvals[ip] += self._hermite_at_points(A, skeys, self.pts[ip])
        t_coarse = ~t_fine
        if t_coarse.any() and len(skeys):
            grid[t_coarse] += self._hermite_on_coarse_leaves(A, skeys, ttree, t_act[t_coarse])

        # sparse charges -> sparse points and coarse-leaf nodes
        if ysp.any():
            ys, qs, ms = self.y[ysp], self.q[ysp], self._moments(ysp)
            if npts and (~p_dense).any():
                ip = np.flatnonzero(~p_dense)
                pvals[ip] += self._direct_points(ys, qs, self.pts[ip], ms)
            if t_coarse.any():
                slot = np.flatnonzero(t_coarse)
                nodes = ttree.leaf_nodes(t_act[t_coarse]).reshape(-1, 2)
                grid[slot] += self._direct_points(ys, qs, nodes, ms).reshape(
                    len(slot), k_t, k_t)

        # coarse source leaves
        s_coarse = ~s_fine
        if s_coarse.any():
            cids = s_act[s_coarse]
            ccoef = s_coef[s_coarse]
            if ttree is not None and len(t_act):
                grid += self._coarse_to_leaves(cids, ccoef, ttree, t_act)
            if npts:
                pvals += self._coarse_to_points(cids, ccoef, self.pts)

        self.stats.update(expansion_level=e, p=self.p, dense_sources=len(skeys),
                          dense_targets=len(tkeys), coarse_sources=int(s_coarse.sum()),
                          charges=len(self.y), points=npts)
        return grid, (pvals if self.pts is not None else None)

    # {{{ expansion-level pieces

    def _hermite_from_leaves(self, ids, coef, box, nbox, skeys):
        tree, p, sd = self.tree, self.p, self.sd
        out = np.zeros((nbox, p, p))
        cen = tree.box_center(ids)
        vc = self._vcenter(skeys[box])
        lev = tree.level[ids]
        for l in np.unique(lev):
            sel = np.flatnonzero(lev == l)
            hw = 0.5 * tree.side(l)
            m = _moment_matrix(tree.k, p, hw, sd, 0.0)
            a = m @ coef[sel] @ m.T
            w = (cen[sel] - vc[sel]) / sd
            if l > self.e:
                a = hh_matrix(w[:, 0], p) @ a @ np.swapaxes(hh_matrix(w[:, 1], p), -1, -2)
            _segment_add(out, a, box[sel])
        return out

    def _moments(self, mask):
        return None if self.m is None else self.m[mask]

    def _hermite_from_charges(self, y, q, box, nbox, skeys, m=None):
        p, sd = self.p, self.sd
        out = np.zeros((nbox, p, p))
        u = (y - self._vcenter(skeys[box])) / sd
        chunk = max(1, 2_000_000 // (p * p))
        for s in range(0, len(y), chunk):
            sl = slice(s, s + chunk)
            s1 = scaled_powers(u[sl, 0], p)
            s2 = scaled_powers(u[sl, 1], p)
            blk = q[sl, None, None] * s1[:, :, None] * s2[:, None, :]
            if m is not None:
                # d/dy of u^a/a! is u^(a-1)/(a-1)!/sd: shift by one order
                d1 = np.zeros_like(s1)
                d2 = np.zeros_like(s2)
                d1[:, 1:] = s1[:, :-1]
                d2[:, 1:] = s2[:, :-1]
                blk += (m[sl, 0, None, None] / sd) * d1[:, :, None] * s2[:, None, :]
                blk += (m[sl, 1, None, None] / sd) * s1[:, :, None] * d2[:, None, :]
            _segment_add(out, blk, box[sl])
        return out

    def _offsets(self):
        n = int(math.ceil(self.R / self.h_e)) + 1
        r = np.arange(-n, n + 1)
        gap = np.maximum(np.abs(r) - 1, 0) * self.h_e
        ok = gap[:, None] ** 2 + gap[None, :] ** 2 < self.R ** 2
        i, j = np.nonzero(ok)
        return r[i], r[j], r

    def _hl(self, A, skeys, tkeys):
        """Hermite -> local over a square of box offsets, one axis at a time.

        The translation factors as ``M_x(dx) A M_y(dy)^T``, so sources are
        first shifted along x into intermediate boxes ``(t_x, s_y)`` and then
        along y; offsets outside the cutoff disk only add negligible terms.
        """
        p = self.p
        L = np.zeros((len(tkeys), p, p))
        if len(skeys) == 0 or len(tkeys) == 0:
            return L
        _, _, r = self._offsets()
        n = len(r) // 2
        mats = hl_matrix(r * self.h_e / self.sd, p)
        periodic = self.plan.periodic
        mod = 2 ** self.e
        dense = self._hl_on_grid(A, skeys, tkeys, mats, n)
        if dense is not None:
            return dense

        def wrap(k):
            return k % mod if periodic else k

        def table(keys):
            c = _codes(keys, self.base)
            o = np.argsort(c)
            return c[o], o

        # intermediate boxes: reachable from a target along y and a source along x
        cand = np.concatenate([np.stack([tkeys[:, 0], wrap(tkeys[:, 1] + d)], -1) for d in r])
        cand = np.unique(cand, axis=0)
        near_src = np.concatenate([np.stack([wrap(skeys[:, 0] + d), skeys[:, 1]], -1) for d in r])
        ns_codes = np.unique(_codes(near_src, self.base))
        keep = np.isin(_codes(cand, self.base), ns_codes)
        mid = cand[keep]
        # work on transposed blocks so each offset is one GEMM without copies
        At = np.ascontiguousarray(A.transpose(0, 2, 1))
        Bt = np.zeros((len(mid), p, p))
        s_tab = table(skeys)
        for a in r:
            si = _lookup(*s_tab, _codes(np.stack([wrap(mid[:, 0] - a), mid[:, 1]], -1), self.base))
            ok = np.flatnonzero(si >= 0)
            if len(ok) == 0:
                continue
            Bt[ok] += (At[si[ok]].reshape(-1, p) @ mats[a + n].T).reshape(len(ok), p, p)
        B = np.ascontiguousarray(Bt.transpose(0, 2, 1))
        del At, Bt
        m_tab = table(mid)
        for b in r:
            mi = _lookup(*m_tab, _codes(np.stack([tkeys[:, 0], wrap(tkeys[:, 1] - b)], -1),
                                        self.base))
            ok = np.flatnonzero(mi >= 0)
            if len(ok) == 0:
                continue
            L[ok] += (B[mi[ok]].reshape(-1, p) @ mats[b + n].T).reshape(len(ok), p, p)
        self.stats["hl_offsets"] = len(r)
        self.stats["hl_intermediate"] = len(mid)
        return L

    def _hl_on_grid(self, A, skeys, tkeys, mats, n, max_bytes=4e8):
        """Grid-array variant of ``_hl`` for well-filled box sets.

        Shifts become array slices, so every offset is one GEMM on a view.
        Returns None when the bounding grid is too sparse or too large.
        """
        p = self.p
        keys = np.concatenate([skeys, tkeys])
        periodic = self.plan.periodic
        if periodic:
            lo, shape = np.zeros(2, int), np.array([2 ** self.e] * 2)
        else:
            lo = keys.min(axis=0)
            shape = keys.max(axis=0) - lo + 1
        area = int(shape[0] * shape[1])
        if area > 4 * (len(skeys) + len(tkeys)) or 3 * area * p * p * 8 > max_bytes:
            return None
        nx, ny = int(shape[0]), int(shape[1])
        mode = "wrap" if periodic else "constant"

        sk = skeys - lo
        G = np.zeros((nx, ny, p, p))
        G[sk[:, 0], sk[:, 1]] = A.transpose(0, 2, 1)
        G = np.pad(G, ((n, n), (0, 0), (0, 0), (0, 0)), mode=mode)
        Bt = np.zeros((nx, ny, p, p))
        flat = Bt.reshape(-1, p)
        for k in range(2 * n + 1):
            # target column ix draws from source column ix - (k - n)
            flat += G[2 * n - k:2 * n - k + nx].reshape(-1, p) @ mats[k].T
        del G
        H = np.ascontiguousarray(Bt.transpose(1, 0, 3, 2))
        del Bt, flat
        H = np.pad(H, ((n, n), (0, 0), (0, 0), (0, 0)), mode=mode)
        L2 = np.zeros((ny, nx, p, p))
        flat = L2.reshape(-1, p)
        for k in range(2 * n + 1):
            flat += H[2 * n - k:2 * n - k + ny].reshape(-1, p) @ mats[k].T
        tk = tkeys - lo
        self.stats["hl_offsets"] = 2 * n + 1
        self.stats["hl_grid"] = (nx, ny)
        return L2[tk[:, 1], tk[:, 0]]

    def _local_from_charges(self, y, q, tkeys, m=None):
        p, sd = self.p, self.sd
        tc = self._vcenter(tkeys)
        i, j, d = _point_pairs(self.plan, y, tc, self.R + 0.75 * self.h_e)
        out = np.zeros((len(tkeys), p, p))
        chunk = max(1, 1_000_000 // (p * p))
        sign = (-1.0) ** np.arange(p) / _factorials(p)
        for s in range(0, len(i), chunk):
            sl = slice(s, s + chunk)
            z = d[sl] / sd
            if m is None:
                h1 = hermite_functions(z[:, 0], p) * sign
                h2 = hermite_functions(z[:, 1], p) * sign
                blk = q[i[sl], None, None] * h1[:, :, None] * h2[:, None, :]
            else:
                g1 = hermite_functions(z[:, 0], p + 1)
                g2 = hermite_functions(z[:, 1], p + 1)
                h1, h2 = g1[:, :p] * sign, g2[:, :p] * sign
                e1, e2 = g1[:, 1:] * sign, g2[:, 1:] * sign
                mi = m[i[sl]] / sd
                blk = q[i[sl], None, None] * h1[:, :, None] * h2[:, None, :]
                blk += mi[:, 0, None, None] * e1[:, :, None] * h2[:, None, :]
                blk += mi[:, 1, None, None] * h1[:, :, None] * e2[:, None, :]
            _segment_add(out, blk, j[sl])
        return out

    def _eval_local_on_leaves(self, ttree, ids, L, box, tkeys):
        p, sd = self.p, self.sd
        k = ttree.k
        x = cheb_nodes(k)
        cen = ttree.box_center(ids)
        hw = 0.5 * ttree.side(ttree.level[ids])
        vc = self._vcenter(tkeys[box])
        z1 = powers((cen[:, 0, None] + hw[:, None] * x - vc[:, 0, None]) / sd, p)
        z2 = powers((cen[:, 1, None] + hw[:, None] * x - vc[:, 1, None]) / sd, p)
        return z1 @ L[box] @ np.swapaxes(z2, -1, -2)

    def _eval_local_at_points(self, pts, L, box, tkeys):
        z = (pts - self._vcenter(tkeys[box])) / self.sd
        if self.plan.periodic:
            w = 2.0 * self.tree.halfwidth / self.sd
            z -= w * np.round(z / w)
        return np.einsum("na,nab,nb->n", powers(z[:, 0], self.p), L[box],
                         powers(z[:, 1], self.p))

    def _hermite_at_points(self, A, skeys, pts):
        p, sd = self.p, self.sd
        i, j, d = _point_pairs(self.plan, self._vcenter(skeys), pts,
                               self.R + 0.75 * self.h_e)
        out = np.zeros(len(pts))
        chunk = 200_000
        for s in range(0, len(i), chunk):
            sl = slice(s, s + chunk)
            z = d[sl] / sd
            v = np.einsum("na,nab,nb->n", hermite_functions(z[:, 0], p), A[i[sl]],
                          hermite_functions(z[:, 1], p))
            out += np.bincount(j[sl], weights=v, minlength=len(pts))
        return out

    def _hermite_on_coarse_leaves(self, A, skeys, ttree, ids):
        p, sd, k = self.p, self.sd, ttree.k
        vc = self._vcenter(skeys)
        half = 0.5 * self.h_e
        q_i, leaf, im = _tree_pairs(ttree, vc - half, vc + half, self.R,
                                    _images(self.plan, self.R), max_level=self.e - 1)
        slot = -np.ones(ttree.n_boxes, int)
        slot[ids] = np.arange(len(ids))
        s = slot[leaf]
        ok = s >= 0
        q_i, leaf, im, s = q_i[ok], leaf[ok], im[ok], s[ok]
        out = np.zeros((len(ids), k, k))
        if len(s) == 0:
            return out
        shift = _images(self.plan, self.R)[im]
        x = cheb_nodes(k)
        cen = ttree.box_center(leaf)
        hw = 0.5 * ttree.side(ttree.level[leaf])
        src = vc[q_i] + shift
        chunk = 20000
        for a in range(0, len(s), chunk):
            sl = slice(a, a + chunk)
            z1 = (cen[sl, 0, None] + hw[sl, None] * x - src[sl, 0, None]) / sd
            z2 = (cen[sl, 1, None] + hw[sl, None] * x - src[sl, 1, None]) / sd
            h1 = hermite_functions(z1, p)
            h2 = hermite_functions(z2, p)
            v = h1 @ A[q_i[sl]] @ np.swapaxes(h2, -1, -2)
            _segment_add(out, v, s[sl])
        return out

    def _direct_points(self, y, q, pts, m=None):
        i, j, d = _point_pairs(self.plan, y, pts, self.R)
        g = np.exp(-np.einsum("ij,ij->i", d, d) / self.plan.delta)
        v = q[i] * g
        if m is not None:
            v += 2.0 / self.plan.delta * np.einsum("ij,ij->i", m[i], d) * g
        return np.bincount(j, weights=v, minlength=len(pts))

    # }}}

    # {{{ coarse leaves

    def _coarse_to_leaves(self, cids, ccoef, ttree, t_act):
        """Direct interactions of coarse source leaves with all target leaves."""
        tree, k_s, k_t = self.tree, self.tree.k, ttree.k
        lo, hi = _box_bounds(tree, cids)
        images = _images(self.plan, self.R)
        q_i, leaf, im = _tree_pairs(ttree, lo, hi, self.R, images)
        slot = -np.ones(ttree.n_boxes, int)
        slot[t_act] = np.arange(len(t_act))
        s = slot[leaf]
        ok = s >= 0
        q_i, leaf, im, s = q_i[ok], leaf[ok], im[ok], s[ok]
        out = np.zeros((len(t_act), k_t, k_t))
        if len(s) == 0:
            return out
        ls = tree.level[cids[q_i]]
        lt = ttree.level[leaf]
        lf = np.maximum(ls, lt)
        unit = tree.side(lf) / 2
        disp = ttree.box_center(leaf) - (tree.box_center(cids[q_i]) + images[im])
        dint = np.rint(disp / unit[:, None]).astype(np.int64)
        keys = np.concatenate([np.stack([ls, lt, dint[:, 0]], -1),
                               np.stack([ls, lt, dint[:, 1]], -1)])
        ukeys, inv = np.unique(keys, axis=0, return_inverse=True)
        inv = np.asarray(inv).ravel()
        tabs = self._tables(ukeys, k_s, k_t)
        i1, i2 = inv[:len(s)], inv[len(s):]
        chunk = 50000
        for a in range(0, len(s), chunk):
            sl = slice(a, a + chunk)
            v = tabs[i1[sl]] @ ccoef[q_i[sl]] @ np.swapaxes(tabs[i2[sl]], -1, -2)
            _segment_add(out, v, s[sl])
        self.stats["coarse_pairs"] = len(s)
        self.stats["tables"] = len(ukeys)
        return out

    def _tables(self, ukeys, k_s, k_t):
        """1D maps from source Chebyshev coefficients to target node values."""
        cache = self.plan._tables
        out = np.empty((len(ukeys), k_t, k_s))
        todo = []
        for n, key in enumerate(map(tuple, ukeys)):
            hit = cache.get(key + (k_s, k_t))
            if hit is None:
                todo.append(n)
            else:
                out[n] = hit
        if todo:
            todo = np.array(todo)
            kk = ukeys[todo]
            hs = self.tree.side(kk[:, 0])
            ht = self.tree.side(kk[:, 1])
            unit = self.tree.side(np.maximum(kk[:, 0], kk[:, 1])) / 2
            xt = kk[:, 2:3] * unit[:, None] + 0.5 * ht[:, None] * cheb_nodes(k_t)
            lo = -0.5 * hs[:, None]
            vals = gauss_cheb_integrals(lo, -lo, xt, self.sd, k_s, self.cut)
            out[todo] = vals
            for n, key in zip(todo, map(tuple, kk)):
                cache[key + (k_s, k_t)] = out[n]
        return out

    def _coarse_to_points(self, cids, ccoef, pts):
        tree, k = self.tree, self.tree.k
        images = _images(self.plan, self.R)
        q_i, leaf, im = _tree_pairs(tree, pts, pts, self.R, images, max_level=self.e - 1)
        slot = -np.ones(tree.n_boxes, int)
        slot[cids] = np.arange(len(cids))
        s = slot[leaf]
        ok = s >= 0
        q_i, leaf, im, s = q_i[ok], leaf[ok], im[ok], s[ok]
        out = np.zeros(len(pts))
        if len(s) == 0:
            return out
        lo, hi = _box_bounds(tree, leaf)
        x = pts[q_i] + images[im]
        chunk = 20000
        for a in range(0, len(s), chunk):
            sl = slice(a, a + chunk)
            g1 = gauss_cheb_integrals(lo[sl, 0], hi[sl, 0], x[sl, 0], self.sd, k, self.cut)
            g2 = gauss_cheb_integrals(lo[sl, 1], hi[sl, 1], x[sl, 1], self.sd, k, self.cut)
            v = np.einsum("ni,nij,nj->n", g1, ccoef[s[sl]], g2)
            out += np.bincount(q_i[sl], weights=v, minlength=len(pts))
        return out

    # }}}

# }}}


# {{{ free-space extension

def extension_width(width, T, eps):
    """Side needed to hold free-space fields of sources in a box of ``width``."""
    return width + 2.0 * math.sqrt(T * math.log(T / eps))


def extend_free_space_grid(tree, T, eps, separation=1.0):
    """Embed ``tree`` in a larger root box for free-space marching.

    The new root has side ``2**m`` times the old one, centered on the same
    point, with ``2**m * width >= width + 2 sqrt(T log(T/eps))``.  The
    original boxes reappear ``m`` levels deeper.  Exterior leaves are flagged
    empty and satisfy ``side <= distance / separation`` from the original
    box where they do not touch it.
    """
    if T <= 0 or not 0 < eps < 0.1:
        raise InvalidArgument("need T > 0 and 0 < eps < 0.1")
    width = 2.0 * tree.halfwidth
    need = extension_width(width, T, eps)
    m = max(1, int(math.ceil(math.log2(need / width))))
    new = QuadTree.root(tree.center, tree.halfwidth * 2 ** m, tree.k, False)
    # refine down to the level-(m+1) cells covering the original box
    lo_cell = 2 ** m - 1
    for lev in range(m + 1):
        ids = [b for b in new.leaves
               if new.level[b] == lev and _overlaps_center(new, b, lo_cell, m + 1)]
        new = new.refined(ids)
    src = tree
    if src.children[0, 0] < 0:
        src = src.refined([0])
    mapping = {}
    for c in src.children[0]:
        i, j = int(src.ix[c]), int(src.iy[c])
        mapping[int(c)] = new.lookup(m + 1, lo_cell + i, lo_cell + j)
    frontier = [int(c) for c in src.children[0]]
    empty_new = {}
    while frontier:
        inner = [b for b in frontier if src.children[b, 0] >= 0]
        for b in frontier:
            if src.children[b, 0] < 0:
                empty_new[mapping[b]] = bool(src.empty[b])
        if not inner:
            break
        new = new.refined([mapping[b] for b in inner])
        nxt = []
        for b in inner:
            for ci, c in enumerate(src.children[b]):
                mapping[int(c)] = int(new.children[mapping[b], ci])
                nxt.append(int(c))
        frontier = nxt
    inside = np.zeros(new.n_boxes, dtype=bool)
    for b in mapping.values():
        inside[b] = True
    empty = np.ones(new.n_boxes, dtype=bool)
    for b, flag in empty_new.items():
        empty[b] = flag
    new = new.with_empty(empty)
    olo, ohi = tree.lower_left, tree.lower_left + width
    while True:
        new = balance(new)
        leaves = new.leaves
        lo, hi = _box_bounds(new, leaves)
        gap = np.maximum(0.0, np.maximum(olo - hi, lo - ohi))
        dist = np.hypot(gap[:, 0], gap[:, 1])
        side = new.side(new.level[leaves])
        inside_box = np.all((lo >= olo - 1e-12 * width) & (hi <= ohi + 1e-12 * width), axis=1)
        bad = leaves[(~inside_box) & (dist > 0) & (side * separation > dist)]
        if len(bad) == 0:
            return new
        new = new.refined(bad)


def _overlaps_center(tree, b, lo_cell, level):
    l = int(tree.level[b])
    s = 1 << (level - l)
    i0, j0 = int(tree.ix[b]) * s, int(tree.iy[b]) * s
    return i0 < lo_cell + 2 and lo_cell < i0 + s and j0 < lo_cell + 2 and lo_cell < j0 + s

# }}}


def write_diagnostics(plan, path):
    """Append the plan's statistics to a CSV file."""
    row = dict(eps=plan.eps, delta=plan.delta, p=plan.p, r_c=plan.r_c,
               cutoff_level=plan.cutoff_level, **plan.stats)
    new = not _exists(path)
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(row))
        if new:
            w.writeheader()
        w.writerow(row)


def _exists(path):
    try:
        with open(path):
            return True
    except OSError:
        return False
