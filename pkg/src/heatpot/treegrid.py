"""Level-restricted quadtrees carrying piecewise tensor-Chebyshev data.

Boxes live in a flat pool indexed by integer id.  A box at level ``l`` is
identified by integer coordinates ``(ix, iy)`` in ``[0, 2**l)``, so adjacency
tests are exact integer arithmetic.  Children are numbered
``0: (2i, 2j), 1: (2i+1, 2j), 2: (2i, 2j+1), 3: (2i+1, 2j+1)``.

Leaf data use the first-kind Chebyshev nodes ``x_j = -cos((2j+1)pi/2k)``
(ascending) in each direction; sample arrays are indexed ``[i1, i2]`` with
``i1`` along ``x1``.
"""

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.fft
from numpy.polynomial import chebyshev as npcheb

from .errors import InvalidArgument, InvalidState, OutOfDomain, ResolutionFailure

MAX_DEPTH = 30
CHILD_OFFSETS = np.array([[0, 0], [1, 0], [0, 1], [1, 1]])
_NEIGHBOR_DIRS = [(di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1) if di or dj]


# {{{ chebyshev helpers

@lru_cache(maxsize=None)
def cheb_nodes(k):
    """Ascending first-kind Chebyshev nodes on [-1, 1]."""
    x = -np.cos((2 * np.arange(k) + 1) * np.pi / (2 * k))
    x.setflags(write=False)
    return x


@lru_cache(maxsize=None)
def child_grid(k):
    """The 2k points per dimension formed by the nodes of two children."""
    x = cheb_nodes(k)
    g = np.concatenate([-0.5 + 0.5 * x, 0.5 + 0.5 * x])
    g.setflags(write=False)
    return g


@lru_cache(maxsize=None)
def interp_matrix(k, kind="child"):
    """Matrix mapping k nodal values to values at another 1D point set.

    ``kind="child"`` targets :func:`child_grid`; ``kind="quarter0"`` and
    ``kind="quarter1"`` target the nodes of the lower and upper child.
    """
    if kind == "child":
        pts = child_grid(k)
    elif kind == "quarter0":
        pts = -0.5 + 0.5 * cheb_nodes(k)
    elif kind == "quarter1":
        pts = 0.5 + 0.5 * cheb_nodes(k)
    else:
        raise InvalidArgument(kind)
    m = npcheb.chebvander(pts, k - 1) @ _fit_matrix(k)
    m.setflags(write=False)
    return m


@lru_cache(maxsize=None)
def _fit_matrix(k):
    return np.linalg.inv(npcheb.chebvander(cheb_nodes(k), k - 1))


@lru_cache(maxsize=None)
def cheb_integrals(k):
    """Integrals of T_0..T_{k-1} over [-1, 1]."""
    n = np.arange(k)
    w = np.zeros(k)
    even = n % 2 == 0
    w[even] = 2.0 / (1.0 - n[even] ** 2)
    return w


def cheb_coeffs(samples):
    """Tensor Chebyshev coefficients from nodal samples.

    Parameters
    ----------
    samples : ndarray, shape (..., k, k)
        Values on the ascending tensor Chebyshev grid.

    Returns
    -------
    ndarray, shape (..., k, k)
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim < 2 or samples.shape[-1] != samples.shape[-2]:
        raise InvalidArgument(f"expected (..., k, k) samples, got {samples.shape}")
    k = samples.shape[-1]
    c = scipy.fft.dct(samples[..., ::-1, ::-1], type=2, axis=-1)
    c = scipy.fft.dct(c, type=2, axis=-2) / (k * k)
    c[..., 0, :] *= 0.5
    c[..., :, 0] *= 0.5
    return c


def cheb_values(coeffs):
    """Inverse of :func:`cheb_coeffs`."""
    coeffs = np.asarray(coeffs, dtype=float)
    k = coeffs.shape[-1]
    v = npcheb.chebvander(cheb_nodes(k), k - 1)
    return v @ coeffs @ v.T


@dataclass
class ChebPatch:
    """Tensor Chebyshev series on one leaf."""
    coeffs: np.ndarray
    box_id: int = -1
    center: np.ndarray = field(default_factory=lambda: np.zeros(2))
    halfwidth: float = 1.0

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.ndim != 2 or self.coeffs.shape[0] != self.coeffs.shape[1]:
            raise InvalidArgument("patch coefficients must be k x k")
        self.center = np.asarray(self.center, dtype=float)

    @property
    def k(self):
        return self.coeffs.shape[0]


def cheb_fit(samples, box_id=-1, center=(0.0, 0.0), halfwidth=1.0):
    """Fit a :class:`ChebPatch` to k x k nodal samples."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2 or samples.shape[0] != samples.shape[1]:
        raise InvalidArgument(f"expected k x k samples, got {samples.shape}")
    return ChebPatch(cheb_coeffs(samples), box_id, np.asarray(center, float), float(halfwidth))


def cheb_eval(patch, x):
    """Evaluate a patch at a point (or points) inside its box.

    Raises
    ------
    OutOfDomain
        If a point lies outside the closed box.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    xi = (x - patch.center) / patch.halfwidth
    if np.any(np.abs(xi) > 1 + 1e-12):
        raise OutOfDomain("point outside leaf box")
    xi = np.clip(xi, -1.0, 1.0)
    k = patch.k
    tx = npcheb.chebvander(xi[:, 0], k - 1)
    ty = npcheb.chebvander(xi[:, 1], k - 1)
    val = np.einsum("ni,ij,nj->n", tx, patch.coeffs, ty)
    return val[0] if val.shape[0] == 1 else val

# }}}


# {{{ quadtree

class QuadTree:
    """Quadtree over the square ``center +- halfwidth``.

    Parameters
    ----------
    center, halfwidth
        Root box geometry.
    k : int
        Chebyshev points per dimension on each leaf.
    level, ix, iy, parent : ndarray of int
    children : ndarray of int, shape (n, 4)
        ``-1`` for leaves.
    empty : ndarray of bool, optional
        Leaves flagged as carrying no data.
    periodic : bool
        Whether the root box is the fundamental cell of a periodic lattice.
    """

    def __init__(self, center, halfwidth, k, level, ix, iy, parent, children,
                 empty=None, periodic=False):
        if not 2 <= k <= 32:
            raise InvalidArgument(f"leaf order k={k} out of range")
        self.center = np.asarray(center, dtype=float).reshape(2)
        self.halfwidth = float(halfwidth)
        self.k = int(k)
        self.level = np.asarray(level, dtype=np.int64)
        self.ix = np.asarray(ix, dtype=np.int64)
        self.iy = np.asarray(iy, dtype=np.int64)
        self.parent = np.asarray(parent, dtype=np.int64)
        self.children = np.asarray(children, dtype=np.int64).reshape(-1, 4)
        n = len(self.level)
        self.empty = (np.zeros(n, dtype=bool) if empty is None
                      else np.asarray(empty, dtype=bool).copy())
        self.periodic = bool(periodic)
        for a in (self.level, self.ix, self.iy, self.parent, self.children, self.empty):
            a.setflags(write=False)
        self._keys = None

    @classmethod
    def root(cls, center=(0.0, 0.0), halfwidth=0.5, k=8, periodic=False):
        return cls(center, halfwidth, k, [0], [0], [0], [-1], [[-1] * 4],
                   periodic=periodic)

    # {{{ basic queries

    @property
    def n_boxes(self):
        return len(self.level)

    @property
    def is_leaf(self):
        return self.children[:, 0] < 0

    @property
    def leaves(self):
        return np.flatnonzero(self.is_leaf)

    @property
    def active(self):
        """Non-empty leaves, in id order."""
        return np.flatnonzero(self.is_leaf & ~self.empty)

    @property
    def level_count(self):
        return int(self.level.max()) + 1

    @property
    def lower_left(self):
        return self.center - self.halfwidth

    def side(self, level):
        return 2.0 * self.halfwidth / 2.0 ** np.asarray(level)

    def box_center(self, ids=None):
        ids = np.arange(self.n_boxes) if ids is None else np.asarray(ids)
        h = self.side(self.level[ids])
        return self.lower_left + np.stack(
            [(self.ix[ids] + 0.5) * h, (self.iy[ids] + 0.5) * h], axis=-1)

    def keys(self):
        if self._keys is None:
            self._keys = {(int(l), int(i), int(j)): b for b, (l, i, j)
                          in enumerate(zip(self.level, self.ix, self.iy))}
        return self._keys

    def lookup(self, level, i, j):
        """Box id at ``(level, i, j)`` or -1."""
        if self.periodic:
            m = 1 << level
            i %= m
            j %= m
        return self.keys().get((level, i, j), -1)

    def covering(self, level, i, j):
        """Smallest existing box containing the cell ``(level, i, j)``, or -1."""
        if self.periodic:
            m = 1 << level
            i %= m
            j %= m
        elif not (0 <= i < (1 << level) and 0 <= j < (1 << level)):
            return -1
        keys = self.keys()
        while level >= 0:
            b = keys.get((level, i, j))
            if b is not None:
                return b
            level -= 1
            i >>= 1
            j >>= 1
        return -1

    def touching(self, a, b):
        """Whether boxes ``a`` and ``b`` share at least a boundary point."""
        la, lb = int(self.level[a]), int(self.level[b])
        lf = max(la, lb)
        sa, sb = 1 << (lf - la), 1 << (lf - lb)
        ax0, ay0 = int(self.ix[a]) * sa, int(self.iy[a]) * sa
        bx0, by0 = int(self.ix[b]) * sb, int(self.iy[b]) * sb
        return (ax0 <= bx0 + sb and bx0 <= ax0 + sa
                and ay0 <= by0 + sb and by0 <= ay0 + sa)

    def ancestors(self, b):
        """Ancestors of ``b`` from parent to root."""
        out = []
        p = int(self.parent[b])
        while p >= 0:
            out.append(p)
            p = int(self.parent[p])
        return out

    def subtree_leaves(self, b):
        stack, out = [int(b)], []
        while stack:
            c = stack.pop()
            if self.children[c, 0] < 0:
                out.append(c)
            else:
                stack.extend(int(x) for x in self.children[c])
        return out

    def same_boxes(self, other):
        return set(self.keys()) == set(other.keys())

    # }}}

    # {{{ structural edits

    def refined(self, ids):
        """New tree with the given leaves subdivided (ids are preserved)."""
        ids = np.unique(np.asarray(ids, dtype=np.int64))
        if len(ids) == 0:
            return self
        if np.any(~self.is_leaf[ids]):
            raise InvalidArgument("can only refine leaves")
        if np.any(self.level[ids] >= MAX_DEPTH):
            raise ResolutionFailure("maximum depth exceeded",
                                    [tuple(c) for c in self.box_center(ids)])
        n = self.n_boxes
        m = len(ids)
        new_ids = n + np.arange(4 * m).reshape(m, 4)
        children = self.children.copy()
        children[ids] = new_ids
        lev = np.repeat(self.level[ids] + 1, 4)
        cix = (2 * self.ix[ids][:, None] + CHILD_OFFSETS[None, :, 0]).ravel()
        ciy = (2 * self.iy[ids][:, None] + CHILD_OFFSETS[None, :, 1]).ravel()
        par = np.repeat(ids, 4)
        empty = self.empty.copy()
        empty[ids] = False
        return QuadTree(
            self.center, self.halfwidth, self.k,
            np.concatenate([self.level, lev]),
            np.concatenate([self.ix, cix]),
            np.concatenate([self.iy, ciy]),
            np.concatenate([self.parent, par]),
            np.concatenate([children, -np.ones((4 * m, 4), dtype=np.int64)]),
            np.concatenate([empty, np.repeat(self.empty[ids], 4)]),
            self.periodic)

    def coarsened(self, parent_ids):
        """New tree with the children of each given box removed.

        Returns
        -------
        tree : QuadTree
        old_to_new : ndarray
            Id map, -1 for removed boxes.
        """
        parent_ids = np.unique(np.asarray(parent_ids, dtype=np.int64))
        if len(parent_ids) == 0:
            return self, np.arange(self.n_boxes)
        ch = self.children[parent_ids]
        if np.any(ch < 0) or np.any(~self.is_leaf[ch.ravel()]):
            raise InvalidArgument("coarsening requires four leaf children")
        keep = np.ones(self.n_boxes, dtype=bool)
        keep[ch.ravel()] = False
        old_to_new = -np.ones(self.n_boxes, dtype=np.int64)
        old_to_new[keep] = np.arange(keep.sum())
        children = self.children.copy()
        children[parent_ids] = -1
        children = children[keep]
        children = np.where(children >= 0, old_to_new[np.maximum(children, 0)], -1)
        parent = self.parent[keep]
        parent = np.where(parent >= 0, old_to_new[np.maximum(parent, 0)], -1)
        empty = self.empty.copy()
        empty[parent_ids] = np.all(self.empty[ch], axis=1)
        tree = QuadTree(self.center, self.halfwidth, self.k, self.level[keep],
                        self.ix[keep], self.iy[keep], parent, children,
                        empty[keep], self.periodic)
        return tree, old_to_new

    def with_empty(self, empty):
        return QuadTree(self.center, self.halfwidth, self.k, self.level, self.ix,
                        self.iy, self.parent, self.children, empty, self.periodic)

    def with_k(self, k):
        return QuadTree(self.center, self.halfwidth, k, self.level, self.ix,
                        self.iy, self.parent, self.children, self.empty, self.periodic)

    # }}}

    # {{{ geometry of leaf data

    def leaf_nodes(self, ids=None):
        """Chebyshev node coordinates, shape (n, k, k, 2)."""
        ids = self.active if ids is None else np.asarray(ids)
        c = self.box_center(ids)
        hw = 0.5 * self.side(self.level[ids])
        x = cheb_nodes(self.k)
        px = c[:, 0, None] + hw[:, None] * x[None, :]
        py = c[:, 1, None] + hw[:, None] * x[None, :]
        return np.stack(np.broadcast_arrays(px[:, :, None], py[:, None, :]), axis=-1)

    def wrap(self, points):
        """Map points into the root box (periodic trees only)."""
        p = np.asarray(points, dtype=float)
        if not self.periodic:
            return p
        w = 2.0 * self.halfwidth
        return self.lower_left + np.mod(p - self.lower_left, w)

    def locate(self, points):
        """Leaf ids containing each point (ties go to the upper child).

        Raises
        ------
        OutOfDomain
            For points outside the root box of a non-periodic tree.
        """
        p = self.wrap(np.atleast_2d(np.asarray(points, dtype=float)))
        rel = (p - self.lower_left) / (2.0 * self.halfwidth)
        tol = 1e-12
        if np.any(rel < -tol) or np.any(rel > 1 + tol):
            raise OutOfDomain("point outside root box")
        rel = np.clip(rel, 0.0, np.nextafter(1.0, 0.0))
        box = np.zeros(len(p), dtype=np.int64)
        while True:
            inner = self.children[box, 0] >= 0
            if not inner.any():
                return box
            b = box[inner]
            lev = self.level[b] + 1
            scale = 2.0 ** lev
            ci = np.floor(rel[inner, 0] * scale).astype(np.int64) - 2 * self.ix[b]
            cj = np.floor(rel[inner, 1] * scale).astype(np.int64) - 2 * self.iy[b]
            ci = np.clip(ci, 0, 1)
            cj = np.clip(cj, 0, 1)
            box[inner] = self.children[b, ci + 2 * cj]

    # }}}


def is_balanced(tree):
    """Whether no leaf touches a non-leaf box more than one level finer."""
    return not _balance_violations(tree)


def _balance_violations(tree):
    # a tree is level-restricted iff no leaf of level < m touches a
    # non-leaf box of level m
    out = set()
    for b in np.flatnonzero(~tree.is_leaf):
        m = int(tree.level[b])
        if m == 0:
            continue
        i, j = int(tree.ix[b]), int(tree.iy[b])
        for di, dj in _NEIGHBOR_DIRS:
            c = tree.covering(m, i + di, j + dj)
            if c >= 0 and tree.level[c] < m:
                out.add(c)
    return out


def balance(tree):
    """Refine until adjacent leaves differ by at most one level."""
    while True:
        bad = _balance_violations(tree)
        if not bad:
            return tree
        tree = tree.refined(sorted(bad))

# }}}


# {{{ interaction lists

@dataclass
class ListSet:
    """Per-box neighbor and interaction lists (dicts of box id -> list)."""
    colleagues: dict
    coarse_neighbors: dict
    fine_neighbors: dict
    s_list: dict
    interaction_list: dict
    coarse_interaction_list: dict

    def near(self, b):
        return ([c for c in self.colleagues[b]]
                + self.coarse_neighbors[b] + self.fine_neighbors[b])


def compute_lists(tree):
    """Colleague, neighbor, s-, interaction and coarse interaction lists.

    Adjacency is computed in the root cell only (no periodic wrap); the
    periodic FGT performs its own image search.

    Raises
    ------
    InvalidState
        If the tree is not level-restricted.
    """
    if not is_balanced(tree):
        raise InvalidState("compute_lists requires a balanced tree")
    flat = QuadTree(tree.center, tree.halfwidth, tree.k, tree.level, tree.ix,
                    tree.iy, tree.parent, tree.children, tree.empty, False)
    is_leaf = flat.is_leaf
    n = flat.n_boxes
    coll = {}
    for b in range(n):
        l, i, j = int(flat.level[b]), int(flat.ix[b]), int(flat.iy[b])
        cs = []
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                c = flat.lookup(l, i + di, j + dj)
                if c >= 0:
                    cs.append(c)
        coll[b] = cs

    coarse, fine, slist, ilist, iclist = {}, {}, {}, {}, {}
    for b in range(n):
        p = int(flat.parent[b])
        coarse[b], fine[b], slist[b], ilist[b], iclist[b] = [], [], [], [], []
        if p >= 0:
            for pc in coll[p]:
                if is_leaf[pc]:
                    if pc == p:
                        continue
                    if flat.touching(pc, b):
                        coarse[b].append(pc)
                    else:
                        iclist[b].append(pc)
                else:
                    for c in flat.children[pc]:
                        c = int(c)
                        if not flat.touching(c, b):
                            ilist[b].append(c)
        if is_leaf[b]:
            for cb in coll[b]:
                if cb == b or is_leaf[cb]:
                    continue
                for c in flat.children[cb]:
                    c = int(c)
                    if flat.touching(c, b):
                        fine[b].append(c)
                    else:
                        slist[b].append(c)
    return ListSet(coll, coarse, fine, slist, ilist, iclist)

# }}}


# {{{ grid functions

class GridFunction:
    """Scalar field sampled on the Chebyshev grids of a tree's active leaves.

    Parameters
    ----------
    tree : QuadTree
    values : ndarray, shape (n_active, k, k)
        Nodal samples aligned with ``tree.active``.
    """

    def __init__(self, tree, values):
        values = np.asarray(values, dtype=float)
        k = tree.k
        if values.shape != (len(tree.active), k, k):
            raise InvalidArgument(
                f"values shape {values.shape} does not match tree "
                f"({len(tree.active)}, {k}, {k})")
        self.tree = tree
        self.values = values
        self.values.setflags(write=False)
        self._coeffs = None

    @classmethod
    def from_function(cls, tree, f):
        nodes = tree.leaf_nodes()
        return cls(tree, f(nodes[..., 0], nodes[..., 1]))

    @classmethod
    def zeros(cls, tree):
        return cls(tree, np.zeros((len(tree.active), tree.k, tree.k)))

    @property
    def coeffs(self):
        if self._coeffs is None:
            self._coeffs = cheb_coeffs(self.values)
            self._coeffs.setflags(write=False)
        return self._coeffs

    @property
    def patches(self):
        act = self.tree.active
        c = self.tree.box_center(act)
        hw = 0.5 * self.tree.side(self.tree.level[act])
        return [ChebPatch(self.coeffs[n], int(b), c[n], hw[n])
                for n, b in enumerate(act)]

    def nodes(self):
        return self.tree.leaf_nodes()

    def __call__(self, points):
        """Evaluate at arbitrary points (zero in empty leaves)."""
        points = np.asarray(points, dtype=float)
        shape = points.shape[:-1]
        p = self.tree.wrap(points.reshape(-1, 2))
        leaf = self.tree.locate(p)
        slot = -np.ones(self.tree.n_boxes, dtype=np.int64)
        slot[self.tree.active] = np.arange(len(self.tree.active))
        s = slot[leaf]
        out = np.zeros(len(p))
        ok = s >= 0
        if ok.any():
            b = leaf[ok]
            c = self.tree.box_center(b)
            hw = 0.5 * self.tree.side(self.tree.level[b])
            xi = np.clip((p[ok] - c) / hw[:, None], -1.0, 1.0)
            k = self.tree.k
            tx = npcheb.chebvander(xi[:, 0], k - 1)
            ty = npcheb.chebvander(xi[:, 1], k - 1)
            out[ok] = np.einsum("ni,nij,nj->n", tx, self.coeffs[s[ok]], ty)
        return out.reshape(shape)

    def integral(self):
        w = cheb_integrals(self.tree.k)
        hw = 0.5 * self.tree.side(self.tree.level[self.tree.active])
        return float(np.sum(hw ** 2 * np.einsum("i,nij,j->n", w, self.coeffs, w)))

    def abs_integral(self):
        """Approximate integral of |f| from the nodal values."""
        return GridFunction(self.tree, np.abs(self.values)).integral()

    def max_abs(self):
        return float(np.abs(self.values).max()) if self.values.size else 0.0

    def l2_norm(self):
        return float(np.sqrt(max(GridFunction(self.tree, self.values ** 2).integral(), 0.0)))

    def map(self, func):
        nodes = self.tree.leaf_nodes()
        return GridFunction(self.tree, func(self.values, nodes[..., 0], nodes[..., 1]))

    def _check(self, other):
        if other.tree is not self.tree and not (
                other.tree.same_boxes(self.tree)
                and np.array_equal(other.tree.active, self.tree.active)):
            raise InvalidArgument("grid functions live on different trees")

    def __add__(self, other):
        if isinstance(other, GridFunction):
            self._check(other)
            return GridFunction(self.tree, self.values + other.values)
        return GridFunction(self.tree, self.values + other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, GridFunction):
            self._check(other)
            return GridFunction(self.tree, self.values - other.values)
        return GridFunction(self.tree, self.values - other)

    def __mul__(self, a):
        if isinstance(a, GridFunction):
            self._check(a)
            return GridFunction(self.tree, self.values * a.values)
        return GridFunction(self.tree, self.values * a)

    __rmul__ = __mul__

    def __neg__(self):
        return GridFunction(self.tree, -self.values)


def transfer(gf, tree, resampler=None):
    """Move ``gf`` onto ``tree``, copying leaves present in both.

    Leaves absent from ``gf.tree`` are filled by ``resampler(x1, x2)`` when
    given, else by interpolating ``gf``.
    """
    old_slot = {}
    okeys = gf.tree.keys()
    for n, b in enumerate(gf.tree.active):
        old_slot[b] = n
    act = tree.active
    vals = np.empty((len(act), tree.k, tree.k))
    missing = []
    for n, b in enumerate(act):
        key = (int(tree.level[b]), int(tree.ix[b]), int(tree.iy[b]))
        ob = okeys.get(key, -1)
        if ob >= 0 and ob in old_slot and tree.k == gf.tree.k:
            vals[n] = gf.values[old_slot[ob]]
        else:
            missing.append(n)
    if missing:
        missing = np.array(missing)
        nodes = tree.leaf_nodes(act[missing])
        if resampler is None:
            vals[missing] = gf(nodes)
        else:
            vals[missing] = resampler(nodes[..., 0], nodes[..., 1])
    return GridFunction(tree, vals)


def refine_leaf(gf, leaf_id, resampler=None):
    """Subdivide one leaf; child data by interpolation or ``resampler``."""
    tree = gf.tree
    if not (0 <= leaf_id < tree.n_boxes) or not tree.is_leaf[leaf_id]:
        raise InvalidArgument(f"box {leaf_id} is not a leaf")
    return transfer(gf, tree.refined([leaf_id]), resampler)


def coarsen_siblings(gf, parent_id, resampler=None):
    """Remove the four leaf children of ``parent_id``."""
    tree = gf.tree
    ch = tree.children[parent_id]
    if ch[0] < 0 or not np.all(tree.is_leaf[ch]):
        raise InvalidArgument(f"children of box {parent_id} are not all leaves")
    new, _ = tree.coarsened([parent_id])
    return transfer(gf, new, resampler)

# }}}


# {{{ adaptive construction

def check_points(tree, ids):
    """The 2k x 2k child-grid points of each box, shape (n, 2k, 2k, 2)."""
    c = tree.box_center(ids)
    hw = 0.5 * tree.side(tree.level[ids])
    g = child_grid(tree.k)
    px = c[:, 0, None] + hw[:, None] * g[None, :]
    py = c[:, 1, None] + hw[:, None] * g[None, :]
    return np.stack(np.broadcast_arrays(px[:, :, None], py[:, None, :]), axis=-1)


def interp_to_check(values):
    """Interpolate (n, k, k) nodal values to the 2k x 2k child grid."""
    m = interp_matrix(values.shape[-1])
    return m @ values @ m.T


def resolution_error(values, check_values):
    """Discrete L2 (root-mean-square) error on the 2k x 2k child grid."""
    d = interp_to_check(values) - check_values
    return np.sqrt(np.mean(d ** 2, axis=(-2, -1)))


def tail_error(gf):
    """Per-leaf size of the trailing Chebyshev coefficients (``i + j >= k - 1``).

    A cheap stand-in for :func:`resolution_error` when the field can only be
    sampled at leaf nodes.
    """
    k = gf.tree.k
    i, j = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    tail = (i + j) >= k - 1
    return np.sqrt(np.sum(gf.coeffs[:, tail] ** 2, axis=-1))


def coarsen_resolved(fields, eps):
    """Merge sibling leaves wherever the parent interpolant reproduces every field.

    Parameters
    ----------
    fields : list of GridFunction
        Fields on a common tree.
    eps : float
        Tolerance of the child-grid RMS test, applied to each field.

    Returns
    -------
    list of GridFunction
        The fields on the coarsened, balanced tree.
    """
    tree = fields[0].tree
    act = np.zeros(tree.n_boxes, dtype=bool)
    act[tree.active] = True
    ch = tree.children
    cand = np.flatnonzero((ch[:, 0] >= 0) & np.all(act[np.maximum(ch, 0)], axis=1)
                          & np.all(ch >= 0, axis=1))
    if len(cand) == 0:
        return list(fields)
    chk = check_points(tree, cand)
    nodes = tree.leaf_nodes(cand)
    ok = np.ones(len(cand), dtype=bool)
    for gf in fields:
        fine = gf(chk)
        coarse = gf(nodes)
        ok &= resolution_error(coarse, fine) <= eps
    if not ok.any():
        return list(fields)
    new, _ = tree.coarsened(cand[ok])
    new = balance(new)
    return [transfer(gf, new) for gf in fields]


def build_resolving_tree(f, eps, k=8, center=(0.0, 0.0), halfwidth=0.5,
                         max_depth=MAX_DEPTH, periodic=False, tree=None,
                         min_level=0):
    """Adaptively refine until ``f`` is resolved to ``eps`` on every leaf.

    Parameters
    ----------
    f : callable
        ``f(x1, x2)`` evaluated elementwise on arrays.
    eps : float
        Tolerance on the child-grid RMS error of each leaf interpolant.
    tree : QuadTree, optional
        Starting tree; its leaves are tested and refined further.
    min_level : int
        Leaves coarser than this are refined unconditionally.

    Returns
    -------
    tree : QuadTree
        Balanced resolving tree.
    gf : GridFunction
        Samples of ``f`` on ``tree``.

    Raises
    ------
    ResolutionFailure
        When a leaf at ``max_depth`` still fails the test.
    """
    if eps <= 0:
        raise InvalidArgument("eps must be positive")
    if tree is None:
        tree = QuadTree.root(center, halfwidth, k, periodic)
    todo = tree.leaves
    while len(todo):
        nodes = tree.leaf_nodes(todo)
        vals = f(nodes[..., 0], nodes[..., 1])
        chk = check_points(tree, todo)
        err = resolution_error(vals, f(chk[..., 0], chk[..., 1]))
        bad = todo[(err > eps) | (tree.level[todo] < min_level)]
        if len(bad) == 0:
            break
        deep = bad[tree.level[bad] >= max_depth]
        if len(deep):
            raise ResolutionFailure(
                f"{len(deep)} leaves unresolved at depth {max_depth}",
                [tuple(c) for c in tree.box_center(deep)])
        n0 = tree.n_boxes
        tree = tree.refined(bad)
        todo = np.arange(n0, tree.n_boxes)
    tree = balance(tree)
    return tree, GridFunction.from_function(tree, f)

# }}}


# {{{ serialization

def dump_grid(gf, stream):
    """Write a tree and its leaf coefficients as line-oriented text.

    Format::

        heatpot-quadtree 1
        root_center <x1> <x2>
        root_halfwidth <h>
        k <k>
        periodic <0|1>
        boxes <n>
        <id> <level> <c1> <c2> <parent> <ch0> <ch1> <ch2> <ch3> <leaf> <empty>
        ...
        patches <m>
        <box id> <k*k coefficients, row-major>
        ...
    """
    tree = gf.tree if isinstance(gf, GridFunction) else gf
    w = stream.write
    g = "{:.17g}".format
    w("heatpot-quadtree 1\n")
    w(f"root_center {g(tree.center[0])} {g(tree.center[1])}\n")
    w(f"root_halfwidth {g(tree.halfwidth)}\n")
    w(f"k {tree.k}\n")
    w(f"periodic {int(tree.periodic)}\n")
    w(f"boxes {tree.n_boxes}\n")
    cen = tree.box_center()
    for b in range(tree.n_boxes):
        ch = " ".join(str(int(c)) for c in tree.children[b])
        w(f"{b} {tree.level[b]} {g(cen[b, 0])} {g(cen[b, 1])} {tree.parent[b]} "
          f"{ch} {int(tree.is_leaf[b])} {int(tree.empty[b])}\n")
    if isinstance(gf, GridFunction):
        w(f"patches {len(tree.active)}\n")
        for n, b in enumerate(tree.active):
            w(f"{b} " + " ".join(g(v) for v in gf.coeffs[n].ravel()) + "\n")
    else:
        w("patches 0\n")


def load_grid(stream):
    """Inverse of :func:`dump_grid`; returns a GridFunction (or tree if no patches)."""
    lines = iter(stream.read().splitlines())

    def field(name):
        parts = next(lines).split()
        if parts[0] != name:
            raise InvalidArgument(f"expected '{name}', got '{parts[0]}'")
        return parts[1:]

    head = next(lines).split()
    if head[:1] != ["heatpot-quadtree"]:
        raise InvalidArgument("not a heatpot quadtree file")
    center = np.array([float(v) for v in field("root_center")])
    hw = float(field("root_halfwidth")[0])
    k = int(field("k")[0])
    periodic = bool(int(field("periodic")[0]))
    n = int(field("boxes")[0])
    level, ix, iy, parent, children, empty = [], [], [], [], [], []
    lower = center - hw
    for _ in range(n):
        p = next(lines).split()
        lev = int(p[1])
        h = 2 * hw / 2 ** lev
        level.append(lev)
        ix.append(int(round((float(p[2]) - lower[0]) / h - 0.5)))
        iy.append(int(round((float(p[3]) - lower[1]) / h - 0.5)))
        parent.append(int(p[4]))
        children.append([int(v) for v in p[5:9]])
        empty.append(bool(int(p[10])))
    tree = QuadTree(center, hw, k, level, ix, iy, parent, children, empty, periodic)
    m = int(field("patches")[0])
    if m == 0 and len(tree.active):
        return tree
    coeffs = np.empty((m, k, k))
    slot = {int(b): s for s, b in enumerate(tree.active)}
    for _ in range(m):
        p = next(lines).split()
        coeffs[slot[int(p[0])]] = np.array([float(v) for v in p[1:]]).reshape(k, k)
    v = npcheb.chebvander(cheb_nodes(k), k - 1)
    return GridFunction(tree, v @ coeffs @ v.T)

# }}}
